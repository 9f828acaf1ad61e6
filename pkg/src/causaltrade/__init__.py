"""Causal-discovery driven long-short trading: VarLiNGAM, walk-forward backtests, benchmarks."""
__version__ = "0.1.0"
