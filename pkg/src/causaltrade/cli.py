"""Command-line entry point: discover, backtest, synth-bench, profile, fetch."""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from ._io import atomic_write_csv, atomic_write_json, atomic_write_text, fmt
from .profiling import parse_bytes, parse_duration
from .errors import BudgetExceeded, CausalTradeError, DataError, MemoryLimit, NumericError

log = logging.getLogger("causaltrade")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_RESOURCE = 0, 2, 2, 3, 4


class UsageError(ValueError):
    pass


def _opt_float(text):
    if text is None or str(text).strip().lower() in ("", "none", "off"):
        return None
    return float(text)


def _opt_int(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return int(text)


def _bool(text):
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str_list(text):
    if isinstance(text, (list, tuple)):
        return list(text)
    return [s.strip() for s in str(text).split(",") if s.strip()]


def _int_list(text):
    return [int(s) for s in _str_list(text)]


def _opt_str(text):
    if text is None or str(text).strip() == "":
        return None
    return str(text)


@dataclass
class RunConfig:
    """Every tunable of a run; validated before any computation."""

    subcommand: str = ""
    input: str | None = None
    out_dir: str = "out"
    tau: int = 1
    eta: int | None = None
    eta_frac: float | None = None
    cost: float = 0.001
    threshold: float = 0.05
    alpha: float | None = 0.01
    train_frac: float = 0.8
    seed: int = 0
    threads: int = 1
    refit_every: int = 1
    benchmark: str | None = None
    graph: str | None = None
    discover: bool = False
    dump_predictions: bool = False
    time_budget: float | None = None
    mem_cap: int | None = None
    # synth-bench / profile grid
    n_vars: list = field(default_factory=lambda: [5])
    T: list = field(default_factory=lambda: [3000])
    taus: list | None = None
    noise: list = field(default_factory=lambda: ["uniform"])
    seeds: int = 20
    density: float = 0.2
    # fetch
    endpoint: str | None = None
    tickers: list = field(default_factory=list)
    start: str | None = None
    end: str | None = None
    cache_dir: str | None = None

    def validate(self) -> "RunConfig":
        if self.tau < 1:
            raise UsageError("tau must be >= 1")
        if not 0.0 < self.train_frac < 1.0:
            raise UsageError("train-frac must be in (0, 1)")
        if not 0.0 <= self.cost < 1.0:
            raise UsageError("cost must be in [0, 1)")
        if self.threshold < 0:
            raise UsageError("threshold must be >= 0")
        if self.alpha is not None and not 0.0 < self.alpha <= 1.0:
            raise UsageError("alpha must be in (0, 1] or 'none'")
        if self.refit_every < 1 or self.threads < 1:
            raise UsageError("refit-every and threads must be >= 1")
        if self.eta is not None and self.eta_frac is not None:
            raise UsageError("give --eta or --eta-frac, not both")
        if self.eta is not None and self.eta < 1:
            raise UsageError("eta must be >= 1")
        if self.eta_frac is not None and not 0.0 < self.eta_frac <= 0.5:
            raise UsageError("eta-frac must be in (0, 0.5]")
        if self.time_budget is not None and self.time_budget <= 0:
            raise UsageError("time-budget must be positive")
        if self.mem_cap is not None and self.mem_cap <= 0:
            raise UsageError("mem-cap must be positive")
        if self.seeds < 0 or not 0.0 <= self.density <= 1.0:
            raise UsageError("seeds must be >= 0 and density in [0, 1]")
        if any(t < 1 for t in self.tau_grid):
            raise UsageError("tau must be >= 1")
        if self.subcommand in ("discover", "backtest") and not self.input:
            raise UsageError(f"{self.subcommand} needs --input")
        if self.subcommand == "backtest" and not (self.graph or self.discover):
            raise UsageError("backtest needs --graph PATH|self or --discover")
        if self.subcommand == "fetch" and not (self.endpoint and self.start and self.end):
            raise UsageError("fetch needs --endpoint, --start and --end")
        return self

    @property
    def tau_grid(self) -> list:
        return list(self.taus) if self.taus is not None else [self.tau]

    def echo(self) -> dict:
        """Fields the subcommand uses, as recorded in its reports.

        Output location and worker count are left out so that reruns into
        another directory or with more threads produce identical files.
        """
        d = asdict(self)
        return {k: d[k] for k in ("subcommand", *_ECHO[self.subcommand])}


_DISCOVERY = ("input", "tau", "threshold", "alpha", "train_frac", "seed", "time_budget", "mem_cap")
_GRID = ("n_vars", "T", "taus", "tau", "noise", "seed", "seeds", "density", "time_budget")
_ECHO = {
    "discover": _DISCOVERY,
    "backtest": _DISCOVERY + ("eta", "eta_frac", "cost", "refit_every", "benchmark", "graph", "discover"),
    "synth-bench": _GRID + ("threshold", "alpha"),
    "profile": _GRID + ("mem_cap",),
    "fetch": ("endpoint", "tickers", "start", "end"),
}


def _duration(text):
    return None if _opt_str(text) is None or str(text).lower() == "none" else parse_duration(text)


def _memory(text):
    return None if _opt_str(text) is None or str(text).lower() == "none" else parse_bytes(text)


_CONVERT = {
    "input": _opt_str, "out_dir": str, "tau": int, "eta": _opt_int, "eta_frac": _opt_float,
    "cost": float, "threshold": float, "alpha": _opt_float, "train_frac": float, "seed": int,
    "threads": int, "refit_every": int, "benchmark": _opt_str, "graph": _opt_str,
    "discover": _bool, "dump_predictions": _bool, "time_budget": _duration, "mem_cap": _memory,
    "n_vars": _int_list, "T": _int_list, "taus": _int_list, "noise": _str_list, "seeds": int,
    "density": float, "endpoint": _opt_str, "tickers": _str_list, "start": _opt_str,
    "end": _opt_str, "cache_dir": _opt_str,
}


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines (``#`` comments, optional ``[section]`` headers)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text if text.lstrip().startswith("[") else "[run]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"bad config file {path}: {exc}") from None
    out = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            name = key.strip().replace("-", "_")
            if name not in _CONVERT:
                raise UsageError(f"unknown config key {key!r} in {path}")
            out[name] = value
    return out


def build_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then config-file values, then explicit flags."""
    raw = read_config_file(args.config) if getattr(args, "config", None) else {}
    for name in _CONVERT:
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    values = {}
    for name, value in raw.items():
        try:
            values[name] = _CONVERT[name](value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {name}: {value!r} ({exc})") from None
    known = {f.name for f in fields(RunConfig)}
    cfg = RunConfig(subcommand=args.command, **{k: v for k, v in values.items() if k in known})
    return cfg.validate()


def _add_common(p: argparse.ArgumentParser) -> None:
    # every default is None so that config-file values survive unless a flag is given
    g = p.add_argument_group("common")
    g.add_argument("--config", help="key=value file mirroring the flags; flags override it")
    g.add_argument("--input", help="price panel CSV (date column plus one column per ticker)")
    g.add_argument("--out-dir", dest="out_dir", help="output directory (default ./out)")
    g.add_argument("--tau", help="maximum lag, >= 1 (default 1)")
    g.add_argument("--eta", help="winners and losers per day")
    g.add_argument("--eta-frac", dest="eta_frac", help="eta as a fraction of the universe")
    g.add_argument("--cost", help="flat daily transaction cost (default 0.001)")
    g.add_argument("--threshold", help="edge magnitude threshold on standardized data (default 0.05)")
    g.add_argument("--alpha", help="edge p-value cutoff, or 'none' for magnitude only (default 0.01)")
    g.add_argument("--train-frac", dest="train_frac", help="training fraction (default 0.8)")
    g.add_argument("--seed", help="seed for all randomness (default 0)")
    g.add_argument("--threads", help="cap on worker and BLAS threads (default 1)")
    g.add_argument("--refit-every", dest="refit_every", help="refit interval in test days (default 1)")
    g.add_argument("--benchmark", help="benchmark price CSV (date plus one price column)")
    g.add_argument("--graph", help="graph file (.json or edge list) or 'self'")
    g.add_argument("--discover", action="store_const", const=True, help="discover the graph on the training rows")
    g.add_argument("--time-budget", dest="time_budget", help="wall-clock limit, e.g. 30s, 5m")
    g.add_argument("--mem-cap", dest="mem_cap", help="memory cap, e.g. 512MB, 16GB")
    g.add_argument("--log-level", dest="log_level", default="INFO")


def _add_grid(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("grid")
    g.add_argument("--n-vars", dest="n_vars", help="comma list of variable counts")
    g.add_argument("--T", dest="T", help="comma list of series lengths")
    g.add_argument("--taus", help="comma list of lags (default: --tau)")
    g.add_argument("--noise", help="comma list of uniform, laplace, gaussian")
    g.add_argument("--seeds", help="seeds per cell, counting up from --seed (default 20)")
    g.add_argument("--density", help="edge density (default 0.2)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causaltrade",
        description="Causal-discovery driven long/short trading backtests.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("discover", help="learn a summary graph on the training rows")
    _add_common(p)

    p = sub.add_parser("backtest", help="walk-forward backtest with control and benchmark")
    _add_common(p)
    p.add_argument("--dump-predictions", dest="dump_predictions", action="store_const", const=True,
                   help="also write per-day predictions.csv")

    p = sub.add_parser("synth-bench", help="graph recovery on synthetic data")
    _add_common(p)
    _add_grid(p)

    p = sub.add_parser("profile", help="discovery wall time and memory against size")
    _add_common(p)
    _add_grid(p)

    p = sub.add_parser("fetch", help="download per-ticker price CSVs into one panel")
    _add_common(p)
    p.add_argument("--endpoint", help="URL template with {ticker}, {start}, {end}")
    p.add_argument("--tickers", help="comma list of tickers")
    p.add_argument("--start")
    p.add_argument("--end")
    p.add_argument("--cache-dir", dest="cache_dir")
    return parser


class JsonFormatter(logging.Formatter):
    def format(self, record):
        entry = {
            "ts": round(record.created, 3),
            "level": record.levelname,
            "logger": record.name,
            "msg": record.getMessage(),
        }
        if record.exc_info:
            entry["exc"] = self.formatException(record.exc_info)
        return json.dumps(entry)


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger("causaltrade")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False
    logging.captureWarnings(True)
    pw = logging.getLogger("py.warnings")
    pw.handlers[:] = [handler]
    pw.propagate = False


def _deadline(cfg: RunConfig):
    return None if cfg.time_budget is None else time.monotonic() + cfg.time_budget


def _load_panel(cfg: RunConfig):
    from .market_data import impute, load_csv

    panel, dropped = impute(load_csv(cfg.input))
    if dropped:
        log.warning("dropped series with unfillable gaps: %s", ",".join(dropped))
    return panel, dropped


def _discover_graph(cfg: RunConfig, panel):
    """Run discovery on the training rows; returns (graph, model, wall, peak_mb)."""
    from .discovery import summary_graph, varlingam
    from .market_data import split
    from .profiling import estimate_discovery_bytes, measure

    train = split(panel, cfg.train_frac, cfg.tau).train
    if cfg.mem_cap is not None:
        need = estimate_discovery_bytes(train.N, train.T, cfg.tau)
        if need > cfg.mem_cap:
            raise MemoryLimit(f"discovery needs about {need / 1e6:.1f} MB, cap is {cfg.mem_cap / 1e6:.1f} MB")
    model, wall, peak = measure(varlingam, train, cfg.tau, deadline=_deadline(cfg))
    if cfg.mem_cap is not None and peak * 1e6 > cfg.mem_cap:
        raise MemoryLimit(f"discovery peaked at {peak:.1f} MB, cap is {cfg.mem_cap / 1e6:.1f} MB")
    graph = summary_graph(model, cfg.threshold, cfg.alpha)
    log.info("discovery done: %d tickers, %d edges, %.2fs, peak %.1f MB", train.N, len(graph), wall, peak)
    return graph, model, wall, peak


def cmd_discover(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    panel, dropped = _load_panel(cfg)
    graph, model, wall, peak = _discover_graph(cfg, panel)
    atomic_write_text(out / "graph.txt", graph.to_edge_list())
    atomic_write_text(out / "graph.json", graph.to_json())
    atomic_write_json(out / "discover.json", {
        "config": cfg.echo(),
        "tickers": list(panel.tickers),
        "dropped": dropped,
        "causal_order": [panel.tickers[i] for i in model.order],
        "n_edges": len(graph),
        "low_confidence": bool(model.low_confidence),
    })
    atomic_write_json(out / "timing.json", {"discovery_seconds": wall, "peak_mem_mb": peak})
    return EXIT_OK


def _load_benchmark(path):
    from .market_data import load_csv

    bench = load_csv(path)
    if bench.N < 1:
        raise DataError(f"benchmark file {path} has no price column")
    col = bench.prices[:, 0]
    keep = ~(col != col)
    return bench.dates[keep], col[keep]


def cmd_backtest(cfg: RunConfig) -> int:
    from .backtest import run, write_report
    from .discovery import SummaryGraph, self_cause_graph
    from .strategy import StrategyConfig, eta_from_fraction

    out = Path(cfg.out_dir)
    benchmark = _load_benchmark(cfg.benchmark) if cfg.benchmark else None
    panel, _ = _load_panel(cfg)
    if cfg.graph == "self":
        graph = self_cause_graph(panel.tickers, cfg.tau)
    elif cfg.graph:
        try:
            graph = SummaryGraph.load(cfg.graph)
        except FileNotFoundError as exc:
            raise DataError(f"graph file not found: {cfg.graph}") from exc
    else:
        graph = _discover_graph(cfg, panel)[0]
    if cfg.eta_frac is not None:
        eta = eta_from_fraction(cfg.eta_frac, panel.N)
    else:
        eta = cfg.eta or 1
    try:
        strat = StrategyConfig(eta=eta, cost=cfg.cost)
        strat.check_universe(panel.N)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = run(panel, graph, strat, cfg.tau, cfg.train_frac, benchmark, cfg.refit_every,
                 cfg.threads, config_echo=cfg.echo())
    write_report(report, out, predictions=cfg.dump_predictions)
    atomic_write_text(out / "graph.json", graph.restrict(panel.tickers).to_json())
    s = report.summary()["series"]
    log.info(
        "backtest done: strategy cum %.6f ann %.6f; control cum %.6f; benchmark cum %.6f",
        s["strategy"]["cumulative"], s["strategy"]["annualized"],
        s["self_cause_control"]["cumulative"], s["benchmark"]["cumulative"],
    )
    return EXIT_OK


def _cell(v):
    return fmt(v) if v is None or isinstance(v, float) else v


def cmd_synth_bench(cfg: RunConfig) -> int:
    from .profiling import BENCH_COLUMNS, bench_cell, mean_f1

    rows, cells = [], []
    for n in cfg.n_vars:
        for T in cfg.T:
            for tau in cfg.tau_grid:
                for noise in cfg.noise:
                    cell = [
                        bench_cell(n, T, tau, noise, cfg.seed + k, cfg.density, cfg.threshold,
                                   cfg.alpha, cfg.time_budget)
                        for k in range(cfg.seeds)
                    ]
                    rows.extend(cell)
                    m = mean_f1(cell)
                    cells.append({"n_vars": n, "T": T, "tau": tau, "noise": noise,
                                  "runs": len(cell), "mean_f1": None if m != m else m})
                    log.info("cell n=%d T=%d tau=%d noise=%s mean_f1=%s", n, T, tau, noise, fmt(m))
    out = Path(cfg.out_dir)
    atomic_write_csv(out / "synth_bench.csv", list(BENCH_COLUMNS),
                     [[_cell(r[c]) for c in BENCH_COLUMNS] for r in rows])
    atomic_write_json(out / "synth_bench_summary.json", {"config": cfg.echo(), "cells": cells})
    for c in cells:
        print(f"n_vars={c['n_vars']} T={c['T']} tau={c['tau']} noise={c['noise']} "
              f"runs={c['runs']} mean_f1={fmt(c['mean_f1'])}")
    return EXIT_OK


def cmd_profile(cfg: RunConfig) -> int:
    from .profiling import PROFILE_COLUMNS, growth_exponent, profile_discovery

    sizes = [(n, T, tau) for n in cfg.n_vars for T in cfg.T for tau in cfg.tau_grid]
    rows = profile_discovery(sizes, cfg.seed, cfg.mem_cap, cfg.time_budget)
    exponent = growth_exponent(rows)
    out = Path(cfg.out_dir)
    atomic_write_csv(out / "profile.csv", list(PROFILE_COLUMNS),
                     [[_cell(r[c]) for c in PROFILE_COLUMNS] for r in rows])
    atomic_write_json(out / "profile.json", {"config": cfg.echo(), "rows": rows, "growth_exponent": exponent})
    for r in rows:
        print(f"N={r['n_vars']} T={r['T']} tau={r['tau']} status={r['status']} "
              f"wall={fmt(r['wall_seconds'])} peak_mb={fmt(r['peak_mem_mb'])}")
    print("growth_exponent=" + ("n/a" if exponent is None else f"{exponent:.3f}"))
    return EXIT_OK


def cmd_fetch(cfg: RunConfig) -> int:
    from .market_data import fetch_remote

    path, failed = fetch_remote(cfg.endpoint, cfg.tickers, cfg.start, cfg.end,
                                Path(cfg.out_dir) / "prices.csv", cfg.cache_dir, threads=cfg.threads)
    if failed:
        log.error("tickers failed: %s", ",".join(failed))
        return EXIT_DATA
    log.info("wrote %s", path)
    return EXIT_OK


COMMANDS = {
    "discover": cmd_discover,
    "backtest": cmd_backtest,
    "synth-bench": cmd_synth_bench,
    "profile": cmd_profile,
    "fetch": cmd_fetch,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    try:
        cfg = build_config(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"causaltrade: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=cfg.threads), warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[cfg.subcommand](cfg)
    except DataError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_NUMERIC
    except (BudgetExceeded, MemoryLimit) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RESOURCE
    except CausalTradeError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_NUMERIC
    except UsageError as exc:
        # combinations only detectable after loading data, such as eta too large
        log.error("invalid configuration: %s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
