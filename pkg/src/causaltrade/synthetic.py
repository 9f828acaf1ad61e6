"""Ground-truth VarLiNGAM simulator and graph-recovery scoring."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .discovery import DEFAULT_THRESHOLD, SummaryGraph, summary_graph, varlingam
from .errors import BudgetExceeded, StationarityError, TickerMismatch
from .market_data import PricePanel

NOISE_FAMILIES = ("uniform", "laplace", "gaussian")
WEIGHT_RANGE = (0.3, 0.9)
MAX_RADIUS = 0.95


@dataclass(frozen=True, eq=False)
class GroundTruth:
    B_true: np.ndarray  # (tau + 1, n, n)
    graph_true: SummaryGraph
    noise: str
    noise_scale: np.ndarray
    seed: int
    spectral_radius: float
    causal_order: tuple


@dataclass(frozen=True)
class GraphScore:
    precision: float
    recall: float
    f1: float
    shd: int


def _noise(rng, family: str, size) -> np.ndarray:
    # unit variance in every family
    if family == "uniform":
        return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size)
    if family == "laplace":
        return rng.laplace(0.0, 1.0 / np.sqrt(2.0), size)
    if family == "gaussian":
        return rng.standard_normal(size)
    raise ValueError(f"unknown noise family {family!r}; expected one of {NOISE_FAMILIES}")


def _weights(rng, mask: np.ndarray, lo: float, hi: float) -> np.ndarray:
    w = rng.uniform(lo, hi, mask.shape) * rng.choice([-1.0, 1.0], mask.shape)
    return np.where(mask, w, 0.0)


def companion_radius(B: np.ndarray) -> float:
    """Spectral radius of the reduced-form VAR implied by structural ``B``."""
    tau1, n, _ = B.shape
    tau = tau1 - 1
    A = np.linalg.inv(np.eye(n) - B[0])
    top = np.hstack([A @ B[i] for i in range(1, tau + 1)])
    if tau == 1:
        comp = top
    else:
        comp = np.vstack([top, np.eye(n * (tau - 1), n * tau)])
    return float(np.max(np.abs(np.linalg.eigvals(comp))))


def graph_from_coefficients(B: np.ndarray, tickers, threshold: float = 0.0) -> SummaryGraph:
    edges: dict = {}
    for lag in range(B.shape[0]):
        mask = np.abs(B[lag]) > threshold
        if lag == 0:
            np.fill_diagonal(mask, False)
        for v, u in zip(*np.nonzero(mask)):
            edges.setdefault((tickers[u], tickers[v]), set()).add(lag)
    return SummaryGraph(tuple(tickers), edges)


def ticker_names(n: int) -> tuple:
    width = max(2, len(str(n - 1)))
    return tuple(f"X{i:0{width}d}" for i in range(n))


def generate(
    n_vars: int,
    T: int,
    tau: int = 1,
    edge_density: float = 0.2,
    noise: str = "uniform",
    seed: int = 0,
    self_loops: bool = True,
    weight_range: tuple = WEIGHT_RANGE,
    noise_scale=None,
    max_retries: int = 1000,
    deadline=None,
) -> tuple[PricePanel, GroundTruth]:
    """Simulate ``X(t) = sum_{i=0}^{tau} B_i X(t-i) + e(t)`` and map it to prices.

    Every candidate coefficient (lower-triangular entries of ``B_0`` under a
    random order, all entries of ``B_1..B_tau``) is nonzero with probability
    ``edge_density``, with magnitude uniform in ``weight_range`` and random
    sign.  Draws are rejected until the reduced-form companion matrix has
    spectral radius below 0.95.  A burn-in of ``10 * tau * n_vars`` steps is
    discarded.  Each series is then mapped affinely to a positive level
    around 100.
    """
    if not 0.0 <= edge_density <= 1.0:
        raise ValueError("edge_density must be in [0, 1]")
    if n_vars < 1 or T < 1 or tau < 1:
        raise ValueError("n_vars, T and tau must be >= 1")
    if noise not in NOISE_FAMILIES:
        raise ValueError(f"unknown noise family {noise!r}")
    rng = np.random.default_rng(seed)
    n = n_vars
    lo, hi = weight_range
    for _ in range(max_retries):
        if deadline is not None and time.monotonic() > deadline:
            raise BudgetExceeded("time budget exhausted while drawing a stationary process")
        perm = rng.permutation(n)
        B = np.zeros((tau + 1, n, n))
        pos = np.empty(n, dtype=int)
        pos[perm] = np.arange(n)
        lower = pos[:, None] > pos[None, :]  # cause earlier in perm than effect
        B[0] = _weights(rng, lower & (rng.random((n, n)) < edge_density), lo, hi)
        for i in range(1, tau + 1):
            mask = rng.random((n, n)) < edge_density
            if not self_loops:
                np.fill_diagonal(mask, False)
            B[i] = _weights(rng, mask, lo, hi)
        radius = companion_radius(B)
        if radius < MAX_RADIUS:
            break
    else:
        raise StationarityError(
            f"no stationary draw in {max_retries} tries (n={n}, tau={tau}, density={edge_density})"
        )

    scale = np.ones(n) if noise_scale is None else np.broadcast_to(np.asarray(noise_scale, float), (n,)).copy()
    burn = 10 * tau * n
    total = T + burn
    e = _noise(rng, noise, (total, n)) * scale
    A = np.linalg.inv(np.eye(n) - B[0])
    lagged = [A @ B[i] for i in range(1, tau + 1)]
    x = np.zeros((total + tau, n))
    shocks = e @ A.T
    for t in range(tau, total + tau):
        acc = shocks[t - tau].copy()
        for i, Mi in enumerate(lagged, start=1):
            acc += Mi @ x[t - i]
        x[t] = acc
    x = x[tau + burn :]

    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    z = (x - x.mean(axis=0)) / sd
    prices = 100.0 + 10.0 * z
    floor = prices.min(axis=0)
    prices = prices + np.where(floor < 1.0, 1.0 - floor, 0.0)

    tickers = ticker_names(n)
    dates = np.busday_offset("2000-01-03", np.arange(T), roll="forward")
    panel = PricePanel(dates, tickers, prices)
    truth = GroundTruth(
        B_true=B, graph_true=graph_from_coefficients(B, tickers), noise=noise,
        noise_scale=scale, seed=seed, spectral_radius=radius,
        causal_order=tuple(int(i) for i in perm),
    )
    return panel, truth


def score(estimated: SummaryGraph, truth: SummaryGraph) -> GraphScore:
    """Directed-edge precision/recall/F1 and structural Hamming distance.

    SHD counts, per unordered node pair, one unit whenever the two graphs
    disagree on the edges between them (a reversal counts once), plus one
    per differing self-loop.  When a graph has no edges the corresponding
    rate is 1 if the other graph is also empty and 0 otherwise.
    """
    if set(estimated.tickers) != set(truth.tickers):
        raise TickerMismatch("graphs are over different ticker sets")
    est, tru = estimated.edge_set, truth.edge_set
    tp = len(est & tru)
    if est:
        precision = tp / len(est)
    else:
        precision = 1.0 if not tru else 0.0
    if tru:
        recall = tp / len(tru)
    else:
        recall = 1.0 if not est else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    pairs = {frozenset(e) for e in est ^ tru}
    shd = 0
    for p in pairs:
        if len(p) == 1:
            shd += 1
            continue
        u, v = sorted(p)
        if ({(u, v), (v, u)} & est) != ({(u, v), (v, u)} & tru):
            shd += 1
    return GraphScore(precision, recall, f1, shd)


def recover(
    n_vars: int,
    T: int,
    tau: int = 1,
    noise: str = "uniform",
    seed: int = 0,
    edge_density: float = 0.2,
    threshold: float = DEFAULT_THRESHOLD,
    deadline=None,
    **gen_kwargs,
) -> tuple[GraphScore, SummaryGraph, GroundTruth]:
    """Generate, discover with VarLiNGAM, and score one synthetic instance."""
    panel, truth = generate(n_vars, T, tau, edge_density, noise, seed, deadline=deadline, **gen_kwargs)
    model = varlingam(panel, tau, deadline=deadline)
    est = summary_graph(model, threshold)
    return score(est, truth.graph_true), est, truth
