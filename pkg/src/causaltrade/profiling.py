"""Wall-clock and memory measurement for discovery scaling runs."""

from __future__ import annotations

import logging
import math
import re
import time
import tracemalloc
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

from .discovery import DEFAULT_ALPHA, DEFAULT_THRESHOLD, summary_graph, varlingam
from .errors import BudgetExceeded, CausalTradeError, MemoryLimit
from .synthetic import generate, score

log = logging.getLogger(__name__)

BENCH_COLUMNS = (
    "n_vars", "T", "tau", "noise", "seed", "precision", "recall", "f1", "shd",
    "wall_seconds", "peak_mem_mb", "status",
)
PROFILE_COLUMNS = ("n_vars", "T", "tau", "status", "wall_seconds", "peak_mem_mb", "est_mem_mb")

_UNITS = {"": 1, "b": 1, "k": 1e3, "kb": 1e3, "m": 1e6, "mb": 1e6, "g": 1e9, "gb": 1e9,
          "kib": 2**10, "mib": 2**20, "gib": 2**30}
_TIME_UNITS = {"": 1.0, "s": 1.0, "ms": 1e-3, "m": 60.0, "min": 60.0, "h": 3600.0}


def parse_duration(text) -> float:
    """``"1s"``, ``"500ms"``, ``"2m"``, ``"1h"`` or a bare number of seconds."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*([a-z]*)\s*", str(text).lower())
    if not m or m.group(2) not in _TIME_UNITS:
        raise ValueError(f"cannot parse duration {text!r}")
    return float(m.group(1)) * _TIME_UNITS[m.group(2)]


def parse_bytes(text) -> int:
    """``"16GB"``, ``"512MB"``, ``"2GiB"`` or a bare byte count."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*([a-z]*)\s*", str(text).lower())
    if not m or m.group(2) not in _UNITS:
        raise ValueError(f"cannot parse memory size {text!r}")
    return int(float(m.group(1)) * _UNITS[m.group(2)])


def measure(fn: Callable, *args, **kwargs):
    """Run ``fn`` and return ``(result, wall_seconds, peak_traced_mb)``."""
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    tracemalloc.reset_peak()
    t0 = time.perf_counter()
    try:
        result = fn(*args, **kwargs)
    finally:
        wall = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
        if started:
            tracemalloc.stop()
    return result, wall, peak / 1e6


def estimate_discovery_bytes(N: int, T: int, tau: int) -> int:
    """Rough upper bound on the peak working set of ``varlingam``.

    Dominated by the lagged design and its least-squares workspace, the
    structural Gram/Cholesky matrices and a handful of T x N copies.
    """
    rows = T - tau
    p_var = N * tau + 1
    p_struct = p_var + N
    words = (
        6 * T * N
        + 3 * rows * p_var
        + rows * p_struct
        + 4 * p_struct * p_struct
        + (tau + 6) * N * N
        + 2 * 16 * T
    )
    return int(8 * words)


def profile_density(N: int, tau: int) -> float:
    # about one structural parent per node keeps large systems stationary
    return min(0.2, 1.0 / (N * (tau + 0.5)))


def profile_discovery(
    sizes: Iterable[Sequence[int]],
    seed: int = 0,
    mem_cap: int | None = None,
    time_budget: float | None = None,
) -> list[dict]:
    """Time VarLiNGAM discovery on synthetic panels of the given (N, T, tau) sizes."""
    rows = []
    for N, T, tau in sizes:
        row = {"n_vars": N, "T": T, "tau": tau, "status": "ok", "wall_seconds": None,
               "peak_mem_mb": None, "est_mem_mb": None}
        try:
            est = estimate_discovery_bytes(N, T, tau)
            row["est_mem_mb"] = est / 1e6
            if mem_cap is not None and est > mem_cap:
                raise MemoryLimit(f"estimated {est / 1e6:.1f} MB exceeds cap {mem_cap / 1e6:.1f} MB")
            panel, _ = generate(N, T, tau, profile_density(N, tau), "uniform", seed)
            deadline = None if time_budget is None else time.monotonic() + time_budget
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                _, wall, peak = measure(varlingam, panel, tau, deadline=deadline)
            if mem_cap is not None and peak * 1e6 > mem_cap:
                row["status"] = "MemoryLimit"
            row["wall_seconds"], row["peak_mem_mb"] = wall, peak
        except (MemoryLimit, MemoryError) as exc:
            log.warning("profile N=%d T=%d tau=%d: %s", N, T, tau, exc)
            row["status"] = "MemoryLimit"
        except BudgetExceeded:
            row["status"] = "timeout"
        except CausalTradeError as exc:
            row["status"] = f"error:{type(exc).__name__}"
        log.info("profile N=%d T=%d tau=%d status=%s wall=%s", N, T, tau, row["status"], row["wall_seconds"])
        rows.append(row)
    return rows


def growth_exponent(rows: Sequence[dict]) -> float | None:
    """Slope of log(wall time) against log(N) over completed rows; None if < 2 distinct N."""
    pts = [(r["n_vars"], r["wall_seconds"]) for r in rows
           if r["status"] == "ok" and r["wall_seconds"] is not None and r["wall_seconds"] > 0]
    if len({n for n, _ in pts}) < 2:
        return None
    x = np.log([n for n, _ in pts])
    y = np.log([w for _, w in pts])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def bench_cell(
    n_vars: int,
    T: int,
    tau: int,
    noise: str,
    seed: int,
    density: float = 0.2,
    threshold: float = DEFAULT_THRESHOLD,
    alpha: float | None = DEFAULT_ALPHA,
    time_budget: float | None = None,
) -> dict:
    """One synth-bench row: generate, discover, score, with resource usage."""
    row = dict.fromkeys(BENCH_COLUMNS)
    row.update(n_vars=n_vars, T=T, tau=tau, noise=noise, seed=seed, status="ok")
    deadline = None if time_budget is None else time.monotonic() + time_budget

    def job():
        panel, truth = generate(n_vars, T, tau, density, noise, seed, deadline=deadline)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = varlingam(panel, tau, deadline=deadline)
        return score(summary_graph(model, threshold, alpha), truth.graph_true)

    t0 = time.perf_counter()
    try:
        s, wall, peak = measure(job)
    except BudgetExceeded:
        row.update(status="timeout", wall_seconds=time.perf_counter() - t0)
        return row
    except CausalTradeError as exc:
        row.update(status=f"error:{type(exc).__name__}", wall_seconds=time.perf_counter() - t0)
        return row
    row.update(precision=s.precision, recall=s.recall, f1=s.f1, shd=s.shd,
               wall_seconds=wall, peak_mem_mb=peak)
    return row


def mean_f1(rows: Sequence[dict]) -> float:
    vals = [r["f1"] for r in rows if r["status"] == "ok"]
    return float(np.mean(vals)) if vals else math.nan
