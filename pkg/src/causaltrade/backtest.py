"""Walk-forward backtest of the causal long-short strategy.

For every test day ``t`` except the last, each stock's parent model is
refitted on all rows up to ``t`` (expanding window), tomorrow's prices are
predicted, winners are bought and losers sold at the close of ``t``, and
the positions are closed at ``t + 1``.  The same loop runs on the
self-cause graph to produce the control series.
"""

from __future__ import annotations

import logging
import math
import resource
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._io import atomic_write_csv, atomic_write_json, fmt
from .discovery import SummaryGraph, self_cause_graph
from .errors import Bankrupt, PanelTooShort
from .forecast import fit_with_fallback, predict_day
from .market_data import PricePanel, split_index
from .strategy import (
    DailyTrade,
    StrategyConfig,
    mark_to_market,
    realized_return,
    select,
    simple_return,
)

log = logging.getLogger(__name__)

TRADING_DAYS = 252
SERIES = ("strategy", "self_cause_control", "benchmark")


def cumulative(returns: Sequence[float]) -> float:
    """Compounded return on unit notional, ``prod(1 + r) - 1``."""
    acc = 1.0
    for i, r in enumerate(returns):
        r = float(r)
        if not math.isfinite(r):
            raise ValueError(f"non-finite return at position {i}")
        if r <= -1.0:
            raise Bankrupt(i, r)
        acc *= 1.0 + r
    return acc - 1.0


def annualize(r_cum: float, T_test: int, D: int = TRADING_DAYS) -> float:
    """``(1 + r_cum) ** (D / T_test) - 1``."""
    if not r_cum > -1.0:
        raise ValueError(f"cumulative return must exceed -1, got {r_cum}")
    if T_test < 1:
        raise ValueError(f"T_test must be >= 1, got {T_test}")
    return (1.0 + r_cum) ** (D / T_test) - 1.0


def _cumulative_curve(returns: np.ndarray) -> np.ndarray:
    out = np.empty(len(returns))
    acc = 1.0
    for i, r in enumerate(returns):
        if math.isnan(r):
            out[i] = np.nan
            continue
        acc = 0.0 if (acc == 0.0 or r <= -1.0) else acc * (1.0 + r)
        out[i] = acc - 1.0
    return out


@dataclass
class WalkResult:
    returns: np.ndarray
    trades: list
    predictions: list
    skipped: list


def walk_forward(
    panel: PricePanel,
    graph: SummaryGraph,
    config: StrategyConfig,
    tau: int,
    start: int,
    refit_every: int = 1,
    threads: int = 1,
    stop: int | None = None,
) -> WalkResult:
    """Trade every row ``start <= t < stop`` (default: all but the last row)."""
    stop = panel.T - 1 if stop is None else min(stop, panel.T - 1)
    if refit_every < 1:
        raise ValueError("refit_every must be >= 1")
    config.check_universe(panel.N)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    models = {}
    returns, trades, preds, skipped = [], [], [], []
    try:
        for t in range(start, stop):
            if (t - start) % refit_every == 0:
                fit = lambda tk: fit_with_fallback(panel, graph, tk, tau, t)  # noqa: E731
                fitted = pool.map(fit, panel.tickers) if pool else map(fit, panel.tickers)
                models = dict(zip(panel.tickers, fitted))
            ps = predict_day(panel, models, t)
            preds.append(ps)
            eligible = panel.N - len(ps.carried)
            if eligible < 2 * config.eta:
                log.warning("skip %s: only %d tickers have forecasts", panel.dates[t], eligible)
                skipped.append(panel.dates[t])
                returns.append(0.0)
                trades.append(None)
                continue
            winners, losers = select(ps.predicted_return, config.eta, exclude=ps.carried)
            long_r, short_r = mark_to_market(panel, winners, losers, t)
            r = realized_return(long_r, short_r, config.cost)
            trade = DailyTrade(
                panel.dates[t], tuple(winners), tuple(losers),
                {tk: ps.predicted_return[tk] for tk in winners + losers},
                tuple(long_r), tuple(short_r), r,
            )
            if (
                abs(trade.long_weight - 1.0) > 1e-12
                or abs(trade.short_weight - 1.0) > 1e-12
                or set(winners) & set(losers)
            ):
                raise RuntimeError(f"portfolio on {panel.dates[t]} is not dollar neutral")
            returns.append(r)
            trades.append(trade)
    finally:
        if pool:
            pool.shutdown()
    return WalkResult(np.array(returns, dtype=np.float64), trades, preds, skipped)


def benchmark_returns(dates: np.ndarray, values: np.ndarray) -> dict:
    """Simple returns between consecutive benchmark observations, keyed by start date."""
    dates = np.asarray(dates, dtype="datetime64[D]")
    values = np.asarray(values, dtype=np.float64)
    return {
        dates[i]: simple_return(float(values[i]), float(values[i + 1]))
        for i in range(len(dates) - 1)
    }


@dataclass
class BacktestReport:
    dates: np.ndarray  # trade dates (all test rows but the last)
    daily: dict  # name -> np.ndarray aligned with dates; benchmark may hold NaN
    cumulative: dict
    annualized: dict
    T_test: int
    config: dict
    trades: dict = field(default_factory=dict)  # name -> list[DailyTrade | None]
    predictions: dict = field(default_factory=dict)  # name -> list[PredictionSet]
    bankrupt: dict = field(default_factory=dict)
    benchmark_source: str = "equal_weight_universe"
    benchmark_missing: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def summary(self) -> dict:
        """Deterministic summary (no timing) for JSON output."""
        return {
            "config": self.config,
            "T_test": self.T_test,
            "trade_days": int(len(self.dates)),
            "first_trade_date": str(self.dates[0]) if len(self.dates) else None,
            "last_trade_date": str(self.dates[-1]) if len(self.dates) else None,
            "benchmark_source": self.benchmark_source,
            "benchmark_missing_dates": [str(d) for d in self.benchmark_missing],
            "series": {
                name: {
                    "cumulative": self.cumulative[name],
                    "annualized": self.annualized[name],
                    "mean_daily": float(np.nanmean(self.daily[name])) if len(self.dates) else 0.0,
                    "bankrupt_on": self.bankrupt.get(name),
                }
                for name in SERIES
            },
        }


def _score_series(r: np.ndarray, dates, T_test):
    valid = r[~np.isnan(r)]
    try:
        cum = cumulative(valid)
    except Bankrupt as b:
        bad = np.flatnonzero(~np.isnan(r))[b.index]
        return -1.0, -1.0, str(dates[bad])
    return cum, annualize(cum, T_test), None


def run(
    panel: PricePanel,
    graph: SummaryGraph,
    config: StrategyConfig,
    tau: int = 1,
    train_frac: float = 0.8,
    benchmark: tuple | None = None,
    refit_every: int = 1,
    threads: int = 1,
    config_echo: Mapping | None = None,
) -> BacktestReport:
    """Run strategy and self-cause control over the test part of ``panel``.

    Parameters
    ----------
    panel : PricePanel
        Clean (imputed) panel covering train and test periods.
    graph : SummaryGraph
        Driving-force graph, normally discovered on the training rows only.
        Tickers absent from the graph are treated as parentless.
    benchmark : (dates, prices), optional
        Index or ETF price series.  Without it the equal-weight average of
        the universe's next-day returns is used.
    """
    timing = {}
    s = split_index(panel.T, train_frac)
    if s < tau + 2 or panel.T - s < 2:
        raise PanelTooShort(f"split at row {s} of {panel.T} leaves no room to trade")
    T_test = panel.T - s
    known = set(graph.tickers)
    graph = SummaryGraph(
        panel.tickers,
        {e: l for e, l in graph.edges.items() if e[0] in panel.tickers and e[1] in panel.tickers},
    )
    missing = [t for t in panel.tickers if t not in known]
    if missing:
        log.warning("%d tickers not in graph; treated as parentless", len(missing))
    control = self_cause_graph(panel.tickers, tau)

    t0 = time.perf_counter()
    main = walk_forward(panel, graph, config, tau, s, refit_every, threads)
    timing["strategy_seconds"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if graph.edges == control.edges:
        ctrl = main
    else:
        ctrl = walk_forward(panel, control, config, tau, s, refit_every, threads)
    timing["control_seconds"] = time.perf_counter() - t0

    dates = panel.dates[s : panel.T - 1]
    if benchmark is None:
        P = panel.prices
        bench = np.array([np.mean((P[t + 1] - P[t]) / P[t]) for t in range(s, panel.T - 1)])
        source, bench_missing = "equal_weight_universe", []
    else:
        by_date = benchmark_returns(*benchmark)
        bench = np.array([by_date.get(d, np.nan) for d in dates], dtype=np.float64)
        bench_missing = [d for d, v in zip(dates, bench) if np.isnan(v)]
        source = "external"
        if bench_missing:
            warnings.warn(f"benchmark lacks {len(bench_missing)} trade dates", RuntimeWarning, stacklevel=2)

    daily = {"strategy": main.returns, "self_cause_control": ctrl.returns, "benchmark": bench}
    cum, ann, bankrupt = {}, {}, {}
    for name, r in daily.items():
        cum[name], ann[name], b = _score_series(r, dates, T_test)
        if b:
            bankrupt[name] = b
            log.warning("%s bankrupt on %s", name, b)

    echo = {
        "tau": tau, "eta": config.eta, "cost": config.cost, "tie_break": config.tie_break,
        "train_frac": train_frac, "refit_every": refit_every,
    }
    if config_echo:
        echo.update(config_echo)
    timing["peak_rss_mb"] = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    return BacktestReport(
        dates=dates, daily=daily, cumulative=cum, annualized=ann, T_test=T_test, config=echo,
        trades={"strategy": main.trades, "self_cause_control": ctrl.trades},
        predictions={"strategy": main.predictions, "self_cause_control": ctrl.predictions},
        bankrupt=bankrupt, benchmark_source=source, benchmark_missing=bench_missing, timing=timing,
    )


def compare(report: BacktestReport):
    """Side-by-side figures and per-day excess returns.

    Returns
    -------
    summary : pandas.DataFrame
        One row per series with cumulative and annualized return.
    excess : pandas.DataFrame
        Strategy minus benchmark and strategy minus control, on the dates
        where all three series are available.
    """
    import pandas as pd

    summary = pd.DataFrame(
        {
            "cumulative": [report.cumulative[n] for n in SERIES],
            "annualized": [report.annualized[n] for n in SERIES],
        },
        index=list(SERIES),
    )
    frame = pd.DataFrame(report.daily, index=pd.DatetimeIndex(report.dates, name="date"))
    aligned = frame.dropna()
    dropped = len(frame) - len(aligned)
    if dropped:
        warnings.warn(f"{dropped} dates dropped while aligning with the benchmark", RuntimeWarning, stacklevel=2)
    excess = pd.DataFrame(
        {
            "vs_benchmark": aligned["strategy"] - aligned["benchmark"],
            "vs_control": aligned["strategy"] - aligned["self_cause_control"],
        }
    )
    return summary, excess


def write_report(report: BacktestReport, out_dir, predictions: bool = False) -> dict:
    """Write summary JSON, per-day CSV, cumulative-curve CSV, blotter and timing."""
    out = Path(out_dir)
    paths = {}
    paths["summary"] = atomic_write_json(out / "summary.json", report.summary())
    rows = [
        [str(d)] + [fmt(report.daily[n][i]) for n in SERIES] for i, d in enumerate(report.dates)
    ]
    paths["daily"] = atomic_write_csv(out / "daily_returns.csv", ["date", *SERIES], rows)
    curves = {n: _cumulative_curve(report.daily[n]) for n in SERIES}
    rows = [[str(d)] + [fmt(curves[n][i]) for n in SERIES] for i, d in enumerate(report.dates)]
    paths["plot"] = atomic_write_csv(
        out / "cumulative.csv", ["date", *(f"cum_{n}" for n in SERIES)], rows
    )
    blotter = []
    for trade in report.trades.get("strategy", []):
        if trade is None:
            continue
        for side, names, realized in (
            ("long", trade.winners, trade.long_realized),
            ("short", trade.losers, trade.short_realized),
        ):
            for tk, r in zip(names, realized):
                blotter.append([str(trade.date), side, tk, fmt(trade.predicted[tk]), fmt(r)])
    paths["blotter"] = atomic_write_csv(
        out / "blotter.csv", ["date", "side", "ticker", "predicted_return", "realized_return"], blotter
    )
    if predictions:
        paths["predictions"] = write_predictions(report, out / "predictions.csv")
    paths["timing"] = atomic_write_json(out / "timing.json", report.timing)
    return paths


def write_predictions(report: BacktestReport, path):
    rows = []
    for ps in report.predictions.get("strategy", []):
        for tk in sorted(ps.predicted_price):
            rows.append([
                str(ps.as_of), tk, fmt(ps.price_today[tk]),
                fmt(ps.predicted_price[tk]), fmt(ps.predicted_return[tk]),
            ])
    return atomic_write_csv(
        path, ["date", "ticker", "price_actual", "price_predicted", "return_predicted"], rows
    )
