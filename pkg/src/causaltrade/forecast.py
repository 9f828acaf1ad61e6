"""Per-stock lagged regressions on summary-graph parents."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .discovery import SummaryGraph
from .errors import MissingHistory, NonPositivePrice, PanelTooShort, SingularDesign
from .market_data import PricePanel

log = logging.getLogger(__name__)

RIDGE = 1e-8

# how a ParentModel was obtained
PARENTS = "parents"
SELF_LAGS = "self_lags"  # target had no parents in the graph
RIDGE_FIT = "ridge"
CARRY_FORWARD = "carry_forward"


@dataclass(frozen=True, eq=False)
class ParentModel:
    """Linear model ``P_t = a + sum_{p, l} w[p, l] * P^p_{t-l}`` for one target."""

    target: str
    parents: tuple
    tau: int
    coef: np.ndarray  # (len(parents), tau); column l-1 holds lag l
    intercept: float
    fitted_through: np.datetime64
    kind: str = PARENTS

    @property
    def n_coefficients(self) -> int:
        return self.coef.size + 1


@dataclass(frozen=True)
class PredictionSet:
    as_of: np.datetime64
    predicted_price: Mapping
    predicted_return: Mapping
    carried: frozenset = field(default_factory=frozenset)  # carry-forward tickers
    price_today: Mapping = field(default_factory=dict)


def _lagged_design(prices: np.ndarray, cols: list, tau: int, end: int):
    """Design rows t = tau..end: parent-major, lags 1..tau."""
    rows = np.arange(tau, end + 1)
    X = np.empty((rows.size, len(cols) * tau + 1))
    X[:, 0] = 1.0
    k = 1
    for c in cols:
        for lag in range(1, tau + 1):
            X[:, k] = prices[rows - lag, c]
            k += 1
    return X


def _unpack(beta, n_parents, tau):
    return float(beta[0]), np.asarray(beta[1:], dtype=np.float64).reshape(n_parents, tau)


def resolve_parents(graph: SummaryGraph, target: str) -> tuple[tuple, str]:
    parents = graph.parents(target)
    if not parents:
        return (target,), SELF_LAGS
    return parents, PARENTS


def fit_parent_model(
    panel: PricePanel,
    graph: SummaryGraph,
    target: str,
    tau: int,
    end,
    ridge: bool = False,
) -> ParentModel:
    """OLS of the target's price on its parents' prices at lags 1..tau.

    Every row up to and including ``end`` (a date or a row index) is used.
    A ticker without parents falls back to its own lags.  With
    ``ridge=True`` the normal equations get a ``1e-8`` diagonal so
    collinear parents still produce a fit.

    Raises
    ------
    PanelTooShort
        Fewer than ``len(parents) * tau + 2`` usable rows.
    SingularDesign
        Rank-deficient design and ``ridge`` is false.
    """
    e = end if isinstance(end, (int, np.integer)) else panel.date_index(end)
    parents, kind = resolve_parents(graph, target)
    cols = [panel.tickers.index(p) for p in parents]
    n_rows = e - tau + 1
    need = len(parents) * tau + 2
    if n_rows < need:
        raise PanelTooShort(f"{target}: {n_rows} usable rows, need {need}")
    X = _lagged_design(panel.prices, cols, tau, e)
    y = panel.prices[tau : e + 1, panel.tickers.index(target)]
    if ridge:
        A = X.T @ X
        A[np.diag_indices_from(A)] += RIDGE
        beta = np.linalg.solve(A, X.T @ y)
        if not np.all(np.isfinite(beta)):
            raise SingularDesign(f"{target}: ridge fit is not finite")
        kind = RIDGE_FIT
    else:
        beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
        if rank < X.shape[1]:
            raise SingularDesign(f"{target}: design rank {rank} < {X.shape[1]}")
    intercept, coef = _unpack(beta, len(parents), tau)
    return ParentModel(target, tuple(parents), tau, coef, intercept, panel.dates[e], kind)


def carry_forward_model(panel: PricePanel, target: str, tau: int, end: int) -> ParentModel:
    """Model that predicts tomorrow's price as today's (gamma = 0)."""
    coef = np.zeros((1, tau))
    coef[0, 0] = 1.0
    return ParentModel(target, (target,), tau, coef, 0.0, panel.dates[end], CARRY_FORWARD)


def fit_with_fallback(panel, graph, target, tau, end: int) -> ParentModel:
    """Parent OLS, then ridge, then carry-forward; never raises on numerics."""
    try:
        return fit_parent_model(panel, graph, target, tau, end)
    except SingularDesign:
        pass
    except PanelTooShort:
        return carry_forward_model(panel, target, tau, end)
    try:
        return fit_parent_model(panel, graph, target, tau, end, ridge=True)
    except (SingularDesign, np.linalg.LinAlgError):
        log.debug("carry-forward fallback for %s at row %d", target, end)
        return carry_forward_model(panel, target, tau, end)


def predict_next(model: ParentModel, panel: PricePanel, t) -> float:
    """One-step-ahead price for day ``t + 1`` from prices at ``t .. t - tau + 1``."""
    i = t if isinstance(t, (int, np.integer)) else panel.date_index(t)
    if panel.dates[i] < model.fitted_through:
        raise ValueError("model was fitted on data after the prediction date")
    if i - model.tau + 1 < 0:
        raise MissingHistory(f"need {model.tau} rows of history before row {i}")
    cols = [panel.tickers.index(p) for p in model.parents]
    # lag l relative to t+1 is row i + 1 - l
    lagged = panel.prices[i + 1 - np.arange(1, model.tau + 1)][:, cols].T
    if np.isnan(lagged).any():
        raise MissingHistory(f"missing parent price for {model.target} near row {i}")
    return float(model.intercept + np.sum(model.coef * lagged))


def predicted_returns(prices_today: Mapping, predicted: Mapping) -> dict:
    """``gamma = (rho - P) / P`` for each ticker."""
    out = {}
    for ticker, rho in predicted.items():
        p = prices_today[ticker]
        if not p > 0:
            raise NonPositivePrice(f"{ticker}: price {p} is not positive")
        out[ticker] = (rho - p) / p
    return out


def predict_day(
    panel: PricePanel,
    models: Mapping,
    t: int,
) -> PredictionSet:
    """Assemble the PredictionSet for day ``t`` from already-fitted models."""
    prices_today = {tk: float(panel.prices[t, j]) for j, tk in enumerate(panel.tickers)}
    rho, carried = {}, set()
    for tk in panel.tickers:
        m = models[tk]
        if m.kind == CARRY_FORWARD:
            rho[tk] = prices_today[tk]
            carried.add(tk)
            continue
        value = predict_next(m, panel, t)
        if not np.isfinite(value):
            rho[tk] = prices_today[tk]
            carried.add(tk)
        else:
            rho[tk] = value
    gamma = predicted_returns(prices_today, rho)
    return PredictionSet(panel.dates[t], rho, gamma, frozenset(carried), prices_today)
