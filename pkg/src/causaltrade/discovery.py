"""VarLiNGAM estimation and summary-graph compression.

The estimator has two stages.  A VAR(tau) with intercept is fitted by least
squares; DirectLiNGAM is then run on the VAR residuals to recover the
instantaneous matrix ``B0`` and a causal order, and the lagged structural
matrices follow as ``B_i = (I - B0) M_i``.

Conventions: every coefficient matrix is indexed ``[effect, cause]``, so
``B[i][v, u]`` is the effect of ``u`` at lag ``i`` on ``v``.
"""

from __future__ import annotations

import json
import logging
import re
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy import linalg, stats

from ._io import atomic_write_text
from .errors import (
    BudgetExceeded,
    EmptyPanel,
    LiNGAMError,
    PanelTooShort,
    SingularDesign,
    TickerMismatch,
)
from .market_data import PricePanel

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.05
DEFAULT_ALPHA = 0.01
MIN_LINGAM_SAMPLES = 50


class LowConfidenceWarning(UserWarning):
    """Raised (as a warning) when disturbances look Gaussian, so the order is unidentifiable."""


def _check_deadline(deadline):
    if deadline is not None and time.monotonic() > deadline:
        raise BudgetExceeded("time budget exhausted during discovery")


# --------------------------------------------------------------------------
# VAR stage


@dataclass(frozen=True, eq=False)
class VarModel:
    tau: int
    M: np.ndarray  # (tau, N, N); M[i-1] is the lag-i coefficient matrix
    intercept: np.ndarray  # (N,)
    residuals: np.ndarray  # (T - tau, N)


def lag_design(X: np.ndarray, tau: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (design, target) for regressing X(t) on [1, X(t-1), ..., X(t-tau)]."""
    T, N = X.shape
    cols = [np.ones((T - tau, 1))]
    cols += [X[tau - i : T - i] for i in range(1, tau + 1)]
    return np.hstack(cols), X[tau:]


def fit_var(data, tau: int) -> VarModel:
    """Least-squares VAR(tau) with intercept.

    Parameters
    ----------
    data : PricePanel or array of shape (T, N)
    tau : int
        Lag order, at least 1.

    Raises
    ------
    PanelTooShort
        If ``T <= tau * N + tau + 1``.
    SingularDesign
        If the lagged design matrix is rank deficient, e.g. a constant
        series or two identical series.
    """
    X = np.asarray(data.prices if isinstance(data, PricePanel) else data, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    T, N = X.shape
    if T <= tau * N + tau + 1:
        raise PanelTooShort(f"VAR({tau}) on {N} series needs more than {tau * N + tau + 1} rows, got {T}")
    if not np.all(np.isfinite(X)):
        raise ValueError("VAR input contains non-finite values")

    design, Y = lag_design(X, tau)
    beta, _, rank, _ = np.linalg.lstsq(design, Y, rcond=None)
    if rank < design.shape[1]:
        raise SingularDesign(
            f"VAR design has rank {rank} < {design.shape[1]} columns "
            "(constant or duplicated series, or too few observations)"
        )
    M = np.stack([beta[1 + (i - 1) * N : 1 + i * N].T for i in range(1, tau + 1)])
    resid = Y - design @ beta
    return VarModel(tau=tau, M=M, intercept=beta[0].copy(), residuals=resid)


# --------------------------------------------------------------------------
# DirectLiNGAM
#
# Differential entropy is approximated by the maximum-entropy formula
#     H(u) ~ H_gauss - k1 (E[log cosh u] - gamma)^2 - k2 (E[u exp(-u^2/2)])^2
# for standardized u.  For a pair (i, j) the likelihood-ratio statistic is
#     R(i, j) = H(x_j) + H(r_i|j) - H(x_i) - H(r_j|i)
# where r_a|b is the standardized residual of x_a regressed on x_b; R > 0
# favours i -> j.  Variable i is scored by sum_j min(0, R(i, j))^2 and the
# smallest score is taken as the most exogenous.

_K1 = 79.047
_K2 = 7.4129
_GAMMA = 0.37457
_H_GAUSS = 0.5 * (1.0 + np.log(2.0 * np.pi))
_BLOCK = 16


def _entropy(g, e):
    return _H_GAUSS - _K1 * (g - _GAMMA) ** 2 - _K2 * e**2


def _block_entropy(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    # rows of u are standardized; |u| <= sqrt(T) so cosh cannot overflow
    T = u.shape[1]
    np.cosh(u, out=w)
    np.log(w, out=w)
    g = w.sum(axis=1) / T
    np.multiply(u, u, out=w)
    w *= -0.5
    np.exp(w, out=w)
    w *= u
    e = w.sum(axis=1) / T
    return _entropy(g, e)


def residual_entropies(Z: np.ndarray, C: np.ndarray, deadline=None) -> np.ndarray:
    """Entropy of every pairwise standardized regression residual.

    ``Z`` holds standardized variables as rows (m, T) and ``C`` their
    correlation matrix.  Entry ``[a, b]`` of the result is the entropy of
    the standardized residual of ``x_a`` regressed on ``x_b``.
    """
    m, T = Z.shape
    H = np.zeros((m, m))
    u = np.empty((_BLOCK, T))
    w = np.empty((_BLOCK, T))
    for i in range(m - 1):
        _check_deadline(deadline)
        xi = Z[i]
        for j0 in range(i + 1, m, _BLOCK):
            j1 = min(m, j0 + _BLOCK)
            k = j1 - j0
            c = C[i, j0:j1, None]
            s = 1.0 / np.sqrt(np.maximum(1.0 - c * c, 1e-12))
            ub, wb = u[:k], w[:k]
            np.multiply(Z[j0:j1], c, out=ub)
            np.subtract(xi, ub, out=ub)
            ub *= s
            H[i, j0:j1] = _block_entropy(ub, wb)
            np.multiply(xi, c, out=ub)
            np.subtract(Z[j0:j1], ub, out=ub)
            ub *= s
            H[j0:j1, i] = _block_entropy(ub, wb)
    return H


def pairwise_scores(X: np.ndarray, deadline=None) -> np.ndarray:
    """Exogeneity score per column of ``X`` (lower is more exogenous)."""
    T, m = X.shape
    if m == 1:
        return np.zeros(1)
    Xc = X - X.mean(axis=0)
    sd = np.sqrt((Xc * Xc).mean(axis=0))
    if np.any(sd <= 0):
        raise SingularDesign("zero-variance variable in LiNGAM input")
    Z = np.ascontiguousarray((Xc / sd).T)
    C = (Z @ Z.T) / T
    w = np.empty_like(Z)
    Hx = _block_entropy(Z, w)
    Hr = residual_entropies(Z, C, deadline)
    R = Hx[None, :] + Hr - Hx[:, None] - Hr.T
    np.fill_diagonal(R, 0.0)
    return (np.minimum(R, 0.0) ** 2).sum(axis=1)


class LingamFit(NamedTuple):
    order: list
    B0: np.ndarray
    low_confidence: bool


def ordered_regression(X: np.ndarray, order: Sequence[int]) -> np.ndarray:
    """Coefficients of each variable on all its predecessors in ``order``.

    Equivalent to one OLS-with-intercept per variable; computed from the
    Cholesky factor of the covariance matrix permuted into ``order``.
    """
    n, m = X.shape
    order = list(order)
    Xc = X - X.mean(axis=0)
    cov = (Xc.T @ Xc) / n
    P = cov[np.ix_(order, order)]
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise SingularDesign("covariance of LiNGAM input is not positive definite") from exc
    Lu = L / np.diag(L)[None, :]
    Linv = linalg.solve_triangular(Lu, np.eye(m), lower=True, unit_diagonal=True)
    Bp = np.tril(-Linv, k=-1)
    B = np.zeros((m, m))
    B[np.ix_(order, order)] = Bp
    return B


def _gaussian_count(E: np.ndarray, alpha: float = 0.01) -> int:
    if E.shape[0] < 20:
        return 0
    p = stats.normaltest(E, axis=0).pvalue
    return int(np.sum(p > alpha))


def direct_lingam(data, min_samples: int = MIN_LINGAM_SAMPLES, deadline=None) -> LingamFit:
    """Estimate a causal order and instantaneous matrix with DirectLiNGAM.

    Parameters
    ----------
    data : array of shape (n_samples, n_vars)
    min_samples : int
        Sample-size floor below which estimation is refused.
    deadline : float, optional
        ``time.monotonic()`` value after which ``BudgetExceeded`` is raised.

    Returns
    -------
    LingamFit
        ``order`` lists variable indices from most exogenous to most
        endogenous; ``B0[v, u]`` is the direct effect of ``u`` on ``v`` and is
        strictly lower triangular once permuted by ``order``.
        ``low_confidence`` is set when two or more estimated disturbances
        pass a normality test, in which case a ``LowConfidenceWarning`` is
        also issued.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, m = X.shape
    if not np.all(np.isfinite(X)):
        raise LiNGAMError("non-finite values in LiNGAM input")
    if n < min_samples:
        raise LiNGAMError(f"{n} samples is below the floor of {min_samples}")
    if m == 1:
        return LingamFit([0], np.zeros((1, 1)), False)

    R = X - X.mean(axis=0)
    remaining = list(range(m))
    order = []
    while len(remaining) > 1:
        _check_deadline(deadline)
        scores = pairwise_scores(R[:, remaining], deadline)
        pick = remaining[int(np.argmin(scores))]
        order.append(pick)
        remaining.remove(pick)
        xk = R[:, pick]
        vk = xk @ xk
        if vk <= 0:
            raise SingularDesign("variable became degenerate after regressing out predecessors")
        coef = (xk @ R[:, remaining]) / vk
        R[:, remaining] -= np.outer(xk, coef)
    order.append(remaining[0])

    B0 = ordered_regression(X, order)
    E = (X - X.mean(axis=0)) @ (np.eye(m) - B0).T
    low = _gaussian_count(E) >= 2
    if low:
        warnings.warn(
            "two or more LiNGAM disturbances are indistinguishable from Gaussian; "
            "the causal order is not identifiable",
            LowConfidenceWarning,
            stacklevel=2,
        )
    return LingamFit(order, B0, low)


# --------------------------------------------------------------------------
# VarLiNGAM


@dataclass(frozen=True, eq=False)
class VarLiNGAMModel:
    tickers: tuple
    tau: int
    B: np.ndarray  # (tau + 1, N, N); B[0] instantaneous
    order: list
    e_residuals: np.ndarray
    M: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    low_confidence: bool = False
    pvalues: np.ndarray | None = None  # same shape as B; NaN where B is structurally zero


def structural_pvalues(X: np.ndarray, tau: int, order: Sequence[int]) -> np.ndarray:
    """Two-sided p-values for every entry of ``B_0..B_tau``.

    ``B_i[v, :]`` and ``B_0[v, pred(v)]`` are the coefficients of the
    regression of ``x_v(t)`` on an intercept, all lagged values and the
    current values of ``v``'s predecessors in ``order``.  Those regressions
    use nested column prefixes of ``[1, X(t-1..t-tau), X(t)[order]]``, so one
    Cholesky factor of the Gram matrix serves all of them.
    """
    T, N = X.shape
    D, Y = lag_design(X, tau)
    n = D.shape[0]
    q = D.shape[1]
    W = np.hstack([D, Y[:, list(order)]])
    G = W.T @ W
    R = np.linalg.cholesky(G).T
    Rinv = linalg.solve_triangular(R, np.eye(W.shape[1]), lower=False)
    cs = np.cumsum(Rinv * Rinv, axis=1)
    P = np.full((tau + 1, N, N), np.nan)
    for k, v in enumerate(order):
        j = q + k
        beta = Rinv[:j, :j] @ R[:j, j]
        df = n - j
        sigma2 = R[j, j] ** 2 / df
        se = np.sqrt(sigma2 * cs[np.arange(j), j - 1])
        p = 2.0 * stats.t.sf(np.abs(beta / se), df)
        for i in range(1, tau + 1):
            P[i, v, :] = p[1 + (i - 1) * N : 1 + i * N]
        P[0, v, list(order[:k])] = p[q:j]
    return P


def varlingam(
    panel,
    tau: int = 1,
    standardize: bool = True,
    min_samples: int = MIN_LINGAM_SAMPLES,
    deadline=None,
) -> VarLiNGAMModel:
    """Fit VarLiNGAM on a panel (or a raw ``(T, N)`` array).

    Series are z-scored first when ``standardize`` is true, so that one
    pruning threshold is meaningful across tickers; coefficients in the
    returned model are in standardized units.
    """
    if isinstance(panel, PricePanel):
        X, tickers = np.asarray(panel.prices, dtype=np.float64), panel.tickers
    else:
        X = np.asarray(panel, dtype=np.float64)
        tickers = tuple(f"x{i}" for i in range(X.shape[1]))
    if X.shape[1] == 0:
        raise EmptyPanel("no series to analyse")
    if not np.all(np.isfinite(X)):
        raise ValueError("discovery input contains missing or non-finite values")
    N = X.shape[1]
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    if standardize:
        if np.any(scale <= 0):
            bad = [tickers[j] for j in np.flatnonzero(scale <= 0)]
            raise SingularDesign(f"constant series: {', '.join(bad)}")
        Xs = (X - mean) / scale
    else:
        mean, scale = np.zeros(N), np.ones(N)
        Xs = X

    _check_deadline(deadline)
    var = fit_var(Xs, tau)
    _check_deadline(deadline)
    fit = direct_lingam(var.residuals, min_samples=min_samples, deadline=deadline)
    A = np.eye(N) - fit.B0
    B = np.empty((tau + 1, N, N))
    B[0] = fit.B0
    for i in range(1, tau + 1):
        B[i] = A @ var.M[i - 1]
    E = var.residuals @ A.T
    try:
        pvalues = structural_pvalues(Xs, tau, fit.order)
    except np.linalg.LinAlgError:
        log.warning("coefficient p-values unavailable (ill-conditioned design)")
        pvalues = None
    return VarLiNGAMModel(
        tickers=tuple(tickers), tau=tau, B=B, order=[int(o) for o in fit.order],
        e_residuals=E, M=var.M, mean=mean, scale=scale, low_confidence=fit.low_confidence,
        pvalues=pvalues,
    )


# --------------------------------------------------------------------------
# summary graphs


@dataclass(frozen=True)
class SummaryGraph:
    """Directed graph over tickers with the lag at which each edge was found.

    ``edges`` maps ``(src, dst)`` to the set of lags supporting it.  An edge
    ``u -> v`` means ``u`` is a driving force (parent) of ``v``.
    """

    tickers: tuple
    edges: Mapping = field(default_factory=dict)
    _parents: Mapping = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        tickers = tuple(self.tickers)
        known = set(tickers)
        if len(known) != len(tickers):
            raise ValueError("duplicate tickers in graph")
        edges = {}
        for (u, v), lags in self.edges.items():
            if u not in known or v not in known:
                raise TickerMismatch(f"edge {u} -> {v} references an unknown ticker")
            lags = frozenset(int(l) for l in lags)
            if u == v and 0 in lags:
                raise ValueError(f"self-edge {u} -> {u} at lag 0 is not allowed")
            edges[(u, v)] = lags
        rank = {t: i for i, t in enumerate(tickers)}
        parents = {t: [] for t in tickers}
        for u, v in edges:
            parents[v].append(u)
        parents = {v: tuple(sorted(ps, key=rank.__getitem__)) for v, ps in parents.items()}
        object.__setattr__(self, "tickers", tickers)
        object.__setattr__(self, "edges", dict(sorted(edges.items(), key=lambda kv: (rank[kv[0][0]], rank[kv[0][1]]))))
        object.__setattr__(self, "_parents", parents)

    def parents(self, ticker: str) -> tuple:
        return self._parents[ticker]

    @property
    def edge_set(self) -> frozenset:
        return frozenset(self.edges)

    def __len__(self):
        return len(self.edges)

    # serialization ---------------------------------------------------------

    def to_edge_list(self) -> str:
        lines = [f"# tickers: {','.join(self.tickers)}"]
        for (u, v), lags in self.edges.items():
            lines.append(f"{u} -> {v} [{','.join(str(l) for l in sorted(lags))}]")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "tickers": list(self.tickers),
            "edges": [
                {"src": u, "dst": v, "lags": sorted(lags)} for (u, v), lags in self.edges.items()
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SummaryGraph":
        edges = {(e["src"], e["dst"]): e.get("lags", [1]) for e in d["edges"]}
        return cls(tuple(d["tickers"]), edges)

    _LINE = re.compile(r"^\s*(\S+)\s*->\s*(\S+?)\s*(?:\[([\d,\s]*)\])?\s*$")

    @classmethod
    def from_edge_list(cls, text: str, tickers: Sequence[str] | None = None) -> "SummaryGraph":
        declared = None
        edges = {}
        seen = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                body = s[1:].strip()
                if body.startswith("tickers:"):
                    declared = [t.strip() for t in body[len("tickers:"):].split(",") if t.strip()]
                continue
            m = cls._LINE.match(s)
            if not m:
                raise ValueError(f"line {lineno}: cannot parse edge {line!r}")
            u, v, lags = m.group(1), m.group(2), m.group(3)
            lag_set = {int(x) for x in lags.split(",") if x.strip()} if lags else {1}
            edges.setdefault((u, v), set()).update(lag_set)
            for t in (u, v):
                if t not in seen:
                    seen.append(t)
        names = tickers or declared or seen
        return cls(tuple(names), edges)

    def save(self, path) -> None:
        path = Path(path)
        text = self.to_json() if path.suffix.lower() == ".json" else self.to_edge_list()
        atomic_write_text(path, text)

    @classmethod
    def load(cls, path, tickers: Sequence[str] | None = None) -> "SummaryGraph":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() == ".json":
            g = cls.from_dict(json.loads(text))
            return g if tickers is None else g.restrict(tickers)
        return cls.from_edge_list(text, tickers)

    def restrict(self, tickers: Sequence[str]) -> "SummaryGraph":
        """Drop nodes not in ``tickers`` (e.g. series removed by imputation)."""
        keep = set(tickers)
        return SummaryGraph(
            tuple(tickers),
            {e: l for e, l in self.edges.items() if e[0] in keep and e[1] in keep},
        )


def summary_graph(
    model: VarLiNGAMModel,
    threshold: float = DEFAULT_THRESHOLD,
    alpha: float | None = DEFAULT_ALPHA,
) -> SummaryGraph:
    """Collapse lagged coefficients into one edge per (cause, effect) pair.

    ``u -> v`` is kept when, for some lag ``i``, ``|B_i[v, u]| > threshold``
    and (if ``alpha`` is set and the model carries p-values) the
    coefficient is significant at level ``alpha``.  The supporting lags are
    recorded.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    if alpha is not None and not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    tickers = model.tickers
    gate = alpha is not None and model.pvalues is not None
    edges: dict = {}
    for lag in range(model.B.shape[0]):
        mask = np.abs(model.B[lag]) > threshold
        if gate:
            mask &= np.nan_to_num(model.pvalues[lag], nan=1.0) < alpha
        if lag == 0:
            np.fill_diagonal(mask, False)
        for v, u in zip(*np.nonzero(mask)):
            edges.setdefault((tickers[u], tickers[v]), set()).add(lag)
    return SummaryGraph(tickers, edges)


def self_cause_graph(tickers: Sequence[str], tau: int = 1) -> SummaryGraph:
    """Control graph in which every ticker's only parent is itself."""
    tickers = tuple(tickers)
    if not tickers:
        raise EmptyPanel("self-cause graph needs at least one ticker")
    lags = frozenset(range(1, tau + 1))
    return SummaryGraph(tickers, {(t, t): lags for t in tickers})
