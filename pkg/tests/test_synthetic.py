import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causaltrade.discovery import SummaryGraph, summary_graph, varlingam
from causaltrade.errors import BudgetExceeded, StationarityError, TickerMismatch
from causaltrade.synthetic import (
    MAX_RADIUS,
    companion_radius,
    generate,
    recover,
    score,
    ticker_names,
)


def cross_edges(g):
    return {(u, v) for (u, v) in g.edge_set if u != v}


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(1, 3), st.floats(0.0, 0.5), st.integers(0, 10_000),
       st.sampled_from(["uniform", "laplace", "gaussian"]))
def test_generator_invariants(n, tau, density, seed, noise):
    try:
        panel, truth = generate(n, 300, tau, density, noise, seed, max_retries=200)
    except StationarityError:
        return  # dense draws can be infeasible; the contract is to fail loudly
    assert (panel.T, panel.N) == (300, n)
    assert np.all(panel.prices > 0) and np.all(np.isfinite(panel.prices))
    assert truth.spectral_radius < MAX_RADIUS
    assert truth.spectral_radius == pytest.approx(companion_radius(truth.B_true))
    order = list(truth.causal_order)
    P = truth.B_true[0][np.ix_(order, order)]
    assert np.all(np.triu(P) == 0.0)
    nz = {(u, v) for lag in range(tau + 1) for v, u in zip(*np.nonzero(truth.B_true[lag]))}
    expect = {(truth.graph_true.tickers[u], truth.graph_true.tickers[v]) for u, v in nz}
    assert truth.graph_true.edge_set == expect
    w = np.abs(truth.B_true[truth.B_true != 0])
    assert np.all((w >= 0.3) & (w <= 0.9))


def test_seed_determinism():
    a, ta = generate(4, 500, 2, 0.3, "laplace", seed=42)
    b, tb = generate(4, 500, 2, 0.3, "laplace", seed=42)
    c, _ = generate(4, 500, 2, 0.3, "laplace", seed=43)
    assert a == b and np.array_equal(ta.B_true, tb.B_true)
    assert not a == c


def test_business_day_dates():
    panel, _ = generate(2, 10, 1, 0.2, "uniform", 0)
    assert str(panel.dates[0]) == "2000-01-03"
    assert np.all(np.is_busday(panel.dates))
    assert panel.tickers == ("X00", "X01")
    assert ticker_names(120)[-1] == "X119"


@pytest.mark.parametrize("family", ["uniform", "laplace", "gaussian"])
def test_noise_has_unit_variance(family):
    from causaltrade.synthetic import _noise

    e = _noise(np.random.default_rng(0), family, 400_000)
    assert e.var() == pytest.approx(1.0, abs=0.01) and abs(e.mean()) < 0.01


def test_no_self_loops_option():
    _, truth = generate(6, 200, 2, 0.3, "uniform", 1, self_loops=False)
    assert not any(u == v for u, v in truth.graph_true.edge_set)


def test_density_zero_null_model():
    panel, truth = generate(5, 2000, 1, 0.0, "uniform", 3)
    assert len(truth.graph_true) == 0
    est = summary_graph(varlingam(panel, 1))
    assert len(cross_edges(est)) <= 1


def test_unreachable_stationarity():
    with pytest.raises(StationarityError):
        generate(30, 100, 1, 1.0, "uniform", 0, max_retries=3)


def test_generation_deadline():
    with pytest.raises(BudgetExceeded):
        generate(30, 100, 1, 1.0, "uniform", 0, deadline=0.0)


def test_bad_arguments():
    with pytest.raises(ValueError):
        generate(3, 100, 1, 1.5)
    with pytest.raises(ValueError):
        generate(3, 100, 1, 0.2, "cauchy")


def test_recovery_five_variables():
    f1 = []
    for seed in range(3):
        s, _, _ = recover(5, 3000, 1, "uniform", seed)
        f1.append(s.f1)
    assert np.mean(f1) >= 0.9


# ---------------------------------------------------------------- scoring

T3 = ("1", "2", "3")


def g(*edges):
    return SummaryGraph(T3, {e: {1} for e in edges})


def test_score_identical():
    s = score(g(("1", "2"), ("2", "3")), g(("1", "2"), ("2", "3")))
    assert (s.precision, s.recall, s.f1, s.shd) == (1.0, 1.0, 1.0, 0)


def test_score_empty_estimate():
    s = score(g(), g(("1", "2"), ("2", "3"), ("1", "3")))
    assert s.recall == 0.0 and s.shd == 3 and s.f1 == 0.0


def test_score_extra_edge():
    s = score(g(("1", "2"), ("1", "3")), g(("1", "2")))
    assert s.precision == 0.5 and s.recall == 1.0
    assert s.f1 == pytest.approx(2 / 3, rel=1e-12) and s.shd == 1


def test_score_reversal_counts_once_and_both_empty():
    assert score(g(("2", "1")), g(("1", "2"))).shd == 1
    s = score(g(), g())
    assert (s.precision, s.recall, s.f1, s.shd) == (1.0, 1.0, 1.0, 0)


def test_score_ticker_mismatch():
    with pytest.raises(TickerMismatch):
        score(SummaryGraph(("a",)), g())


edge_sets = st.sets(st.tuples(st.sampled_from(T3), st.sampled_from(T3)), max_size=9)


@settings(max_examples=200, deadline=None)
@given(edge_sets, edge_sets)
def test_score_properties(a, b):
    ga, gb = g(*a), g(*b)
    s, t = score(ga, gb), score(gb, ga)
    assert s.shd == t.shd
    for v in (s.precision, s.recall, s.f1):
        assert 0.0 <= v <= 1.0
    if s.precision + s.recall > 0:
        assert s.f1 == pytest.approx(2 * s.precision * s.recall / (s.precision + s.recall))
    assert (s.f1 == 1.0) == (a == b)
    assert (s.shd == 0) == (a == b)


def test_gaussian_recovery_is_worse():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        uni = np.mean([recover(6, 2000, 1, "uniform", k)[0].f1 for k in range(5)])
        gau = np.mean([recover(6, 2000, 1, "gaussian", k)[0].f1 for k in range(5)])
    assert uni > gau
