"""Shared deterministic panels and hand-computed oracles."""

import numpy as np

from causaltrade.market_data import PricePanel

# A_t = 200 - B_{t-1}, B_t = A_{t-1}: a period-4 cycle
CYCLE_A = (110.0, 95.0, 90.0, 105.0)
CYCLE_B = (105.0, 110.0, 95.0, 90.0)


def exact_lag_panel(T: int = 50) -> PricePanel:
    a = np.array([CYCLE_A[t % 4] for t in range(T)])
    b = np.array([CYCLE_B[t % 4] for t in range(T)])
    dates = np.busday_offset("2022-01-03", np.arange(T), roll="forward")
    return PricePanel(dates, ("A", "B"), np.column_stack([a, b]))


def exact_lag_trace(T: int = 50, train_frac: float = 0.8, cost: float = 0.0):
    """Best-possible daily returns over the test rows, computed by hand.

    With exact forecasts and one name per side, the strategy is long the
    stock that rises more and short the other, earning |r_A - r_B| - C.
    Returns (daily, cumulative, annualized, T_test).
    """
    s = int(train_frac * T + 1e-9)
    T_test = T - s
    daily = []
    for t in range(s, T - 1):
        ra = (CYCLE_A[(t + 1) % 4] - CYCLE_A[t % 4]) / CYCLE_A[t % 4]
        rb = (CYCLE_B[(t + 1) % 4] - CYCLE_B[t % 4]) / CYCLE_B[t % 4]
        # enumerate both (winner, loser) assignments and keep the better
        daily.append(max(ra - rb, rb - ra) - cost)
    growth = 1.0
    for r in daily:
        growth *= 1.0 + r
    cum = growth - 1.0
    ann = growth ** (252.0 / T_test) - 1.0
    return daily, cum, ann, T_test


# one "PASS|FAIL Cn ..." line per acceptance criterion, printed in the summary
ACCEPTANCE_LINES: list = []


def verdict(tag: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {tag}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
