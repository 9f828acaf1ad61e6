"""Dollar-neutral winner/loser selection and daily P&L."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import EndOfData, NonPositivePrice

DEFAULT_COST = 0.001


@dataclass(frozen=True)
class StrategyConfig:
    eta: int
    cost: float = DEFAULT_COST
    tie_break: str = "lexicographic"

    def __post_init__(self):
        if int(self.eta) != self.eta or self.eta < 1:
            raise ValueError(f"eta must be a positive integer, got {self.eta}")
        if not 0 <= self.cost < 1:
            raise ValueError(f"cost must be in [0, 1), got {self.cost}")
        if self.tie_break != "lexicographic":
            raise ValueError(f"unknown tie_break {self.tie_break!r}")

    def check_universe(self, n: int) -> None:
        if 2 * self.eta > n:
            raise ValueError(f"2 * eta = {2 * self.eta} exceeds {n} tickers")


def eta_from_fraction(frac: float, n_tickers: int) -> int:
    """Round ``frac * n_tickers`` half-up, with a floor of 1."""
    if not 0 < frac < 1:
        raise ValueError(f"eta fraction must be in (0, 1), got {frac}")
    return max(1, math.floor(frac * n_tickers + 0.5))


@dataclass(frozen=True)
class DailyTrade:
    date: np.datetime64
    winners: tuple
    losers: tuple
    predicted: Mapping
    long_realized: tuple
    short_realized: tuple
    realized_return: float

    @property
    def long_weight(self) -> float:
        return math.fsum(1.0 / len(self.winners) for _ in self.winners)

    @property
    def short_weight(self) -> float:
        return math.fsum(1.0 / len(self.losers) for _ in self.losers)


def select(predicted: Mapping, eta: int, exclude=()) -> tuple[list, list]:
    """Top-``eta`` winners and bottom-``eta`` losers by predicted return.

    Ties are broken by ticker name (lexicographic), on both sides.  Losers
    are chosen among the tickers that did not become winners, so the two
    sides never overlap.  Tickers in ``exclude`` are ignored.
    """
    if eta < 1:
        raise ValueError("eta must be >= 1")
    pool = [(t, g) for t, g in predicted.items() if t not in exclude]
    if len(pool) < 2 * eta:
        raise ValueError(f"need at least {2 * eta} tickers to select {eta} per side, got {len(pool)}")
    by_desc = sorted(pool, key=lambda tg: (-tg[1], tg[0]))
    winners = [t for t, _ in by_desc[:eta]]
    chosen = set(winners)
    by_asc = sorted((tg for tg in pool if tg[0] not in chosen), key=lambda tg: (tg[1], tg[0]))
    losers = [t for t, _ in by_asc[:eta]]
    return winners, losers


def realized_return(long_realized: Sequence[float], short_realized: Sequence[float], cost: float) -> float:
    """Equal-weight long minus equal-weight short, less a flat daily cost."""
    eta = len(long_realized)
    if eta == 0 or len(short_realized) != eta:
        raise ValueError(
            f"long and short legs must both have eta > 0 entries, got {eta} and {len(short_realized)}"
        )
    return math.fsum(long_realized) / eta - math.fsum(short_realized) / eta - cost


def simple_return(p0: float, p1: float) -> float:
    if not p0 > 0:
        raise NonPositivePrice(f"price {p0} is not positive")
    return (p1 - p0) / p0


def mark_to_market(panel, winners, losers, t: int) -> tuple[list, list]:
    """Next-day simple returns of every position opened at the close of row ``t``."""
    if t + 1 >= panel.T:
        raise EndOfData(f"no price after row {t} ({panel.dates[t]})")
    idx = {tk: j for j, tk in enumerate(panel.tickers)}
    P = panel.prices

    def leg(names):
        return [simple_return(float(P[t, idx[n]]), float(P[t + 1, idx[n]])) for n in names]

    return leg(winners), leg(losers)
