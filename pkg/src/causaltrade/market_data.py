"""Loading, cleaning, splitting and fetching daily price panels."""

from __future__ import annotations

import csv
import io
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write_text
from .errors import (
    DuplicateDate,
    EmptyPanel,
    FetchError,
    MalformedRow,
    NonPositivePrice,
    PanelTooShort,
)

log = logging.getLogger(__name__)

CACHE_ENV = "CAUSALTRADE_CACHE"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PricePanel:
    """Date-indexed matrix of prices, one column per ticker.

    Missing observations are stored as NaN.  Arrays are read-only so a
    panel can be shared freely between threads.
    """

    dates: np.ndarray  # datetime64[D], strictly increasing
    tickers: tuple
    prices: np.ndarray  # float64, shape (T, N)

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        prices = np.asarray(self.prices, dtype=np.float64)
        tickers = tuple(str(t) for t in self.tickers)
        if prices.ndim != 2 or prices.shape != (len(dates), len(tickers)):
            raise ValueError(
                f"prices shape {prices.shape} does not match "
                f"{len(dates)} dates x {len(tickers)} tickers"
            )
        if len(set(tickers)) != len(tickers):
            raise ValueError("duplicate tickers")
        if len(dates) > 1 and not np.all(dates[1:] > dates[:-1]):
            raise ValueError("dates must be strictly increasing")
        known = prices[~np.isnan(prices)]
        if known.size and not (np.all(np.isfinite(known)) and np.all(known > 0)):
            raise NonPositivePrice("prices must be finite and > 0")
        object.__setattr__(self, "dates", _frozen(dates))
        object.__setattr__(self, "prices", _frozen(prices))
        object.__setattr__(self, "tickers", tickers)

    @property
    def T(self) -> int:
        return self.prices.shape[0]

    @property
    def N(self) -> int:
        return self.prices.shape[1]

    @property
    def has_missing(self) -> bool:
        return bool(np.isnan(self.prices).any())

    def column(self, ticker: str) -> np.ndarray:
        return self.prices[:, self.tickers.index(ticker)]

    def rows(self, start: int | None = None, stop: int | None = None) -> "PricePanel":
        return PricePanel(self.dates[start:stop], self.tickers, self.prices[start:stop])

    def select(self, tickers: Sequence[str]) -> "PricePanel":
        idx = [self.tickers.index(t) for t in tickers]
        return PricePanel(self.dates, tuple(tickers), self.prices[:, idx])

    def date_index(self, d) -> int:
        d = np.datetime64(d, "D")
        i = int(np.searchsorted(self.dates, d))
        if i >= self.T or self.dates[i] != d:
            raise KeyError(f"date {d} not in panel")
        return i

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame(
            np.array(self.prices), index=pd.DatetimeIndex(self.dates, name="date"),
            columns=list(self.tickers),
        )

    def __eq__(self, other):
        if not isinstance(other, PricePanel):
            return NotImplemented
        return (
            self.tickers == other.tickers
            and np.array_equal(self.dates, other.dates)
            and np.array_equal(self.prices, other.prices, equal_nan=True)
        )


@dataclass(frozen=True)
class SplitPanel:
    train: PricePanel
    test: PricePanel
    split_index: int


def _parse_rows(text: str, source: str) -> PricePanel:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise MalformedRow(f"{source}: empty file") from None
    header = [h.strip() for h in header]
    if header and header[0].startswith("﻿"):
        header[0] = header[0][1:]
    if not header or header[0].lower() != "date":
        raise MalformedRow(f"{source}: first header must be 'date', got {header[:1]}")
    tickers = header[1:]
    if len(set(tickers)) != len(tickers) or any(not t for t in tickers):
        raise MalformedRow(f"{source}: empty or duplicate ticker in header")

    seen: dict = {}
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(header):
            raise MalformedRow(
                f"{source}:{lineno}: expected {len(header)} fields, got {len(row)}"
            )
        try:
            d = date.fromisoformat(row[0].strip())
        except ValueError:
            raise MalformedRow(f"{source}:{lineno}: bad date {row[0]!r}") from None
        if d in seen:
            raise DuplicateDate(f"{source}:{lineno}: date {d} repeats line {seen[d]}")
        seen[d] = lineno
        values = []
        for ticker, cell in zip(tickers, row[1:]):
            cell = cell.strip()
            if not cell:
                values.append(np.nan)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise MalformedRow(
                    f"{source}:{lineno}: bad price {cell!r} for {ticker}"
                ) from None
            if not np.isfinite(v) or v <= 0:
                raise NonPositivePrice(f"{source}:{lineno}: price {cell} for {ticker} on {d}")
            values.append(v)
        rows.append((d, values))

    rows.sort(key=lambda r: r[0])
    dates = np.array([r[0] for r in rows], dtype="datetime64[D]")
    prices = np.array([r[1] for r in rows], dtype=np.float64).reshape(len(rows), len(tickers))
    return PricePanel(dates, tuple(tickers), prices)


def load_csv(path) -> PricePanel:
    """Read a ``date,<ticker>...`` CSV; empty cells become NaN."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise MalformedRow(f"cannot read {path}: {exc}") from exc
    return _parse_rows(text, str(path))


def panel_to_csv(panel: PricePanel) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["date", *panel.tickers])
    for d, row in zip(panel.dates, panel.prices):
        w.writerow([str(d)] + ["" if np.isnan(v) else repr(float(v)) for v in row])
    return buf.getvalue()


def save_csv(panel: PricePanel, path) -> None:
    atomic_write_text(path, panel_to_csv(panel))


def impute(panel: PricePanel) -> tuple[PricePanel, list[str]]:
    """Fill interior gaps by linear interpolation, then drop incomplete series.

    Interpolation runs over row position (trading days), using the nearest
    known value on either side.  Leading and trailing gaps are never
    extrapolated; such a series is dropped and reported.
    """
    prices = np.array(panel.prices)
    keep, dropped = [], []
    pos = np.arange(panel.T, dtype=np.float64)
    for j, ticker in enumerate(panel.tickers):
        col = prices[:, j]
        missing = np.isnan(col)
        if missing.any():
            known = np.flatnonzero(~missing)
            if known.size:
                interior = missing & (pos > known[0]) & (pos < known[-1])
                col[interior] = np.interp(pos[interior], pos[known], col[known])
        if np.isnan(col).any():
            dropped.append(ticker)
        else:
            keep.append(j)
    if not keep:
        raise EmptyPanel(f"all {panel.N} series dropped during imputation")
    if dropped:
        log.info("impute dropped=%d tickers=%s", len(dropped), ",".join(dropped))
    clean = PricePanel(panel.dates, tuple(panel.tickers[j] for j in keep), prices[:, keep])
    return clean, dropped


def split_index(T: int, train_frac: float = 0.8) -> int:
    # Fraction(str(...)) keeps 0.8 * 2604 from drifting below an integer.
    return int(Fraction(str(train_frac)) * T // 1)


def split(panel: PricePanel, train_frac: float = 0.8, tau: int = 1) -> SplitPanel:
    """Chronological train/test split at ``floor(train_frac * T)``."""
    if not 0 < train_frac < 1:
        raise ValueError(f"train_frac must be in (0, 1), got {train_frac}")
    s = split_index(panel.T, train_frac)
    if s < tau + 2:
        raise PanelTooShort(
            f"training part has {s} rows; need at least tau + 2 = {tau + 2}"
        )
    if panel.T - s < 1:
        raise PanelTooShort("test part is empty")
    return SplitPanel(panel.rows(0, s), panel.rows(s, None), s)


# --------------------------------------------------------------------------
# remote fetch

_PRICE_COLUMNS = ("adj close", "adj_close", "adjclose", "close", "price")


def _parse_remote(text: str, ticker: str) -> dict:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise FetchError(f"{ticker}: empty response") from None
    if "date" not in header or len(header) < 2:
        raise FetchError(f"{ticker}: response has no date column")
    di = header.index("date")
    pi = next((header.index(c) for c in _PRICE_COLUMNS if c in header), None)
    if pi is None:
        pi = 1 if di == 0 else 0
    out = {}
    for row in reader:
        if not row:
            continue
        try:
            d = date.fromisoformat(row[di].strip())
            cell = row[pi].strip()
            v = float(cell) if cell and cell.lower() not in ("null", "nan") else np.nan
        except (ValueError, IndexError):
            raise FetchError(f"{ticker}: malformed response row {row!r}") from None
        out[d] = v
    return out


def _cache_name(ticker: str, start: str, end: str) -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in ticker)
    return f"{safe}__{start}__{end}.csv"


def fetch_remote(
    endpoint: str,
    tickers: Iterable[str],
    start: str,
    end: str,
    out_path,
    cache_dir=None,
    session=None,
    retries: int = 3,
    backoff: float = 0.5,
    max_backoff: float = 4.0,
    timeout: float = 30.0,
    threads: int = 4,
) -> tuple[Path, list[str]]:
    """Download one CSV per ticker, cache each, and merge into load_csv format.

    ``endpoint`` is a template with ``{ticker}``, ``{start}`` and ``{end}``
    fields.  A ticker already in the cache is never requested again.  HTTP
    4xx responses fail the ticker immediately; connection errors and 5xx are
    retried with capped exponential backoff.

    Returns the merged file path and the list of tickers that failed.
    """
    import requests

    tickers = list(dict.fromkeys(tickers))
    cache_dir = Path(cache_dir or os.environ.get(CACHE_ENV, ".causaltrade_cache"))
    out_path = Path(out_path)
    if not tickers:
        atomic_write_text(out_path, "date\n")
        return out_path, []

    cache_dir.mkdir(parents=True, exist_ok=True)
    cache_lock = threading.Lock()
    http = session or requests.Session()

    def one(ticker):
        cached = cache_dir / _cache_name(ticker, start, end)
        if cached.exists():
            return ticker, _parse_remote(cached.read_text(encoding="utf-8"), ticker)
        url = endpoint.format(ticker=ticker, start=start, end=end)
        delay = backoff
        for attempt in range(retries + 1):
            try:
                resp = http.get(url, timeout=timeout)
            except requests.RequestException as exc:
                err = f"{ticker}: {exc}"
            else:
                if resp.status_code == 200:
                    series = _parse_remote(resp.text, ticker)
                    with cache_lock:
                        atomic_write_text(cached, resp.text)
                    return ticker, series
                err = f"{ticker}: HTTP {resp.status_code}"
                if resp.status_code < 500:
                    raise FetchError(err)
            if attempt < retries:
                time.sleep(delay)
                delay = min(delay * 2, max_backoff)
        raise FetchError(err)

    def guarded(ticker):
        try:
            return one(ticker)
        except FetchError as exc:
            log.warning("fetch failed %s", exc)
            return ticker, None

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(guarded, tickers))

    failed = [t for t, s in results if s is None]
    ok = [(t, s) for t, s in results if s is not None]
    all_dates = sorted({d for _, s in ok for d in s})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["date", *(t for t, _ in ok)])
    for d in all_dates:
        cells = []
        for _, s in ok:
            v = s.get(d, np.nan)
            cells.append("" if np.isnan(v) else repr(float(v)))
        w.writerow([d.isoformat(), *cells])
    atomic_write_text(out_path, buf.getvalue())
    return out_path, failed
