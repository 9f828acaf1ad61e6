import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlparse

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causaltrade.errors import DuplicateDate, EmptyPanel, MalformedRow, NonPositivePrice, PanelTooShort
from causaltrade.market_data import (
    PricePanel,
    fetch_remote,
    impute,
    load_csv,
    panel_to_csv,
    split,
    split_index,
)


def write(tmp_path, text, name="p.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_three_days_two_tickers(tmp_path):
    p = write(tmp_path, "date,A,B\n2020-01-01,1,2\n2020-01-02,1.5,2.5\n2020-01-03,2,3\n")
    panel = load_csv(p)
    assert (panel.T, panel.N) == (3, 2)
    assert not panel.has_missing
    assert panel.tickers == ("A", "B")
    np.testing.assert_array_equal(panel.column("B"), [2, 2.5, 3])


def test_load_sorts_dates_and_accepts_crlf_and_bom(tmp_path):
    p = write(tmp_path, "﻿date,A\r\n2020-01-03,3\r\n2020-01-01,1\r\n2020-01-02,\r\n")
    panel = load_csv(p)
    assert [str(d) for d in panel.dates] == ["2020-01-01", "2020-01-02", "2020-01-03"]
    assert np.isnan(panel.prices[1, 0])


def test_duplicate_date_rejected(tmp_path):
    p = write(tmp_path, "date,A\n2020-01-01,1\n2020-01-01,2\n")
    with pytest.raises(DuplicateDate):
        load_csv(p)


@pytest.mark.parametrize("bad", ["-1.0", "0"])
def test_non_positive_price_rejected(tmp_path, bad):
    p = write(tmp_path, f"date,A\n2020-01-01,1\n2020-01-02,{bad}\n")
    with pytest.raises(NonPositivePrice):
        load_csv(p)


@pytest.mark.parametrize(
    "text",
    ["", "day,A\n2020-01-01,1\n", "date,A\n2020-01-01,1,2\n", "date,A\n01/02/2020,1\n", "date,A\n2020-01-01,abc\n"],
)
def test_malformed_input(tmp_path, text):
    with pytest.raises(MalformedRow):
        load_csv(write(tmp_path, text))


def test_unreadable_file(tmp_path):
    with pytest.raises(MalformedRow):
        load_csv(tmp_path / "missing.csv")


def panel_of(cols, start="2020-01-01"):
    arr = np.array(cols, dtype=float).T
    dates = np.arange(np.datetime64(start), np.datetime64(start) + arr.shape[0])
    return PricePanel(dates, tuple(f"T{i}" for i in range(arr.shape[1])), arr)


def test_impute_interior_gap():
    clean, dropped = impute(panel_of([[1.0, np.nan, 3.0]]))
    np.testing.assert_array_equal(clean.prices[:, 0], [1.0, 2.0, 3.0])
    assert dropped == []


def test_impute_drops_leading_and_trailing_gaps():
    clean, dropped = impute(panel_of([[np.nan, 2.0, 3.0], [1.0, 2.0, np.nan], [1.0, 1.0, 1.0]]))
    assert dropped == ["T0", "T1"]
    assert clean.tickers == ("T2",)


def test_impute_identity_without_gaps():
    p = panel_of([[1.0, 2.0], [3.0, 4.0]])
    clean, dropped = impute(p)
    assert clean == p and dropped == []


def test_impute_everything_dropped():
    with pytest.raises(EmptyPanel):
        impute(panel_of([[np.nan, 1.0]]))


def test_panel_is_immutable():
    p = panel_of([[1.0, 2.0]])
    with pytest.raises(ValueError):
        p.prices[0, 0] = 5.0


@pytest.mark.parametrize("T,train,test", [(1259, 1007, 252), (2513, 2010, 503), (2604, 2083, 521)])
def test_split_counts(T, train, test):
    assert split_index(T, 0.8) == train
    sp = split(panel_of([np.linspace(1, 2, T)]), 0.8)
    assert (sp.train.T, sp.test.T, sp.split_index) == (train, test, train)


def test_split_too_short():
    with pytest.raises(PanelTooShort):
        split(panel_of([[1.0, 2.0, 3.0, 4.0]]), 0.8, tau=2)


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        split(panel_of([np.ones(10)]), 1.0)


price_cols = st.lists(
    st.one_of(st.none(), st.floats(0.01, 1e6, allow_nan=False)), min_size=3, max_size=30
)


@settings(max_examples=60, deadline=None)
@given(st.lists(price_cols, min_size=1, max_size=5).filter(lambda cs: len({len(c) for c in cs}) == 1))
def test_impute_properties(cols):
    raw = panel_of([[np.nan if v is None else v for v in c] for c in cols])
    try:
        clean, dropped = impute(raw)
    except EmptyPanel:
        return
    assert len(dropped) + clean.N == raw.N
    assert not clean.has_missing and np.all(clean.prices > 0)
    again, dropped2 = impute(clean)
    assert again == clean and dropped2 == []
    for t in clean.tickers:
        known = ~np.isnan(raw.column(t))
        np.testing.assert_array_equal(clean.column(t)[known], raw.column(t)[known])


@settings(max_examples=60, deadline=None)
@given(st.integers(5, 400), st.sampled_from([0.5, 0.6, 0.7, 0.75, 0.8, 0.9]))
def test_split_properties(T, frac):
    p = panel_of([np.arange(1, T + 1, dtype=float)])
    try:
        sp = split(p, frac)
    except PanelTooShort:
        assert split_index(T, frac) < 3
        return
    assert sp.split_index == int(np.floor(round(frac * T, 9)))
    assert sp.train.dates[-1] < sp.test.dates[0]
    np.testing.assert_array_equal(np.vstack([sp.train.prices, sp.test.prices]), p.prices)
    np.testing.assert_array_equal(np.concatenate([sp.train.dates, sp.test.dates]), p.dates)


def test_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    p = panel_of(rng.uniform(1, 100, (3, 20)))
    path = write(tmp_path, panel_to_csv(p))
    assert load_csv(path) == p


# ---------------------------------------------------------------- fetch

SERIES = {
    "AAA": "Date,Open,Close\n2020-01-02,1,10\n2020-01-03,1,11\n",
    "BBB": "date,price\n2020-01-03,5\n2020-01-06,6\n",
}


@pytest.fixture
def server():
    calls = []

    class Handler(BaseHTTPRequestHandler):
        def do_GET(self):
            ticker = urlparse(self.path).path.strip("/").split("/")[0]
            calls.append(ticker)
            body = SERIES.get(ticker)
            if body is None:
                self.send_response(404)
                self.end_headers()
                return
            data = body.encode()
            self.send_response(200)
            self.send_header("Content-Type", "text/csv")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    url = f"http://127.0.0.1:{httpd.server_address[1]}/{{ticker}}/{{start}}/{{end}}"
    yield url, calls
    httpd.shutdown()
    httpd.server_close()


def test_fetch_merges_and_caches(server, tmp_path):
    url, calls = server
    out, failed = fetch_remote(url, ["AAA", "BBB"], "2020-01-01", "2020-01-31", tmp_path / "p.csv",
                               cache_dir=tmp_path / "cache", backoff=0.0)
    assert failed == []
    panel = load_csv(out)
    assert panel.tickers == ("AAA", "BBB")
    assert [str(d) for d in panel.dates] == ["2020-01-02", "2020-01-03", "2020-01-06"]
    np.testing.assert_array_equal(panel.column("AAA"), [10, 11, np.nan])
    assert sorted(calls) == ["AAA", "BBB"]

    calls.clear()
    out2, failed2 = fetch_remote(url, ["AAA", "BBB"], "2020-01-01", "2020-01-31", tmp_path / "q.csv",
                                 cache_dir=tmp_path / "cache")
    assert calls == [] and failed2 == []
    assert out2.read_text() == out.read_text()


def test_fetch_404_isolated(server, tmp_path):
    url, calls = server
    out, failed = fetch_remote(url, ["AAA", "ZZZ"], "2020-01-01", "2020-01-31", tmp_path / "p.csv",
                               cache_dir=tmp_path / "cache", backoff=0.0)
    assert failed == ["ZZZ"]
    assert load_csv(out).tickers == ("AAA",)
    assert calls.count("ZZZ") == 1  # client errors are not retried


def test_fetch_empty_ticker_list(server, tmp_path):
    url, calls = server
    out, failed = fetch_remote(url, [], "2020-01-01", "2020-01-31", tmp_path / "p.csv",
                               cache_dir=tmp_path / "cache")
    assert out.read_text() == "date\n" and failed == [] and calls == []


def test_fetch_retries_connection_errors(tmp_path):
    import requests

    class Flaky:
        def __init__(self):
            self.n = 0

        def get(self, url, timeout):
            self.n += 1
            if self.n < 3:
                raise requests.ConnectionError("down")
            resp = requests.Response()
            resp.status_code = 200
            resp._content = SERIES["AAA"].encode()
            return resp

    s = Flaky()
    out, failed = fetch_remote("http://x/{ticker}", ["AAA"], "a", "b", tmp_path / "p.csv",
                               cache_dir=tmp_path / "c", session=s, backoff=0.0, threads=1)
    assert failed == [] and s.n == 3


def test_fetch_gives_up_after_retries(tmp_path):
    import requests

    class Down:
        n = 0

        def get(self, url, timeout):
            Down.n += 1
            raise requests.ConnectionError("down")

    out, failed = fetch_remote("http://x/{ticker}", ["AAA"], "a", "b", tmp_path / "p.csv",
                               cache_dir=tmp_path / "c", session=Down(), retries=2, backoff=0.0)
    assert failed == ["AAA"] and Down.n == 3
