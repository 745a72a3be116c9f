import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voltide.errors import CalendarGapError, DataValidationError, DegenerateInputError
from voltide.market_data import (
    Bar, OhlcvSeries, adf_test, load_ohlcv_csv, rogers_satchell, rs_components, transform,
    validate_frame, winsorize, winsorize_training,
)

FIVE_ROWS = """date,open,high,low,close,volume
2024-01-01,100,110,95,105,1000
2024-01-02,105,108,101,102,1200
2024-01-03,102,104,99,103,900
2024-01-04,103,107,100,106,1100
2024-01-05,106,109,104,108,1300
"""


def _write(tmp_path, text, name="asset.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _frame(rows):
    return pd.DataFrame(rows, columns=["date", "open", "high", "low", "close", "volume"])


def test_load_five_rows(tmp_path):
    series = load_ohlcv_csv(_write(tmp_path, FIVE_ROWS))
    assert len(series) == 5
    assert series.asset_id == "asset"
    assert series.bars[0] == Bar(pd.Timestamp("2024-01-01"), 100, 110, 95, 105, 1000)


def test_load_sorts_unordered_rows(tmp_path):
    lines = FIVE_ROWS.strip().split("\n")
    text = "\n".join([lines[0]] + lines[:0:-1]) + "\n"
    series = load_ohlcv_csv(_write(tmp_path, text))
    assert series.dates.is_monotonic_increasing
    assert series.frame["close"].iloc[0] == 105


def test_column_mapping(tmp_path):
    text = FIVE_ROWS.replace("date,open,high,low,close,volume", "Date,Price Open,Hi,Lo,Price,Vol.")
    schema = {"date": "Date", "open": "Price Open", "high": "Hi", "low": "Lo",
              "close": "Price", "volume": "Vol."}
    series = load_ohlcv_csv(_write(tmp_path, text), schema, asset_id="btc")
    assert series.asset_id == "btc"
    assert series.frame["close"].tolist() == [105, 102, 103, 106, 108]


def test_calendar_gap_names_date(tmp_path):
    text = FIVE_ROWS.replace("2024-01-03,102,104,99,103,900\n", "")
    with pytest.raises(CalendarGapError, match="2024-01-03"):
        load_ohlcv_csv(_write(tmp_path, text))


def test_high_below_close_reports_row(tmp_path):
    text = FIVE_ROWS.replace("2024-01-04,103,107,100,106", "2024-01-04,103,105,100,106")
    with pytest.raises(DataValidationError, match="row 3"):
        load_ohlcv_csv(_write(tmp_path, text))


@pytest.mark.parametrize("old,new,what", [
    ("2024-01-02,105,108,101,102,1200", "2024-01-02,105,108,101,abc,1200", "unparsable"),
    ("2024-01-02,105,108,101,102,1200", "2024-01-02,-105,108,101,102,1200", "non-positive"),
    ("2024-01-02,105,108,101,102,1200", "2024-01-02,105,108,101,102,0", "volume"),
    ("2024-01-02,105,108,101,102,1200", "2024-01-02,105,100,101,102,1200", "row 1"),
    ("2024-01-03,102,104,99,103,900", "2024-01-02,102,104,99,103,900", "duplicate"),
])
def test_validation_errors(tmp_path, old, new, what):
    with pytest.raises(DataValidationError, match=what):
        load_ohlcv_csv(_write(tmp_path, FIVE_ROWS.replace(old, new)))


def test_missing_column(tmp_path):
    text = FIVE_ROWS.replace(",volume", "").replace(",1000\n", "\n")
    with pytest.raises(DataValidationError, match="volume"):
        load_ohlcv_csv(_write(tmp_path, "\n".join(l.rsplit(",", 1)[0] if i else l
                                                  for i, l in enumerate(text.split("\n")))))


def test_bar_validate():
    Bar(pd.Timestamp("2024-01-01"), 100, 110, 95, 105, 0).validate()
    with pytest.raises(DataValidationError):
        Bar(pd.Timestamp("2024-01-01"), 100, 104, 95, 105, 1).validate()


@pytest.mark.parametrize("o,h,l,c,up,down", [
    (100, 100, 100, 100, 0.0, 0.0),
    (110, 110, 95, 95, 0.0, 0.0),
    (100, 110, 95, 105, 0.06659, 0.07165),
])
def test_rogers_satchell_examples(o, h, l, c, up, down):
    res = rogers_satchell(Bar(pd.Timestamp("2024-01-01"), o, h, l, c, 1))
    assert res.sigma_up == pytest.approx(up, abs=5e-5)
    assert res.sigma_down == pytest.approx(down, abs=5e-5)


@st.composite
def bars(draw):
    o = draw(st.floats(1.0, 1000.0))
    c = draw(st.floats(1.0, 1000.0))
    h = max(o, c) * draw(st.floats(1.0, 1.5))
    l = min(o, c) / draw(st.floats(1.0, 1.5))
    return Bar(pd.Timestamp("2024-01-01"), o, h, l, c, 1.0)


@settings(max_examples=200, deadline=None)
@given(bars())
def test_components_square_to_rs_variance(bar):
    res = rogers_satchell(bar)
    h, l, o, c = bar.high, bar.low, bar.open, bar.close
    variance = math.log(h / c) * math.log(h / o) + math.log(l / c) * math.log(l / o)
    assert res.sigma_up ** 2 + res.sigma_down ** 2 == pytest.approx(variance, rel=1e-14, abs=1e-300)
    assert res.sigma_up >= 0 and res.sigma_down >= 0


def test_vectorised_components_match_scalar(tmp_path):
    series = load_ohlcv_csv(_write(tmp_path, FIVE_ROWS))
    comps = rs_components(series.frame)
    for bar, (_, row) in zip(series.bars, comps.iterrows()):
        ref = rogers_satchell(bar)
        assert row["sigma_up"] == pytest.approx(ref.sigma_up, rel=1e-14)
        assert row["sigma_down"] == pytest.approx(ref.sigma_down, rel=1e-14)


def _series(volumes, bars=None):
    n = len(volumes)
    dates = pd.date_range("2024-01-01", periods=n)
    rows = bars or [(100, 110, 95, 105)] * n
    frame = _frame([(d, *r, v) for d, r, v in zip(dates, rows, volumes)])
    return OhlcvSeries("x", validate_frame(frame, "x"))


def test_transform_volume_cases():
    out = transform(_series([5.0] * 6))
    assert set(out) == {"delta_log_volume", "delta_sigma_up", "delta_sigma_down"}
    assert np.all(out["delta_log_volume"].values == 0)
    assert len(out["delta_log_volume"].values) == 5
    doubling = transform(_series([1.0, 2.0, 4.0, 8.0]))["delta_log_volume"].values
    assert np.allclose(doubling, math.log(2.0), atol=1e-15)
    # identical bars give zero component changes
    assert np.all(out["delta_sigma_up"].values == 0)
    assert np.all(out["delta_sigma_down"].values == 0)


def test_transform_cumsum_recovers_log_volume():
    rng = np.random.default_rng(3)
    vols = np.exp(rng.normal(10, 1, 50))
    dv = transform(_series(vols))["delta_log_volume"].values.to_numpy()
    assert np.allclose(np.log(vols[0]) + np.cumsum(dv), np.log(vols[1:]), atol=1e-12)


def test_transform_needs_two_bars():
    with pytest.raises(DataValidationError):
        transform(_series([1.0]))


def test_transformed_csv(tmp_path):
    ts = transform(_series([1.0, 2.0, 4.0]))["delta_log_volume"]
    ts.to_csv(tmp_path / "out.csv")
    frame = pd.read_csv(tmp_path / "out.csv")
    assert list(frame.columns) == ["date", "value"]
    assert frame["date"].tolist() == ["2024-01-02", "2024-01-03"]
    assert frame["value"].iloc[0] == pytest.approx(math.log(2.0), rel=1e-15)


def test_winsorize_constant_and_inside():
    assert np.array_equal(winsorize(np.full(10, 3.0)), np.full(10, 3.0))
    x = np.linspace(0, 1, 11)
    assert np.array_equal(winsorize(x, 0.0, 1.0), x)


def test_winsorize_1_to_100():
    x = np.arange(1.0, 101.0)
    out = winsorize(x, 0.01, 0.99)
    # linear quantile: position q*(n-1) between order statistics
    lo = 1.0 + 0.01 * 99
    hi = 1.0 + 0.99 * 99
    assert out[0] == pytest.approx(lo, abs=1e-12)
    assert out[-1] == pytest.approx(hi, abs=1e-12)
    assert np.array_equal(out[1:-1], x[1:-1])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_winsorize_idempotent_on_order_statistics(blocks, seed):
    # with n = 100k + 1 both 1%/99% quantiles land exactly on order statistics
    x = np.random.default_rng(seed).standard_t(3, size=100 * blocks + 1)
    once = winsorize(x)
    assert np.array_equal(winsorize(once), once)
    assert once.shape == x.shape


def test_winsorize_linear_convention_is_not_a_fixed_point_in_general():
    once = winsorize(np.array([0.0, 1.0]))
    assert np.allclose(once, [0.01, 0.99])
    assert np.allclose(winsorize(once), [0.0198, 0.9802])


def test_winsorize_errors_and_types():
    with pytest.raises(ValueError):
        winsorize([])
    with pytest.raises(ValueError):
        winsorize([1.0, 2.0], 0.5, 0.4)
    s = pd.Series([1.0, 2.0, 100.0], index=list("abc"), name="v")
    out = winsorize(s, 0.0, 0.5)
    assert isinstance(out, pd.Series) and list(out.index) == list("abc") and out.name == "v"


def test_winsorize_training_leaves_test_window():
    idx = pd.date_range("2024-01-01", periods=200)
    s = pd.Series(np.arange(200.0), index=idx)
    s.iloc[-1] = 1e9
    out = winsorize_training(s, idx[99])
    assert out.iloc[-1] == 1e9
    assert np.array_equal(out.iloc[100:], s.iloc[100:])
    assert out.iloc[0] == pytest.approx(0.99)


def test_adf_size_and_power():
    stationary, unit_root = [], []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        e = rng.standard_normal(1000)
        ar = np.empty(1000)
        ar[0] = e[0]
        for t in range(1, 1000):
            ar[t] = 0.5 * ar[t - 1] + e[t]
        stationary.append(adf_test(ar)[1])
        unit_root.append(adf_test(np.cumsum(e))[1])
    assert max(stationary) < 0.01
    # p-values are near uniform under the unit root, so 90% above 0.10 is the
    # expected rate; 100 seeds keep the binomial noise well inside the margin
    unit_root = np.array(unit_root)
    assert np.mean(unit_root > 0.10) >= 0.85
    assert np.mean(unit_root < 0.05) <= 0.10


def test_adf_errors():
    with pytest.raises(DegenerateInputError):
        adf_test(np.ones(100))
    with pytest.raises(ValueError):
        adf_test(np.arange(30.0))
