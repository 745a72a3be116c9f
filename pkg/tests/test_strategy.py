import math

import numpy as np
import pandas as pd
import pytest

from voltide.errors import DataValidationError
from voltide.market_data import OhlcvSeries, validate_frame
from voltide.strategy import (
    StrategyData, account, downside_deviation, max_drawdown, net_volatility_signal,
    pc_ratio_weights, performance_metrics, run_strategy_backtest, signal_z_score, size_position,
)

UP = [0.4968, 0.5290, 0.5533, 0.4089]
DOWN = [0.4912, 0.5099, 0.5203, 0.4774]


def test_signal_examples():
    assert net_volatility_signal(0.02, 0.02, 0.0, 0.0).signal == 0.0
    s = net_volatility_signal(0.02, 0.015, 0.01, -0.005)
    assert (s.sigma_up_hat, s.sigma_down_hat) == pytest.approx((0.03, 0.01))
    assert s.signal == pytest.approx(0.5, abs=1e-15)
    assert s.sigma_daily_hat == pytest.approx(0.04, abs=1e-15)
    assert net_volatility_signal(0.02, 0.01, 0.0, -0.05).signal == 1.0
    flat = net_volatility_signal(0.01, 0.01, -0.02, -0.03)
    assert flat.degenerate and flat.signal == 0.0


def test_pc_ratio_weights():
    w = pc_ratio_weights(UP, DOWN)
    assert np.allclose(w, [0.2548, 0.2614, 0.2679, 0.2158], atol=5e-4)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(pc_ratio_weights([0.3, 0.6], [0.3, 0.6]), [0.5, 0.5])
    assert np.array_equal(pc_ratio_weights([0.7], [0.2]), [1.0])
    assert np.allclose(pc_ratio_weights(np.array(UP) * 7.3, np.array(DOWN) * 7.3), w, atol=1e-15)
    with pytest.raises(DataValidationError):
        pc_ratio_weights([0.5, -0.1], [0.5, 0.5])


def test_size_position():
    base, mult, total = size_position(0.20 / math.sqrt(366), 0.20, 366, 0.0)
    assert base == pytest.approx(1.0, abs=1e-15) and total == pytest.approx(1.0, abs=1e-15)
    base, _, _ = size_position(0.02, 0.20)
    assert base == pytest.approx(0.5227, abs=5e-5)
    assert size_position(0.02, 0.40)[0] == 2 * base
    assert size_position(0.02, 0.20, z_score=1.0)[1] == pytest.approx(1.7616, abs=5e-5)
    assert size_position(0.02, 0.20, z_score=50.0)[1] == pytest.approx(2.0)
    assert size_position(0.02, 0.20, z_score=None)[1] == 1.0
    with pytest.raises(ValueError):
        size_position(0.0, 0.2)


def test_z_score():
    assert signal_z_score(0.5, [0.1] * 59) is None
    hist = list(np.linspace(-1, 1, 60))
    assert signal_z_score(0.5, hist) == pytest.approx((0.5 - np.mean(hist)) / np.std(hist))
    assert signal_z_score(0.5, [0.2] * 60) == 0.0


def test_two_day_ledger_by_hand():
    w = np.array([[0.6, 0.4], [0.5, 0.5]])
    e = np.array([0.8, 1.2])
    r = np.array([[0.01, -0.02], [0.03, 0.01]])
    book = account(w, e, r, cost_bp=1.0)
    t0 = 0.8 * 0.6 + 0.8 * 0.4
    t1 = abs(1.2 * 0.5 - 0.8 * 0.6) + abs(1.2 * 0.5 - 0.8 * 0.4)
    n0 = 0.8 * (0.6 * 0.01 - 0.4 * 0.02) - 1e-4 * t0
    n1 = 1.2 * (0.5 * 0.03 + 0.5 * 0.01) - 1e-4 * t1
    assert book["turnover"].tolist() == pytest.approx([t0, t1], abs=1e-15)
    assert book["equity"].iloc[-1] == pytest.approx((1 + n0) * (1 + n1), abs=1e-12)
    ratio = book["equity"] / book["equity"].shift(fill_value=1.0)
    ident = 1 + book["exposure"] * book["weighted_return"] - book["cost"]
    assert np.allclose(ratio, ident, atol=1e-12)


def test_metrics_examples():
    assert max_drawdown([1, 1.2, 0.9, 1.1]) == pytest.approx(-0.25)
    assert max_drawdown([1, 1.1, 1.2]) == 0.0
    assert downside_deviation([0.10, -0.05, 0.02, -0.01]) == pytest.approx(0.025495, abs=5e-7)
    perf = performance_metrics([0.10, -0.05, 0.02, -0.01], 366)
    growth = 1.10 * 0.95 * 1.02 * 0.99
    assert perf.ann_return == pytest.approx(growth ** (366 / 4) - 1)
    assert perf.sortino == pytest.approx(perf.ann_return / (0.0254951 * math.sqrt(366)), rel=1e-5)
    assert performance_metrics([0.01, 0.02]).sortino_flag == "+inf"
    flat = performance_metrics(np.zeros(10))
    assert flat.ann_return == 0 and flat.max_drawdown == 0 and flat.sortino_flag == "degenerate"
    with pytest.raises(ValueError):
        performance_metrics([0.1])


def test_metric_invariants():
    rng = np.random.default_rng(0)
    for _ in range(20):
        r = rng.normal(0, 0.03, 100)
        perf = performance_metrics(r)
        assert -1 <= perf.max_drawdown <= 0
        assert np.sign(perf.sortino) == np.sign(perf.ann_return)


def _bars(asset, closes):
    n = len(closes)
    closes = np.asarray(closes, dtype=float)
    opens = np.concatenate([[closes[0]], closes[:-1]])
    frame = pd.DataFrame({
        "date": pd.date_range("2024-01-01", periods=n), "open": opens, "close": closes,
        "high": np.maximum(opens, closes) * 1.01, "low": np.minimum(opens, closes) * 0.99,
        "volume": 1.0,
    })
    return OhlcvSeries(asset, validate_frame(frame, asset))


def _records(origins, assets, y_hat, scale=1.0, offset=0.0, load=0.5):
    frame = pd.DataFrame({"origin": origins, "y_hat_benchmark": y_hat, "y_hat_challenger": y_hat,
                          "bridge_scale": scale, "bridge_offset": offset})
    for a in assets:
        frame[f"loading_{a}"] = load
    return frame


def _data(closes, y_up=0.0, y_down=0.0, n_origins=None):
    bars = {a: _bars(a, c) for a, c in closes.items()}
    n = len(next(iter(closes.values())))
    origins = pd.date_range("2024-01-01", periods=n - 1)[40:n_origins]
    fc = (_records(origins, list(bars), y_up), _records(origins, list(bars), y_down))
    return StrategyData(bars, {"benchmark": fc, "challenger": fc}, origins)


def test_zero_return_paths():
    data = _data({"a": np.full(120, 10.0), "b": np.full(120, 5.0)})
    for variant in ("benchmark", "naive", "buy_and_hold"):
        led = run_strategy_backtest(data, variant, 0.2, cost_bp=0.0)
        assert np.all(led.rows["equity"] == 1.0)
        assert led.performance.ann_return == 0 and led.performance.max_drawdown == 0
        assert led.performance.sortino_flag == "degenerate"


def test_buy_and_hold_matches_equal_weight_equity():
    rng = np.random.default_rng(1)
    closes = {a: 100 * np.exp(np.cumsum(rng.normal(0, 0.02, 150))) for a in "abc"}
    data = _data(closes)
    led = run_strategy_backtest(data, "buy_and_hold", 0.2, cost_bp=0.0)
    rets = pd.DataFrame(closes, index=pd.date_range("2024-01-01", periods=150)).pct_change()
    eq = np.cumprod(1 + rets.loc[led.rows["date"]].mean(axis=1).to_numpy())
    # equal up to summation order (w*r summed vs the row mean)
    assert np.allclose(led.rows["equity"].to_numpy(), eq, rtol=1e-14, atol=0)
    costly = run_strategy_backtest(data, "buy_and_hold", 0.2, cost_bp=1.0)
    assert costly.rows["cost"].iloc[0] == pytest.approx(1e-4) and np.all(costly.rows["cost"].iloc[1:] == 0)


def test_signal_variant_scaling_and_accounting():
    rng = np.random.default_rng(2)
    closes = {a: 100 * np.exp(np.cumsum(rng.normal(0, 0.02, 200))) for a in "ab"}
    data = _data(closes, y_up=0.001, y_down=-0.001)
    low = run_strategy_backtest(data, "benchmark", 0.2)
    high = run_strategy_backtest(data, "benchmark", 0.4)
    assert np.allclose(high.rows["exposure"], 2 * low.rows["exposure"], rtol=1e-14)
    assert high.performance.ann_vol > low.performance.ann_vol
    sig = low.signals
    assert np.allclose(sig["sigma_daily_hat"], sig["sigma_up_hat"] + sig["sigma_down_hat"])
    # multiplier is 1 until 60 signals have accumulated
    comp = data.component_means()
    first = sig.iloc[0]
    base = 0.2 / (first["sigma_daily_hat"] * math.sqrt(366))
    assert low.rows["exposure"].iloc[0] == pytest.approx(base, rel=1e-14)
    assert first["sigma_up_bar"] == comp.loc[first["origin"], "up"]
    book = low.rows
    ratio = book["equity"] / book["equity"].shift(fill_value=1.0)
    assert np.allclose(ratio, 1 + book["exposure"] * book["weighted_return"] - book["cost"],
                       atol=1e-12)
    assert np.allclose(book[["w_a", "w_b"]].sum(axis=1), 1.0)


def test_degenerate_signal_goes_flat_and_missing_forecast_stops():
    rng = np.random.default_rng(3)
    closes = {a: 100 * np.exp(np.cumsum(rng.normal(0, 0.02, 120))) for a in "ab"}
    data = _data(closes, y_up=-5.0, y_down=-5.0)
    led = run_strategy_backtest(data, "challenger", 0.2)
    assert np.all(led.rows["exposure"] == 0) and led.signals["degenerate"].all()
    up, down = data.forecasts["benchmark"]
    data.forecasts["benchmark"] = (up.iloc[:30], down)
    part = run_strategy_backtest(data, "benchmark", 0.2)
    assert len(part.rows) == 30 and part.error.startswith(str(data.origins[30].date()))
    with pytest.raises(ValueError):
        run_strategy_backtest(data, "momentum", 0.2)
