import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from voltide.forecast_backtest import (
    FeatureSpec, MseConfig, build_features, dm_test, feature_matrix, origins_for,
    run_mse_backtest, track_factor,
)
from voltide.gbt import GbtHyperParams
from voltide.simulate import lead_lag_panels

# ten hand-picked squared errors, repeated three times to meet the 30-point minimum
LB10 = [1.20, 0.40, 2.10, 0.90, 1.60, 0.30, 1.10, 2.50, 0.70, 1.40]
LC10 = [0.80, 0.50, 1.30, 0.60, 1.70, 0.20, 0.90, 1.80, 0.75, 1.00]


def direct_dm(lb, lc):
    d = [b - c for b, c in zip(lb, lc)]
    n = len(d)
    mean = sum(d) / n
    var = sum((x - mean) ** 2 for x in d) / n
    dm = mean / math.sqrt(var / n)
    return dm, dm * math.sqrt((n - 1) / n)


def test_dm_hand_series():
    lb, lc = LB10 * 3, LC10 * 3
    rep = dm_test(lb, lc)
    dm, hln = direct_dm(lb, lc)
    assert rep.dm_stat == pytest.approx(dm, abs=1e-12)
    assert rep.dm_hln == pytest.approx(hln, abs=1e-12)
    assert rep.p_value == pytest.approx(stats.t.sf(hln, 29), abs=1e-12)
    assert rep.adjustment == "none" and rep.n == 30 and not rep.degenerate


def test_clark_west_dominates_plain():
    rng = np.random.default_rng(0)
    y = rng.standard_normal(200)
    pb, pc = 0.1 * rng.standard_normal(200), 0.3 * rng.standard_normal(200)
    eb, ec = y - pb, y - pc
    plain = dm_test(eb ** 2, ec ** 2)
    cw = dm_test(eb ** 2, ec ** 2, nested=True, pred_benchmark=pb, pred_challenger=pc)
    d_cw = eb ** 2 - (ec ** 2 - (pb - pc) ** 2)
    assert np.all(d_cw >= eb ** 2 - ec ** 2)
    assert cw.mean_diff == pytest.approx(d_cw.mean(), abs=1e-15)
    assert cw.dm_stat > plain.dm_stat and cw.adjustment == "clark_west"


def test_dm_degenerate_and_errors():
    rng = np.random.default_rng(1)
    y, p = rng.standard_normal(60), rng.standard_normal(60)
    e = (y - p) ** 2
    rep = dm_test(e, e, nested=True, pred_benchmark=p, pred_challenger=p)
    assert rep.degenerate and rep.p_value == 1.0
    with pytest.raises(ValueError):
        dm_test(e[:20], e[:20])
    with pytest.raises(ValueError):
        dm_test(e, e[:-1])
    with pytest.raises(ValueError):
        dm_test(e, e, nested=True)


def test_hln_shrinks_statistic():
    rng = np.random.default_rng(2)
    for n in (30, 100, 1000):
        rep = dm_test(rng.chisquare(1, n), rng.chisquare(1, n))
        assert abs(rep.dm_hln) < abs(rep.dm_stat)
        assert rep.dm_hln == pytest.approx(rep.dm_stat * math.sqrt((n - 1) / n), rel=1e-14)


def test_dm_size():
    rng = np.random.default_rng(3)
    rejections = [dm_test(rng.standard_normal(250) ** 2, rng.standard_normal(250) ** 2).p_value < 0.05
                  for _ in range(500)]
    assert 0.02 <= np.mean(rejections) <= 0.09


def test_dm_newey_west_lag():
    rng = np.random.default_rng(4)
    lb, lc = rng.chisquare(1, 80), rng.chisquare(1, 80)
    d = lb - lc
    dev = d - d.mean()
    lrv = dev @ dev / 80 + 2 * dev[1:] @ dev[:-1] / 80
    rep = dm_test(lb, lc, horizon=2)
    assert rep.std_error == pytest.approx(math.sqrt(lrv / 80), rel=1e-12)


def _channels(values, name="f"):
    idx = pd.date_range("2022-01-01", periods=len(values))
    return pd.DataFrame({(name, "uniform_residual"): values,
                         (name, "conditional_volatility"): np.full(len(values), 0.5)}, index=idx)


def test_features_constant_and_ramp():
    spec = FeatureSpec.for_factors(["f"])
    ramp = np.arange(1.0, 61.0)
    row = build_features(_channels(ramp), spec, "2022-03-01")  # the 60th day, value 60
    # the row predicts the next day, so lag k counts back from that target day
    assert row["f:u:lag1"] == 60 and row["f:u:lag7"] == 54 and row["f:u:lag30"] == 31
    assert row["f:u:ma7"] == 57.0  # midpoint of the 7 values ending on the row date
    assert row["f:u:ma30"] == 45.5
    assert np.all(row.filter(like=":vol:").to_numpy() == 0.5)
    assert len(spec.names) == 10
    with pytest.raises(ValueError):
        build_features(_channels(ramp[:20]), spec, "2022-01-20")


def test_features_no_lookahead():
    spec = FeatureSpec.for_factors(["f"])
    values = np.random.default_rng(5).standard_normal(120)
    short = feature_matrix(_channels(values[:80]), spec)
    full = feature_matrix(_channels(values), spec)
    assert short.index[0] == pd.Timestamp("2022-01-30")
    assert np.array_equal(full.loc[short.index].to_numpy(), short.to_numpy())


FAST = dict(refit_every=10, hyperparams=GbtHyperParams(n_trees=40, max_depth=2), garch_starts=2)


def _factor_panels(seed, n_days=460):
    raw = lead_lag_panels(n_days, seed, start="2021-01-01")
    return {"s": raw["stable"], "c": raw["crypto"]}


@pytest.fixture(scope="module")
def small_run():
    panels = _factor_panels(0)
    cfg = MseConfig(train_end="2022-01-31", test_end="2022-04-05", seed=1, **FAST)
    return panels, cfg, run_mse_backtest(panels, ("s", "c"), cfg)


def test_backtest_records(small_run):
    panels, cfg, res = small_run
    rec = res.records
    assert len(rec) == len(origins_for(panels["s"].index, cfg)) == 64
    for tag in ("benchmark", "challenger", "egarch"):
        assert np.array_equal(rec[f"e_{tag}"], rec["y_true"] - rec[f"y_hat_{tag}"])
    assert res.mse_reduction == pytest.approx(100 * (1 - res.mse_challenger / res.mse_benchmark))
    assert res.mse_reduction > 0
    assert res.dm.adjustment == "clark_west" and res.dm.p_value < 0.05
    assert res.importance["feature"].iloc[0].startswith("s:u:")
    assert res.error is None
    assert (rec["date"] - rec["origin"] == pd.Timedelta(days=1)).all()
    summary = res.summary()
    assert summary["causer"] == "s" and summary["n_forecasts"] == 64


def test_backtest_no_lookahead(small_run):
    panels, cfg, res = small_run
    cut = pd.Timestamp("2022-03-10")
    truncated = {k: v.loc[:cut] for k, v in panels.items()}
    short = run_mse_backtest(truncated, ("s", "c"), cfg).records
    assert len(short) == 38
    cols = [c for c in short.columns]
    pd.testing.assert_frame_equal(short, res.records.iloc[:len(short)][cols].reset_index(drop=True),
                                  check_exact=True)


def test_identical_feature_sets_give_zero_reduction():
    panels = _factor_panels(2, 440)
    cfg = MseConfig(train_end="2022-01-31", test_end="2022-03-10", challenger_sources=("c",), **FAST)
    res = run_mse_backtest(panels, ("s", "c"), cfg)
    assert res.mse_reduction == 0.0
    assert np.array_equal(res.records["y_hat_benchmark"], res.records["y_hat_challenger"])
    assert res.dm.degenerate and res.dm.p_value == 1.0


def test_track_factor_refit_schedule():
    panels = _factor_panels(3, 430)
    cfg = MseConfig(train_end="2022-01-31", test_end="2022-03-05", **FAST)
    snaps = track_factor(panels["c"], "c", cfg)
    assert [s.refit for s in snaps[:11]] == [True] + [False] * 9 + [True]
    assert snaps[0].channels.index[-1] == snaps[0].origin
    assert snaps[1].params is snaps[0].params


def test_stage_failure_yields_partial_report(small_run, monkeypatch):
    from voltide import forecast_backtest as fb
    panels, cfg, res = small_run
    real, calls = fb.predict, {"n": 0}

    def flaky(model, x):
        calls["n"] += 1
        if calls["n"] > 64 + 40:  # the benchmark path runs first, then the challenger
            raise ValueError("feature matrix has missing or non-finite values")
        return real(model, x)

    monkeypatch.setattr(fb, "predict", flaky)
    part = run_mse_backtest(panels, ("s", "c"), cfg)
    assert len(part.records) == 40
    assert part.error.startswith("2022-03-12:")
    pd.testing.assert_frame_equal(part.records, res.records.iloc[:40], check_exact=True)
