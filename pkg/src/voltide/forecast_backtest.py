"""Expanding-window GARCH-copula-GBT forecast backtest and Diebold-Mariano tests.

Per out-of-sample origin day ``t`` each factor is represented by its PC1
score, filtered through AR(1)-EGARCH, and mapped to uniform residuals with
the fitted skewed-t CDF. A boosted-tree model learns the next day's uniform
residual of the target factor from lagged residuals and volatilities; its
prediction is pushed back through the inverse PIT and the mean/volatility
equations to give a forecast of the factor value at ``t + 1``.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from . import egarch
from .errors import NumericalError, VoltideError
from .factors import PcaModel, expanding_pca
from .gbt import GbtHyperParams, GbtModel, default_grid, fit_gbt, predict, tune
from .market_data import winsorize_training

logger = logging.getLogger(__name__)

CHANNELS = {"uniform_residual": "u", "conditional_volatility": "vol"}
U_CLIP = 1e-6
WARM_STARTS = 2


@dataclass(frozen=True)
class FeatureSpec:
    sources: tuple[tuple[str, str], ...]
    lags: tuple[int, ...] = (1, 7, 30)
    moving_averages: tuple[int, ...] = (7, 30)

    @classmethod
    def for_factors(cls, factors: Sequence[str], lags=(1, 7, 30), moving_averages=(7, 30)):
        sources = tuple((f, ch) for f in factors for ch in CHANNELS)
        return cls(sources, tuple(lags), tuple(moving_averages))

    @property
    def history_needed(self) -> int:
        return max(max(self.lags), max(self.moving_averages))

    @property
    def names(self) -> list[str]:
        out = []
        for factor, channel in self.sources:
            stem = f"{factor}:{CHANNELS[channel]}"
            out += [f"{stem}:lag{k}" for k in self.lags]
            out += [f"{stem}:ma{w}" for w in self.moving_averages]
        return out


def _channel_features(values: np.ndarray, lags, windows) -> list[np.ndarray]:
    """Lag-k value is the observation k-1 days before the row's date; MAs end on it."""
    n = values.size
    cols = []
    for k in lags:
        col = np.full(n, np.nan)
        col[k - 1:] = values[: n - k + 1]
        cols.append(col)
    for w in windows:
        col = np.full(n, np.nan)
        if n >= w:
            col[w - 1:] = np.lib.stride_tricks.sliding_window_view(values, w).mean(axis=1)
        cols.append(col)
    return cols


def feature_matrix(channels: pd.DataFrame, spec: FeatureSpec) -> pd.DataFrame:
    """Feature rows for every date with enough history; row ``t`` uses data <= t only.

    ``channels`` has one column per ``(factor, channel)`` pair in ``spec.sources``.
    """
    cols = []
    for source in spec.sources:
        cols += _channel_features(channels[source].to_numpy(dtype=float), spec.lags,
                                  spec.moving_averages)
    frame = pd.DataFrame(np.column_stack(cols), index=channels.index, columns=spec.names)
    return frame.iloc[spec.history_needed - 1:]


def build_features(channels: pd.DataFrame, spec: FeatureSpec, as_of) -> pd.Series:
    as_of = pd.Timestamp(as_of)
    hist = channels.loc[:as_of]
    if len(hist) < spec.history_needed or hist.index[-1] != as_of:
        raise ValueError(f"insufficient history for features as of {as_of.date()}")
    return feature_matrix(hist.iloc[-spec.history_needed:], spec).iloc[-1]


@dataclass
class DmReport:
    dm_stat: float
    dm_hln: float
    p_value: float
    mean_diff: float
    std_error: float
    adjustment: str
    n: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def dm_test(loss_benchmark, loss_challenger, horizon: int = 1, nested: bool = False,
            pred_benchmark=None, pred_challenger=None) -> DmReport:
    """One-sided test that the challenger's expected loss is lower.

    With ``nested`` the Clark-West adjusted differential is used, which needs
    both models' predictions. The long-run variance is Newey-West with
    ``horizon - 1`` lags; the statistic gets the Harvey-Leybourne-Newbold
    small-sample correction and a Student-t(T-1) reference.
    """
    lb = np.asarray(loss_benchmark, dtype=float)
    lc = np.asarray(loss_challenger, dtype=float)
    if lb.shape != lc.shape or lb.ndim != 1:
        raise ValueError("loss series must be 1-d and of equal length")
    n = lb.size
    if n < 30:
        raise ValueError(f"DM test needs at least 30 observations, got {n}")
    d = lb - lc
    if nested:
        if pred_benchmark is None or pred_challenger is None:
            raise ValueError("the Clark-West adjustment needs both prediction series")
        gap = np.asarray(pred_benchmark, dtype=float) - np.asarray(pred_challenger, dtype=float)
        d = lb - (lc - gap * gap)
    adjustment = "clark_west" if nested else "none"
    dbar = float(np.mean(d))
    if np.ptp(d) == 0:
        return DmReport(0.0, 0.0, 1.0, dbar, 0.0, adjustment, n, degenerate=True)
    dev = d - dbar
    lrv = float(np.dot(dev, dev)) / n
    for k in range(1, horizon):
        lrv += 2.0 * float(np.dot(dev[k:], dev[:-k])) / n
    if lrv <= 0:
        return DmReport(0.0, 0.0, 1.0, dbar, 0.0, adjustment, n, degenerate=True)
    se = math.sqrt(lrv / n)
    dm = dbar / se
    h = horizon
    hln = dm * math.sqrt((n + 1 - 2 * h + h * (h - 1) / n) / n)
    return DmReport(dm, hln, float(stats.t.sf(hln, n - 1)), dbar, se, adjustment, n)


@dataclass(frozen=True)
class MseConfig:
    train_end: pd.Timestamp
    test_end: pd.Timestamp
    refit_every: int = 1
    lags: tuple[int, ...] = (1, 7, 30)
    moving_averages: tuple[int, ...] = (7, 30)
    grid: tuple[GbtHyperParams, ...] | None = None
    n_folds: int = 5
    hyperparams: GbtHyperParams | None = None  # skips tuning when set
    garch_starts: int = 5
    winsor: tuple[float, float] | None = (0.01, 0.99)
    challenger_sources: tuple[str, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "train_end", pd.Timestamp(self.train_end))
        object.__setattr__(self, "test_end", pd.Timestamp(self.test_end))
        if self.refit_every < 1:
            raise ValueError("refit_every must be >= 1")


@dataclass
class FactorSnapshot:
    """What is known about one factor at the close of an origin day."""

    origin: pd.Timestamp
    pca: PcaModel
    params: egarch.EgarchParams
    channels: pd.DataFrame  # columns u, vol, z; dates <= origin
    last_value: float
    y_next: float  # realised factor value on the next day under this origin's PCA
    refit: bool


def prepare_panel(panel: pd.DataFrame, cfg: MseConfig) -> pd.DataFrame:
    if cfg.winsor is None:
        return panel.astype(float)
    lo, hi = cfg.winsor
    return panel.apply(lambda s: winsorize_training(s, cfg.train_end, lo, hi))


def origins_for(index: pd.DatetimeIndex, cfg: MseConfig) -> pd.DatetimeIndex:
    if cfg.train_end not in index:
        raise ValueError(f"training end {cfg.train_end.date()} missing from data")
    mask = (index >= cfg.train_end) & (index < cfg.test_end)
    origins = index[mask]
    return origins[origins + pd.Timedelta(days=1) <= index[-1]]


def is_refit_day(origin: pd.Timestamp, cfg: MseConfig) -> bool:
    return (origin - cfg.train_end).days % cfg.refit_every == 0


def _seed_for(*parts) -> int:
    words = [zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def track_factor(panel: pd.DataFrame, factor_id: str, cfg: MseConfig) -> list[FactorSnapshot]:
    """Expanding-window PCA and E-GARCH state for every origin of the backtest.

    Between refit days the PCA model and GARCH parameters stay fixed and the
    filter simply runs over the longer history.
    """
    panel = prepare_panel(panel, cfg)
    origins = origins_for(panel.index, cfg)
    refits = [o for o in origins if is_refit_day(o, cfg)]
    snapshots: list[FactorSnapshot] = []
    pca_prev: PcaModel | None = None
    params_prev: egarch.EgarchParams | None = None
    for j, refit_day in enumerate(refits):
        block_end = refits[j + 1] if j + 1 < len(refits) else origins[-1] + pd.Timedelta(days=1)
        block = origins[(origins >= refit_day) & (origins < block_end)]
        try:
            pca = expanding_pca(panel.loc[:refit_day], factor_id, pca_prev)
            scores_fit = pca.transform(panel.loc[:refit_day])
            # a week of new data barely moves the optimum, so warm refits need fewer starts
            n_starts = cfg.garch_starts if params_prev is None else min(WARM_STARTS, cfg.garch_starts)
            params, _ = egarch.fit_egarch(scores_fit.to_numpy(),
                                          seed=_seed_for(cfg.seed, factor_id, refit_day.date()),
                                          n_starts=n_starts, start=params_prev)
        except VoltideError as exc:
            raise NumericalError(f"{factor_id}: {exc}", stage="mse", date=refit_day.date()) from exc
        log_var0 = math.log(np.var(scores_fit.to_numpy(), ddof=1))
        horizon_end = block[-1] + pd.Timedelta(days=1)
        scores = pca.transform(panel.loc[:horizon_end])
        z, lv = egarch._filter_kernel(scores.to_numpy(), params.mu, params.phi, params.omega,
                                      params.alpha, params.beta, params.gamma, params.e_abs_z,
                                      log_var0, 0.0)
        chan = pd.DataFrame({"u": egarch.pit(z, params.dist), "vol": np.exp(0.5 * lv), "z": z},
                            index=scores.index[1:])
        for origin in block:
            upto = chan.loc[:origin]
            snapshots.append(FactorSnapshot(origin, pca, params, upto,
                                            float(scores.loc[origin]),
                                            float(scores.loc[origin + pd.Timedelta(days=1)]),
                                            origin == refit_day))
        pca_prev, params_prev = pca, params
        logger.debug("%s refit %s: nu=%.2f xi=%.2f", factor_id, refit_day.date(),
                     params.dist.nu, params.dist.xi)
    return snapshots


def _one_step(snap: FactorSnapshot) -> tuple[float, float]:
    """Mean and volatility forecasts for the day after ``snap.origin``."""
    last = snap.channels.iloc[-1]
    state = egarch.FilterState(float(last["vol"]), snap.last_value, float(last["z"]),
                               snap.channels["z"].iloc[-1:], snap.channels["vol"].iloc[-1:])
    return egarch.forecast_one_step(snap.params, state)


@dataclass
class MseBacktestResult:
    pair: tuple[str, str]
    records: pd.DataFrame
    mse_benchmark: float
    mse_challenger: float
    mse_egarch: float
    mse_reduction: float
    reduction_vs_egarch: float
    dm: DmReport | None
    dm_plain: DmReport | None
    dm_egarch: DmReport | None
    hyperparams: dict
    importance: pd.DataFrame
    refit_every: int
    error: str | None = None
    context: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        rep = lambda d: None if d is None else d.to_dict()
        return {
            "causer": self.pair[0], "target": self.pair[1],
            "n_forecasts": int(len(self.records)),
            "mse_benchmark": self.mse_benchmark, "mse_challenger": self.mse_challenger,
            "mse_egarch": self.mse_egarch,
            "mse_reduction_pct": self.mse_reduction,
            "mse_reduction_vs_egarch_pct": self.reduction_vs_egarch,
            "dm_clark_west": rep(self.dm), "dm_plain": rep(self.dm_plain),
            "dm_vs_egarch": rep(self.dm_egarch),
            "hyperparams": self.hyperparams, "refit_every": self.refit_every,
            "error": self.error,
        }


def _training_set(channels: pd.DataFrame, spec: FeatureSpec, target: str):
    feats = feature_matrix(channels, spec)
    y_next = channels[(target, "uniform_residual")].shift(-1)
    rows = feats.index.intersection(y_next.dropna().index)
    return feats.loc[rows], y_next.loc[rows].to_numpy()


def _stack_channels(snaps: dict[str, FactorSnapshot]) -> pd.DataFrame:
    cols = {}
    for factor, snap in snaps.items():
        cols[(factor, "uniform_residual")] = snap.channels["u"]
        cols[(factor, "conditional_volatility")] = snap.channels["vol"]
    return pd.DataFrame(cols).dropna()


def _reduction(mse_ref: float, mse_new: float) -> float:
    return 100.0 * (1.0 - mse_new / mse_ref) if mse_ref > 0 else 0.0


@dataclass
class _GbtPath:
    """One model's copula-space forecasts over the backtest origins."""

    u_hat: list[float]
    hyperparams: GbtHyperParams | None
    importance: pd.DataFrame
    error: str | None


def _gbt_path(tracks: dict[str, list[FactorSnapshot]], factors: Sequence[str], target: str,
              cfg: MseConfig, seed: int, n_orig: int) -> _GbtPath:
    """Refit on refit days, predict the next uniform residual of ``target`` every origin."""
    spec = FeatureSpec.for_factors(factors, cfg.lags, cfg.moving_averages)
    hp = cfg.hyperparams
    model: GbtModel | None = None
    out, importance = [], pd.DataFrame(columns=["feature", "gain"])
    for i in range(n_orig):
        snaps = {f: tracks[f][i] for f in factors}
        origin = snaps[target].origin
        try:
            channels = _stack_channels(snaps)
            if snaps[target].refit or model is None:
                x, y = _training_set(channels, spec, target)
                if hp is None:
                    hp = tune(x, y, list(cfg.grid or default_grid(seed)), cfg.n_folds)
                model = fit_gbt(x, y, replace(hp, seed=seed))
                importance = model.importance()
            feats = feature_matrix(channels.iloc[-spec.history_needed:], spec)
            out.append(float(predict(model, feats)[-1]))
        except (VoltideError, ValueError, FloatingPointError) as exc:
            return _GbtPath(out, hp, importance, f"{origin.date()}: {exc}")
    return _GbtPath(out, hp, importance, None)


def run_mse_backtest(panels: dict[str, pd.DataFrame], pair: tuple[str, str], cfg: MseConfig,
                     cache: dict | None = None) -> MseBacktestResult:
    """Benchmark (target factor only) vs challenger (target + causer) forecasts.

    ``panels`` maps factor ids to their asset panels; ``cache`` may be shared
    across pairs so each factor is tracked, and each target's benchmark
    model is fitted, only once.
    """
    causer, target = pair
    challenger_factors = list(cfg.challenger_sources or (target, causer))
    needed = list(dict.fromkeys([target] + challenger_factors))
    cache = {} if cache is None else cache
    for factor in needed:
        key = (factor, cfg)
        if key not in cache:
            cache[key] = track_factor(panels[factor], factor, cfg)
    tracks = {f: cache[(f, cfg)] for f in needed}
    n_orig = min(len(t) for t in tracks.values())

    # one seed per target so the benchmark is shared and a challenger with the
    # benchmark's features reproduces it exactly
    model_seed = _seed_for(cfg.seed, "gbt", target)
    bkey = ("benchmark", target, cfg, n_orig)
    if bkey not in cache:
        cache[bkey] = _gbt_path(tracks, [target], target, cfg, model_seed, n_orig)
    bench = cache[bkey]
    chall = _gbt_path(tracks, challenger_factors, target, cfg, model_seed, n_orig)
    n_ok = min(len(bench.u_hat), len(chall.u_hat))
    error = bench.error if len(bench.u_hat) == n_ok and bench.error else chall.error
    rows = []
    for i in range(n_ok):
        tsnap = tracks[target][i]
        try:
            mean, sigma = _one_step(tsnap)
        except (VoltideError, ValueError, FloatingPointError) as exc:
            error = f"{tsnap.origin.date()}: {exc}"
            break
        dist = tsnap.params.dist
        clip = lambda u: min(max(u, U_CLIP), 1.0 - U_CLIP)
        u_b, u_c = bench.u_hat[i], chall.u_hat[i]
        y_b = mean + sigma * float(egarch.inverse_pit(clip(u_b), dist))
        y_c = mean + sigma * float(egarch.inverse_pit(clip(u_c), dist))
        pca = tsnap.pca
        rows.append({
            "date": tsnap.origin + pd.Timedelta(days=1), "origin": tsnap.origin,
            "y_true": tsnap.y_next, "y_hat_benchmark": y_b, "y_hat_challenger": y_c,
            "y_hat_egarch": mean, "sigma_forecast": sigma,
            "u_hat_benchmark": u_b, "u_hat_challenger": u_c,
            "bridge_scale": float(np.mean(pca.pc1 * pca.stds)),
            "bridge_offset": float(np.mean(pca.means)),
            **{f"loading_{a}": float(v) for a, v in zip(pca.asset_ids, pca.pc1)},
        })
    if error:
        logger.error("mse backtest %s -> %s aborted at %s", causer, target, error)
    hp_b, hp_c, importance = bench.hyperparams, chall.hyperparams, chall.importance
    records = pd.DataFrame(rows)
    if records.empty:
        raise NumericalError(f"no forecasts produced ({error})", stage="mse")
    for tag in ("benchmark", "challenger", "egarch"):
        records[f"e_{tag}"] = records["y_true"] - records[f"y_hat_{tag}"]
    mse = {tag: float(np.mean(records[f"e_{tag}"] ** 2)) for tag in ("benchmark", "challenger", "egarch")}
    lb, lc, le = (records[f"e_{t}"].to_numpy() ** 2 for t in ("benchmark", "challenger", "egarch"))
    dm = dm_plain = dm_eg = None
    if len(records) >= 30:
        dm = dm_test(lb, lc, nested=True, pred_benchmark=records["y_hat_benchmark"],
                     pred_challenger=records["y_hat_challenger"])
        dm_plain = dm_test(lb, lc)
        dm_eg = dm_test(le, lc)
    hps = {"benchmark": None if hp_b is None else vars(hp_b),
           "challenger": None if hp_c is None else vars(hp_c)}
    return MseBacktestResult(pair, records, mse["benchmark"], mse["challenger"], mse["egarch"],
                             _reduction(mse["benchmark"], mse["challenger"]),
                             _reduction(mse["egarch"], mse["challenger"]),
                             dm, dm_plain, dm_eg, hps, importance, cfg.refit_every, error)
