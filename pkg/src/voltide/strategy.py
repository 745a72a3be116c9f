"""Volatility-targeting crypto portfolio driven by forecast upside/downside volatility."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import special

from .errors import DataValidationError, VoltideError
from .market_data import OhlcvSeries, rs_components

logger = logging.getLogger(__name__)

VARIANTS = ("benchmark", "challenger", "naive", "buy_and_hold")
Z_WINDOW = 60
NAIVE_WINDOW = 30


@dataclass
class SignalState:
    sigma_up_bar: float
    sigma_down_bar: float
    delta_up_hat: float
    delta_down_hat: float
    sigma_up_hat: float
    sigma_down_hat: float
    sigma_daily_hat: float
    signal: float
    z_score: float = 0.0
    degenerate: bool = False


def net_volatility_signal(sigma_up_bar: float, sigma_down_bar: float,
                          delta_up_hat: float, delta_down_hat: float) -> SignalState:
    """Forecast components as today's level plus the predicted change, floored at 0."""
    up = max(sigma_up_bar + delta_up_hat, 0.0)
    down = max(sigma_down_bar + delta_down_hat, 0.0)
    total = up + down
    if not total > 0:
        return SignalState(sigma_up_bar, sigma_down_bar, delta_up_hat, delta_down_hat,
                           up, down, total, 0.0, degenerate=True)
    return SignalState(sigma_up_bar, sigma_down_bar, delta_up_hat, delta_down_hat,
                       up, down, total, (up - down) / total)


def pc_ratio_weights(loadings_up: Sequence[float], loadings_down: Sequence[float]) -> np.ndarray:
    """Normalised ratios of upside to downside PC1 loadings."""
    up = np.asarray(loadings_up, dtype=float)
    down = np.asarray(loadings_down, dtype=float)
    if up.shape != down.shape or up.size == 0:
        raise ValueError("loading vectors must be non-empty and of equal length")
    if np.any(up <= 0) or np.any(down <= 0):
        raise DataValidationError("PC1 loadings must all be positive to form ratio weights")
    ratio = up / down
    return ratio / ratio.sum()


def signal_z_score(signal: float, history: Sequence[float], window: int = Z_WINDOW) -> float | None:
    """z of ``signal`` against the previous ``window`` signals; None while history is short."""
    if len(history) < window:
        return None
    past = np.asarray(history[-window:], dtype=float)
    if np.ptp(past) == 0:  # std of a constant window is rounding noise, not zero
        return 0.0
    return float((signal - past.mean()) / past.std())


def size_position(sigma_daily_hat: float, sigma_target: float, days_per_year: int = 366,
                  z_score: float | None = None) -> tuple[float, float, float]:
    """(base exposure, multiplier, total exposure); no z-score means multiplier 1."""
    if not sigma_daily_hat > 0:
        raise ValueError("forecast volatility must be positive")
    base = sigma_target / (sigma_daily_hat * math.sqrt(days_per_year))
    # 1 + tanh(z) written as 2 * expit(2z), which stays positive for very negative z
    mult = 1.0 if z_score is None else 2.0 * float(special.expit(2.0 * z_score))
    return base, mult, base * mult


def account(weights: np.ndarray, exposures: np.ndarray, asset_returns: np.ndarray,
            cost_bp: float, charge_from: int | None = None) -> pd.DataFrame:
    """Daily ledger arithmetic.

    Positions are ``exposure * weight``; turnover on day 0 is measured from
    an empty book. ``charge_from`` limits costs to days before that index
    (None charges every day).
    """
    w = np.asarray(weights, dtype=float)
    e = np.asarray(exposures, dtype=float)
    r = np.asarray(asset_returns, dtype=float)
    if w.shape != r.shape or e.shape != (w.shape[0],):
        raise ValueError("weights, exposures and returns are misaligned")
    pos = e[:, None] * w
    prev = np.vstack([np.zeros((1, w.shape[1])), pos[:-1]])
    turnover = np.abs(pos - prev).sum(axis=1)
    cost = cost_bp * 1e-4 * turnover
    if charge_from is not None:
        cost[charge_from:] = 0.0
    gross = np.sum(w * r, axis=1)
    net = e * gross - cost
    equity = np.cumprod(1.0 + net)
    return pd.DataFrame({"exposure": e, "weighted_return": gross, "turnover": turnover,
                         "cost": cost, "net_return": net, "equity": equity})


def max_drawdown(equity: Sequence[float]) -> float:
    eq = np.asarray(equity, dtype=float)
    return float(np.min(eq / np.maximum.accumulate(eq) - 1.0))


def downside_deviation(returns: Sequence[float]) -> float:
    r = np.asarray(returns, dtype=float)
    return float(np.sqrt(np.mean(np.minimum(r, 0.0) ** 2)))


@dataclass
class Performance:
    ann_return: float
    ann_vol: float
    max_drawdown: float
    sortino: float
    sortino_flag: str = ""  # "+inf" with no losing days, "degenerate" when flat

    def to_dict(self) -> dict:
        return {"ann_return": self.ann_return, "ann_vol": self.ann_vol,
                "max_drawdown": self.max_drawdown,
                "sortino": None if math.isinf(self.sortino) else self.sortino,
                "sortino_flag": self.sortino_flag}


def performance_metrics(returns: Sequence[float], days_per_year: int = 366) -> Performance:
    r = np.asarray(returns, dtype=float)
    if r.size < 2:
        raise ValueError("need at least two returns")
    growth = float(np.prod(1.0 + r))
    ann_return = growth ** (days_per_year / r.size) - 1.0 if growth > 0 else -1.0
    ann_vol = float(np.std(r, ddof=1) * math.sqrt(days_per_year))
    mdd = max_drawdown(np.concatenate([[1.0], np.cumprod(1.0 + r)]))
    dd = downside_deviation(r)
    if dd > 0:
        return Performance(ann_return, ann_vol, mdd, ann_return / (dd * math.sqrt(days_per_year)))
    if ann_return > 0:
        return Performance(ann_return, ann_vol, mdd, math.inf, "+inf")
    return Performance(ann_return, ann_vol, mdd, 0.0, "degenerate")


@dataclass
class StrategyData:
    """Everything the daily loop reads.

    ``forecasts`` maps a model name ("benchmark", "challenger") to a pair of
    MSE-backtest record frames for the upside and downside crypto factors.
    """

    bars: Mapping[str, OhlcvSeries]
    forecasts: Mapping[str, tuple[pd.DataFrame, pd.DataFrame]]
    origins: pd.DatetimeIndex

    @property
    def assets(self) -> list[str]:
        return list(self.bars)

    def closes(self) -> pd.DataFrame:
        return pd.DataFrame({a: s.frame["close"] for a, s in self.bars.items()})

    def component_means(self) -> pd.DataFrame:
        comps = {a: rs_components(s.frame) for a, s in self.bars.items()}
        up = pd.DataFrame({a: c["sigma_up"] for a, c in comps.items()}).mean(axis=1)
        down = pd.DataFrame({a: c["sigma_down"] for a, c in comps.items()}).mean(axis=1)
        return pd.DataFrame({"up": up, "down": down})


@dataclass
class StrategyLedger:
    variant: str
    sigma_target: float
    cost_bp: float
    rows: pd.DataFrame
    performance: Performance | None
    error: str | None = None
    signals: pd.DataFrame = field(default_factory=pd.DataFrame, repr=False)

    def summary(self) -> dict:
        perf = self.performance.to_dict() if self.performance else {}
        return {"strategy": self.variant, "sigma_target": self.sigma_target,
                "cost_bp": self.cost_bp, "n_days": int(len(self.rows)), **perf,
                "error": self.error}


def _forecast_row(records: pd.DataFrame, origin) -> pd.Series:
    hit = records.loc[records["origin"] == origin]
    if hit.empty:
        raise DataValidationError(f"no forecast for origin {pd.Timestamp(origin).date()}")
    return hit.iloc[0]


def _loadings(row: pd.Series, assets: Sequence[str]) -> np.ndarray:
    return np.array([row[f"loading_{a}"] for a in assets], dtype=float)


def run_strategy_backtest(data: StrategyData, variant: str, sigma_target: float,
                          cost_bp: float = 1.0, days_per_year: int = 366) -> StrategyLedger:
    """Decide positions at each origin's close and earn the next day's returns."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown strategy variant {variant!r}")
    if cost_bp < 0:
        raise ValueError("cost_bp must be >= 0")
    assets = data.assets
    closes = data.closes()
    rets = closes.pct_change()
    comp = data.component_means()
    daily_bar = comp["up"] + comp["down"]
    naive_vol = daily_bar.rolling(NAIVE_WINDOW).mean()
    equal = np.full(len(assets), 1.0 / len(assets))

    weights, exposures, asset_rets, dates, sig_rows = [], [], [], [], []
    history: list[float] = []
    error = None
    for origin in data.origins:
        nxt = origin + pd.Timedelta(days=1)
        try:
            if nxt not in rets.index:
                raise DataValidationError(f"no prices for {nxt.date()}")
            if variant == "buy_and_hold":
                w, exp_total, state = equal, 1.0, None
            elif variant == "naive":
                vol = float(naive_vol.loc[origin])
                if not vol > 0:
                    raise DataValidationError("trailing volatility unavailable")
                w = equal
                exp_total = size_position(vol, sigma_target, days_per_year)[2]
                state = None
            else:
                rec_up = _forecast_row(data.forecasts[variant][0], origin)
                rec_down = _forecast_row(data.forecasts[variant][1], origin)
                col = f"y_hat_{variant}"
                d_up = rec_up["bridge_scale"] * rec_up[col] + rec_up["bridge_offset"]
                d_down = rec_down["bridge_scale"] * rec_down[col] + rec_down["bridge_offset"]
                state = net_volatility_signal(float(comp.loc[origin, "up"]),
                                              float(comp.loc[origin, "down"]), d_up, d_down)
                w = pc_ratio_weights(_loadings(rec_up, assets), _loadings(rec_down, assets))
                if state.degenerate:
                    exp_total = 0.0
                else:
                    z = signal_z_score(state.signal, history)
                    state.z_score = 0.0 if z is None else z
                    exp_total = size_position(state.sigma_daily_hat, sigma_target,
                                              days_per_year, z)[2]
                history.append(state.signal)
        except (VoltideError, KeyError, ValueError) as exc:
            error = f"{origin.date()}: {exc}"
            logger.error("strategy %s stopped at %s", variant, error)
            break
        r = rets.loc[nxt, assets].to_numpy(dtype=float)
        weights.append(np.asarray(w, dtype=float))
        exposures.append(exp_total)
        asset_rets.append(r)
        dates.append(nxt)
        if state is not None:
            sig_rows.append({"date": nxt, "origin": origin, **vars(state)})

    if not dates:
        return StrategyLedger(variant, sigma_target, cost_bp, pd.DataFrame(), None, error)
    w_arr = np.vstack(weights)
    book = account(w_arr, np.array(exposures), np.vstack(asset_rets), cost_bp,
                   charge_from=1 if variant == "buy_and_hold" else None)
    rows = pd.concat([pd.DataFrame({"date": dates}),
                      pd.DataFrame(w_arr, columns=[f"w_{a}" for a in assets]), book], axis=1)
    perf = performance_metrics(book["net_return"], days_per_year) if len(book) >= 2 else None
    return StrategyLedger(variant, sigma_target, cost_bp, rows, perf, error, pd.DataFrame(sig_rows))
