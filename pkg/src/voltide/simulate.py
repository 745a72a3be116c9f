"""Synthetic fixtures with a planted stablecoin-to-crypto lead of one day.

Two generators: ``lead_lag_panels`` writes transformed-series panels
directly (fast, for forecasting tests), ``simulate_market`` produces raw
OHLCV bars whose Rogers-Satchell components carry the same structure.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .market_data import OhlcvSeries, validate_frame


@dataclass(frozen=True)
class LeadLagDesign:
    n_stable: int = 3
    n_crypto: int = 4
    lead: int = 1
    snr: float = 2.0  # variance of the led part over the fresh noise of the crypto factor
    idio_scale: float = 0.35  # asset noise relative to a unit factor loading
    shock_df: float = 6.0


def _t_shocks(rng: np.random.Generator, df: float, size) -> np.ndarray:
    return rng.standard_t(df, size=size) / math.sqrt(df / (df - 2.0))


def lead_lag_factors(n: int, design: LeadLagDesign, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Unit-variance leader and follower with ``follower[t] = a*leader[t-lead] + b*noise[t]``."""
    burn = design.lead
    leader = _t_shocks(rng, design.shock_df, n + burn)
    noise = _t_shocks(rng, design.shock_df, n)
    a = math.sqrt(design.snr / (1.0 + design.snr))
    b = math.sqrt(1.0 / (1.0 + design.snr))
    follower = a * leader[:n] + b * noise
    return leader[burn:], follower


def _loadings(k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.7, 1.3, size=k)


def lead_lag_panels(n_days: int, seed: int, start="2020-01-02",
                    design: LeadLagDesign = LeadLagDesign()) -> dict[str, pd.DataFrame]:
    """Two asset panels whose common factors follow the planted lead.

    Keys are ``"stable"`` (leader) and ``"crypto"`` (follower); columns are
    asset ids and the index is a daily calendar.
    """
    rng = np.random.default_rng(seed)
    leader, follower = lead_lag_factors(n_days, design, rng)
    index = pd.date_range(start, periods=n_days, freq="D")
    out = {}
    for name, factor, k in (("stable", leader, design.n_stable), ("crypto", follower, design.n_crypto)):
        load = _loadings(k, rng)
        x = factor[:, None] * load[None, :] + design.idio_scale * rng.standard_normal((n_days, k))
        out[name] = pd.DataFrame(x, index=index, columns=[f"{name}_{i + 1}" for i in range(k)])
    return out


@dataclass
class MarketDesign:
    n_days: int = 1827
    start: str = "2020-01-01"
    stable_ids: tuple[str, ...] = ("usd_a", "usd_b", "usd_c")
    crypto_ids: tuple[str, ...] = ("coin_a", "coin_b", "coin_c", "coin_d")
    lead: int = 1
    snr: float = 2.0
    stable_vol: float = 0.002
    crypto_vol: float = 0.025
    diff_scale: float = 0.25  # daily factor step relative to the volatility level
    reversion: float = 0.3
    idio_scale: float = 0.35
    drift_per_spread: float = 0.3  # crypto return drift per unit of (sigma_up - sigma_down)
    params: dict = field(default_factory=dict)


def _bar_from_components(open_: float, ret: float, s_up: float, s_down: float):
    """High/low such that the RS components of the bar equal ``s_up``/``s_down``."""
    close = open_ * math.exp(ret)
    a = 0.5 * (-abs(ret) + math.sqrt(ret * ret + 4.0 * s_up * s_up))
    b = 0.5 * (-abs(ret) + math.sqrt(ret * ret + 4.0 * s_down * s_down))
    high = max(open_, close) * math.exp(a)
    low = min(open_, close) * math.exp(-b)
    return close, high, low


def _component_paths(diffs: np.ndarray, level: float, reversion: float) -> np.ndarray:
    out = np.empty_like(diffs)
    prev = level
    floor = 0.05 * level
    for t in range(diffs.size):
        cur = prev + reversion * (level - prev) + diffs[t]
        prev = max(cur, floor)
        out[t] = prev
    return out


def simulate_market(seed: int, design: MarketDesign | None = None) -> tuple[list[OhlcvSeries], dict]:
    """Daily OHLCV bars for stablecoins and cryptocurrencies plus a ground-truth manifest.

    Upside volatility, downside volatility and log volume each get one
    stablecoin factor and one crypto factor; the crypto factor's daily
    step follows the stablecoin step ``lead`` days earlier.
    """
    d = design or MarketDesign()
    rng = np.random.default_rng(seed)
    n = d.n_days
    dates = pd.date_range(d.start, periods=n, freq="D")
    lead_design = LeadLagDesign(lead=d.lead, snr=d.snr)
    factors = {}
    for channel in ("up", "down", "volume"):
        leader, follower = lead_lag_factors(n, lead_design, rng)
        factors[channel] = {"stable": leader, "crypto": follower}

    truth = {"seed": seed, "lead_days": d.lead, "snr": d.snr, "assets": {}}
    series = []
    groups = (("stable", d.stable_ids, d.stable_vol), ("crypto", d.crypto_ids, d.crypto_vol))
    for group, ids, vol in groups:
        for asset in ids:
            load = {ch: float(rng.uniform(0.7, 1.3)) for ch in factors}
            step = d.diff_scale * vol
            comp = {}
            for ch in ("up", "down"):
                diffs = step * (load[ch] * factors[ch][group] + d.idio_scale * rng.standard_normal(n))
                comp[ch] = _component_paths(diffs, vol / math.sqrt(2.0), d.reversion)
            log_vol = np.empty(n)
            level = 20.0 if group == "crypto" else 21.0
            prev = level
            vol_steps = 0.1 * (load["volume"] * factors["volume"][group] + d.idio_scale * rng.standard_normal(n))
            for t in range(n):
                prev = prev + 0.2 * (level - prev) + vol_steps[t]
                log_vol[t] = prev
            daily = comp["up"] + comp["down"]
            if group == "crypto":
                drift = d.drift_per_spread * (comp["up"] - comp["down"])
                rets = drift + 0.5 * daily * rng.standard_normal(n)
                price = float(rng.uniform(10, 1000))
            else:
                rets = np.empty(n)
                dev = 0.0
                shocks = 0.3 * daily * rng.standard_normal(n)
                for t in range(n):
                    new_dev = 0.5 * dev + shocks[t]
                    rets[t] = new_dev - dev
                    dev = new_dev
                price = 1.0
            rows = []
            for t in range(n):
                close, high, low = _bar_from_components(price, rets[t], comp["up"][t], comp["down"][t])
                rows.append((dates[t], price, high, low, close, math.exp(log_vol[t])))
                price = close
            frame = pd.DataFrame(rows, columns=["date", "open", "high", "low", "close", "volume"])
            series.append(OhlcvSeries(asset, validate_frame(frame, asset)))
            truth["assets"][asset] = {"group": group, "loadings": load, "volatility_level": vol}
    truth["design"] = {k: v for k, v in asdict(d).items() if k != "params"}
    return series, truth
