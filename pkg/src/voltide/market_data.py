"""Daily OHLCV ingestion, Rogers-Satchell components and stationary transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np
import pandas as pd

from .errors import CalendarGapError, DataValidationError, DegenerateInputError

PRICE_COLUMNS = ("open", "high", "low", "close")
COLUMNS = ("date",) + PRICE_COLUMNS + ("volume",)
METRICS = ("delta_log_volume", "delta_sigma_up", "delta_sigma_down")
ONE_DAY = pd.Timedelta(days=1)


@dataclass(frozen=True)
class Bar:
    date: pd.Timestamp
    open: float
    high: float
    low: float
    close: float
    volume: float

    def validate(self) -> None:
        prices = (self.open, self.high, self.low, self.close)
        if not all(math.isfinite(p) and p > 0 for p in prices):
            raise DataValidationError(f"{self.date.date()}: non-positive or missing price")
        if self.low > min(self.open, self.close) or self.high < max(self.open, self.close):
            raise DataValidationError(f"{self.date.date()}: open/close outside [low, high]")
        if not (math.isfinite(self.volume) and self.volume >= 0):
            raise DataValidationError(f"{self.date.date()}: negative or missing volume")


class VolComponents(NamedTuple):
    sigma_up: float
    sigma_down: float


@dataclass(frozen=True)
class OhlcvSeries:
    """One asset's gap-free daily bars, indexed by UTC calendar day."""

    asset_id: str
    frame: pd.DataFrame

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.frame.index

    @property
    def bars(self) -> list[Bar]:
        return [
            Bar(d, r.open, r.high, r.low, r.close, r.volume)
            for d, r in zip(self.frame.index, self.frame.itertuples(index=False))
        ]

    def slice(self, start=None, end=None) -> "OhlcvSeries":
        return OhlcvSeries(self.asset_id, self.frame.loc[start:end])


@dataclass(frozen=True)
class TransformedSeries:
    asset_id: str
    metric: str
    values: pd.Series

    def to_csv(self, path) -> None:
        out = pd.DataFrame({"date": self.values.index.strftime("%Y-%m-%d"),
                            "value": self.values.to_numpy()})
        out.to_csv(path, index=False, float_format="%.17g")


def validate_frame(frame: pd.DataFrame, asset_id: str) -> pd.DataFrame:
    """Check bar invariants and calendar completeness; return a date-sorted copy.

    Row indices in error messages refer to positions in ``frame`` as given.
    """
    frame = frame.copy()
    for col in COLUMNS:
        if col not in frame.columns:
            raise DataValidationError(f"{asset_id}: missing column {col!r}")
    for col in PRICE_COLUMNS + ("volume",):
        values = pd.to_numeric(frame[col], errors="coerce")
        bad = values.isna() & frame[col].notna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataValidationError(
                f"{asset_id}: row {row}: unparsable {col} value {frame[col].iloc[row]!r}")
        frame[col] = values.astype(float)
    frame["date"] = pd.to_datetime(frame["date"], utc=True).dt.tz_localize(None).dt.normalize()

    o, h, l, c, v = (frame[k].to_numpy() for k in PRICE_COLUMNS + ("volume",))
    checks = [
        (~np.isfinite(np.column_stack([o, h, l, c])).all(axis=1), "missing price"),
        ((np.column_stack([o, h, l, c]) <= 0).any(axis=1), "non-positive price"),
        (l > h, "low > high"),
        (h < np.maximum(o, c), "high below open/close"),
        (l > np.minimum(o, c), "low above open/close"),
        (~np.isfinite(v), "missing volume"),
        (v <= 0, "zero or negative volume"),
    ]
    for mask, what in checks:
        if mask.any():
            row = int(np.flatnonzero(mask)[0])
            raise DataValidationError(
                f"{asset_id}: row {row} ({frame['date'].iloc[row].date()}): {what}")

    frame = frame.sort_values("date", kind="stable").set_index("date")
    frame.index.name = "date"
    if frame.index.has_duplicates:
        dup = frame.index[frame.index.duplicated()][0]
        raise DataValidationError(f"{asset_id}: duplicate date {dup.date()}")
    steps = np.diff(frame.index.to_numpy())
    gap = np.flatnonzero(steps != np.timedelta64(1, "D"))
    if gap.size:
        missing = (frame.index[gap[0]] + ONE_DAY).date()
        raise CalendarGapError(asset_id, missing)
    return frame[list(PRICE_COLUMNS) + ["volume"]]


def load_ohlcv_csv(path, schema: Mapping[str, str] | None = None,
                   asset_id: str | None = None) -> OhlcvSeries:
    """Read one asset's daily bars from CSV.

    ``schema`` maps canonical column names (date, open, high, low, close,
    volume) to the vendor's headers; unmapped columns are expected verbatim.
    """
    path = Path(path)
    asset_id = asset_id or path.stem
    raw = pd.read_csv(path, dtype=str)
    rename = {vendor: canon for canon, vendor in (schema or {}).items()}
    raw = raw.rename(columns=rename)
    return OhlcvSeries(asset_id, validate_frame(raw, asset_id))


def rogers_satchell(bar: Bar) -> VolComponents:
    up = math.log(bar.high / bar.close) * math.log(bar.high / bar.open)
    down = math.log(bar.low / bar.close) * math.log(bar.low / bar.open)
    return VolComponents(math.sqrt(up), math.sqrt(down))


def rs_components(frame: pd.DataFrame) -> pd.DataFrame:
    """Vectorised Rogers-Satchell upside/downside components for every bar."""
    o, h, l, c = (frame[k].to_numpy(dtype=float) for k in PRICE_COLUMNS)
    up = np.log(h / c) * np.log(h / o)
    down = np.log(l / c) * np.log(l / o)
    # radicands are >= 0 for valid bars; clip guards -0.0 only
    return pd.DataFrame({"sigma_up": np.sqrt(np.maximum(up, 0.0)),
                         "sigma_down": np.sqrt(np.maximum(down, 0.0))}, index=frame.index)


def transform(series: OhlcvSeries) -> dict[str, TransformedSeries]:
    """First differences of log volume and of both RS components."""
    frame = series.frame
    if len(frame) < 2:
        raise DataValidationError(f"{series.asset_id}: need at least 2 bars to difference")
    vol = frame["volume"]
    if (vol <= 0).any():
        bad = vol.index[(vol <= 0).to_numpy()][0]
        raise DataValidationError(f"{series.asset_id}: zero volume on {bad.date()}")
    rs = rs_components(frame)
    out = {
        "delta_log_volume": np.log(vol).diff().iloc[1:],
        "delta_sigma_up": rs["sigma_up"].diff().iloc[1:],
        "delta_sigma_down": rs["sigma_down"].diff().iloc[1:],
    }
    return {m: TransformedSeries(series.asset_id, m, s.rename(series.asset_id)) for m, s in out.items()}


def winsorize(values, lower_q: float = 0.01, upper_q: float = 0.99):
    """Clip to linear-interpolation empirical quantiles; keeps order, length and type."""
    if not 0.0 <= lower_q < upper_q <= 1.0:
        raise ValueError(f"need 0 <= lower_q < upper_q <= 1, got {lower_q}, {upper_q}")
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("cannot winsorize an empty sequence")
    lo, hi = np.quantile(arr, [lower_q, upper_q])
    clipped = np.clip(arr, lo, hi)
    if isinstance(values, pd.Series):
        return pd.Series(clipped, index=values.index, name=values.name)
    return clipped


def winsorize_training(values: pd.Series, train_end, lower_q: float = 0.01,
                       upper_q: float = 0.99) -> pd.Series:
    """Winsorise the part of ``values`` dated <= ``train_end``; later data is untouched."""
    out = values.astype(float).copy()
    mask = out.index <= pd.Timestamp(train_end)
    if mask.any():
        out[mask] = winsorize(out[mask].to_numpy(), lower_q, upper_q)
    return out


def adf_test(values, max_lag: int = 20) -> tuple[float, float]:
    """Augmented Dickey-Fuller with constant, AIC lag choice and MacKinnon p-value."""
    from statsmodels.tsa.stattools import adfuller

    x = np.asarray(values, dtype=float)
    if x.size <= max_lag + 10:
        raise ValueError(f"ADF needs more than {max_lag + 10} observations, got {x.size}")
    if np.ptp(x) == 0:
        raise DegenerateInputError("ADF on a constant series")
    stat, pvalue, *_ = adfuller(x, maxlag=max_lag, regression="c", autolag="AIC")
    return float(stat), float(pvalue)
