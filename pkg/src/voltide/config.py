"""Run configuration: JSON parsing, validation and named sub-seeds."""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError
from .gbt import GbtHyperParams

CANONICAL_COLUMNS = ("date", "open", "high", "low", "close", "volume")
HORIZON_NAMES = {1: "daily", 7: "weekly", 30: "monthly"}
DEFAULT_PAIRS = (
    ("stable_down", "crypto_down"), ("stable_up", "crypto_down"), ("stable_v", "crypto_down"),
    ("stable_down", "crypto_up"), ("stable_up", "crypto_up"), ("stable_v", "crypto_up"),
)


def sub_seed(master: int, name: str) -> int:
    """Deterministic 32-bit seed for the named purpose, e.g. ``"cgc:bootstrap"``."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


@dataclass
class CgcSection:
    horizons: list[int] = field(default_factory=lambda: [1, 7, 30])
    n_bootstrap: int = 200
    percentile: float = 0.95
    bernstein_degree: int | None = None
    kde_bandwidth_rule: str = "silverman"
    block_length: float = 20.0
    reverse: bool = True  # also test crypto -> stablecoin


@dataclass
class GbtSection:
    grid: list[dict] | None = None  # None: the built-in 24-point grid
    n_folds: int = 5
    min_samples_leaf: int = 5

    def hyperparams(self, seed: int) -> list[GbtHyperParams] | None:
        if self.grid is None:
            return None
        return [GbtHyperParams(**{**g, "seed": seed}) for g in self.grid]


@dataclass
class StrategySection:
    targets: list[float] = field(default_factory=lambda: [0.2, 0.5])
    cost_bp: float = 1.0
    days_per_year: int = 366
    causer: str = "stable_up"


@dataclass
class RunConfig:
    data_dir: str
    stablecoins: list[str]
    cryptos: list[str]
    train_start: str
    train_end: str
    test_end: str
    files: dict[str, str] = field(default_factory=dict)  # asset -> csv, default <data_dir>/<asset>.csv
    column_map: dict[str, str] = field(default_factory=dict)
    winsor: list[float] | None = field(default_factory=lambda: [0.01, 0.99])
    horn_replications: int = 500
    cgc: CgcSection = field(default_factory=CgcSection)
    gbt: GbtSection = field(default_factory=GbtSection)
    mse_pairs: list[list[str]] = field(default_factory=lambda: [list(p) for p in DEFAULT_PAIRS])
    refit_every: int = 1
    garch_starts: int = 5
    strategy: StrategySection = field(default_factory=StrategySection)
    seed: int = 0
    output_dir: str = "out"
    workers: int = 1
    simulate_days: int = 1827
    simulate_start: str = "2020-01-01"
    base_dir: str = field(default=".", repr=False)

    # ---- derived -------------------------------------------------------
    @property
    def train_start_ts(self) -> pd.Timestamp:
        return pd.Timestamp(self.train_start)

    @property
    def train_end_ts(self) -> pd.Timestamp:
        return pd.Timestamp(self.train_end)

    @property
    def test_end_ts(self) -> pd.Timestamp:
        return pd.Timestamp(self.test_end)

    @property
    def groups(self) -> dict[str, list[str]]:
        return {"stable": list(self.stablecoins), "crypto": list(self.cryptos)}

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def csv_path(self, asset: str) -> Path:
        return self.resolve(self.files.get(asset, str(Path(self.data_dir) / f"{asset}.csv")))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        """Hash of the settings that shape results; where and how wide it runs is left out."""
        d = {k: v for k, v in self.to_dict().items() if k not in ("output_dir", "workers")}
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def validate(self) -> "RunConfig":
        for name in ("stablecoins", "cryptos"):
            assets = getattr(self, name)
            if not assets or not all(isinstance(a, str) and a for a in assets):
                raise ConfigError(name, "must be a non-empty list of asset ids")
            if len(assets) < 2:
                raise ConfigError(name, "PCA factors need at least two assets per group")
        if set(self.stablecoins) & set(self.cryptos):
            raise ConfigError("cryptos", "an asset cannot be both a stablecoin and a crypto")
        dates = {}
        for name in ("train_start", "train_end", "test_end"):
            try:
                dates[name] = pd.Timestamp(getattr(self, name))
            except (ValueError, TypeError):
                raise ConfigError(name, f"not a date: {getattr(self, name)!r}") from None
        if not dates["train_start"] < dates["train_end"]:
            raise ConfigError("train_end", "must be after train_start")
        if not dates["train_end"] < dates["test_end"]:
            raise ConfigError("train_end", "must be before test_end")
        if self.winsor is not None:
            if len(self.winsor) != 2 or not 0 <= self.winsor[0] < self.winsor[1] <= 1:
                raise ConfigError("winsor", "need [lower, upper] with 0 <= lower < upper <= 1")
        unknown = set(self.column_map) - set(CANONICAL_COLUMNS)
        if unknown:
            raise ConfigError("column_map", f"unknown canonical columns {sorted(unknown)}")
        c = self.cgc
        if c.n_bootstrap < 100:
            raise ConfigError("cgc.n_bootstrap", "must be >= 100")
        if not 0 < c.percentile < 1:
            raise ConfigError("cgc.percentile", "must lie in (0, 1)")
        if not c.horizons or any(int(h) < 1 for h in c.horizons):
            raise ConfigError("cgc.horizons", "need positive lags")
        if c.block_length < 1:
            raise ConfigError("cgc.block_length", "must be >= 1")
        if c.kde_bandwidth_rule not in ("silverman", "scott"):
            raise ConfigError("cgc.kde_bandwidth_rule", "must be 'silverman' or 'scott'")
        if self.gbt.grid is not None:
            if not self.gbt.grid:
                raise ConfigError("gbt.grid", "must not be empty")
            try:
                self.gbt.hyperparams(0)
            except (TypeError, ValueError) as exc:
                raise ConfigError("gbt.grid", str(exc)) from None
        if self.gbt.n_folds < 2:
            raise ConfigError("gbt.n_folds", "must be >= 2")
        if self.refit_every < 1:
            raise ConfigError("refit_every", "must be >= 1")
        if self.horn_replications < 100:
            raise ConfigError("horn_replications", "must be >= 100")
        for pair in self.mse_pairs:
            if len(pair) != 2 or pair[0] not in FACTOR_IDS or pair[1] not in FACTOR_IDS:
                raise ConfigError("mse_pairs", f"bad pair {pair!r}")
        s = self.strategy
        if s.cost_bp < 0:
            raise ConfigError("strategy.cost_bp", "must be >= 0")
        if not s.targets or any(t <= 0 for t in s.targets):
            raise ConfigError("strategy.targets", "need positive volatility targets")
        if s.days_per_year < 1:
            raise ConfigError("strategy.days_per_year", "must be positive")
        if s.causer not in FACTOR_IDS or not s.causer.startswith("stable"):
            raise ConfigError("strategy.causer", "must be a stablecoin factor id")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        if self.simulate_days < 100:
            raise ConfigError("simulate_days", "must be >= 100")
        return self


FACTOR_IDS = ("stable_v", "stable_up", "stable_down", "crypto_v", "crypto_up", "crypto_down")

_SECTIONS = {"cgc": CgcSection, "gbt": GbtSection, "strategy": StrategySection}


def _build(cls, raw: dict, prefix: str = ""):
    if not isinstance(raw, dict):
        raise ConfigError(prefix.rstrip(".") or "config", "expected a JSON object")
    names = {f.name for f in fields(cls)} - {"base_dir"}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(prefix + sorted(unknown)[0], "unknown field")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS and cls is RunConfig:
            value = _build(_SECTIONS[key], value, f"{key}.")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        missing = [f.name for f in fields(cls) if f.name not in raw
                   and f.default is MISSING and f.default_factory is MISSING]
        raise ConfigError(prefix + (missing[0] if missing else "config"), str(exc)) from None


def load_config(path, seed: int | None = None, output_dir: str | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    cfg = _build(RunConfig, raw)
    cfg.base_dir = str(path.parent)
    if seed is not None:
        cfg.seed = int(seed)
    if output_dir is not None:
        cfg.output_dir = output_dir
    return cfg.validate()
