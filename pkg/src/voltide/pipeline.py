"""Pipeline stages behind the command line: each reads and writes the artifact tree."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from . import __version__
from .cgc import CgcConfig, bootstrap_cgc
from .config import DEFAULT_PAIRS, HORIZON_NAMES, RunConfig, sub_seed
from .errors import DataValidationError, NumericalError, VoltideError
from .factors import CATEGORIES, category_panels, fit_pca, horns_parallel_analysis
from .forecast_backtest import MseConfig, run_mse_backtest, track_factor
from .market_data import adf_test, load_ohlcv_csv, transform, winsorize_training
from .simulate import MarketDesign, simulate_market
from .strategy import StrategyData, run_strategy_backtest

logger = logging.getLogger(__name__)

METRICS = ("delta_log_volume", "delta_sigma_up", "delta_sigma_down")
STAGES = ("ingest", "factors", "cgc", "backtest-mse", "backtest-strategy")


# ---- serialisation helpers ------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (pd.Timestamp,)):
        return obj.strftime("%Y-%m-%d")
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, frame: pd.DataFrame, index: bool = False) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, float_format="%.17g", date_format="%Y-%m-%d",
                 lineterminator="\n")


def read_series(path: Path) -> pd.Series:
    frame = pd.read_csv(path, parse_dates=["date"])
    return pd.Series(frame["value"].to_numpy(dtype=float), index=pd.DatetimeIndex(frame["date"]))


def format_p(p: float | None, n_boot: int | None = None) -> str:
    if p is None:
        return "nan"
    if n_boot is not None:
        return f"<{1.0 / n_boot:g}" if p == 0 else f"{p:.3f}"
    return "<0.0001" if p < 1e-4 else f"{p:.4f}"


def out_dir(cfg: RunConfig) -> Path:
    return cfg.resolve(cfg.output_dir)


def _pair_name(causer: str, target: str) -> str:
    return f"{causer}__{target}"


# ---- manifest ---------------------------------------------------------------

def update_manifest(cfg: RunConfig, stage: str, params: dict, seeds: dict) -> None:
    root = out_dir(cfg)
    path = root / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    if manifest.get("config_digest") != cfg.digest():
        manifest = {}
    manifest.update({"config_digest": cfg.digest(), "seed": cfg.seed, "version": __version__})
    sub = root / STAGE_DIRS.get(stage, stage)
    files = sorted(p for p in sub.rglob("*") if p.is_file()) if sub.exists() else []
    artifacts = {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files}
    manifest.setdefault("stages", {})[stage] = {"params": params, "seeds": seeds,
                                                "artifacts": artifacts}
    write_json(path, manifest)


STAGE_DIRS = {"ingest": "transforms", "factors": "factors", "cgc": "cgc",
              "backtest-mse": "mse", "backtest-strategy": "strategy", "simulate": "simulate"}


# ---- data loading ------------------------------------------------------------

def load_assets(cfg: RunConfig) -> dict:
    out = {}
    for asset in cfg.stablecoins + cfg.cryptos:
        path = cfg.csv_path(asset)
        if not path.exists():
            raise DataValidationError(f"{asset}: data file not found: {path}")
        series = load_ohlcv_csv(path, cfg.column_map or None, asset)
        series = series.slice(cfg.train_start_ts, cfg.test_end_ts)
        if len(series) < 2:
            raise DataValidationError(f"{asset}: no bars inside the configured date range")
        out[asset] = series
    dates = [s.dates for s in out.values()]
    common = dates[0]
    for asset, idx in zip(out, dates):
        if not idx.equals(common):
            raise DataValidationError(f"{asset}: calendar differs from {next(iter(out))}")
    if cfg.train_end_ts not in common:
        raise DataValidationError(f"train_end {cfg.train_end} not covered by the data")
    return out


def read_transforms(cfg: RunConfig) -> dict:
    root = out_dir(cfg) / "transforms"
    out = {}
    for asset in cfg.stablecoins + cfg.cryptos:
        out[asset] = {}
        for metric in METRICS:
            path = root / asset / f"{metric}.csv"
            if not path.exists():
                raise DataValidationError(f"missing transform {path}; run 'ingest' first")
            out[asset][metric] = read_series(path)
    return out


# ---- stages -----------------------------------------------------------------

def run_ingest(cfg: RunConfig) -> None:
    root = out_dir(cfg) / "transforms"
    assets = load_assets(cfg)
    rows = []
    for asset, series in assets.items():
        (root / asset).mkdir(parents=True, exist_ok=True)
        for metric, ts in transform(series).items():
            ts.to_csv(root / asset / f"{metric}.csv")
            train = ts.values.loc[:cfg.train_end_ts]
            try:
                stat, p_value = adf_test(train.to_numpy())
            except (VoltideError, ValueError) as exc:
                logger.warning("ADF skipped for %s %s: %s", asset, metric, exc)
                stat, p_value = np.nan, np.nan
            rows.append({"asset": asset, "metric": metric, "adf_stat": stat,
                         "p_value": p_value, "n_obs": len(train)})
    write_csv(root / "adf_summary.csv", pd.DataFrame(rows))
    update_manifest(cfg, "ingest", {"train_start": cfg.train_start, "test_end": cfg.test_end,
                                    "adf": {"regression": "c", "autolag": "AIC", "max_lag": 20}}, {})


def _training_panels(cfg: RunConfig, transforms: dict) -> dict[str, pd.DataFrame]:
    panels = category_panels(transforms, cfg.groups)
    out = {}
    for cat, panel in panels.items():
        train = panel.loc[:cfg.train_end_ts]
        if cfg.winsor is not None:
            lo, hi = cfg.winsor
            train = train.apply(lambda s: winsorize_training(s, cfg.train_end_ts, lo, hi))
        out[cat] = train
    return out


def run_factors(cfg: RunConfig) -> None:
    root = out_dir(cfg) / "factors"
    panels = _training_panels(cfg, read_transforms(cfg))
    scores, loadings, horn_rows, seeds = {}, [], [], {}
    for cat in CATEGORIES:
        model = fit_pca(panels[cat], cat)
        seeds[f"factors:horn:{cat}"] = sub_seed(cfg.seed, f"factors:horn:{cat}")
        horn = horns_parallel_analysis(panels[cat], cfg.horn_replications, 0.95,
                                       seeds[f"factors:horn:{cat}"])
        report = model.to_report()
        report.update({"horn_critical": horn.eigenvalues_critical, "horn_retained": [k + 1 for k in horn.retained],
                       "n_obs": len(panels[cat])})
        write_json(root / f"{cat}.json", report)
        write_csv(root / f"{cat}_scree.csv", horn.scree_frame())
        scores[cat] = model.scores
        for asset, w in zip(model.asset_ids, model.pc1):
            loadings.append({"category": cat, "asset": asset, "loading": w})
        horn_rows.append({"category": cat, "lambda1": model.eigenvalues[0],
                          "lambda1_crit": horn.eigenvalues_critical[0],
                          "explained_pc1": model.explained[0],
                          "retained": " ".join(f"PC{k + 1}" for k in horn.retained) or "none"})
    write_csv(root / "scores_train.csv", pd.DataFrame(scores).rename_axis("date"), index=True)
    write_csv(root / "pc1_loadings.csv", pd.DataFrame(loadings))
    write_csv(root / "horn_summary.csv", pd.DataFrame(horn_rows))
    update_manifest(cfg, "factors", {"winsor": cfg.winsor, "horn_replications": cfg.horn_replications,
                                     "horn_percentile": 0.95}, seeds)


def cgc_tests(cfg: RunConfig) -> list[tuple[str, str, str, int]]:
    tests = []
    directions = [("stable_to_crypto", "stable", "crypto")]
    if cfg.cgc.reverse:
        directions.append(("crypto_to_stable", "crypto", "stable"))
    for direction, src, dst in directions:
        for causer, target in DEFAULT_PAIRS:
            c = causer.replace("stable", src, 1)
            t = target.replace("crypto", dst, 1)
            for h in cfg.cgc.horizons:
                tests.append((direction, c, t, int(h)))
    return tests


def _one_cgc(scores: pd.DataFrame, causer: str, target: str, cfg: CgcConfig):
    return bootstrap_cgc(scores[target].to_numpy(), scores[causer].to_numpy(), cfg, causer, target)


def run_cgc(cfg: RunConfig) -> None:
    root = out_dir(cfg) / "cgc"
    path = out_dir(cfg) / "factors" / "scores_train.csv"
    if not path.exists():
        raise DataValidationError(f"missing factor scores {path}; run 'factors' first")
    scores = pd.read_csv(path, index_col="date")
    tests = cgc_tests(cfg)
    c = cfg.cgc
    seeds = {f"cgc:{d}:{a}:{b}:{h}": sub_seed(cfg.seed, f"cgc:{a}:{b}:{h}") for d, a, b, h in tests}
    configs = [CgcConfig(h, c.n_bootstrap, c.percentile, c.bernstein_degree, c.kde_bandwidth_rule,
                         c.block_length, seeds[f"cgc:{d}:{a}:{b}:{h}"]) for d, a, b, h in tests]
    try:
        results = Parallel(n_jobs=cfg.workers)(
            delayed(_one_cgc)(scores, a, b, conf) for (_, a, b, _), conf in zip(tests, configs))
    except VoltideError as exc:
        raise NumericalError(str(exc), stage="cgc") from exc
    table, detail = {}, []
    for (direction, a, b, h), res in zip(tests, results):
        label = HORIZON_NAMES.get(h, f"lag{h}")
        key = (direction, a, b)
        table.setdefault(key, {"direction": direction, "causer": a, "target": b})[label] = res.p_value_str
        detail.append({"direction": direction, "causer": a, "target": b, "horizon_lag": h,
                       "statistic": res.statistic, "p_value": res.p_value,
                       "p_value_str": res.p_value_str, "significant": res.significant,
                       "critical": float(np.quantile(res.bootstrap_stats, c.percentile)),
                       "n_exceed": res.n_exceed})
        write_csv(root / "bootstrap" / f"{_pair_name(a, b)}__lag{h}.csv",
                  pd.DataFrame({"replicate": np.arange(len(res.bootstrap_stats)),
                                "statistic": res.bootstrap_stats}))
    write_csv(root / "table.csv", pd.DataFrame(list(table.values())))
    write_json(root / "table.json", {"tests": detail, "n_bootstrap": c.n_bootstrap})
    update_manifest(cfg, "cgc", {"horizons": c.horizons, "n_bootstrap": c.n_bootstrap,
                                 "percentile": c.percentile, "bernstein_degree": c.bernstein_degree,
                                 "bandwidth_rule": c.kde_bandwidth_rule,
                                 "block_length": c.block_length}, seeds)


def mse_pairs(cfg: RunConfig) -> list[tuple[str, str]]:
    pairs = [tuple(p) for p in cfg.mse_pairs]
    for target in ("crypto_up", "crypto_down"):
        extra = (cfg.strategy.causer, target)
        if extra not in pairs:
            pairs.append(extra)
    return pairs


def mse_config(cfg: RunConfig) -> MseConfig:
    seed = sub_seed(cfg.seed, "mse")
    grid = cfg.gbt.hyperparams(sub_seed(cfg.seed, "mse:gbt"))
    return MseConfig(cfg.train_end_ts, cfg.test_end_ts, cfg.refit_every,
                     grid=None if grid is None else tuple(grid), n_folds=cfg.gbt.n_folds,
                     garch_starts=cfg.garch_starts,
                     winsor=None if cfg.winsor is None else tuple(cfg.winsor), seed=seed)


def run_backtest_mse(cfg: RunConfig) -> None:
    root = out_dir(cfg) / "mse"
    panels = category_panels(read_transforms(cfg), cfg.groups)
    mcfg = mse_config(cfg)
    pairs = mse_pairs(cfg)
    factors = list(dict.fromkeys(f for pair in pairs for f in reversed(pair)))
    logger.info("tracking PCA and E-GARCH state for %d factors", len(factors))
    tracks = Parallel(n_jobs=cfg.workers)(delayed(track_factor)(panels[f], f, mcfg) for f in factors)
    cache: dict = {(f, mcfg): t for f, t in zip(factors, tracks)}
    # in-process (one worker) the cache also shares each target's benchmark model
    results = Parallel(n_jobs=cfg.workers)(
        delayed(run_mse_backtest)(panels, pair, mcfg, cache) for pair in pairs)
    rows = []
    for (causer, target), res in zip(pairs, results):
        logger.info("MSE backtest %s -> %s: %.2f%%", causer, target, res.mse_reduction)
        sub = root / _pair_name(causer, target)
        write_csv(sub / "records.csv", res.records)
        write_csv(sub / "importance.csv", res.importance)
        write_json(sub / "summary.json", res.summary())
        if res.error:
            raise NumericalError(f"MSE backtest {causer} -> {target} aborted: {res.error}",
                                 stage="backtest-mse")
        rows.append({"causer": causer, "target": target,
                     "mse_red_vs_benchmark_pct": res.mse_reduction,
                     "dm_p_vs_benchmark": format_p(res.dm.p_value if res.dm else None),
                     "mse_red_vs_egarch_pct": res.reduction_vs_egarch,
                     "dm_p_vs_egarch": format_p(res.dm_egarch.p_value if res.dm_egarch else None),
                     "n_forecasts": len(res.records)})
    write_csv(root / "table.csv", pd.DataFrame(rows))
    update_manifest(cfg, "backtest-mse", {"refit_every": cfg.refit_every, "lags": [1, 7, 30],
                                          "moving_averages": [7, 30], "n_folds": cfg.gbt.n_folds,
                                          "grid": cfg.gbt.grid or "default", "winsor": cfg.winsor},
                    {"mse": mcfg.seed, "mse:gbt": sub_seed(cfg.seed, "mse:gbt")})


def _read_records(cfg: RunConfig, causer: str, target: str) -> pd.DataFrame:
    path = out_dir(cfg) / "mse" / _pair_name(causer, target) / "records.csv"
    if not path.exists():
        raise DataValidationError(f"missing forecasts {path}; run 'backtest-mse' first")
    return pd.read_csv(path, parse_dates=["date", "origin"])


def _one_strategy(data: StrategyData, variant: str, target: float, cost_bp: float, days: int):
    return run_strategy_backtest(data, variant, target, cost_bp, days)


def run_backtest_strategy(cfg: RunConfig) -> None:
    root = out_dir(cfg) / "strategy"
    s = cfg.strategy
    assets = load_assets(cfg)
    up = _read_records(cfg, s.causer, "crypto_up")
    down = _read_records(cfg, s.causer, "crypto_down")
    origins = pd.DatetimeIndex(sorted(set(up["origin"]) & set(down["origin"])))
    data = StrategyData({a: assets[a] for a in cfg.cryptos},
                        {"benchmark": (up, down), "challenger": (up, down)}, origins)
    jobs = [("buy_and_hold", None)] + [(v, t) for t in s.targets
                                       for v in ("benchmark", "challenger", "naive")]
    ledgers = Parallel(n_jobs=cfg.workers)(
        delayed(_one_strategy)(data, v, 1.0 if t is None else t, s.cost_bp, s.days_per_year)
        for v, t in jobs)
    table, equity = [], {}
    for (variant, target), led in zip(jobs, ledgers):
        tag = variant if target is None else f"{variant}_{int(round(100 * target))}"
        write_csv(root / f"ledger_{tag}.csv", led.rows)
        if not led.signals.empty:
            write_csv(root / f"signals_{tag}.csv", led.signals)
        row = led.summary()
        row["sigma_target"] = "-" if target is None else target
        table.append(row)
        if not led.rows.empty:
            equity[tag] = led.rows.set_index("date")["equity"]
        if led.error:
            write_json(root / "table.json", table)
            raise NumericalError(f"strategy {tag} aborted: {led.error}", stage="backtest-strategy")
    frame = pd.DataFrame(table)
    write_csv(root / "table.csv", frame)
    write_json(root / "table.json", table)
    write_csv(root / "equity.csv", pd.DataFrame(equity).rename_axis("date"), index=True)
    update_manifest(cfg, "backtest-strategy", {"targets": s.targets, "cost_bp": s.cost_bp,
                                               "days_per_year": s.days_per_year,
                                               "causer": s.causer}, {})


def run_simulate(cfg: RunConfig) -> None:
    seed = sub_seed(cfg.seed, "simulate")
    design = MarketDesign(n_days=cfg.simulate_days, start=cfg.simulate_start,
                          stable_ids=tuple(cfg.stablecoins), crypto_ids=tuple(cfg.cryptos))
    series, truth = simulate_market(seed, design)
    vendor = {canon: cfg.column_map.get(canon, canon) for canon in
              ("date", "open", "high", "low", "close", "volume")}
    for s in series:
        frame = s.frame.reset_index().rename(columns=vendor)
        write_csv(cfg.csv_path(s.asset_id), frame)
    truth["master_seed"] = cfg.seed
    write_json(out_dir(cfg) / "simulate" / "ground_truth.json", truth)
    update_manifest(cfg, "simulate", {"n_days": cfg.simulate_days, "start": cfg.simulate_start},
                    {"simulate": seed})


def run_report_all(cfg: RunConfig) -> None:
    for stage in STAGES:
        logger.info("stage %s", stage)
        COMMANDS[stage](cfg)


COMMANDS = {
    "ingest": run_ingest,
    "factors": run_factors,
    "cgc": run_cgc,
    "backtest-mse": run_backtest_mse,
    "backtest-strategy": run_backtest_strategy,
    "simulate": run_simulate,
    "report-all": run_report_all,
}
