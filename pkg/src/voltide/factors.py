"""Correlation-matrix PCA market factors and Horn's parallel analysis."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd

from .errors import DataValidationError, DegenerateInputError

CATEGORIES = ("stable_v", "stable_up", "stable_down", "crypto_v", "crypto_up", "crypto_down")


@dataclass
class PcaModel:
    category: str
    asset_ids: list[str]
    means: np.ndarray
    stds: np.ndarray
    loadings: np.ndarray  # (n_assets, n_components), columns unit norm
    eigenvalues: np.ndarray
    scores: pd.Series  # PC1 scores on the fitting sample

    @property
    def pc1(self) -> np.ndarray:
        return self.loadings[:, 0]

    @property
    def explained(self) -> np.ndarray:
        return self.eigenvalues / self.eigenvalues.sum()

    def transform(self, panel: pd.DataFrame) -> pd.Series:
        """PC1 scores of new rows using the fitted standardisation."""
        x = panel[self.asset_ids].to_numpy(dtype=float)
        return pd.Series(_project(x, self.means, self.stds, self.pc1), index=panel.index,
                         name=self.category)

    def to_average_units(self, score):
        """Rank-1 inverse of the standardisation, averaged across assets.

        Maps a PC1 score back to the cross-asset mean of the raw series.
        """
        scale = float(np.mean(self.pc1 * self.stds))
        offset = float(np.mean(self.means))
        return scale * score + offset

    def to_report(self) -> dict:
        return {
            "category": self.category,
            "asset_ids": list(self.asset_ids),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "loadings_pc1": dict(zip(self.asset_ids, self.pc1.tolist())),
            "loadings": self.loadings.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "explained_variance": self.explained.tolist(),
        }


@dataclass
class HornResult:
    eigenvalues_observed: np.ndarray
    eigenvalues_critical: np.ndarray
    retained: list[int] = field(default_factory=list)

    @property
    def exceeds(self) -> np.ndarray:
        """Per-component comparison, before the stop-at-first-failure rule."""
        return self.eigenvalues_observed > self.eigenvalues_critical

    def scree_frame(self) -> pd.DataFrame:
        k = len(self.eigenvalues_observed)
        return pd.DataFrame({"component": np.arange(1, k + 1),
                             "lambda_corr": self.eigenvalues_observed,
                             "lambda_crit": self.eigenvalues_critical,
                             "exceeds": self.exceeds})


def _project(x: np.ndarray, means, stds, loading) -> np.ndarray:
    # column-by-column so each row's score does not depend on the other rows
    out = np.zeros(x.shape[0])
    for j in range(x.shape[1]):
        out = out + (x[:, j] - means[j]) / stds[j] * loading[j]
    return out


def as_panel(panel) -> pd.DataFrame:
    """Accept a DataFrame or a mapping of equally indexed Series."""
    if isinstance(panel, pd.DataFrame):
        frame = panel
    else:
        items = dict(panel)
        indexes = [s.index for s in items.values()]
        if any(not idx.equals(indexes[0]) for idx in indexes[1:]):
            raise DataValidationError("panel series have misaligned dates")
        frame = pd.DataFrame(items)
    if frame.isna().to_numpy().any():
        raise DataValidationError("panel has missing values (misaligned dates?)")
    return frame.astype(float)


def _standardize(x: np.ndarray, names) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    means = x.mean(axis=0)
    stds = x.std(axis=0, ddof=1)
    flat = ~(stds > 0)
    if flat.any():
        raise DegenerateInputError(f"constant series in PCA panel: {list(np.asarray(names)[flat])}")
    return (x - means) / stds, means, stds


def _sorted_eigh(corr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(corr)
    order = np.argsort(vals)[::-1]
    return np.maximum(vals[order], 0.0), vecs[:, order]


def fit_pca(panel, category: str = "factor") -> PcaModel:
    frame = as_panel(panel)
    if frame.shape[1] < 2:
        raise DataValidationError("PCA needs at least two series")
    x = frame.to_numpy()
    z, means, stds = _standardize(x, frame.columns)
    corr = z.T @ z / (len(z) - 1)
    vals, vecs = _sorted_eigh(corr)
    signs = np.where(vecs.sum(axis=0) < 0, -1.0, 1.0)
    vecs = vecs * signs
    scores = pd.Series(_project(x, means, stds, vecs[:, 0]), index=frame.index, name=category)
    return PcaModel(category, list(frame.columns), means, stds, vecs, vals, scores)


def align_signs(model: PcaModel, previous: np.ndarray | None) -> PcaModel:
    """Flip PC1 so it points the same way as ``previous`` (expanding-window refits)."""
    if previous is None or float(np.dot(model.pc1, previous)) >= 0:
        return model
    loadings = model.loadings.copy()
    loadings[:, 0] *= -1
    return PcaModel(model.category, model.asset_ids, model.means, model.stds, loadings,
                    model.eigenvalues, -model.scores)


def random_eigenvalues(n_obs: int, n_vars: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal((n_obs, n_vars))
    x = (x - x.mean(axis=0)) / x.std(axis=0, ddof=1)
    return _sorted_eigh(x.T @ x / (n_obs - 1))[0]


def horns_parallel_analysis(panel, n_random: int = 500, percentile: float = 0.95,
                            seed: int = 0) -> HornResult:
    if n_random < 100:
        raise ValueError("n_random must be >= 100")
    frame = as_panel(panel)
    observed = fit_pca(frame).eigenvalues
    n_obs, n_vars = frame.shape
    children = np.random.SeedSequence(seed).spawn(n_random)
    draws = np.stack([random_eigenvalues(n_obs, n_vars, np.random.default_rng(s))
                      for s in children])
    critical = np.quantile(draws, percentile, axis=0)
    # keep the leading run of components that beat their threshold; a later
    # component can only matter if every earlier one does
    retained = []
    for k in range(n_vars):
        if not observed[k] > critical[k]:
            break
        retained.append(k)
    return HornResult(observed, critical, retained)


def expanding_pca(panel: pd.DataFrame, category: str, previous: PcaModel | None = None) -> PcaModel:
    """Refit on all rows of ``panel`` and keep PC1 orientation from ``previous``."""
    model = fit_pca(panel, category)
    return align_signs(model, None if previous is None else previous.pc1)


def category_panels(transforms: Mapping[str, Mapping[str, pd.Series]],
                    groups: Mapping[str, list[str]]) -> dict[str, pd.DataFrame]:
    """Assemble the six category panels from per-asset transformed series.

    ``transforms[asset][metric]`` holds one series; ``groups`` maps "stable"
    and "crypto" to asset lists.
    """
    metric_of = {"v": "delta_log_volume", "up": "delta_sigma_up", "down": "delta_sigma_down"}
    panels = {}
    for group, assets in groups.items():
        for short, metric in metric_of.items():
            frame = pd.DataFrame({a: transforms[a][metric] for a in assets})
            panels[f"{group}_{short}"] = frame.dropna()
    return panels
