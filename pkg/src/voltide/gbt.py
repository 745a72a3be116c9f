"""Squared-error gradient-boosted regression trees with exact greedy splits.

Trees are grown level by level. Each feature keeps one presorted row order,
so a level costs one pass per feature over the training rows.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numba
import numpy as np
import pandas as pd


@dataclass(frozen=True)
class GbtHyperParams:
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 5
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 0 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError(f"invalid tree counts in {self}")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")


def default_grid(seed: int = 0, min_samples_leaf: int = 5) -> list[GbtHyperParams]:
    return [GbtHyperParams(n, d, lr, min_samples_leaf, ss, seed)
            for d, lr, n, ss in itertools.product((2, 3, 4), (0.05, 0.1), (100, 300), (0.8, 1.0))]


class Tree(NamedTuple):
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray


@dataclass
class GbtModel:
    trees: list[Tree]
    base_prediction: float
    learning_rate: float
    feature_names: list[str]
    gain_by_feature: np.ndarray
    train_loss: list[float] = field(default_factory=list, repr=False)
    train_predictions: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def importance(self) -> pd.DataFrame:
        frame = pd.DataFrame({"feature": self.feature_names, "gain": self.gain_by_feature})
        return frame.sort_values(["gain", "feature"], ascending=[False, True],
                                 kind="stable").reset_index(drop=True)

    def staged_predict(self, X, stages: Sequence[int]) -> dict[int, np.ndarray]:
        x = _as_matrix(X, self.n_features)
        out = np.full(x.shape[0], self.base_prediction)
        wanted = set(stages)
        result = {}
        if 0 in wanted:
            result[0] = out.copy()
        for k, tree in enumerate(self.trees, start=1):
            out = out + self.learning_rate * _predict_tree(*tree, x)
            if k in wanted:
                result[k] = out.copy()
        return result


def _as_matrix(X, n_features: int | None = None) -> np.ndarray:
    x = np.ascontiguousarray(X.to_numpy(dtype=float) if isinstance(X, pd.DataFrame) else X,
                             dtype=float)
    if x.ndim != 2:
        raise ValueError("feature matrix must be 2-d")
    if n_features is not None and x.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature matrix has missing or non-finite values")
    return x


@numba.njit(cache=True)
def _build_tree(x, order, r, in_sample, max_depth, min_leaf, rel_tol):
    n, n_feat = x.shape
    cap = 2 ** (max_depth + 1) - 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    gains = np.zeros(n_feat)

    node_of = np.full(n, -1, np.int64)
    for i in range(n):
        if in_sample[i]:
            node_of[i] = 0
    active = np.zeros(cap, np.bool_)
    active[0] = True
    n_nodes = 1

    tot_s = np.zeros(cap)
    tot_q = np.zeros(cap)
    tot_n = np.zeros(cap, np.int64)
    for depth in range(max_depth + 1):
        tot_s[:] = 0.0
        tot_q[:] = 0.0
        tot_n[:] = 0
        for i in range(n):
            k = node_of[i]
            if k >= 0 and active[k]:
                tot_s[k] += r[i]
                tot_q[k] += r[i] * r[i]
                tot_n[k] += 1
        for k in range(n_nodes):
            if active[k]:
                value[k] = tot_s[k] / tot_n[k]
        if depth == max_depth:
            break

        best_gain = np.zeros(cap)
        best_feat = np.full(cap, -1, np.int64)
        best_thr = np.zeros(cap)
        left_s = np.zeros(cap)
        left_n = np.zeros(cap, np.int64)
        last = np.zeros(cap)
        for f in range(n_feat):
            left_s[:] = 0.0
            left_n[:] = 0
            for j in range(n):
                i = order[f, j]
                k = node_of[i]
                if k < 0 or not active[k]:
                    continue
                v = x[i, f]
                nl = left_n[k]
                if nl > 0 and v > last[k]:
                    nr = tot_n[k] - nl
                    if nl >= min_leaf and nr >= min_leaf:
                        sl = left_s[k]
                        sr = tot_s[k] - sl
                        g = sl * sl / nl + sr * sr / nr - tot_s[k] * tot_s[k] / tot_n[k]
                        if g > best_gain[k]:
                            best_gain[k] = g
                            best_feat[k] = f
                            thr = 0.5 * (last[k] + v)
                            best_thr[k] = thr if thr < v else last[k]
                left_s[k] += r[i]
                left_n[k] = nl + 1
                last[k] = v

        any_split = False
        for k in range(n_nodes):
            if not active[k]:
                continue
            active[k] = False
            if best_feat[k] >= 0 and best_gain[k] > rel_tol * tot_q[k]:
                feature[k] = best_feat[k]
                threshold[k] = best_thr[k]
                left[k] = n_nodes
                right[k] = n_nodes + 1
                active[n_nodes] = True
                active[n_nodes + 1] = True
                gains[best_feat[k]] += best_gain[k]
                n_nodes += 2
                any_split = True
        if not any_split:
            break
        for i in range(n):
            k = node_of[i]
            if k >= 0 and feature[k] >= 0 and left[k] >= 0:
                # only rows sitting in a node split at this level move
                if x[i, feature[k]] <= threshold[k]:
                    node_of[i] = left[k]
                else:
                    node_of[i] = right[k]
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes], gains)


@numba.njit(cache=True)
def _predict_tree(feature, threshold, left, right, value, x):
    n = x.shape[0]
    out = np.empty(n)
    for i in range(n):
        k = 0
        while feature[k] >= 0:
            k = left[k] if x[i, feature[k]] <= threshold[k] else right[k]
        out[i] = value[k]
    return out


_REL_TOL = 1e-10


def fit_gbt(X, y, hp: GbtHyperParams, feature_names: Sequence[str] | None = None) -> GbtModel:
    x = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    n, n_feat = x.shape
    if n == 0:
        raise ValueError("empty training data")
    if y.shape != (n,) or not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite and match the feature rows")
    if n < 2 * hp.min_samples_leaf:
        raise ValueError(f"need at least {2 * hp.min_samples_leaf} rows, got {n}")
    if feature_names is None:
        feature_names = list(X.columns) if isinstance(X, pd.DataFrame) else [f"x{j}" for j in range(n_feat)]

    order = np.ascontiguousarray(np.argsort(x, axis=0, kind="stable").T)
    rng = np.random.default_rng(hp.seed)
    n_sub = max(2 * hp.min_samples_leaf, int(round(hp.subsample * n)))
    base = float(np.mean(y))
    pred = np.full(n, base)
    gains = np.zeros(n_feat)
    trees, losses = [], [float(np.mean((y - pred) ** 2))]
    full = np.ones(n, dtype=np.bool_)
    for _ in range(hp.n_trees):
        if hp.subsample < 1.0 and n_sub < n:
            mask = np.zeros(n, dtype=np.bool_)
            mask[rng.choice(n, size=n_sub, replace=False)] = True
        else:
            mask = full
        *arrays, tree_gain = _build_tree(x, order, y - pred, mask, hp.max_depth,
                                         hp.min_samples_leaf, _REL_TOL)
        tree = Tree(*arrays)
        trees.append(tree)
        gains += tree_gain
        pred = pred + hp.learning_rate * _predict_tree(*tree, x)
        losses.append(float(np.mean((y - pred) ** 2)))
    return GbtModel(trees, base, hp.learning_rate, list(feature_names), gains, losses, pred)


def predict(model: GbtModel, X) -> np.ndarray:
    x = _as_matrix(X, model.n_features)
    out = np.full(x.shape[0], model.base_prediction)
    for tree in model.trees:
        out = out + model.learning_rate * _predict_tree(*tree, x)
    return out


def forward_folds(n: int, n_folds: int) -> list[tuple[slice, slice]]:
    """Expanding train block followed by the next contiguous validation block."""
    block = n // (n_folds + 1)
    return [(slice(0, k * block), slice(k * block, (k + 1) * block)) for k in range(1, n_folds + 1)]


def tune(X, y, grid: Sequence[GbtHyperParams], n_folds: int = 5,
         return_scores: bool = False):
    """Grid search with forward-chaining folds; lowest mean validation MSE wins.

    Ties go to fewer trees, then shallower trees, then grid order. Grid points
    differing only in ``n_trees`` share one fit, read off at each stage.
    """
    if not grid:
        raise ValueError("empty hyperparameter grid")
    x = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    block = len(y) // (n_folds + 1)
    min_leaf = max(hp.min_samples_leaf for hp in grid)
    if block < max(2 * min_leaf, 5):
        raise ValueError(f"fold too small: {block} rows per block for {n_folds} folds")

    groups: dict[GbtHyperParams, list[int]] = {}
    for i, hp in enumerate(grid):
        groups.setdefault(replace(hp, n_trees=0), []).append(i)
    scores = np.zeros(len(grid))
    for key, members in groups.items():
        stages = sorted({grid[i].n_trees for i in members})
        fold_mse = {s: [] for s in stages}
        for train, valid in forward_folds(len(y), n_folds):
            model = fit_gbt(x[train], y[train], replace(key, n_trees=stages[-1]))
            staged = model.staged_predict(x[valid], stages)
            for s in stages:
                fold_mse[s].append(float(np.mean((y[valid] - staged[s]) ** 2)))
        for i in members:
            scores[i] = float(np.mean(fold_mse[grid[i].n_trees]))
    best = min(range(len(grid)), key=lambda i: (scores[i], grid[i].n_trees, grid[i].max_depth, i))
    if return_scores:
        return grid[best], scores
    return grid[best]
