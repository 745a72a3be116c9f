"""Copula Granger causality: conditional-CDF residuals, Bernstein copula, bootstrap.

For a horizon ``lag`` the test asks whether ``causer[t - lag]`` carries
information about ``target[t]`` beyond ``target[t - lag]``. Both are mapped
to uniform residuals through Gaussian-kernel conditional CDFs given
``target[t - lag]``; the statistic is the mean log density of a Bernstein
copula fitted to the residual pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import stats

from .errors import DegenerateInputError

DENSITY_FLOOR = 1e-10
_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class CgcConfig:
    horizon_lag: int = 1
    n_bootstrap: int = 200
    percentile: float = 0.95
    bernstein_degree: int | None = None  # None: ceil(T ** (1/3)) clipped to [8, 20]
    kde_bandwidth_rule: str = "silverman"
    block_length: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.n_bootstrap < 100:
            raise ValueError("n_bootstrap must be >= 100")
        if self.bernstein_degree is not None and self.bernstein_degree < 2:
            raise ValueError("bernstein_degree must be >= 2")
        if not 0 < self.percentile < 1:
            raise ValueError("percentile must lie in (0, 1)")


@dataclass
class CgcResult:
    causer: str
    target: str
    horizon_lag: int
    statistic: float
    bootstrap_stats: np.ndarray = field(repr=False)
    p_value: float
    significant: bool

    @property
    def n_exceed(self) -> int:
        return int(np.sum(self.bootstrap_stats >= self.statistic))

    @property
    def p_value_str(self) -> str:
        if self.n_exceed == 0:
            return f"<{1.0 / len(self.bootstrap_stats):g}"
        return f"{self.p_value:.3f}"


def bandwidth(x: np.ndarray, rule: str = "silverman") -> float:
    x = np.asarray(x, dtype=float)
    n = x.size
    sd = np.std(x, ddof=1)
    if rule == "silverman":
        iqr = np.subtract(*np.percentile(x, [75, 25]))
        spread = min(sd, iqr / 1.349) if iqr > 0 else sd
        return 0.9 * spread * n ** -0.2
    if rule == "scott":
        return 1.059 * sd * n ** -0.2
    raise ValueError(f"unknown bandwidth rule {rule!r}")


@numba.njit(cache=True)
def _kernel_weights(cond, h):
    """Row-normalised Gaussian weights with a zero diagonal."""
    n = cond.shape[0]
    w = np.empty((n, n))
    inv = 0.5 / (h * h)
    for t in range(n):
        dmin = np.inf
        for s in range(n):
            if s != t:
                d = cond[s] - cond[t]
                d = d * d
                if d < dmin:
                    dmin = d
        total = 0.0
        for s in range(n):
            if s == t:
                w[t, s] = 0.0
            else:
                d = cond[s] - cond[t]
                v = math.exp(-(d * d - dmin) * inv)
                w[t, s] = v
                total += v
        for s in range(n):
            w[t, s] /= total
    return w


@numba.njit(cache=True)
def _phi_matrix(y, h):
    n = y.shape[0]
    out = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = 0.5 * math.erfc(-(y[i] - y[j]) / (h * _SQRT2))
    return out


@numba.njit(cache=True)
def _weighted_cdf(w, phi_pool, idx):
    """U[t] = sum_s w[t, s] * phi_pool[idx[t], idx[s]]."""
    n = idx.shape[0]
    out = np.empty(n)
    for t in range(n):
        row = phi_pool[idx[t]]
        acc = 0.0
        for s in range(n):
            acc += w[t, s] * row[idx[s]]
        out[t] = acc
    return out


def _check_inputs(y, cond):
    y = np.asarray(y, dtype=float)
    cond = np.asarray(cond, dtype=float)
    if y.shape != cond.shape or y.ndim != 1:
        raise ValueError("y and cond must be 1-d and of equal length")
    if np.ptp(cond) == 0:
        raise DegenerateInputError("constant conditioning variable")
    return y, cond


def conditional_cdf_kde(y, cond, bandwidths: tuple[float, float] | None = None,
                        rule: str = "silverman") -> np.ndarray:
    """Leave-one-out Gaussian-kernel estimate of F(y_t | cond_t) at each t.

    ``bandwidths`` is ``(h_y, h_cond)``; defaults come from ``rule``.
    """
    y, cond = _check_inputs(y, cond)
    if y.size < 2:
        raise ValueError("need at least two observations")
    h_y, h_x = bandwidths if bandwidths is not None else (bandwidth(y, rule), bandwidth(cond, rule))
    if not (h_y > 0 and h_x > 0):
        raise DegenerateInputError("kernel bandwidth must be positive")
    w = _kernel_weights(cond, float(h_x))
    idx = np.arange(y.size)
    return _weighted_cdf(w, _phi_matrix(y, float(h_y)), idx)


class BernsteinCopula:
    """Bernstein-smoothed histogram copula on a degree x degree grid."""

    def __init__(self, u, v, degree: int):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if u.size == 0:
            raise ValueError("empty sample")
        if degree < 2:
            raise ValueError("degree must be >= 2")
        if np.any((u <= 0) | (u >= 1) | (v <= 0) | (v >= 1)):
            raise ValueError("copula sample must lie inside the open unit square")
        self.degree = degree
        ju = np.minimum((u * degree).astype(int), degree - 1)
        jv = np.minimum((v * degree).astype(int), degree - 1)
        counts = np.zeros((degree, degree))
        np.add.at(counts, (ju, jv), 1.0)
        self.theta = counts / u.size

    def basis(self, a) -> np.ndarray:
        """Beta(j+1, degree-j) densities for j = 0..degree-1, one row per point."""
        a = np.atleast_1d(np.asarray(a, dtype=float))
        j = np.arange(self.degree)
        return self.degree * stats.binom.pmf(j[None, :], self.degree - 1, a[:, None])

    def pdf_pairs(self, a, b) -> np.ndarray:
        ba, bb = self.basis(a), self.basis(b)
        return np.einsum("ij,jk,ik->i", ba, self.theta, bb)

    def pdf_grid(self, a, b) -> np.ndarray:
        return self.basis(a) @ self.theta @ self.basis(b).T

    def __call__(self, a, b):
        return self.pdf_pairs(a, b)


def bernstein_copula_density(u, v, degree: int) -> BernsteinCopula:
    return BernsteinCopula(u, v, degree)


def default_degree(n: int) -> int:
    return int(min(max(math.ceil(n ** (1.0 / 3.0) - 1e-9), 8), 20))


def _clip_unit(x):
    eps = 1e-12
    return np.clip(x, eps, 1.0 - eps)


def copula_loglik(u, v, degree: int) -> float:
    dens = bernstein_copula_density(_clip_unit(u), _clip_unit(v), degree).pdf_pairs(
        _clip_unit(u), _clip_unit(v))
    return float(np.mean(np.log(np.maximum(dens, DENSITY_FLOOR))))


class _Prepared:
    """Everything about one (target, causer, lag) test that the bootstrap reuses."""

    def __init__(self, target, causer, cfg: CgcConfig):
        target = np.asarray(target, dtype=float)
        causer = np.asarray(causer, dtype=float)
        lag = int(cfg.horizon_lag)
        if target.shape != causer.shape:
            raise ValueError("target and causer must be aligned and of equal length")
        n = target.size
        if lag < 1 or n - lag < 100:
            raise ValueError(f"need at least {100 + lag} observations for lag {lag}, got {n}")
        y, cond = _check_inputs(target[lag:], target[:n - lag])
        c = causer[:n - lag]
        if np.ptp(c) == 0:
            raise DegenerateInputError("constant causer series")
        self.n, self.lag, self.causer = n, lag, causer
        rule = cfg.kde_bandwidth_rule
        self.w = _kernel_weights(cond, float(bandwidth(cond, rule)))
        self.u = _weighted_cdf(self.w, _phi_matrix(y, float(bandwidth(y, rule))),
                               np.arange(y.size))
        # pool covers the full causer so bootstrap resamples reuse it by index
        self.phi_pool = _phi_matrix(causer, float(bandwidth(c, rule)))
        self.degree = cfg.bernstein_degree or default_degree(y.size)

    def v_from_indices(self, idx: np.ndarray) -> np.ndarray:
        return _weighted_cdf(self.w, self.phi_pool, idx[: self.n - self.lag])

    def statistic(self, idx: np.ndarray) -> float:
        return copula_loglik(self.u, self.v_from_indices(idx), self.degree)


def cgc_statistic(target, causer, cfg: CgcConfig) -> float:
    prep = _Prepared(target, causer, cfg)
    return prep.statistic(np.arange(prep.n))


def cgc_residuals(target, causer, cfg: CgcConfig) -> tuple[np.ndarray, np.ndarray, int]:
    """The (U, V) uniform residual pairs and the copula degree used by the statistic."""
    prep = _Prepared(target, causer, cfg)
    return prep.u, prep.v_from_indices(np.arange(prep.n)), prep.degree


def stationary_bootstrap_indices(n: int, block_length: float, rng: np.random.Generator) -> np.ndarray:
    """Politis-Romano resampling indices with geometric block lengths (circular)."""
    new_block = rng.random(n) < 1.0 / block_length
    new_block[0] = True
    starts = rng.integers(0, n, size=n)
    block_pos = np.flatnonzero(new_block)
    block_id = np.cumsum(new_block) - 1
    offset = np.arange(n) - block_pos[block_id]
    return (starts[block_pos][block_id] + offset) % n


def bootstrap_cgc(target, causer, cfg: CgcConfig, causer_id: str = "causer",
                  target_id: str = "target") -> CgcResult:
    """Observed statistic against stationary-bootstrap resamples of the causer.

    The target is held fixed; resampling the causer in blocks keeps its own
    serial dependence while breaking any link to the target.
    """
    prep = _Prepared(target, causer, cfg)
    observed = prep.statistic(np.arange(prep.n))
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_bootstrap)
    boot = np.empty(cfg.n_bootstrap)
    for b, child in enumerate(children):
        idx = stationary_bootstrap_indices(prep.n, cfg.block_length, np.random.default_rng(child))
        boot[b] = prep.statistic(idx)
    p_value = float(np.sum(boot >= observed)) / cfg.n_bootstrap
    critical = float(np.quantile(boot, cfg.percentile))
    return CgcResult(causer_id, target_id, cfg.horizon_lag, observed, boot, p_value,
                     bool(observed > critical))
