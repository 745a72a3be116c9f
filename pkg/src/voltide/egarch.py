"""Fernandez-Steel skewed Student-t and AR(1)-EGARCH(1,1) estimation.

The shock law is the Fernandez-Steel skewing of a Student-t with ``nu``
degrees of freedom, shifted and scaled to zero mean and unit variance.
``xi > 1`` puts more mass on the right.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
import pandas as pd
from scipy import integrate, optimize, special

from .errors import ConvergenceError, DegenerateInputError

NU_BOUNDS = (2.05, 200.0)
XI_BOUNDS = (0.2, 5.0)
COEF_BOUND = 0.999
LOG_VAR_LIMIT = 60.0


@dataclass(frozen=True)
class SkewTParams:
    nu: float
    xi: float
    mu_dist: float = field(init=False)
    sigma_dist: float = field(init=False)

    def __post_init__(self):
        if not self.nu > 2:
            raise ValueError(f"nu must exceed 2, got {self.nu}")
        if not self.xi > 0:
            raise ValueError(f"xi must be positive, got {self.xi}")
        m, s = _fs_moments(self.nu, self.xi)
        object.__setattr__(self, "mu_dist", m)
        object.__setattr__(self, "sigma_dist", s)


def _t_logpdf_const(nu: float) -> float:
    return math.lgamma((nu + 1) / 2) - math.lgamma(nu / 2) - 0.5 * math.log(nu * math.pi)


def _fs_moments(nu: float, xi: float) -> tuple[float, float]:
    """Mean and standard deviation of the unstandardised skewed t."""
    m1 = 2.0 * math.exp(_t_logpdf_const(nu)) * nu / (nu - 1.0)
    m2 = nu / (nu - 2.0)
    mean = m1 * (xi - 1.0 / xi)
    second = m2 * (xi**3 + xi**-3) / (xi + 1.0 / xi)
    return mean, math.sqrt(second - mean * mean)


def _raw_cdf(x, nu, xi):
    x = np.asarray(x, dtype=float)
    k = xi * xi + 1.0
    neg = 2.0 / k * special.stdtr(nu, xi * x)
    pos = 1.0 - 2.0 * xi * xi / k * special.stdtr(nu, -x / xi)
    return np.where(x < 0, neg, pos)


def _raw_logpdf(x, nu, xi):
    x = np.asarray(x, dtype=float)
    u = np.where(x < 0, x * xi, x / xi)
    return (math.log(2.0 / (xi + 1.0 / xi)) + _t_logpdf_const(nu)
            - (nu + 1) / 2 * np.log1p(u * u / nu))


def skewt_logpdf(x, params: SkewTParams):
    m, s = params.mu_dist, params.sigma_dist
    return math.log(s) + _raw_logpdf(m + s * np.asarray(x, dtype=float), params.nu, params.xi)


def skewt_pdf(x, params: SkewTParams):
    return np.exp(skewt_logpdf(x, params))


def skewt_cdf(x, params: SkewTParams):
    return _raw_cdf(params.mu_dist + params.sigma_dist * np.asarray(x, dtype=float),
                    params.nu, params.xi)


def skewt_quantile(p, params: SkewTParams):
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)) or np.any(np.isnan(p)):
        raise ValueError("quantile probabilities must lie strictly inside (0, 1)")
    nu, xi = params.nu, params.xi
    k = xi * xi + 1.0
    p0 = 1.0 / k
    with np.errstate(invalid="ignore"):
        lower = special.stdtrit(nu, np.minimum(p * k / 2.0, 0.5)) / xi
        upper = -xi * special.stdtrit(nu, np.minimum((1.0 - p) * k / (2.0 * xi * xi), 0.5))
    x = np.where(p < p0, lower, upper)
    # one Newton step on the raw scale tightens stdtrit's inversion error
    dens = np.exp(_raw_logpdf(x, nu, xi))
    x = x - (_raw_cdf(x, nu, xi) - p) / np.where(dens > 0, dens, np.inf)
    return (x - params.mu_dist) / params.sigma_dist


def skewt_rvs(params: SkewTParams, size, rng: np.random.Generator) -> np.ndarray:
    t = np.abs(rng.standard_t(params.nu, size=size))
    right = rng.random(size) < params.xi**2 / (1.0 + params.xi**2)
    x = np.where(right, params.xi * t, -t / params.xi)
    return (x - params.mu_dist) / params.sigma_dist


def pit(z, dist: SkewTParams):
    return skewt_cdf(z, dist)


def inverse_pit(u, dist: SkewTParams):
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("inverse PIT needs u strictly inside (0, 1)")
    return skewt_quantile(u, dist)


def _expected_abs_closed(nu: float, xi: float, m: float, s: float) -> float:
    """E|z| from the truncated first moment of the Student-t."""
    c = 2.0 / (xi + 1.0 / xi)
    g_const = math.exp(_t_logpdf_const(nu))

    def g1(b):  # integral of u g(u) over (-inf, b]
        return -(nu + b * b) / (nu - 1.0) * g_const * (1.0 + b * b / nu) ** (-(nu + 1) / 2)

    if m <= 0:
        partial = c / xi**2 * g1(xi * m)
        cdf = 2.0 / (xi * xi + 1.0) * special.stdtr(nu, xi * m)
    else:
        partial = c / xi**2 * g1(0.0) + c * xi**2 * (g1(m / xi) - g1(0.0))
        cdf = 1.0 - 2.0 * xi * xi / (xi * xi + 1.0) * special.stdtr(nu, -m / xi)
    return 2.0 * (m * cdf - partial) / s


def expected_abs_shock(dist: SkewTParams) -> float:
    """E|z| by adaptive quadrature on each half-line."""
    f = lambda z: abs(z) * math.exp(float(skewt_logpdf(z, dist)))
    left = integrate.quad(f, -np.inf, 0.0, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    right = integrate.quad(f, 0.0, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    return left + right


@dataclass(frozen=True)
class EgarchParams:
    mu: float
    phi: float
    omega: float
    alpha: float
    beta: float
    gamma: float
    dist: SkewTParams
    e_abs_z: float

    @classmethod
    def build(cls, mu, phi, omega, alpha, beta, gamma, nu, xi) -> "EgarchParams":
        dist = SkewTParams(nu, xi)
        return cls(mu, phi, omega, alpha, beta, gamma, dist, expected_abs_shock(dist))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dist"] = {"nu": self.dist.nu, "xi": self.dist.xi,
                     "mu_dist": self.dist.mu_dist, "sigma_dist": self.dist.sigma_dist}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EgarchParams":
        dist = SkewTParams(d["dist"]["nu"], d["dist"]["xi"])
        return cls(d["mu"], d["phi"], d["omega"], d["alpha"], d["beta"], d["gamma"], dist,
                   d["e_abs_z"])


@dataclass
class FilterState:
    sigma: float
    last_value: float
    last_z: float
    residuals: pd.Series
    cond_vols: pd.Series
    loglik: float = float("nan")

    @property
    def last_log_var(self) -> float:
        return 2.0 * math.log(self.sigma)


@numba.njit(cache=True)
def _filter_kernel(r, mu, phi, omega, alpha, beta, gamma, eabs, log_var0, z0):
    n = r.shape[0]
    z = np.empty(n - 1)
    lv = np.empty(n - 1)
    prev_lv = log_var0
    prev_z = z0
    for t in range(1, n):
        cur = omega + beta * prev_lv + gamma * prev_z + alpha * (abs(prev_z) - eabs)
        cur = min(max(cur, -LOG_VAR_LIMIT), LOG_VAR_LIMIT)
        zt = (r[t] - mu - phi * r[t - 1]) / math.exp(0.5 * cur)
        z[t - 1] = zt
        lv[t - 1] = cur
        prev_lv = cur
        prev_z = zt
    return z, lv


@numba.njit(cache=True)
def _negloglik_kernel(r, mu, phi, omega, alpha, beta, gamma, eabs, log_var0,
                      nu, xi, m, s, log_c):
    n = r.shape[0]
    prev_lv = log_var0
    prev_z = 0.0
    total = 0.0
    half = 0.5 * (nu + 1.0)
    for t in range(1, n):
        cur = omega + beta * prev_lv + gamma * prev_z + alpha * (abs(prev_z) - eabs)
        if cur > LOG_VAR_LIMIT or cur < -LOG_VAR_LIMIT or cur != cur:
            return np.inf
        zt = (r[t] - mu - phi * r[t - 1]) / math.exp(0.5 * cur)
        x = m + s * zt
        u = x * xi if x < 0 else x / xi
        total += log_c - half * math.log1p(u * u / nu) - 0.5 * cur
        prev_lv = cur
        prev_z = zt
    return -total


def _loglik(r: np.ndarray, p: EgarchParams | tuple, log_var0: float, eabs: float | None = None) -> float:
    if isinstance(p, EgarchParams):
        mu, phi, omega, alpha, beta, gamma = p.mu, p.phi, p.omega, p.alpha, p.beta, p.gamma
        nu, xi = p.dist.nu, p.dist.xi
        m, s = p.dist.mu_dist, p.dist.sigma_dist
        eabs = p.e_abs_z if eabs is None else eabs
    else:
        mu, phi, omega, alpha, beta, gamma, nu, xi = p
        m, s = _fs_moments(nu, xi)
        if eabs is None:
            eabs = _expected_abs_closed(nu, xi, m, s)
    log_c = math.log(s) + math.log(2.0 / (xi + 1.0 / xi)) + _t_logpdf_const(nu)
    return -_negloglik_kernel(r, mu, phi, omega, alpha, beta, gamma, eabs, log_var0,
                              nu, xi, m, s, log_c)


def egarch_loglik(values, params: EgarchParams) -> float:
    """Log-likelihood conditional on the first observation."""
    r = np.asarray(values, dtype=float)
    return _loglik(r, params, math.log(np.var(r, ddof=1)))


def _sigmoid(x):
    return 0.5 * (1.0 + math.tanh(0.5 * x))


def _logit(p):
    return math.log(p / (1.0 - p))


class _Coordinates:
    """Unconstrained optimiser coordinates, centred on the sample moments.

    The mean equation is written around its unconditional level so that a
    location shift of the data is absorbed by the centring constants.
    """

    lo_xi, hi_xi = math.log(XI_BOUNDS[0]), math.log(XI_BOUNDS[1])

    def __init__(self, r: np.ndarray):
        self.center = float(np.mean(r))
        self.scale = float(np.std(r, ddof=1))
        self.log_var = math.log(self.scale**2)

    def decode(self, th) -> tuple:
        level = self.center + self.scale * th[0]
        phi = COEF_BOUND * math.tanh(th[1])
        beta = COEF_BOUND * math.tanh(th[4])
        omega = (1.0 - beta) * (self.log_var + th[2])
        nu = NU_BOUNDS[0] + (NU_BOUNDS[1] - NU_BOUNDS[0]) * _sigmoid(th[6])
        xi = math.exp(self.lo_xi + (self.hi_xi - self.lo_xi) * _sigmoid(th[7]))
        return (float(level * (1.0 - phi)), phi, float(omega), float(th[3]), beta, float(th[5]),
                nu, xi)

    def encode(self, mu, phi, omega, alpha, beta, gamma, nu, xi) -> np.ndarray:
        level = mu / (1.0 - phi)
        clip = lambda p: min(max(p, 1e-9), 1 - 1e-9)
        # tanh saturates, so a decoded coefficient can land exactly on the bound
        inner = lambda c: math.atanh(min(max(c / COEF_BOUND, -1 + 1e-12), 1 - 1e-12))
        return np.array([
            (level - self.center) / self.scale,
            inner(phi),
            omega / (1.0 - beta) - self.log_var,
            alpha,
            inner(beta),
            gamma,
            _logit(clip((nu - NU_BOUNDS[0]) / (NU_BOUNDS[1] - NU_BOUNDS[0]))),
            _logit(clip((math.log(xi) - self.lo_xi) / (self.hi_xi - self.lo_xi))),
        ])


_SIMPLEX_STEP = np.array([0.05, 0.2, 0.3, 0.05, 0.3, 0.05, 0.5, 0.2])
_JITTER = np.array([0.1, 0.3, 0.5, 0.1, 0.5, 0.1, 1.0, 0.5])


def _moment_start(r: np.ndarray) -> tuple:
    x = r - r.mean()
    rho = float(np.dot(x[1:], x[:-1]) / np.dot(x, x))
    phi = min(max(rho, -0.5), 0.5)
    beta = 0.9
    return (r.mean() * (1 - phi), phi, (1 - beta) * math.log(np.var(r, ddof=1)),
            0.1, beta, 0.0, 8.0, 1.0)


def filter_series(values, params: EgarchParams, log_var0: float | None = None) -> FilterState:
    """Run the volatility recursion with fixed parameters.

    Residuals and volatilities are indexed from the second observation on.
    """
    index = values.index if isinstance(values, pd.Series) else pd.RangeIndex(len(values))
    r = np.asarray(values, dtype=float)
    if log_var0 is None:
        log_var0 = math.log(np.var(r, ddof=1))
    z, lv = _filter_kernel(r, params.mu, params.phi, params.omega, params.alpha, params.beta,
                           params.gamma, params.e_abs_z, log_var0, 0.0)
    sig = np.exp(0.5 * lv)
    return FilterState(sigma=float(sig[-1]), last_value=float(r[-1]), last_z=float(z[-1]),
                       residuals=pd.Series(z, index=index[1:]),
                       cond_vols=pd.Series(sig, index=index[1:]),
                       loglik=_loglik(r, params, log_var0))


@dataclass
class FitDiagnostics:
    loglik: float
    converged: bool
    n_evals: int
    start_logliks: list[float]


_MAX_POLISH = 8
_STALL_TOL = 1e-9


def fit_egarch(values, seed: int = 0, n_starts: int = 5, maxiter: int = 4000,
               start: EgarchParams | None = None, return_diagnostics: bool = False):
    """Maximum-likelihood AR(1)-EGARCH(1,1) with skewed-t shocks.

    Nelder-Mead from ``n_starts`` points: the moment-based start and
    jittered copies of it. A ``start`` (say, the previous refit) is tried
    first and the moment start is kept as a fallback, since an old optimum
    can sit where the new sample has no finite likelihood. The best run is
    restarted from its optimum before the final answer is taken.
    """
    r = np.asarray(values, dtype=float)
    if r.size < 250:
        raise ValueError(f"E-GARCH fit needs at least 250 observations, got {r.size}")
    if not np.all(np.isfinite(r)):
        raise DegenerateInputError("non-finite values in E-GARCH input")
    if np.ptp(r) == 0:
        raise DegenerateInputError("E-GARCH fit on a constant series")

    coords = _Coordinates(r)
    log_var0 = coords.log_var

    def objective(th):
        try:
            val = -_loglik(r, coords.decode(th), log_var0)
        except (ValueError, OverflowError, ZeroDivisionError):
            return 1e300
        return val if math.isfinite(val) else 1e300

    anchors = [coords.encode(*_moment_start(r))]
    if start is not None:
        anchors.insert(0, coords.encode(start.mu, start.phi, start.omega, start.alpha, start.beta,
                                        start.gamma, start.dist.nu, start.dist.xi))
    anchors = anchors[:max(n_starts, 1)]
    rng = np.random.default_rng(seed)
    starts = anchors + [anchors[0] + _JITTER * rng.standard_normal(anchors[0].size)
                        for _ in range(n_starts - len(anchors))]

    def run(th0):
        simplex = np.vstack([th0, th0 + np.diag(_SIMPLEX_STEP)])
        return optimize.minimize(objective, th0, method="Nelder-Mead",
                                 options={"initial_simplex": simplex, "fatol": 1e-6,
                                          "xatol": 1e-5, "maxiter": maxiter,
                                          "maxfev": int(maxiter * 1.5)})

    results = [run(th) for th in starts]
    n_evals = sum(res.nfev for res in results)
    best = min(results, key=lambda res: res.fun)
    converged = any(res.success for res in results)
    # restart from the best point; on flat ridges the simplex can exhaust its
    # budget while the objective no longer moves, which also counts as converged
    for _ in range(_MAX_POLISH):
        polished = run(best.x)
        n_evals += polished.nfev
        stalled = abs(best.fun - polished.fun) <= _STALL_TOL * max(1.0, abs(best.fun))
        if polished.fun <= best.fun:
            best = polished
        if polished.success or stalled:
            converged = True
            break
    if not math.isfinite(best.fun) or best.fun >= 1e300:
        raise ConvergenceError("E-GARCH likelihood not finite at any start", float("-inf"),
                               stage="egarch")
    if not converged:
        raise ConvergenceError("E-GARCH optimiser did not converge", -best.fun, stage="egarch")

    params = EgarchParams.build(*coords.decode(best.x))
    state = filter_series(values, params, log_var0)
    if return_diagnostics:
        return params, state, FitDiagnostics(-best.fun, converged, n_evals,
                                             [-res.fun for res in results])
    return params, state


def forecast_one_step(params: EgarchParams, state: FilterState) -> tuple[float, float]:
    mean = params.mu + params.phi * state.last_value
    z = state.last_z
    log_var = (params.omega + params.beta * state.last_log_var + params.gamma * z
               + params.alpha * (abs(z) - params.e_abs_z))
    return mean, math.exp(0.5 * log_var)


def simulate_egarch(params: EgarchParams, n: int, rng: np.random.Generator,
                    burn: int = 500) -> np.ndarray:
    z = skewt_rvs(params.dist, n + burn, rng)
    r = np.empty(n + burn)
    lv = params.omega / (1.0 - params.beta)
    prev_z = 0.0
    prev_r = params.mu / (1.0 - params.phi)
    for t in range(n + burn):
        lv = (params.omega + params.beta * lv + params.gamma * prev_z
              + params.alpha * (abs(prev_z) - params.e_abs_z))
        r[t] = params.mu + params.phi * prev_r + math.exp(0.5 * lv) * z[t]
        prev_z, prev_r = z[t], r[t]
    return r[burn:]


def dump_model(params: EgarchParams, state: FilterState) -> str:
    """JSON with everything needed to continue filtering from the last day."""
    fmt = lambda s: [[str(k), float(v)] for k, v in s.items()]
    return json.dumps({
        "params": params.to_dict(),
        "state": {"sigma": state.sigma, "last_value": state.last_value, "last_z": state.last_z,
                  "loglik": state.loglik, "residuals": fmt(state.residuals),
                  "cond_vols": fmt(state.cond_vols)},
    }, indent=1, sort_keys=True)


def load_model(text: str) -> tuple[EgarchParams, FilterState]:
    d = json.loads(text)
    params = EgarchParams.from_dict(d["params"])
    st = d["state"]
    series = lambda rows: pd.Series([v for _, v in rows], index=[k for k, _ in rows], dtype=float)
    state = FilterState(st["sigma"], st["last_value"], st["last_z"], series(st["residuals"]),
                        series(st["cond_vols"]), st["loglik"])
    return params, state


def extend_filter(params: EgarchParams, state: FilterState, new_values: pd.Series) -> FilterState:
    """Continue the recursion over observations that follow ``state``."""
    if len(new_values) == 0:
        return state
    r = np.concatenate([[state.last_value], np.asarray(new_values, dtype=float)])
    z, lv = _filter_kernel(r, params.mu, params.phi, params.omega, params.alpha, params.beta,
                           params.gamma, params.e_abs_z, state.last_log_var, state.last_z)
    sig = np.exp(0.5 * lv)
    index = new_values.index if isinstance(new_values, pd.Series) else pd.RangeIndex(len(z))
    return FilterState(
        sigma=float(sig[-1]), last_value=float(r[-1]), last_z=float(z[-1]),
        residuals=pd.concat([state.residuals, pd.Series(z, index=index)]),
        cond_vols=pd.concat([state.cond_vols, pd.Series(sig, index=index)]),
    )
