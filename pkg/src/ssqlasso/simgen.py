"""Simulation designs: correlated Gaussian predictors, sparse coefficient
patterns, quantile-centred error families and the homogeneous and
heterogeneous response models."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, stats

from .ald import as_tau
from .em import Dataset

log = logging.getLogger(__name__)

PSD_FLOOR = 1e-8
PSD_REPAIR_TOL = 1e-6


@dataclass(frozen=True)
class CorrelationSpec:
    kind: str = "ar1"  # ar1 | banded | custom
    rho: float = 0.5
    matrix: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in ("ar1", "banded", "custom"):
            raise ValueError(f"unknown correlation kind {self.kind!r}")
        if kind == "custom":
            if self.matrix is None:
                raise ValueError("custom correlation needs a matrix")
            m = np.array(self.matrix, dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError("custom correlation matrix must be square")
            if not np.allclose(m, m.T, atol=1e-10):
                raise ValueError("custom correlation matrix must be symmetric")
            if not np.allclose(np.diag(m), 1.0, atol=1e-10):
                raise ValueError("custom correlation matrix must have unit diagonal")
            object.__setattr__(self, "matrix", m)
        elif not -1.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho}")

    def covariance(self, p: int) -> np.ndarray:
        if self.kind == "custom":
            if self.matrix.shape[0] != p:
                raise ValueError(f"custom matrix is {self.matrix.shape[0]}x{self.matrix.shape[0]}, p={p}")
            return self.matrix.copy()
        lag = np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
        if self.kind == "ar1":
            return self.rho ** lag
        return np.where(lag == 0, 1.0, np.where(lag == 1, self.rho, 0.0))


def _custom_factor(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    if vals.min() < -PSD_REPAIR_TOL:
        raise ValueError(f"custom correlation is not PSD (min eigenvalue {vals.min():.3g})")
    if vals.min() < PSD_FLOOR:
        log.warning("custom correlation repaired: eigenvalues floored at %g (min was %.3g)",
                    PSD_FLOOR, vals.min())
        vals = np.maximum(vals, PSD_FLOOR)
        rep = (vecs * vals) @ vecs.T
        d = np.sqrt(np.diag(rep))
        vecs = vecs / d[:, None]
    return vecs * np.sqrt(vals)


def gen_predictors(n: int, p: int, corr: CorrelationSpec, rng: np.random.Generator):
    """Rows i.i.d. N(0, Sigma) with unit marginal variances.

    AR-1 uses the stationary recursion x_j = rho x_{j-1} + sqrt(1-rho^2) e_j
    and banded uses the bidiagonal Cholesky factor of the tridiagonal
    matrix, both O(np); custom matrices go through an eigendecomposition.
    """
    e = rng.standard_normal((n, p))
    if corr.kind == "ar1":
        x = np.empty_like(e)
        x[:, 0] = e[:, 0]
        c = np.sqrt(1.0 - corr.rho ** 2)
        for j in range(1, p):
            x[:, j] = corr.rho * x[:, j - 1] + c * e[:, j]
        return x
    if corr.kind == "banded":
        x = np.empty_like(e)
        x[:, 0] = e[:, 0]
        d = 1.0
        for j in range(1, p):
            off = corr.rho / d
            d2 = 1.0 - off * off
            if d2 <= 0:
                raise ValueError(f"banded correlation with rho={corr.rho} is not "
                                 f"positive definite at p={p}")
            d = np.sqrt(d2)
            x[:, j] = off * e[:, j - 1] + d * e[:, j]
        return x
    return e @ _custom_factor(corr.covariance(p)).T


FAMILIES = ("normal", "t2", "lognormal", "mixture", "laplace", "zero")
_ALIASES = {
    "error1": "normal", "normal1": "normal", "n": "normal",
    "error2": "t2", "t": "t2",
    "error3": "lognormal", "lognormal1": "lognormal",
    "error4": "mixture", "mixturenormal": "mixture", "mixnormal": "mixture",
    "error5": "laplace", "laplace1": "laplace",
}


def family_name(name: str) -> str:
    key = name.lower().replace("_", "").replace("-", "")
    key = _ALIASES.get(key, key)
    if key not in FAMILIES:
        raise ValueError(f"unknown error family {name!r}; expected one of {FAMILIES}")
    return key


@dataclass(frozen=True)
class ErrorSpec:
    family: str = "normal"
    tau: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "family", family_name(self.family))
        object.__setattr__(self, "tau", as_tau(self.tau))


def _mixture_cdf(x):
    return 0.8 * stats.norm.cdf(x) + 0.2 * stats.norm.cdf(x / 3.0)


def _bisect_quantile(cdf, tau, lo=-1e3, hi=1e3):
    return optimize.bisect(lambda x: cdf(x) - tau, lo, hi, xtol=1e-10, rtol=4 * np.finfo(float).eps,
                           maxiter=500)


def error_location_shift(spec: ErrorSpec) -> float:
    """mu such that the tau-quantile of (base draw + mu) is 0."""
    tau = spec.tau
    f = spec.family
    if f == "zero":
        return 0.0
    if f == "normal":
        return float(-stats.norm.ppf(tau))
    if f == "laplace":
        q = np.log(2.0 * tau) if tau <= 0.5 else -np.log(2.0 * (1.0 - tau))
        return float(-q)
    if f == "lognormal":
        return float(-np.exp(stats.norm.ppf(tau)))
    if f == "t2":
        return float(-_bisect_quantile(lambda x: stats.t.cdf(x, 2), tau))
    return float(-_bisect_quantile(_mixture_cdf, tau))


def gen_errors(n: int, spec: ErrorSpec, rng: np.random.Generator) -> np.ndarray:
    f = spec.family
    if f == "zero":
        return np.zeros(n)
    if f == "normal":
        base = rng.standard_normal(n)
    elif f == "t2":
        base = rng.standard_t(2, size=n)
    elif f == "lognormal":
        base = rng.lognormal(0.0, 1.0, size=n)
    elif f == "laplace":
        base = rng.laplace(0.0, 1.0, size=n)
    else:
        wide = rng.random(n) >= 0.8
        base = rng.standard_normal(n) * np.where(wide, 3.0, 1.0)
    return base + error_location_shift(spec)


@dataclass(frozen=True)
class CoefficientSpec:
    """kind: 'uniform' (U[low, high]), 'mixed' (ceil(k/2) from U[low, high],
    the rest from U[-high, -low]) or 'explicit' (``values`` placed at
    ``indices``, default 0..k-1)."""
    kind: str = "uniform"
    support_size: int = 15
    low: float = 0.6
    high: float = 0.8
    values: Optional[Sequence[float]] = None
    indices: Optional[Sequence[int]] = None

    def __post_init__(self):
        if self.kind not in ("uniform", "mixed", "explicit"):
            raise ValueError(f"unknown coefficient kind {self.kind!r}")
        if self.kind == "explicit":
            if self.values is None:
                raise ValueError("explicit coefficients need values")
            object.__setattr__(self, "support_size", len(self.values))
            if self.indices is not None and len(self.indices) != len(self.values):
                raise ValueError("indices and values differ in length")
        if self.support_size < 0:
            raise ValueError("support size must be nonnegative")


def gen_coefficients(p: int, spec: CoefficientSpec, rng: np.random.Generator,
                     force: Optional[int] = None) -> np.ndarray:
    """Sparse coefficient vector; ``force`` puts that index in the support."""
    k = spec.support_size
    if k > p:
        raise ValueError(f"support size {k} exceeds p={p}")
    beta = np.zeros(p)
    if spec.kind == "explicit":
        idx = np.arange(k) if spec.indices is None else np.asarray(spec.indices, dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= p or np.unique(idx).size != idx.size):
            raise ValueError("explicit indices must be distinct and inside [0, p)")
        beta[idx] = np.asarray(spec.values, dtype=float)
        if force is not None and beta[force] == 0:
            raise ValueError(f"index {force} must be nonzero for this model")
        return beta
    if k == 0:
        if force is not None:
            raise ValueError(f"index {force} must be nonzero for this model")
        return beta
    idx = rng.choice(p, size=k, replace=False)
    if force is not None and force not in idx:
        idx[rng.integers(k)] = force
    vals = rng.uniform(spec.low, spec.high, size=k)
    if spec.kind == "mixed":
        vals[(k + 1) // 2:] *= -1.0
    beta[np.sort(idx)] = vals
    return beta


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "homogeneous"  # homogeneous | heterogeneous
    coeff: CoefficientSpec = field(default_factory=CoefficientSpec)
    intercept: float = 2.0
    clinical_q: int = 0
    hetero_index: int = 2

    def __post_init__(self):
        if self.kind not in ("homogeneous", "heterogeneous"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.clinical_q < 0:
            raise ValueError("clinical_q must be nonnegative")


def gen_dataset(n: int, p: int, corr: CorrelationSpec, model: ModelSpec, err: ErrorSpec,
                rng: np.random.Generator):
    """Simulate one replicate. Returns (Dataset, true_beta, true_alpha).

    Draw order: coefficients, predictors, clinical covariates and their
    coefficients, errors.
    """
    if n < 2 or p < 1:
        raise ValueError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
    hetero = model.kind == "heterogeneous"
    if hetero and model.hetero_index >= p:
        raise ValueError(f"heterogeneous model needs p > {model.hetero_index}")
    beta = gen_coefficients(p, model.coeff, rng, force=model.hetero_index if hetero else None)
    X = gen_predictors(n, p, corr, rng)
    alpha = np.zeros(model.clinical_q + 1)
    alpha[0] = model.intercept
    Zc = np.empty((n, 0))
    if model.clinical_q:
        Zc = rng.standard_normal((n, model.clinical_q))
        alpha[1:] = rng.uniform(0.6, 0.8, size=model.clinical_q)
    eps = gen_errors(n, err, rng)
    if hetero:
        eps = (1.0 + X[:, model.hetero_index]) * eps
    y = alpha[0] + Zc @ alpha[1:] + X @ beta + eps
    return Dataset.from_arrays(y, X, Zc), beta, alpha
