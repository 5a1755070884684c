"""Non-robust comparators: the Gaussian spike-and-slab LASSO EM and plain
LASSO by cyclic coordinate descent.

Both reuse the compiled sweep of the quantile EM with unit observation
weights and no linear shift, so the three methods differ only in how the
weights, the scale and the thresholds are produced.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from ._kernels import coordinate_sweep
from .em import (Dataset, EStepExpectations, FitResult, NumericalError, SsqlassoState,
                 _working, check_scales, destandardize, finalize, log_spike_slab_prior,
                 run_em, spike_slab_posterior)

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-10  # relative to var(y)


@dataclass(frozen=True)
class SslassoConfig:
    s0: float = 0.05
    s1: float = 1.0
    v_k: float = 1e3
    delta: float = 1e-4
    max_iter: int = 500
    standardize: bool = True
    allow_equal_scales: bool = False

    def __post_init__(self):
        check_scales(self.s0, self.s1, self.allow_equal_scales)
        if not (self.v_k > 0 and self.delta > 0):
            raise ValueError("v_k and delta must be positive")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(frozen=True)
class LassoConfig:
    lam: float = 0.0
    max_iter: int = 10000
    tol: float = 1e-10

    def __post_init__(self):
        if not (self.lam >= 0 and np.isfinite(self.lam)):
            raise ValueError(f"lambda must be a nonnegative real, got {self.lam}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be at least 1")


# -- Gaussian spike-and-slab LASSO -------------------------------------------
# The state's ``sigma`` field carries the error variance sigma~^2.

def sslasso_initialize(data: Dataset, cfg: SslassoConfig) -> SsqlassoState:
    alpha = np.zeros(data.q + 1)
    alpha[0] = float(np.mean(data.y))
    st = SsqlassoState(alpha, np.zeros(data.p), 1.0, 0.5)
    st = replace(st, resid=st.residual(data))
    return replace(st, q_value=sslasso_log_posterior(data, cfg, st))


def sslasso_e_step(data, cfg, st) -> EStepExpectations:
    eta, s_inv = spike_slab_posterior(st.beta, st.theta, cfg.s0, cfg.s1)
    ones = np.ones(data.n)
    return EStepExpectations(v_inv=ones, v=ones, eta=eta, s_inv=s_inv)


def sslasso_m_step(data, cfg, st, ex) -> SsqlassoState:
    theta = float(np.mean(ex.eta))
    r = st.residual(data)
    var = float(np.dot(r, r)) / (data.n + 2)
    if not var > VARIANCE_FLOOR * data.y_scale ** 2:
        # with p >= n the improper-prior posterior is unbounded along
        # interpolating fits; report the collapse instead of following it
        raise NumericalError(f"residual variance collapsed ({var:.3g}): interpolating fit")
    alpha = np.array(st.alpha, dtype=float)
    beta = np.array(st.beta, dtype=float)
    resid = np.array(r, dtype=float)
    bad, _ = coordinate_sweep(data.Zt, data.Xt, resid, alpha, beta, ex.v_inv, 0.0, var,
                              1.0 / cfg.v_k, ex.s_inv, data.zsum, data.xsum)
    if bad >= 0:
        what = f"alpha[{bad}]" if bad <= data.q else f"beta[{bad - data.q - 1}]"
        raise NumericalError(f"non-finite coordinate update at {what}")
    new = SsqlassoState(alpha, beta, var, theta, iteration=st.iteration + 1, resid=resid)
    return replace(new, q_value=sslasso_log_posterior(data, cfg, new))


def sslasso_log_posterior(data, cfg, st) -> float:
    """Log posterior with the improper 1/sigma~^2 prior, gamma integrated out."""
    r = st.residual(data)
    var = st.sigma
    return float(-(0.5 * data.n + 1.0) * np.log(var) - np.dot(r, r) / (2.0 * var)
                 - np.sum(st.alpha ** 2) / (2.0 * cfg.v_k)
                 + log_spike_slab_prior(st.beta, st.theta, cfg.s0, cfg.s1))


def fit_sslasso(data: Dataset, cfg: SslassoConfig, init: Optional[SsqlassoState] = None,
                callback=None) -> FitResult:
    """Gaussian spike-and-slab LASSO by EM; ``FitResult.sigma`` is sigma~^2."""
    work, center, scale = _working(data, cfg.standardize)
    if init is None:
        st = sslasso_initialize(work, cfg)
    else:
        st = SsqlassoState(np.array(init.alpha, float), np.array(init.beta, float),
                           init.sigma, init.theta)
        st = replace(st, resid=st.residual(work))
        st = replace(st, q_value=sslasso_log_posterior(work, cfg, st))
    st, q_trace, converged = run_em(work, cfg, st, sslasso_e_step, sslasso_m_step,
                                    "sslasso", callback)
    return finalize(data, cfg, st, q_trace, converged, "sslasso", center, scale)


# -- plain LASSO --------------------------------------------------------------

def lasso_objective(data: Dataset, alpha, beta, lam) -> float:
    r = data.y - data.Z @ alpha - data.X @ beta
    return 0.5 * float(np.dot(r, r)) + lam * float(np.sum(np.abs(beta)))


def _null_solution(data):
    """Least-squares fit on Z alone with beta = 0."""
    coef, *_ = np.linalg.lstsq(data.Z, data.y, rcond=None)
    return coef, data.y - data.Z @ coef


def _lasso_solve(data, lam, alpha, beta, max_iter, tol, lmax=None):
    if lmax is not None and lam >= lmax:
        # KKT: beta = 0 is optimal. Return it exactly instead of letting the
        # sweep leave a rounding-level coefficient at lam == lambda_max.
        coef, resid = _null_solution(data)
        return coef, np.zeros(data.p), resid, 0, True
    resid = data.y - data.Z @ alpha - data.X @ beta
    w = np.ones(data.n)
    thr = np.full(data.p, float(lam))
    converged = False
    sweeps = 0
    for sweeps in range(1, int(max_iter) + 1):
        bad, step = coordinate_sweep(data.Zt, data.Xt, resid, alpha, beta, w, 0.0, 1.0,
                                     0.0, thr, data.zsum, data.xsum)
        if bad >= 0:
            raise NumericalError(f"non-finite LASSO coordinate update at index {bad}")
        if step < tol:
            converged = True
            break
    return alpha, beta, resid, sweeps, converged


def _lasso_result(data, lam, alpha, beta, resid, sweeps, converged):
    obj = 0.5 * float(np.dot(resid, resid)) + lam * float(np.sum(np.abs(beta)))
    st = SsqlassoState(alpha, beta, max(float(np.dot(resid, resid)) / data.n, 1e-300), 0.5,
                       q_value=-obj, iteration=sweeps, resid=resid)
    return FitResult(alpha=alpha.copy(), beta=beta.copy(), sigma=st.sigma, theta=float("nan"),
                     eta=np.full(data.p, np.nan), s_inv=np.full(data.p, float(lam)),
                     thresholds=np.full(data.p, float(lam)), q_trace=np.array([-obj]),
                     iterations=sweeps, converged=converged, method="lasso", state=st)


def fit_lasso(data: Dataset, cfg: LassoConfig, init: Optional[SsqlassoState] = None) -> FitResult:
    """Minimise 0.5 ||y - Z alpha - X beta||^2 + lam ||beta||_1 on the
    original scale; stops when the largest coefficient change in a sweep
    falls below ``tol``."""
    if init is None:
        alpha = np.zeros(data.q + 1)
        beta = np.zeros(data.p)
    else:
        alpha = np.array(init.alpha, dtype=float)
        beta = np.array(init.beta, dtype=float)
    out = _lasso_solve(data, cfg.lam, alpha, beta, cfg.max_iter, cfg.tol, lambda_max(data))
    if not out[-1]:
        log.debug("lasso: no convergence after %d sweeps (lambda=%g)", cfg.max_iter, cfg.lam)
    return _lasso_result(data, cfg.lam, *out)


def lambda_max(data: Dataset) -> float:
    """Smallest lambda with an all-zero beta: max_m |X_m' r_Z| where r_Z is
    the residual of regressing y on Z alone."""
    _, r = _null_solution(data)
    return float(np.max(np.abs(data.X.T @ r)))


def lambda_grid(data: Dataset, n_lambda: int = 100, ratio: float = 1e-3) -> np.ndarray:
    lmax = lambda_max(data)
    # relative to the Cauchy-Schwarz bound max_m ||x_m|| ||y||
    bound = float(np.sqrt((data.X ** 2).sum(0)).max() * np.linalg.norm(data.y))
    if lmax <= 1e-12 * bound:
        raise ValueError("response is exactly explained by Z; the LASSO path is trivial")
    return np.geomspace(lmax, ratio * lmax, int(n_lambda))


def lasso_path(data: Dataset, lambda_grid: Sequence[float], max_iter: int = 10000,
               tol: float = 1e-10, return_alpha: bool = False):
    """Warm-started LASSO solutions along a strictly decreasing grid.

    Returns the (len(grid), p) coefficient matrix, plus the matching
    intercept/clinical matrix when ``return_alpha``.
    """
    grid = np.asarray(lambda_grid, dtype=float).ravel()
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    if np.any(grid < 0) or not np.all(np.isfinite(grid)):
        raise ValueError("lambda values must be finite and nonnegative")
    if grid.size > 1 and not np.all(np.diff(grid) < 0):
        raise ValueError("lambda grid must be strictly decreasing")
    alpha = np.zeros(data.q + 1)
    beta = np.zeros(data.p)
    path = np.empty((grid.size, data.p))
    apath = np.empty((grid.size, data.q + 1))
    lmax = lambda_max(data)
    for g, lam in enumerate(grid):
        alpha, beta, _, sweeps, ok = _lasso_solve(data, lam, alpha, beta, max_iter, tol, lmax)
        if not ok:
            log.debug("lasso path: lambda=%g stopped after %d sweeps", lam, sweeps)
        path[g] = beta
        apath[g] = alpha
    if return_alpha:
        return path, apath
    return path
