"""Spike-and-slab quantile LASSO: posterior-mode EM with coordinate descent.

Model, at a fixed quantile level tau::

    y_i = z_i' alpha + x_i' beta + eps_i,   eps_i ~ ALD(0, sigma, tau)
    beta_j | gamma_j ~ (1 - gamma_j) Laplace(0, s0) + gamma_j Laplace(0, s1)
    gamma_j | theta ~ Bernoulli(theta),  theta ~ U(0, 1)
    alpha_k ~ N(0, v_k),  sigma ~ InvGamma(a, b)

The ALD is written as a normal-exponential mixture with latent v_i, so the
E-step needs the half-order GIG moments of v_i and the posterior inclusion
probabilities of gamma_j; the M-step is closed form for theta and sigma and a
single cyclic coordinate pass (soft thresholding for beta) for the
coefficients.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, xlog1py, xlogy

from ._kernels import coordinate_sweep, em_loop
from .ald import as_tau, check_loss, gig_moments_half, mixture_constants

log = logging.getLogger(__name__)

RESIDUAL_FLOOR = 1e-10


class NumericalError(RuntimeError):
    """A coordinate update produced a non-finite value."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Response ``y`` (n,), clinical design ``Z`` (n, q+1) whose first column
    is the intercept, genetic design ``X`` (n, p)."""
    y: np.ndarray
    Z: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=float).ravel()
        X = np.array(self.X, dtype=float)
        n = y.shape[0]
        if self.Z is None:
            Z = np.ones((n, 1))
        else:
            Z = np.array(self.Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        if n < 2:
            raise ValueError("need at least 2 observations")
        if X.ndim != 2 or X.shape[0] != n or X.shape[1] < 1:
            raise ValueError(f"X must be n x p with n={n}, p>=1; got {X.shape}")
        if Z.ndim != 2 or Z.shape[0] != n or Z.shape[1] < 1:
            raise ValueError(f"Z must be n x (q+1) with n={n}; got {Z.shape}")
        if not np.all(Z[:, 0] == 1.0):
            raise ValueError("first column of Z must be the all-ones intercept")
        for name, arr in (("y", y), ("Z", Z), ("X", X)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "X", X)

    @classmethod
    def from_arrays(cls, y, X, Zc=None):
        """Build from a response, genetic matrix and optional clinical matrix
        *without* the intercept column."""
        y = np.asarray(y, dtype=float).ravel()
        ones = np.ones((y.shape[0], 1))
        Z = ones if Zc is None or np.size(Zc) == 0 else np.column_stack([ones, Zc])
        return cls(y, Z, X)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def q(self):
        return self.Z.shape[1] - 1

    @cached_property
    def Zt(self):
        return np.ascontiguousarray(self.Z.T)

    @cached_property
    def Xt(self):
        return np.ascontiguousarray(self.X.T)

    @cached_property
    def zsum(self):
        return self.Z.sum(axis=0)

    @cached_property
    def xsum(self):
        return self.X.sum(axis=0)

    @cached_property
    def y_scale(self):
        sd = float(np.std(self.y))
        return sd if sd > 0 else 1.0

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.Z[idx], self.X[idx])

    @cached_property
    def _standardized(self):
        return _standardize(self)


def standardize(data: Dataset):
    """Center and scale the columns of X to unit (population) standard
    deviation. Returns the working dataset, the column means and the sds.
    The result is cached on ``data`` (datasets are immutable)."""
    return data._standardized


def _standardize(data: Dataset):
    center = data.X.mean(axis=0)
    scale = data.X.std(axis=0)
    bad = np.flatnonzero(scale <= 1e-12 * np.maximum(1.0, np.abs(center)))
    if bad.size:
        raise ValueError(f"cannot standardize constant X column(s) {bad[:10].tolist()}")
    return Dataset(data.y, data.Z, (data.X - center) / scale), center, scale


def destandardize(alpha, beta, center, scale):
    beta_out = beta / scale
    alpha_out = np.array(alpha, dtype=float)
    alpha_out[0] -= float(np.dot(beta_out, center))
    return alpha_out, beta_out


@dataclass(frozen=True)
class SsqlassoConfig:
    tau: float = 0.5
    s0: float = 0.05
    s1: float = 1.0
    v_k: float = 1e3
    a: float = 1.0
    b: float = 1.0
    delta: float = 1e-4
    max_iter: int = 500
    standardize: bool = True
    allow_equal_scales: bool = False  # s0 == s1 reduction; for tests
    residual_floor: float = RESIDUAL_FLOOR  # relative to sd(y)

    def __post_init__(self):
        object.__setattr__(self, "tau", as_tau(self.tau))
        check_scales(self.s0, self.s1, self.allow_equal_scales)
        for name in ("v_k", "a", "b", "delta", "residual_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be at least 1")


def check_scales(s0, s1, allow_equal=False):
    if not (s0 > 0 and s1 > 0 and np.isfinite(s0) and np.isfinite(s1)):
        raise ValueError(f"spike and slab scales must be positive, got s0={s0}, s1={s1}")
    if s1 < s0 or (s1 == s0 and not allow_equal):
        raise ValueError(f"slab scale must exceed spike scale, got s0={s0}, s1={s1}")


@dataclass(frozen=True, eq=False)
class SsqlassoState:
    alpha: np.ndarray
    beta: np.ndarray
    sigma: float
    theta: float
    q_value: float = float("nan")
    iteration: int = 0
    resid: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")

    def residual(self, data: Dataset):
        if self.resid is not None:
            return self.resid
        return data.y - data.Z @ self.alpha - data.X @ self.beta


@dataclass(frozen=True, eq=False)
class EStepExpectations:
    v_inv: np.ndarray
    v: np.ndarray
    eta: np.ndarray
    s_inv: np.ndarray


@dataclass(frozen=True, eq=False)
class FitResult:
    """Converged fit on the caller's (unstandardized) scale.

    ``s_inv`` holds the coordinate thresholds on the working scale and
    ``thresholds`` the same penalties expressed per unit of the returned
    ``beta``. ``state`` is the final working-scale state, usable as a warm
    start for a neighbouring tuning value.
    """
    alpha: np.ndarray
    beta: np.ndarray
    sigma: float
    theta: float
    eta: np.ndarray
    s_inv: np.ndarray
    thresholds: np.ndarray
    q_trace: np.ndarray
    iterations: int
    converged: bool
    method: str = "ssqlasso"
    tau: float = 0.5
    s0: float = float("nan")
    s1: float = float("nan")
    state: Optional[SsqlassoState] = field(default=None, repr=False)

    @property
    def selected(self):
        return np.flatnonzero(self.beta != 0.0)

    def predict(self, Z, X):
        return predict(self, Z, X)


def spike_slab_posterior(beta, theta, s0, s1):
    """Posterior inclusion probability eta_j and expected inverse scale.

    The log-odds are formed directly so exp(-|beta|/s0) never underflows.
    """
    ab = np.abs(beta)
    with np.errstate(divide="ignore"):
        prior_logit = np.log(theta) - np.log1p(-theta)
    logit = prior_logit + (np.log(s0) - np.log(s1)) + ab * (1.0 / s0 - 1.0 / s1)
    eta = expit(logit)
    s_inv = (1.0 - eta) / s0 + eta / s1
    return eta, s_inv


def log_spike_slab_prior(beta, theta, s0, s1):
    """sum_j log[(1-theta) Laplace(beta_j; s0) + theta Laplace(beta_j; s1)]."""
    ab = np.abs(beta)
    with np.errstate(divide="ignore"):
        spike = np.log1p(-theta) - np.log(2.0 * s0) - ab / s0
        slab = np.log(theta) - np.log(2.0 * s1) - ab / s1
    return float(np.sum(np.logaddexp(spike, slab)))


def initialize(data: Dataset, cfg: SsqlassoConfig) -> SsqlassoState:
    if cfg.standardize:
        standardize(data)  # validates columns
    alpha = np.zeros(data.q + 1)
    alpha[0] = np.quantile(data.y, cfg.tau)
    beta = np.zeros(data.p)
    st = SsqlassoState(alpha, beta, 1.0, 0.5)
    resid = st.residual(data)
    return replace(st, resid=resid, q_value=log_posterior(data, cfg, st))


def e_step(data: Dataset, cfg: SsqlassoConfig, st: SsqlassoState) -> EStepExpectations:
    c = mixture_constants(cfg.tau)
    r = st.residual(data)
    root = c.zeta2 * np.sqrt(st.sigma)
    w1 = np.maximum(np.abs(r), cfg.residual_floor * data.y_scale) / root
    w2 = np.sqrt(2.0 / st.sigma + c.zeta1 ** 2 / (c.zeta2 ** 2 * st.sigma))
    v_inv, v = gig_moments_half(w1, w2)
    eta, s_inv = spike_slab_posterior(st.beta, st.theta, cfg.s0, cfg.s1)
    return EStepExpectations(v_inv=v_inv, v=v, eta=eta, s_inv=s_inv)


# Single-coordinate updates. m_step runs the same arithmetic through the
# compiled sweep; these exist for inspection and for coordinate-level tests.

def update_theta(ex: EStepExpectations) -> float:
    return float(np.mean(ex.eta))


def update_sigma(data, cfg, st, ex) -> float:
    """Positive stationary point in sigma of the expected complete-data log
    posterior, at the current (alpha, beta)."""
    c = mixture_constants(cfg.tau)
    z2 = c.zeta2 ** 2
    r = st.residual(data)
    num = (np.sum(ex.v_inv * r * r - 2.0 * c.zeta1 * r)
           + np.sum(ex.v) * (c.zeta1 ** 2 + 2.0 * z2) + 2.0 * z2 * cfg.b)
    return float(num / ((3 * data.n + 2 * cfg.a + 2) * z2))


def update_alpha(data, cfg, st, ex, l) -> float:
    c = mixture_constants(cfg.tau)
    z = data.Z[:, l]
    partial = st.residual(data) + z * st.alpha[l]
    num = np.sum(ex.v_inv * partial * z) - c.zeta1 * np.sum(z)
    den = c.zeta2 ** 2 * st.sigma / cfg.v_k + np.sum(ex.v_inv * z * z)
    return float(num / den)


def soft_threshold(t, thr):
    return np.sign(t) * np.maximum(np.abs(t) - thr, 0.0)


def update_beta(data, cfg, st, ex, m) -> float:
    c = mixture_constants(cfg.tau)
    scale = c.zeta2 ** 2 * st.sigma
    x = data.X[:, m]
    partial = st.residual(data) + x * st.beta[m]
    t = (np.sum(ex.v_inv * partial * x) - c.zeta1 * np.sum(x)) / scale
    den = np.sum(ex.v_inv * x * x) / scale
    return float(soft_threshold(t, ex.s_inv[m]) / den) if den > 0 else 0.0


def m_step(data: Dataset, cfg: SsqlassoConfig, st: SsqlassoState,
           ex: EStepExpectations) -> SsqlassoState:
    """theta, then sigma (at the previous coefficients), then alpha and beta
    by one cyclic coordinate pass using the new sigma."""
    c = mixture_constants(cfg.tau)
    theta = update_theta(ex)
    sigma = update_sigma(data, cfg, st, ex)
    if not (np.isfinite(sigma) and sigma > 0):
        raise NumericalError(f"sigma update is not positive and finite ({sigma})")
    alpha = np.array(st.alpha, dtype=float)
    beta = np.array(st.beta, dtype=float)
    resid = np.array(st.residual(data), dtype=float)
    bad, _ = coordinate_sweep(data.Zt, data.Xt, resid, alpha, beta, ex.v_inv,
                              c.zeta1, c.zeta2 ** 2 * sigma, 1.0 / cfg.v_k,
                              ex.s_inv, data.zsum, data.xsum)
    if bad >= 0:
        what = f"alpha[{bad}]" if bad <= data.q else f"beta[{bad - data.q - 1}]"
        raise NumericalError(f"non-finite coordinate update at {what}")
    new = SsqlassoState(alpha, beta, sigma, theta, iteration=st.iteration + 1, resid=resid)
    return replace(new, q_value=log_posterior(data, cfg, new))


def log_joint_posterior(data: Dataset, cfg: SsqlassoConfig, st: SsqlassoState,
                        ex: EStepExpectations) -> float:
    """Expected complete-data log posterior Q(phi | phi_old).

    The latent v_i and gamma_j are replaced by the conditional expectations
    in ``ex``; terms depending only on ``ex`` (such as E[log v_i]) are
    dropped, so values are comparable only for a fixed ``ex``.
    """
    c = mixture_constants(cfg.tau)
    z2 = c.zeta2 ** 2
    r = st.residual(data)
    s = st.sigma
    lik = np.sum(ex.v_inv * r * r - 2.0 * c.zeta1 * r + c.zeta1 ** 2 * ex.v) / (2.0 * z2 * s)
    out = (-(1.5 * data.n + cfg.a + 1.0) * np.log(s) - lik - np.sum(ex.v) / s - cfg.b / s
           - np.sum(st.alpha ** 2) / (2.0 * cfg.v_k)
           - np.sum(ex.s_inv * np.abs(st.beta))
           + np.sum(xlogy(ex.eta, st.theta) + xlog1py(1.0 - ex.eta, -st.theta)))
    return float(out)


def log_posterior(data: Dataset, cfg: SsqlassoConfig, st: SsqlassoState) -> float:
    """Observed-data log posterior of (alpha, beta, sigma, theta), with v and
    gamma integrated out; the quantity EM increases monotonically."""
    r = st.residual(data)
    s = st.sigma
    tau = cfg.tau
    lik = (data.n * (np.log(tau * (1.0 - tau)) - np.log(s))
           - float(np.sum(check_loss(r / s, tau))))
    prior_sigma = -(cfg.a + 1.0) * np.log(s) - cfg.b / s
    prior_alpha = -float(np.sum(st.alpha ** 2)) / (2.0 * cfg.v_k)
    return float(lik + prior_sigma + prior_alpha
                 + log_spike_slab_prior(st.beta, st.theta, cfg.s0, cfg.s1))


def run_em(data, cfg, st, e_fn, m_fn, method, callback=None):
    """Shared EM driver: iterate until |dQ| < delta or max_iter."""
    q_trace = [st.q_value]
    converged = False
    ex = None
    for _ in range(int(cfg.max_iter)):
        ex = e_fn(data, cfg, st)
        st = m_fn(data, cfg, st, ex)
        q_trace.append(st.q_value)
        if callback is not None:
            callback(st, ex)
        if abs(q_trace[-1] - q_trace[-2]) < cfg.delta:
            converged = True
            break
    if not converged:
        log.debug("%s: no convergence after %d iterations (s0=%g, s1=%g)",
                  method, cfg.max_iter, cfg.s0, cfg.s1)
    return st, np.asarray(q_trace), converged


def finalize(data_in, cfg, st, q_trace, converged, method, center=None, scale=None):
    eta, s_inv = spike_slab_posterior(st.beta, st.theta, cfg.s0, cfg.s1)
    alpha, beta = st.alpha, st.beta
    thresholds = s_inv
    if center is not None:
        alpha, beta = destandardize(alpha, beta, center, scale)
        thresholds = s_inv * scale
    return FitResult(alpha=np.asarray(alpha), beta=np.asarray(beta), sigma=st.sigma,
                     theta=st.theta, eta=eta, s_inv=s_inv, thresholds=thresholds,
                     q_trace=q_trace, iterations=st.iteration, converged=converged,
                     method=method, tau=getattr(cfg, "tau", 0.5), s0=cfg.s0, s1=cfg.s1,
                     state=st)


def _working(data, standardize_flag):
    if standardize_flag:
        return standardize(data)
    return data, None, None


def fit(data: Dataset, cfg: SsqlassoConfig, init: Optional[SsqlassoState] = None,
        callback: Optional[Callable] = None) -> FitResult:
    """Fit ssQLASSO at fixed (tau, s0, s1).

    ``init`` is a working-scale state (e.g. ``FitResult.state`` of a
    neighbouring fit); its iteration counter restarts at zero. ``callback``
    is called as ``callback(state, expectations)`` after every M-step.
    Hitting ``max_iter`` is reported through ``converged=False``.
    """
    work, center, scale = _working(data, cfg.standardize)
    if init is None:
        st = initialize(work, cfg)
    else:
        st = SsqlassoState(np.array(init.alpha, float), np.array(init.beta, float),
                           init.sigma, init.theta)
        st = replace(st, resid=st.residual(work))
        st = replace(st, q_value=log_posterior(work, cfg, st))
    if callback is None:
        st, q_trace, converged = _run_compiled(work, cfg, st)
    else:
        st, q_trace, converged = run_em(work, cfg, st, e_step, m_step, "ssqlasso", callback)
    return finalize(data, cfg, st, q_trace, converged, "ssqlasso", center, scale)


def _run_compiled(data: Dataset, cfg: SsqlassoConfig, st: SsqlassoState):
    """:func:`run_em` with :func:`e_step`/:func:`m_step`, all iterations in
    one compiled loop. Same arithmetic; floating-point sums may associate
    differently."""
    alpha = np.array(st.alpha, dtype=float)
    beta = np.array(st.beta, dtype=float)
    resid = np.array(st.residual(data), dtype=float)
    q_trace = np.empty(int(cfg.max_iter) + 1)
    status, its, sigma, theta, detail = em_loop(
        data.Zt, data.Xt, resid, alpha, beta, float(st.sigma), float(st.theta),
        float(st.q_value), cfg.tau, cfg.s0, cfg.s1, cfg.a, cfg.b, cfg.v_k,
        cfg.residual_floor * data.y_scale, cfg.delta, int(cfg.max_iter),
        data.zsum, data.xsum, q_trace)
    if status == 2:
        raise NumericalError(f"sigma update is not positive and finite ({sigma})")
    if status == 3:
        what = f"alpha[{detail}]" if detail <= data.q else f"beta[{detail - data.q - 1}]"
        raise NumericalError(f"non-finite coordinate update at {what}")
    if status == 1:
        log.debug("ssqlasso: no convergence after %d iterations (s0=%g, s1=%g)",
                  cfg.max_iter, cfg.s0, cfg.s1)
    new = SsqlassoState(alpha, beta, sigma, theta, q_value=float(q_trace[its]),
                        iteration=st.iteration + its, resid=resid)
    return new, q_trace[:its + 1].copy(), status == 0


def predict(fit: FitResult, Z, X) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    X = np.asarray(X, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[1] != fit.alpha.shape[0] or X.shape[1] != fit.beta.shape[0]:
        raise ValueError(f"design has {Z.shape[1]}+{X.shape[1]} columns, fit expects "
                         f"{fit.alpha.shape[0]}+{fit.beta.shape[0]}")
    if Z.shape[0] != X.shape[0]:
        raise ValueError("Z and X row counts differ")
    return Z @ fit.alpha + X @ fit.beta
