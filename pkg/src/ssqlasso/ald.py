"""Asymmetric Laplace primitives.

The check loss, the normal-exponential mixture constants, the ALD
log-density, the half-order GIG moments used by the E-step, and a sampler
built on the mixture representation

    y = mu + zeta1 * v + zeta2 * sqrt(sigma * v) * u,
    v ~ Exp(scale=sigma),  u ~ N(0, 1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QuantileLevel:
    tau: float

    def __post_init__(self):
        tau = float(self.tau)
        if not (0.0 < tau < 1.0) or not np.isfinite(tau):
            raise ValueError(f"quantile level must lie in (0, 1), got {self.tau!r}")
        object.__setattr__(self, "tau", tau)

    def __float__(self):
        return self.tau


def as_tau(tau) -> float:
    """Accept a float or a QuantileLevel and return a validated float."""
    if isinstance(tau, QuantileLevel):
        return tau.tau
    return QuantileLevel(tau).tau


@dataclass(frozen=True)
class MixtureConstants:
    zeta1: float
    zeta2: float


@dataclass(frozen=True)
class AldParams:
    mu: float
    sigma: float
    tau: float

    def __post_init__(self):
        if not (self.sigma > 0) or not np.isfinite(self.sigma):
            raise ValueError(f"ALD scale must be positive, got {self.sigma!r}")
        object.__setattr__(self, "tau", as_tau(self.tau))


def check_loss(eps, tau):
    """Quantile check loss ``eps * (tau - 1{eps < 0})``, elementwise."""
    tau = as_tau(tau)
    eps = np.asarray(eps, dtype=float)
    out = eps * (tau - (eps < 0))
    return out if out.ndim else float(out)


def mixture_constants(tau) -> MixtureConstants:
    tau = as_tau(tau)
    tt = tau * (1.0 - tau)
    return MixtureConstants(zeta1=(1.0 - 2.0 * tau) / tt, zeta2=np.sqrt(2.0 / tt))


def ald_log_density(y, p: AldParams):
    """log f(y | mu, sigma, tau) for the ALD with density
    tau(1-tau)/sigma * exp(-rho_tau((y - mu)/sigma))."""
    y = np.asarray(y, dtype=float)
    out = (np.log(p.tau * (1.0 - p.tau)) - np.log(p.sigma)
           - check_loss((y - p.mu) / p.sigma, p.tau))
    return out if np.ndim(out) else float(out)


def gig_moments_half(w1, w2):
    """E[1/v] and E[v] for v ~ GIG(1/2, w1, w2).

    The kernel is ``v**(-1/2) * exp(-(w1**2 / v + w2**2 * v) / 2)``. The
    half-order Bessel ratios reduce to K_{-1/2}/K_{1/2} = 1 and
    K_{3/2}(x)/K_{1/2}(x) = 1 + 1/x, so

        E[1/v] = w2 / w1,    E[v] = w1 / w2 + 1 / w2**2.

    Both arguments broadcast; every entry must be strictly positive.
    """
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    if np.any(~(w1 > 0)) or np.any(~(w2 > 0)):
        raise ValueError("GIG parameters w1 and w2 must be strictly positive")
    e_inv_v = w2 / w1
    e_v = w1 / w2 + 1.0 / (w2 * w2)
    if e_inv_v.ndim == 0:
        return float(e_inv_v), float(e_v)
    return e_inv_v, e_v


def sample_ald(n: int, p: AldParams, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` ALD variates through the normal-exponential mixture.

    The exponential mixing variable is drawn by inverse CDF,
    ``v = -sigma * log(1 - U)`` with ``U = rng.random()``, and the normal
    component by ``rng.standard_normal`` (NumPy's ziggurat). The two
    streams are drawn in that order, so a fixed seed and bit generator
    give a fixed output.
    """
    n = int(n)
    if n < 1:
        raise ValueError("sample size must be at least 1")
    c = mixture_constants(p.tau)
    v = -p.sigma * np.log1p(-rng.random(n))
    u = rng.standard_normal(n)
    return p.mu + c.zeta1 * v + c.zeta2 * np.sqrt(p.sigma * v) * u
