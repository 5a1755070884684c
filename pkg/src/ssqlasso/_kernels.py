"""Compiled coordinate sweeps.

One kernel serves the quantile EM, the Gaussian EM and plain LASSO; they
differ only in the per-observation weights, the linear shift term and the
scale that divides the quadratic part. Columns are read from transposed,
C-contiguous copies of Z and X so each coordinate touches contiguous memory.
"""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def coordinate_sweep(Zt, Xt, resid, alpha, beta, w, shift, scale, inv_vk, s_inv,
                     zsum, xsum):
    """One cyclic pass over alpha (ascending) then beta (ascending).

    Maximises, one coordinate at a time,

        -sum_i w_i r_i^2 / (2 scale) + shift * sum_i r_i / scale
        - sum_l inv_vk * alpha_l^2 / 2 - sum_m s_inv_m |beta_m|

    where r = y - Z alpha - X beta is kept current in ``resid``. ``zsum`` and
    ``xsum`` are column sums, needed for the shift term. Arrays are updated
    in place. Returns (index of first non-finite coordinate or -1, largest
    absolute coefficient change); beta indices are offset by len(alpha).
    """
    q1, n = Zt.shape
    p = Xt.shape[0]
    max_delta = 0.0
    for l in range(q1):
        z = Zt[l]
        num = 0.0
        den = 0.0
        for i in range(n):
            wz = w[i] * z[i]
            num += wz * resid[i]
            den += wz * z[i]
        old = alpha[l]
        new = (num + old * den - shift * zsum[l]) / (scale * inv_vk + den)
        if not np.isfinite(new):
            return l, max_delta
        d = new - old
        if d != 0.0:
            for i in range(n):
                resid[i] -= d * z[i]
            alpha[l] = new
            if abs(d) > max_delta:
                max_delta = abs(d)
    for m in range(p):
        x = Xt[m]
        old = beta[m]
        num = 0.0
        den = 0.0
        if old == 0.0:
            # t needs only num here; den matters only if beta_m leaves 0
            for i in range(n):
                num += w[i] * x[i] * resid[i]
            if abs(num - shift * xsum[m]) / scale <= s_inv[m]:
                continue
        for i in range(n):
            wx = w[i] * x[i]
            den += wx * x[i]
            if old != 0.0:
                num += wx * resid[i]
        if den <= 0.0:
            new = 0.0
        else:
            t = (num + old * den - shift * xsum[m]) / scale
            thr = s_inv[m]
            if t > thr:
                new = (t - thr) / (den / scale)
            elif t < -thr:
                new = (t + thr) / (den / scale)
            else:
                new = 0.0
        if not np.isfinite(new):
            return q1 + m, max_delta
        d = new - old
        if d != 0.0:
            for i in range(n):
                resid[i] -= d * x[i]
            beta[m] = new
            if abs(d) > max_delta:
                max_delta = abs(d)
    return -1, max_delta


@njit(cache=True, nogil=True)
def _log_add(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


@njit(cache=True, nogil=True)
def _expit(x):
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@njit(cache=True, nogil=True)
def ssq_log_posterior(resid, alpha, beta, sigma, theta, tau, s0, s1, a, b, v_k):
    """Observed-data log posterior; mirrors ``em.log_posterior``."""
    n = resid.shape[0]
    loss = 0.0
    for i in range(n):
        u = resid[i] / sigma
        loss += u * (tau - 1.0) if u < 0 else u * tau
    out = n * (np.log(tau * (1.0 - tau)) - np.log(sigma)) - loss
    out += -(a + 1.0) * np.log(sigma) - b / sigma
    sa = 0.0
    for l in range(alpha.shape[0]):
        sa += alpha[l] * alpha[l]
    out -= sa / (2.0 * v_k)
    log_spike_w = np.log1p(-theta) if theta < 1.0 else -np.inf
    log_slab_w = np.log(theta) if theta > 0.0 else -np.inf
    c0 = np.log(2.0 * s0)
    c1 = np.log(2.0 * s1)
    for m in range(beta.shape[0]):
        ab = abs(beta[m])
        spike = log_spike_w - c0 - ab / s0 if log_spike_w > -np.inf else -np.inf
        slab = log_slab_w - c1 - ab / s1 if log_slab_w > -np.inf else -np.inf
        out += _log_add(spike, slab)
    return out


@njit(cache=True, nogil=True)
def inclusion(beta, theta, s0, s1, eta, s_inv):
    """Fill eta_j and the thresholds (1-eta_j)/s0 + eta_j/s1."""
    if theta <= 0.0:
        prior_logit = -np.inf
    elif theta >= 1.0:
        prior_logit = np.inf
    else:
        prior_logit = np.log(theta) - np.log1p(-theta)
    base = prior_logit + np.log(s0) - np.log(s1)
    slope = 1.0 / s0 - 1.0 / s1
    for m in range(beta.shape[0]):
        e = _expit(base + abs(beta[m]) * slope)
        eta[m] = e
        s_inv[m] = (1.0 - e) / s0 + e / s1


@njit(cache=True, nogil=True)
def em_loop(Zt, Xt, resid, alpha, beta, sigma, theta, q0, tau, s0, s1, a, b, v_k,
            floor, delta, max_iter, zsum, xsum, q_trace):
    """Quantile EM iterations, the same arithmetic as ``em.e_step`` and
    ``em.m_step``. Arrays are updated in place; ``q_trace`` must have room
    for max_iter + 1 values.

    Returns (status, iterations, sigma, theta, detail): status 0 converged,
    1 hit max_iter, 2 sigma update not positive/finite, 3 non-finite
    coordinate (detail = its index).
    """
    n = resid.shape[0]
    p = beta.shape[0]
    tt = tau * (1.0 - tau)
    zeta1 = (1.0 - 2.0 * tau) / tt
    z2 = 2.0 / tt
    zeta2 = np.sqrt(z2)
    v_inv = np.empty(n)
    eta = np.empty(p)
    s_inv = np.empty(p)
    q_trace[0] = q0
    q_old = q0
    for it in range(1, max_iter + 1):
        # E-step
        root = zeta2 * np.sqrt(sigma)
        w2 = np.sqrt(2.0 / sigma + zeta1 * zeta1 / (z2 * sigma))
        s_lin = 0.0
        s_v = 0.0
        for i in range(n):
            r = resid[i]
            w1 = max(abs(r), floor) / root
            vi = w2 / w1
            v_inv[i] = vi
            s_v += w1 / w2 + 1.0 / (w2 * w2)
            s_lin += vi * r * r - 2.0 * zeta1 * r
        inclusion(beta, theta, s0, s1, eta, s_inv)
        # M-step: theta, sigma at the old coefficients, then one sweep
        s_eta = 0.0
        for m in range(p):
            s_eta += eta[m]
        theta = s_eta / p
        sigma = (s_lin + s_v * (zeta1 * zeta1 + 2.0 * z2) + 2.0 * z2 * b) / ((3 * n + 2 * a + 2) * z2)
        if not (np.isfinite(sigma) and sigma > 0):
            return 2, it - 1, sigma, theta, -1
        bad, _ = coordinate_sweep(Zt, Xt, resid, alpha, beta, v_inv, zeta1, z2 * sigma,
                                  1.0 / v_k, s_inv, zsum, xsum)
        if bad >= 0:
            return 3, it - 1, sigma, theta, bad
        q = ssq_log_posterior(resid, alpha, beta, sigma, theta, tau, s0, s1, a, b, v_k)
        q_trace[it] = q
        if abs(q - q_old) < delta:
            return 0, it, sigma, theta, -1
        q_old = q
    return 1, max_iter, sigma, theta, -1
