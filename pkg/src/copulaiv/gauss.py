"""Univariate and bivariate Gaussian primitives.

Everything downstream (copulas, solvers, likelihoods) is built on Phi, phi,
Phi_inv and the bivariate CDF Phi2. Phi2 targets 1e-12 absolute accuracy via
Gauss-Legendre quadrature of the Drezner-Wesolowsky integral with the Genz
branch for |rho| near 1.

Probabilities are clamped into [PROB_EPS, 1 - PROB_EPS] and correlations into
[-1 + CORR_EPS, 1 - CORR_EPS] before any boundary-sensitive call. Clamping is
explicit: clamp_prob / clamp_corr return the number of clamped entries and
feed a module-level tally that long pipelines can report.
"""

import numpy as np
from scipy.special import ndtr, ndtri, log_ndtr

PROB_EPS = 1e-12
CORR_EPS = 1e-8

_SQRT_2PI = np.sqrt(2.0 * np.pi)
_TWO_PI = 2.0 * np.pi

# 20-point Gauss-Legendre rule on (-1, 1); accuracy can only improve over the
# 6/12-point short rules, and vectorization amortizes the extra nodes.
_GL_X, _GL_W = np.polynomial.legendre.leggauss(20)


class ClampTally:
    """Counts boundary clamps so callers can surface them in diagnostics."""

    def __init__(self):
        self.prob = 0
        self.corr = 0

    def reset(self):
        self.prob = 0
        self.corr = 0

    def snapshot(self):
        return {"prob": self.prob, "corr": self.corr}


CLAMPS = ClampTally()


def _as_float(x, scalar):
    return float(x) if scalar else x


def clamp_prob(p):
    """Clamp probabilities into [PROB_EPS, 1 - PROB_EPS].

    Returns (clamped, n_clamped). Clamp events accumulate in CLAMPS.
    """
    scalar = np.isscalar(p) or np.ndim(p) == 0
    arr = np.asarray(p, dtype=float)
    out = np.clip(arr, PROB_EPS, 1.0 - PROB_EPS)
    n = int(np.count_nonzero(out != arr))
    if n:
        CLAMPS.prob += n
    return _as_float(out, scalar), n


def clamp_corr(r):
    """Clamp correlations into [-1 + CORR_EPS, 1 - CORR_EPS].

    Returns (clamped, n_clamped). Clamp events accumulate in CLAMPS.
    """
    scalar = np.isscalar(r) or np.ndim(r) == 0
    arr = np.asarray(r, dtype=float)
    out = np.clip(arr, -1.0 + CORR_EPS, 1.0 - CORR_EPS)
    n = int(np.count_nonzero(out != arr))
    if n:
        CLAMPS.corr += n
    return _as_float(out, scalar), n


def phi(x):
    """Standard normal density."""
    scalar = np.isscalar(x) or np.ndim(x) == 0
    x = np.asarray(x, dtype=float)
    return _as_float(np.exp(-0.5 * x * x) / _SQRT_2PI, scalar)


def Phi(x):
    """Standard normal CDF."""
    scalar = np.isscalar(x) or np.ndim(x) == 0
    return _as_float(ndtr(np.asarray(x, dtype=float)), scalar)


def log_Phi(x):
    """log of the standard normal CDF, stable far into the left tail."""
    scalar = np.isscalar(x) or np.ndim(x) == 0
    return _as_float(log_ndtr(np.asarray(x, dtype=float)), scalar)


def Phi_inv(p):
    """Standard normal quantile; input clamped away from {0, 1} first."""
    scalar = np.isscalar(p) or np.ndim(p) == 0
    q, _ = clamp_prob(np.asarray(p, dtype=float))
    return _as_float(ndtri(q), scalar)


def phi2(x, y, rho):
    """Bivariate standard normal density with correlation rho."""
    scalar = all(np.isscalar(v) or np.ndim(v) == 0 for v in (x, y, rho))
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r, _ = clamp_corr(rho)
    r = np.asarray(r, dtype=float)
    omr2 = 1.0 - r * r
    z = (x * x - 2.0 * r * x * y + y * y) / omr2
    out = np.exp(-0.5 * z) / (_TWO_PI * np.sqrt(omr2))
    return _as_float(out, scalar)


def _bvnd_small_r(h, k, r):
    # |r| < 0.925: quadrature of exp((sn*hk - hs)/(1 - sn^2)) over the arcsin arc
    hk = h * k
    hs = 0.5 * (h * h + k * k)
    asr = np.arcsin(r)
    sn = np.sin(asr[..., None] * 0.5 * (_GL_X + 1.0))
    f = np.exp((sn * hk[..., None] - hs[..., None]) / (1.0 - sn * sn))
    bvn = f @ _GL_W
    bvn = bvn * asr / (2.0 * _TWO_PI)
    return bvn + ndtr(-h) * ndtr(-k)


def _bvnd_large_r(h, k, r):
    # |r| >= 0.925: Genz's asymptotic expansion plus corrective quadrature.
    # Guarded exp() branches can overflow before np.where discards them.
    with np.errstate(over="ignore", invalid="ignore"):
        return _bvnd_large_r_core(h, k, r)


def _bvnd_large_r_core(h, k, r):
    k = np.where(r < 0.0, -k, k)
    hk = h * k
    bvn = np.zeros_like(h)

    as_ = (1.0 - r) * (1.0 + r)
    a = np.sqrt(as_)
    bs = (h - k) ** 2
    c = (4.0 - hk) / 8.0
    d = (12.0 - hk) / 16.0
    asr = -0.5 * (bs / as_ + hk)
    t1 = a * np.exp(asr) * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0
                            + c * d * as_ * as_ / 5.0)
    bvn = np.where(asr > -100.0, t1, bvn)

    b = np.sqrt(bs)
    t2 = (np.exp(-0.5 * hk) * _SQRT_2PI * ndtr(-b / a) * b
          * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0))
    bvn = bvn - np.where(-hk < 100.0, t2, 0.0)

    ah = 0.5 * a
    xs = (ah[..., None] * (_GL_X + 1.0)) ** 2
    rs = np.sqrt(1.0 - xs)
    asr2 = -0.5 * (bs[..., None] / xs + hk[..., None])
    term = (np.exp(asr2)
            * (np.exp(-hk[..., None] * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs
               - (1.0 + c[..., None] * xs * (1.0 + d[..., None] * xs))))
    term = np.where(asr2 > -100.0, term, 0.0)
    bvn = bvn + ah * (term @ _GL_W)

    bvn = -bvn / _TWO_PI
    pos = bvn + ndtr(-np.maximum(h, k))
    neg = -bvn + np.where(k > h, ndtr(k) - ndtr(h), 0.0)
    return np.where(r > 0.0, pos, neg)


def Phi2(x, y, rho):
    """Bivariate standard normal CDF P(X <= x, Y <= y) with correlation rho.

    Symmetric in (x, y), monotone in each argument and in rho; absolute
    accuracy ~1e-15. Arguments broadcast; rho is clamped into (-1, 1).
    """
    scalar = all(np.isscalar(v) or np.ndim(v) == 0 for v in (x, y, rho))
    r, _ = clamp_corr(rho)
    x, y, r = np.broadcast_arrays(np.asarray(x, dtype=float),
                                  np.asarray(y, dtype=float),
                                  np.asarray(r, dtype=float))
    # beyond |38| the bivariate CDF equals its limit to full double precision
    h = -np.clip(x, -38.0, 38.0)
    k = -np.clip(y, -38.0, 38.0)
    shape = h.shape
    h, k, r = h.ravel(), k.ravel(), r.ravel()

    out = np.empty_like(h)
    small = np.abs(r) < 0.925
    if np.any(small):
        out[small] = _bvnd_small_r(h[small], k[small], r[small])
    big = ~small
    if np.any(big):
        out[big] = _bvnd_large_r(h[big], k[big], r[big])

    out = np.clip(out, 0.0, 1.0).reshape(shape)
    return _as_float(out, scalar)
