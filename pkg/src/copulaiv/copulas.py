"""Single-parameter copula families with derivatives and the local solver.

Families: GAUSSIAN, CLAYTON, FRANK, LOCAL_SPEARMAN. Each exposes the CDF
C(u1, u2; rho) plus partials C1 = dC/du1, C2 = dC/du2, Crho = dC/drho.
solve_rho inverts t = C(u1, u2; rho) in rho, which is well posed because all
four families are strictly increasing in the parameter.

Clayton takes rho in [-1, inf), Frank in (-inf, inf); both approach the
independence copula as rho -> 0, which is evaluated by series expansion below
|rho| < 1e-8 to avoid 0/0. Large parameters are handled in log space so the
families can be evaluated arbitrarily close to the Frechet bounds.
"""

import numpy as np

from .gauss import Phi, Phi2, Phi_inv, clamp_corr, clamp_prob, phi2

GAUSSIAN = "gaussian"
CLAYTON = "clayton"
FRANK = "frank"
LOCAL_SPEARMAN = "local_spearman"
FAMILIES = (GAUSSIAN, CLAYTON, FRANK, LOCAL_SPEARMAN)

SMALL_RHO = 1e-8     # series switch for Clayton/Frank
FRECHET_SLACK = 1e-13


class ParameterDomainError(ValueError):
    pass


class InfeasibleJointError(ValueError):
    pass


class RhoResult(float):
    """A float carrying a .boundary flag ("", "lower", or "upper")."""

    def __new__(cls, value, boundary=""):
        obj = super().__new__(cls, value)
        obj.boundary = boundary
        return obj


def frechet_bounds(u1, u2):
    return np.maximum(u1 + u2 - 1.0, 0.0), np.minimum(u1, u2)


def _check_family(family):
    if family not in FAMILIES:
        raise ParameterDomainError(f"unknown copula family {family!r}")


def _check_domain(family, rho):
    r = np.asarray(rho, dtype=float)
    if family == GAUSSIAN and np.any(np.abs(r) >= 1.0):
        raise ParameterDomainError("gaussian rho must lie in (-1, 1)")
    if family == CLAYTON and np.any(r < -1.0):
        raise ParameterDomainError("clayton rho must lie in [-1, inf)")


# ---------------------------------------------------------------- gaussian

def _gauss_C(u1, u2, rho):
    return Phi2(Phi_inv(u1), Phi_inv(u2), rho)


def _gauss_C1(u1, u2, rho):
    r, _ = clamp_corr(rho)
    s = np.sqrt(1.0 - np.asarray(r) ** 2)
    return Phi((Phi_inv(u2) - r * Phi_inv(u1)) / s)


def _gauss_Crho(u1, u2, rho):
    return phi2(Phi_inv(u1), Phi_inv(u2), rho)


# ----------------------------------------------------------------- clayton

def _clayton_lnS(lu1, lu2, rho):
    """log(u1^-rho + u2^-rho - 1) and a validity mask (S > 0)."""
    a, b = -rho * lu1, -rho * lu2
    big = np.maximum(a, b) > 600.0   # expm1 would overflow; the -1 is then moot
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        s1 = np.expm1(np.where(big, 0.0, a)) + np.expm1(np.where(big, 0.0, b))
        valid = big | (s1 > -1.0)    # S <= 0 only possible for rho < 0
        lns = np.where(big, np.logaddexp(a, b),
                       np.log1p(np.where(s1 > -1.0, s1, 0.0)))
    return lns, valid


def _clayton_C(u1, u2, rho):
    rho = np.asarray(rho, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    lu1, lu2 = np.log(u1), np.log(u2)
    small = np.abs(rho) < SMALL_RHO
    rs = np.where(small, 1.0, rho)    # placeholder away from 0
    lns, valid = _clayton_lnS(lu1, lu2, rs)
    out = np.where(valid, np.exp(-lns / rs), 0.0)
    series = u1 * u2 * (1.0 + rho * lu1 * lu2)
    return np.where(small, series, out)


def _clayton_C1(u1, u2, rho):
    rho = np.asarray(rho, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    lu1, lu2 = np.log(u1), np.log(u2)
    small = np.abs(rho) < SMALL_RHO
    rs = np.where(small, 1.0, rho)
    lns, valid = _clayton_lnS(lu1, lu2, rs)
    out = np.where(valid, np.exp((-rs - 1.0) * lu1 + (-1.0 / rs - 1.0) * lns), 0.0)
    series = u2 + rho * u2 * lu2 * (lu1 + 1.0)
    return np.where(small, series, out)


def _clayton_Crho(u1, u2, rho):
    rho = np.asarray(rho, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    lu1, lu2 = np.log(u1), np.log(u2)
    small = np.abs(rho) < SMALL_RHO
    rs = np.where(small, 1.0, rho)
    a, b = -rs * lu1, -rs * lu2
    m = np.maximum(np.maximum(a, b), 0.0)
    lns, valid = _clayton_lnS(lu1, lu2, rs)
    c = np.where(valid, np.exp(-lns / rs), 0.0)
    # (dS/drho)/S at the common scale m; exp(-m) vanishes when m is huge
    with np.errstate(under="ignore"):
        num = -lu1 * np.exp(a - m) - lu2 * np.exp(b - m)
        den = np.exp(a - m) + np.exp(b - m) - np.exp(-m)
        dsds = num / np.where(valid, den, 1.0)
    out = np.where(valid, c * (lns / rs ** 2 - dsds / rs), 0.0)
    series = u1 * u2 * lu1 * lu2
    return np.where(small, series, out)


# ------------------------------------------------------------------- frank

def _log1mexp(x):
    # log(1 - exp(-x)) for x > 0
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(x > 0.693, np.log1p(-np.exp(-x)),
                        np.log(np.maximum(-np.expm1(-x), 1e-300)))


def _frank_C_logspace(u1, u2, rho):
    # rho > 0; -N = e^(-r u1)(1 - e^(-r u2)) + e^(-r u2)(1 - e^(-r(1-u2)))
    t1 = -rho * u1 + _log1mexp(rho * u2)
    t2 = -rho * u2 + _log1mexp(rho * (1.0 - u2))
    ln_n = np.logaddexp(t1, t2)
    ln_d = _log1mexp(rho)
    return -(ln_n - ln_d) / rho


def _frank_r(u1, u2, rho):
    # r = (e^(-r u1)-1)(e^(-r u2)-1)/(e^(-r)-1); C = -log1p(r)/rho
    # grouped as (g1/g0)*g2 so intermediates stay bounded for rho < 0
    g1, g2, g0 = np.expm1(-rho * u1), np.expm1(-rho * u2), np.expm1(-rho)
    return (g1 / g0) * g2


def _frank_direct_ok(u1, u2, rho):
    # 1 + r cancels like eps*exp(rho*min(u)) for rho > 0; overflow for rho << 0
    return np.where(rho > 0, rho * np.minimum(u1, u2) <= 10.0, rho >= -600.0)


def _frank_C(u1, u2, rho):
    rho = np.asarray(rho, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    small = np.abs(rho) < SMALL_RHO
    rs = np.where(small, 1.0, rho)
    ok = _frank_direct_ok(u1, u2, rs)
    with np.errstate(over="ignore", invalid="ignore"):
        direct = -np.log1p(_frank_r(u1, u2, np.where(ok, rs, 1.0))) / rs
    ra = np.abs(rs)
    logspace = np.where(rs > 0, _frank_C_logspace(u1, u2, ra),
                        u1 - _frank_C_logspace(u1, 1.0 - u2, ra))
    series = u1 * u2 * (1.0 + rho * (1.0 - u1) * (1.0 - u2) / 2.0)
    return np.where(small, series, np.where(ok, direct, logspace))


def _frank_C1_logspace(u1, u2, rho):
    # C1 = e^(-r u1)(1 - e^(-r u2)) / (-N), rho > 0
    t1 = -rho * u1 + _log1mexp(rho * u2)
    t2 = -rho * u2 + _log1mexp(rho * (1.0 - u2))
    return np.exp(t1 - np.logaddexp(t1, t2))


def _frank_C1(u1, u2, rho):
    rho = np.asarray(rho, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    small = np.abs(rho) < SMALL_RHO
    rs = np.where(small, 1.0, rho)
    ok = _frank_direct_ok(u1, u2, rs)
    rd = np.where(ok, rs, 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        g2, g0 = np.expm1(-rd * u2), np.expm1(-rd)
        direct = np.exp(-rd * u1) * g2 / (g0 * (1.0 + _frank_r(u1, u2, rd)))
    ra = np.abs(rs)
    logspace = np.where(rs > 0, _frank_C1_logspace(u1, u2, ra),
                        1.0 - _frank_C1_logspace(u1, 1.0 - u2, ra))
    series = u2 + rho * u2 * (1.0 - u2) * (1.0 - 2.0 * u1) / 2.0
    return np.where(small, series, np.where(ok, direct, logspace))


def _frank_Crho_direct(u1, u2, rho):
    g1, g2, g0 = np.expm1(-rho * u1), np.expm1(-rho * u2), np.expm1(-rho)
    r = (g1 / g0) * g2
    dg1, dg2, dg0 = (-u1 * np.exp(-rho * u1), -u2 * np.exp(-rho * u2),
                     -np.exp(-rho))
    dr = (dg1 / g0) * g2 + (g1 / g0) * dg2 - r * (dg0 / g0)
    return np.log1p(r) / rho ** 2 - dr / (rho * (1.0 + r))


def _frank_Crho(u1, u2, rho):
    rho = np.asarray(rho, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    small = np.abs(rho) < SMALL_RHO
    rs = np.where(small, 1.0, rho)
    ok = _frank_direct_ok(u1, u2, rs) & (np.abs(rs) <= 300.0)
    with np.errstate(over="ignore", invalid="ignore"):
        direct = _frank_Crho_direct(u1, u2, np.where(ok, rs, 1.0))
    # central difference on the log-space CDF once the float formula saturates
    h = 1e-4
    fd = (_frank_C(u1, u2, rs + h) - _frank_C(u1, u2, rs - h)) / (2.0 * h)
    series = u1 * u2 * (1.0 - u1) * (1.0 - u2) / 2.0
    return np.where(small, series, np.where(ok, direct, fd))


# ---------------------------------------------------------- local spearman

def _spearman_scale(u1, u2):
    return np.sqrt(u1 * u2 * (1.0 - u1) * (1.0 - u2))


def _spearman_C(u1, u2, rho):
    return u1 * u2 + rho * _spearman_scale(u1, u2)


def _spearman_C1(u1, u2, rho):
    s2 = np.sqrt(u2 * (1.0 - u2))
    s1 = np.sqrt(u1 * (1.0 - u1))
    return u2 + rho * s2 * (1.0 - 2.0 * u1) / (2.0 * s1)


def _spearman_Crho(u1, u2, rho):
    return _spearman_scale(u1, u2) + 0.0 * np.asarray(rho)


# ----------------------------------------------------------------- surface

def C(family, u1, u2, rho):
    """Copula CDF C(u1, u2; rho) for the given family."""
    _check_family(family)
    _check_domain(family, rho)
    u1, _ = clamp_prob(u1)
    u2, _ = clamp_prob(u2)
    if family == GAUSSIAN:
        return _gauss_C(u1, u2, rho)
    if family == CLAYTON:
        out = _clayton_C(u1, u2, rho)
    elif family == FRANK:
        out = _frank_C(u1, u2, rho)
    else:
        out = _spearman_C(u1, u2, rho)
    return float(out) if np.ndim(out) == 0 else out


def C1(family, u1, u2, rho):
    """dC/du1: the conditional CDF of U2 given U1 = u1."""
    _check_family(family)
    _check_domain(family, rho)
    u1, _ = clamp_prob(u1)
    u2, _ = clamp_prob(u2)
    if family == GAUSSIAN:
        return _gauss_C1(u1, u2, rho)
    if family == CLAYTON:
        out = _clayton_C1(u1, u2, rho)
    elif family == FRANK:
        out = _frank_C1(u1, u2, rho)
    else:
        out = _spearman_C1(u1, u2, rho)
    return float(out) if np.ndim(out) == 0 else out


def C2(family, u1, u2, rho):
    """dC/du2; all four families are exchangeable, so this is C1 swapped."""
    return C1(family, u2, u1, rho)


def Crho(family, u1, u2, rho):
    """dC/drho, strictly positive on the interior of the Frechet box."""
    _check_family(family)
    _check_domain(family, rho)
    u1, _ = clamp_prob(u1)
    u2, _ = clamp_prob(u2)
    if family == GAUSSIAN:
        return _gauss_Crho(u1, u2, rho)
    if family == CLAYTON:
        out = _clayton_Crho(u1, u2, rho)
    elif family == FRANK:
        out = _frank_Crho(u1, u2, rho)
    else:
        out = _spearman_Crho(u1, u2, rho)
    return float(out) if np.ndim(out) == 0 else out


def solve_rho(family, t, u1, u2):
    """Invert t = C(u1, u2; rho) in rho.

    Returns a RhoResult (a float with .boundary set when t sits on a Frechet
    bound and rho had to be clamped). Raises InfeasibleJointError when t lies
    outside the Frechet bounds beyond slack.
    """
    _check_family(family)
    u1, _ = clamp_prob(float(u1))
    u2, _ = clamp_prob(float(u2))
    t = float(t)
    lo_b, hi_b = frechet_bounds(u1, u2)
    if t < lo_b - FRECHET_SLACK:
        raise InfeasibleJointError(
            f"t={t} below the Frechet lower bound max(u1+u2-1, 0)={lo_b}")
    if t > hi_b + FRECHET_SLACK:
        raise InfeasibleJointError(
            f"t={t} above the Frechet upper bound min(u1, u2)={hi_b}")

    if family == LOCAL_SPEARMAN:
        s12 = _spearman_scale(u1, u2)
        rho = (t - u1 * u2) / s12
        lo_r = (lo_b - u1 * u2) / s12
        hi_r = (hi_b - u1 * u2) / s12
        if rho <= lo_r:
            return RhoResult(lo_r, "lower")
        if rho >= hi_r:
            return RhoResult(hi_r, "upper")
        return RhoResult(rho)

    if family == GAUSSIAN:
        lo_s, hi_s = -1.0 + 1e-8, 1.0 - 1e-8
        to_rho = lambda s: s
    elif family == CLAYTON:
        lo_s, hi_s = -0.5, 1.0 - 1e-9
        to_rho = lambda s: s / (1.0 - abs(s))
    else:
        lo_s, hi_s = -(1.0 - 1e-9), 1.0 - 1e-9
        to_rho = lambda s: s / (1.0 - abs(s))

    fam_C = {GAUSSIAN: _gauss_C, CLAYTON: _clayton_C, FRANK: _frank_C}[family]

    c_lo = float(fam_C(u1, u2, to_rho(lo_s)))
    c_hi = float(fam_C(u1, u2, to_rho(hi_s)))
    if t <= c_lo:
        flag = "lower" if t <= lo_b + FRECHET_SLACK or t < c_lo else ""
        return RhoResult(to_rho(lo_s), flag or "lower")
    if t >= c_hi:
        flag = "upper" if t >= hi_b - FRECHET_SLACK or t > c_hi else ""
        return RhoResult(to_rho(hi_s), flag or "upper")

    lo, hi = lo_s, hi_s
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        cm = float(fam_C(u1, u2, to_rho(mid)))
        if cm < t:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-16 and abs(cm - t) < 1e-13:
            break
    return RhoResult(to_rho(0.5 * (lo + hi)))
