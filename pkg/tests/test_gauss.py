import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from copulaiv import gauss
from copulaiv.gauss import (CLAMPS, CORR_EPS, PROB_EPS, Phi, Phi2, Phi_inv,
                            clamp_corr, clamp_prob, phi, phi2)


def quad_oracle(x, y, rho):
    """Adaptive-quadrature bivariate normal CDF, split around the boundary
    layer of the conditional factor so the estimate is trustworthy at
    extreme correlations."""
    s = np.sqrt((1.0 - rho) * (1.0 + rho))
    f = lambda t: norm.pdf(t) * norm.cdf((y - rho * t) / s)
    tstar = y / rho if abs(rho) > 1e-12 else 0.0
    cuts = np.clip([tstar - 50 * s, tstar - 5 * s, tstar, tstar + 5 * s,
                    tstar + 50 * s], -40, x)
    segs = [-40.0] + sorted({float(c) for c in cuts if -40 < c < x}) + [float(x)]
    return sum(quad(f, a, b, epsabs=1e-15, epsrel=1e-13, limit=400)[0]
               for a, b in zip(segs[:-1], segs[1:]))


def test_phi_at_zero():
    assert phi(0.0) == pytest.approx(1.0 / np.sqrt(2 * np.pi), abs=1e-15)


def test_Phi_at_zero():
    assert Phi(0.0) == 0.5


def test_Phi_inv_against_bisection():
    # independent oracle: bisect Phi itself
    for p in (0.975, 0.5, 0.01, 0.9999, 1e-6):
        lo, hi = -40.0, 40.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if Phi(mid) < p:
                lo = mid
            else:
                hi = mid
        assert abs(Phi_inv(p) - 0.5 * (lo + hi)) < 1e-12 * max(1, abs(lo))
    assert Phi_inv(0.975) == pytest.approx(1.959964, abs=1e-6)


def test_Phi_roundtrips():
    p = np.linspace(1e-10, 1 - 1e-10, 1001)
    assert np.max(np.abs(Phi(Phi_inv(p)) - p)) < 1e-12
    x = np.linspace(-5, 5, 1001)
    assert np.max(np.abs(Phi_inv(Phi(x)) - x)) < 1e-10
    # above ~5.1 the double rounding of Phi(x) near 1 already moves the
    # recovered x by ~eps/phi(x); test at that representation floor
    x = np.linspace(5, 6, 101)
    floor = 0.5 * np.finfo(float).eps / phi(x)
    assert np.all(np.abs(Phi_inv(Phi(x)) - x) < 1e-10 + 1.5 * floor)
    assert np.all(np.abs(Phi_inv(Phi(-x)) + x) < 1e-10)
    # strictly increasing
    assert np.all(np.diff(Phi_inv(p)) > 0)


def test_Phi2_trivial_values():
    assert Phi2(0.0, 0.0, 0.0) == pytest.approx(0.25, abs=1e-15)
    assert Phi2(0.0, 0.0, 0.5) == pytest.approx(0.25 + np.arcsin(0.5) / (2 * np.pi), abs=1e-13)


def test_Phi2_arcsin_identity():
    for r in np.arange(-0.9, 0.91, 0.1):
        assert Phi2(0.0, 0.0, r) == pytest.approx(0.25 + np.arcsin(r) / (2 * np.pi), abs=1e-12)


def test_Phi2_marginal_limit():
    for x in (-2.0, 0.0, 2.0):
        for r in (-0.8, 0.0, 0.8):
            assert Phi2(x, 38.0, r) == pytest.approx(Phi(x), abs=1e-14)
            assert Phi2(38.0, x, r) == pytest.approx(Phi(x), abs=1e-14)


def test_Phi2_against_quadrature_oracle():
    rng = np.random.default_rng(7)
    pts = [(rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-0.999, 0.999))
           for _ in range(40)]
    pts += [(-1.0, 1.0, -0.999999), (-2.0, -2.0, 1 - 1e-8), (0.3, -0.2, 0.925),
            (0.3, -0.2, 0.9249), (1.5, 1.5, -0.95), (0.0, 0.0, 0.999)]
    for x, y, r in pts:
        assert Phi2(x, y, r) == pytest.approx(quad_oracle(x, y, r), abs=1e-12)


def test_Phi2_symmetry_and_monotonicity():
    rng = np.random.default_rng(12)
    x = rng.uniform(-3, 3, 200)
    y = rng.uniform(-3, 3, 200)
    r = rng.uniform(-0.99, 0.99, 200)
    assert np.max(np.abs(Phi2(x, y, r) - Phi2(y, x, r))) < 1e-14
    # monotone nondecreasing in each argument and in rho
    eps = 1e-4
    assert np.all(Phi2(x + eps, y, r) >= Phi2(x, y, r) - 1e-15)
    assert np.all(Phi2(x, y + eps, r) >= Phi2(x, y, r) - 1e-15)
    assert np.all(Phi2(x, y, np.clip(r + eps, -1, 1)) >= Phi2(x, y, r) - 1e-15)


def test_Phi2_frechet_lattice():
    xs = np.linspace(-4, 4, 21)
    ys = np.linspace(-4, 4, 21)
    rs = np.linspace(-0.95, 0.95, 19)
    X, Y, R = np.meshgrid(xs, ys, rs, indexing="ij")
    P = Phi2(X, Y, R)
    lo = np.maximum(Phi(X) + Phi(Y) - 1.0, 0.0)
    hi = np.minimum(Phi(X), Phi(Y))
    assert np.all(P >= lo - 1e-12)
    assert np.all(P <= hi + 1e-12)


def test_Phi2_rho_derivative_is_density():
    # dPhi2/drho = phi2, strictly positive; checked against central differences
    rng = np.random.default_rng(3)
    for _ in range(50):
        x, y = rng.uniform(-2.5, 2.5, 2)
        r = rng.uniform(-0.9, 0.9)
        h = 1e-5
        fd = (Phi2(x, y, r + h) - Phi2(x, y, r - h)) / (2 * h)
        dens = phi2(x, y, r)
        assert dens > 0
        assert fd == pytest.approx(dens, rel=1e-6)


def test_clamping_is_recorded():
    CLAMPS.reset()
    v, n = clamp_prob(1.0)
    assert v == 1.0 - PROB_EPS and n == 1
    v, n = clamp_prob(np.array([0.0, 0.5, 1.0]))
    assert n == 2 and v[1] == 0.5
    v, n = clamp_corr(-1.0)
    assert v == -1.0 + CORR_EPS and n == 1
    assert CLAMPS.snapshot() == {"prob": 3, "corr": 1}
    CLAMPS.reset()
    # Phi_inv at the boundaries stays finite thanks to clamping
    assert np.isfinite(Phi_inv(0.0)) and np.isfinite(Phi_inv(1.0))


@settings(max_examples=200, deadline=None)
@given(st.floats(-6, 6), st.floats(-6, 6), st.floats(-0.999, 0.999))
def test_Phi2_frechet_property(x, y, r):
    p = Phi2(x, y, r)
    assert max(Phi(x) + Phi(y) - 1.0, 0.0) - 1e-12 <= p <= min(Phi(x), Phi(y)) + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_Phi_inv_roundtrip_property(p, q):
    u, _ = clamp_prob(p)
    assert Phi(Phi_inv(u)) == pytest.approx(u, abs=1e-10)
    assert 0.0 <= Phi2(Phi_inv(u), Phi_inv(clamp_prob(q)[0]), 0.3) <= 1.0
