"""Tests for the population identification solvers.

Oracles: forward maps are plain copula arithmetic (C evaluated at known
(F, rho) configurations), so every solver is checked as the inverse of an
independently computed forward map.
"""

import numpy as np
import pytest

from copulaiv.copulas import C, GAUSSIAN, InfeasibleJointError
from copulaiv.gauss import Phi, Phi_inv
from copulaiv.ident import (
    AssumptionError, BETWEEN_LEVELS, BinarySystemInput, ConvergenceError,
    DegenerateWeightError, WITHIN_LEVELS, WeakInstrumentError, binary_jacobian,
    check_assumptions, solve_alt_system, solve_binary, solve_continuous,
    solve_continuous_spearman, solve_multi_iv, solve_ordered,
)


def fwd_binary(F, rho, pis):
    return [C(GAUSSIAN, F, pi, rho) for pi in pis]


# ------------------------------------------------------------------- binary

def test_binary_independence():
    pis = (0.3, 0.6)
    sol = solve_binary(BinarySystemInput(0.4 * pis[0], 0.4 * pis[1], *pis))
    assert sol.F == pytest.approx(0.4, abs=1e-10)
    assert sol.rho == pytest.approx(0.0, abs=1e-10)


def test_binary_forward_inverse():
    pis = (0.3, 0.6)
    p = fwd_binary(0.4, 0.3, pis)
    sol = solve_binary(BinarySystemInput(p[0], p[1], *pis))
    assert sol.F == pytest.approx(0.4, abs=1e-10)
    assert sol.rho == pytest.approx(0.3, abs=1e-10)
    assert sol.residual <= 1e-10


def test_binary_weak_instrument():
    with pytest.raises(WeakInstrumentError):
        solve_binary(BinarySystemInput(0.2, 0.2, 0.5, 0.5))


def test_binary_infeasible():
    with pytest.raises(InfeasibleJointError, match="exceeds"):
        solve_binary(BinarySystemInput(0.35, 0.2, 0.3, 0.6))


def test_binary_lattice():
    pis_list = [(0.3, 0.6), (0.2, 0.8), (0.45, 0.55), (0.7, 0.25)]
    for F in (0.15, 0.4, 0.7, 0.9):
        for rho in (-0.7, -0.2, 0.0, 0.35, 0.75):
            for pis in pis_list:
                p = fwd_binary(F, rho, pis)
                sol = solve_binary(BinarySystemInput(p[0], p[1], *pis))
                assert sol.F == pytest.approx(F, abs=1e-8)
                assert sol.rho == pytest.approx(rho, abs=1e-8)
                assert sol.residual <= 1e-8


def test_binary_level0():
    pis = (0.3, 0.6)
    for F, rho in [(0.55, -0.25), (0.3, 0.5)]:
        p = [F - C(GAUSSIAN, F, pi, rho) for pi in pis]
        sol = solve_binary(BinarySystemInput(p[0], p[1], *pis), level=0)
        assert sol.F == pytest.approx(F, abs=1e-8)
        assert sol.rho == pytest.approx(rho, abs=1e-8)


def test_binary_jacobian_p_matrix():
    # rows ordered by decreasing propensity: positive diagonal and determinant
    rng = np.random.default_rng(0)
    for _ in range(100):
        F = rng.uniform(0.05, 0.95)
        rho = rng.uniform(-0.9, 0.9)
        lo, hi = np.sort(rng.uniform(0.05, 0.95, 2))
        if hi - lo < 1e-3:
            continue
        J = binary_jacobian(F, rho, (hi, lo))
        assert J[0, 0] > 0 and J[1, 1] > 0
        assert np.linalg.det(J) > 0


# ------------------------------------------------------------------ ordered

def test_ordered_independence():
    lo, hi = (0.2, 0.35), (0.6, 0.8)
    F = 0.5
    p = [F * (hi[z] - lo[z]) for z in (0, 1)]
    sol = solve_ordered(p[0], p[1], lo, hi)
    assert sol.F == pytest.approx(F, abs=1e-8)
    assert sol.rho == pytest.approx(0.0, abs=1e-8)


def test_ordered_forward_inverse():
    F, rho = 0.5, -0.4
    lo, hi = (0.2, 0.35), (0.6, 0.8)
    p = [C(GAUSSIAN, F, hi[z], rho) - C(GAUSSIAN, F, lo[z], rho) for z in (0, 1)]
    sol = solve_ordered(p[0], p[1], lo, hi)
    assert sol.F == pytest.approx(F, abs=1e-8)
    assert sol.rho == pytest.approx(rho, abs=1e-8)
    assert sol.residual <= 1e-8


def test_ordered_dominance_violation():
    with pytest.raises(AssumptionError, match="cross"):
        solve_ordered(0.1, 0.1, (0.2, 0.35), (0.8, 0.6))


def test_ordered_boundary_matches_binary():
    pis = (0.3, 0.6)
    p = fwd_binary(0.45, 0.3, pis)
    a = solve_ordered(p[0], p[1], (0.0, 0.0), pis)
    b = solve_binary(BinarySystemInput(p[0], p[1], *pis))
    assert a.F == pytest.approx(b.F, abs=1e-10)
    assert a.rho == pytest.approx(b.rho, abs=1e-10)
    # top level against the complementary binary form
    F, rho = 0.55, -0.25
    p = [F - C(GAUSSIAN, F, pis[z], rho) for z in (0, 1)]
    a = solve_ordered(p[0], p[1], pis, (1.0, 1.0))
    b = solve_binary(BinarySystemInput(p[0], p[1], *pis), level=0)
    assert a.F == pytest.approx(b.F, abs=1e-10)
    assert a.rho == pytest.approx(b.rho, abs=1e-10)


def test_ordered_interior_lattice():
    configs = [((0.1, 0.2), (0.5, 0.7)), ((0.3, 0.15), (0.75, 0.55)),
               ((0.25, 0.4), (0.5, 0.85))]
    for F in (0.25, 0.5, 0.8):
        for rho in (-0.6, 0.0, 0.45):
            for lo, hi in configs:
                p = [C(GAUSSIAN, F, hi[z], rho) - C(GAUSSIAN, F, lo[z], rho)
                     for z in (0, 1)]
                sol = solve_ordered(p[0], p[1], lo, hi)
                assert sol.F == pytest.approx(F, abs=1e-8)
                assert sol.rho == pytest.approx(rho, abs=1e-8)


# --------------------------------------------------------------- continuous

def test_continuous_no_shift():
    sol = solve_continuous(0.5, 0.5, 0.4, 0.7)
    assert sol.F == pytest.approx(0.5, abs=1e-12)
    assert sol.rho == pytest.approx(0.0, abs=1e-12)


def test_continuous_worked_example():
    sol = solve_continuous(0.5, 0.6, 0.4, 0.7)
    # independent arithmetic for the same closed form
    from scipy.special import ndtr, ndtri
    q0, q1 = ndtri(0.4), ndtri(0.7)
    y0, y1 = ndtri(0.5), ndtri(0.6)
    a = (y0 * q1 - y1 * q0) / (q1 - q0)
    b = (y1 - y0) / (q1 - q0)
    assert a == pytest.approx(0.08253, abs=1e-5)
    assert b == pytest.approx(0.32574, abs=1e-5)
    assert sol.F == pytest.approx(float(ndtr(a / np.hypot(1.0, b))), abs=1e-12)
    assert sol.rho == pytest.approx(-b / np.hypot(1.0, b), abs=1e-12)
    assert sol.F == pytest.approx(0.53128, abs=1e-4)
    assert sol.rho == pytest.approx(-0.30973, abs=1e-5)


def test_continuous_coefficient_reconstruction():
    # (a, b) rebuilt from (F, rho) must match the defining linear relation
    sol = solve_continuous(0.5, 0.6, 0.4, 0.7)
    s = np.sqrt(1.0 - sol.rho ** 2)
    a, b = Phi_inv(sol.F) / s, -sol.rho / s
    assert float(Phi(a + b * Phi_inv(0.4))) == pytest.approx(0.5, abs=1e-12)
    assert float(Phi(a + b * Phi_inv(0.7))) == pytest.approx(0.6, abs=1e-12)


def test_continuous_round_trip():
    for F in (0.2, 0.5, 0.85):
        for rho in (-0.8, -0.3, 0.0, 0.4, 0.7):
            s = np.sqrt(1.0 - rho ** 2)
            a, b = Phi_inv(F) / s, -rho / s
            for FD0, FD1 in [(0.3, 0.7), (0.55, 0.2), (0.1, 0.45)]:
                f0 = float(Phi(a + b * Phi_inv(FD0)))
                f1 = float(Phi(a + b * Phi_inv(FD1)))
                sol = solve_continuous(f0, f1, FD0, FD1)
                assert sol.F == pytest.approx(F, abs=1e-10)
                assert sol.rho == pytest.approx(rho, abs=1e-10)


def test_continuous_label_swap_invariance():
    a = solve_continuous(0.5, 0.6, 0.4, 0.7)
    b = solve_continuous(0.6, 0.5, 0.7, 0.4)
    assert a.F == b.F and a.rho == b.rho


def test_continuous_weak_instrument():
    with pytest.raises(WeakInstrumentError):
        solve_continuous(0.5, 0.6, 0.4, 0.4)


# ------------------------------------------------------- continuous spearman

def w_of(v):
    return (1.0 - 2.0 * v) / np.sqrt(v * (1.0 - v))


def test_spearman_no_shift():
    sol = solve_continuous_spearman(0.5, 0.5, 0.3, 0.6)
    assert sol.rho == pytest.approx(0.0, abs=1e-12)
    assert sol.F == pytest.approx(0.5, abs=1e-12)


def test_spearman_round_trip():
    for F in (0.3, 0.5, 0.75):
        for rho in (-0.3, 0.0, 0.4):
            for FD0, FD1 in [(0.3, 0.6), (0.3, 0.7), (0.2, 0.45)]:
                s = np.sqrt(F * (1 - F))
                f0 = F + 0.5 * rho * w_of(FD0) * s
                f1 = F + 0.5 * rho * w_of(FD1) * s
                sol = solve_continuous_spearman(f0, f1, FD0, FD1)
                assert sol.F == pytest.approx(F, abs=1e-10)
                assert sol.rho == pytest.approx(rho, abs=1e-10)
                assert sol.residual <= 1e-10


def test_spearman_degenerate_weights():
    # w is strictly decreasing in F_{D|Z}, so weights only collide when the
    # treatment CDFs coincide across instrument values
    with pytest.raises(DegenerateWeightError):
        solve_continuous_spearman(0.5, 0.6, 0.45, 0.45)


# ----------------------------------------------------------------- multi-IV

def test_multi_iv_common_rho():
    F, rho = 0.45, 0.35
    pis = {(0, 0): 0.3, (0, 1): 0.55, (1, 0): 0.42, (1, 1): 0.7}
    p = {c: C(GAUSSIAN, F, v, rho) for c, v in pis.items()}
    out = solve_multi_iv(p, pis)
    assert out["F"] == pytest.approx(F, abs=1e-8)
    for cell, r in out["rho_by_cell"].items():
        assert r == pytest.approx(rho, abs=1e-8)
        assert out["residuals"][cell] <= 1e-10


def test_multi_iv_independence():
    pis = {(0, 0): 0.3, (0, 1): 0.55, (1, 0): 0.42, (1, 1): 0.7}
    p = {c: 0.6 * v for c, v in pis.items()}
    out = solve_multi_iv(p, pis)
    assert out["F"] == pytest.approx(0.6, abs=1e-8)
    for r in out["rho_by_cell"].values():
        assert r == pytest.approx(0.0, abs=1e-8)


def test_multi_iv_weak_status_quo():
    pis = {(0, 0): 0.4, (0, 1): 0.4, (1, 0): 0.42, (1, 1): 0.7}
    p = {c: 0.6 * v for c, v in pis.items()}
    with pytest.raises(WeakInstrumentError):
        solve_multi_iv(p, pis)


# --------------------------------------------------------------- alt system

def test_alt_between_forward_inverse():
    F1, F0, r0, r1 = 0.45, 0.55, 0.2, -0.1
    pis = (0.3, 0.7)
    pa = [C(GAUSSIAN, F1, pis[z], (r0, r1)[z]) for z in (0, 1)]
    pb = [C(GAUSSIAN, F0, 1 - pis[z], -(r0, r1)[z]) for z in (0, 1)]
    s1, s0 = solve_alt_system(BETWEEN_LEVELS, pa, pb, *pis)
    assert s1.F == pytest.approx(F1, abs=1e-8)
    assert s0.F == pytest.approx(F0, abs=1e-8)
    assert s1.rho == pytest.approx(r0, abs=1e-8)
    assert s0.rho == pytest.approx(r1, abs=1e-8)
    assert s1.residual <= 1e-8 and not s1.flags


def test_alt_independence():
    pis = (0.3, 0.7)
    Fa, Fb = 0.4, 0.65
    pa = [Fa * pi for pi in pis]
    pb = [Fb * pi for pi in pis]
    sa, sb = solve_alt_system(WITHIN_LEVELS, pa, pb, *pis)
    assert sa.F == pytest.approx(Fa, abs=1e-8)
    assert sb.F == pytest.approx(Fb, abs=1e-8)
    assert sa.rho == pytest.approx(0.0, abs=1e-6)
    assert sb.rho == pytest.approx(0.0, abs=1e-6)
    pb = [Fb * (1 - pi) for pi in pis]
    sa, sb = solve_alt_system(BETWEEN_LEVELS, pa, pb, *pis)
    assert sa.F == pytest.approx(Fa, abs=1e-8)
    assert sb.F == pytest.approx(Fb, abs=1e-8)


def test_alt_within_equal_marginals_flagged():
    # F(y) = F(y') makes two equation pairs coincide: singular at the solution
    pis = (0.3, 0.7)
    pa = [C(GAUSSIAN, 0.5, pis[z], (0.25, -0.15)[z]) for z in (0, 1)]
    s1, s2 = solve_alt_system(WITHIN_LEVELS, pa, list(pa), *pis)
    assert "singular_jacobian" in s1.flags


# ---------------------------------------------------------------- check_assumptions

def test_check_assumptions_dominance():
    rep = check_assumptions([0.2, 0.6, 1.0], [0.35, 0.8, 1.0])
    assert rep["dominance_direction"] == "z1_dominates"
    assert rep["dominance_violations"] == []
    assert rep["rel_min_gap"] > 0.1


def test_check_assumptions_crossing():
    rep = check_assumptions([0.2, 0.8, 1.0], [0.35, 0.6, 1.0])
    assert rep["dominance_direction"] == "violated"
    assert rep["dominance_violations"]


def test_check_assumptions_overid():
    rng = np.random.default_rng(1)
    cells = {(0, 0): 0.35, (0, 1): 0.35, (1, 1): 0.352}
    draws = rng.normal(0.35, 0.01, size=(300, 3))
    rep = check_assumptions([0.2, 1.0], [0.5, 1.0], rho_by_cell=cells,
                            rho_draws=draws)
    # spread across cells is well inside the bootstrap dispersion
    assert np.max(np.abs(rep["overid_discrepancy"])) < 3 * np.min(
        rep["overid_dispersion"])
