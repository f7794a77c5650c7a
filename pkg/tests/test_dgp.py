"""Tests for the synthetic laws and their exact population oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import ndtr, ndtri
from scipy.stats import multivariate_normal

from copulaiv import copulas, dgp


def make_binary_law(rho0=0.2, rho1=0.5, pi0=0.4, pi1=0.7, v_corr=1.0):
    outcome = dgp.OutcomeLaw(
        {0: dgp.GaussianMarginal(0.0, 1.0), 1: dgp.GaussianMarginal(0.6, 1.2)},
        {0: rho0, 1: rho1})
    return outcome, dgp.BinarySelection(pi0, pi1, v_corr)


# ------------------------------------------------------------- calibration

def test_three_atom_calibration_matches_closed_form():
    # the moment equations have an exact rational solution: with atoms
    # (-1, 0, 1.5), zero mean forces p1 = 1.5 p3 and unit variance forces
    # p1 + 2.25 p3 = 1, so (p1, p2, p3) = (2/5, 1/3, 4/15)
    a, b = dgp.three_atom_calibration()
    assert abs(b - ndtri(11.0 / 15.0)) < 1e-10
    assert abs(a - (ndtri(11.0 / 15.0) - ndtri(0.4))) < 1e-10

    m = dgp.three_atom_marginal()
    assert np.allclose(m.atoms, [-1.0, 0.0, 1.5])
    assert np.allclose(m.probs, [0.4, 1.0 / 3.0, 4.0 / 15.0], atol=1e-12)
    assert abs(m.probs @ m.atoms) < 1e-12
    assert abs(m.probs @ m.atoms**2 - 1.0) < 1e-12


def test_bump_rho_peak_value():
    # at the center the curve equals phi(0) - phi(5/3)
    expect = (1.0 - math.exp(-0.5 * (5.0 / 3.0) ** 2)) / math.sqrt(2.0 * math.pi)
    got = dgp.bump_rho()(1.0)
    assert abs(got - expect) < 1e-14
    assert abs(got - 0.2995) < 5e-5
    # zero crossings at center +- 1, negative floor in the tails
    curve = dgp.bump_rho(center=1.0)
    assert abs(curve(0.0)) < 1e-15 and abs(curve(2.0)) < 1e-15
    assert curve(8.0) < 0.0


def test_step_marginal_cdf_and_ppf():
    m = dgp.StepMarginal([-1.0, 0.0, 1.5], [0.4, 1.0 / 3.0, 4.0 / 15.0])
    assert m.cdf(-1.5) == 0.0
    assert m.cdf(-1.0) == pytest.approx(0.4, abs=1e-15)      # right continuous
    assert m.cdf(0.7) == pytest.approx(0.4 + 1.0 / 3.0, abs=1e-15)
    assert m.cdf(2.0) == 1.0
    assert m.ppf(0.39) == -1.0 and m.ppf(0.4) == -1.0 and m.ppf(0.41) == 0.0
    assert m.ppf(1.0) == 1.5
    with pytest.raises(ValueError):
        dgp.StepMarginal([0.0, 0.0], [0.5, 0.5])
    with pytest.raises(ValueError):
        dgp.StepMarginal([0.0, 1.0], [0.7, 0.7])


def test_gaussian_marginal_round_trip():
    m = dgp.GaussianMarginal(0.3, 2.0)
    u = np.linspace(0.01, 0.99, 23)
    assert np.max(np.abs(m.cdf(m.ppf(u)) - u)) < 1e-12
    g = m.support_grid()
    assert g.size == dgp.GRID_N and np.all(np.diff(g) > 0)
    with pytest.raises(ValueError):
        dgp.GaussianMarginal(0.0, 0.0)


# ------------------------------------------------------------------ tables

def test_observable_binary_independence_factorizes():
    outcome, selection = make_binary_law(rho0=0.0, rho1=0.0)
    grid = dgp.EvalGrid(y=np.linspace(-2.0, 2.5, 9))
    tab = dgp.observable_cdfs(outcome, selection, grid)
    for z in (0, 1):
        pi = tab["pi"][z]
        F1 = outcome.marginal(1).cdf(grid.y)
        F0 = outcome.marginal(0).cdf(grid.y)
        assert np.max(np.abs(tab["joint"][(1, z)] - F1 * pi)) < 1e-13
        assert np.max(np.abs(tab["joint"][(0, z)] - F0 * (1.0 - pi))) < 1e-13


def test_observable_binary_copula_value():
    # F = 0.4, rho = 0.3, pi(1) = 0.6: the treated cell is the copula value,
    # cross-checked against an independent bivariate-normal CDF
    outcome, selection = make_binary_law(rho1=0.3, pi1=0.6)
    y = outcome.marginal(1).ppf(0.4)
    tab = dgp.observable_cdfs(outcome, selection, dgp.EvalGrid(y=[y]))
    got = tab["joint"][(1, 1)][0]
    assert abs(got - copulas.C("gaussian", 0.4, 0.6, 0.3)) < 1e-13
    oracle = multivariate_normal(mean=[0.0, 0.0],
                                 cov=[[1.0, 0.3], [0.3, 1.0]]).cdf([ndtri(0.4), ndtri(0.6)])
    assert abs(got - oracle) < 5e-7


def test_observable_ordered_boundaries_match_binary():
    outcome = dgp.OutcomeLaw(
        {1: dgp.GaussianMarginal(-0.5, 1.0), 2: dgp.GaussianMarginal(0.0, 1.0),
         3: dgp.GaussianMarginal(0.5, 0.8)},
        {1: 0.3, 2: -0.2, 3: 0.45})
    selection = dgp.OrderedSelection([0.25, 0.6], [0.45, 0.8])
    y = np.linspace(-2.0, 2.0, 7)
    tab = dgp.observable_cdfs(outcome, selection, dgp.EvalGrid(y=y))
    for z in (0, 1):
        t = selection.thresholds(z)
        F1 = outcome.marginal(1).cdf(y)
        F3 = outcome.marginal(3).cdf(y)
        bottom = copulas.C("gaussian", F1, t[1], 0.3)
        top = copulas.C("gaussian", F3, 1.0 - t[2], -0.45)
        assert np.max(np.abs(tab["joint"][(1, z)] - bottom)) < 1e-12
        assert np.max(np.abs(tab["joint"][(3, z)] - top)) < 1e-12
        # cells telescope to a proper mixture
        total = sum(tab["joint"][(d, z)] for d in selection.levels)
        assert np.all(np.diff(total) > -1e-12) and total.max() <= 1.0 + 1e-12
        wide = dgp.observable_cdfs(outcome, selection, dgp.EvalGrid(y=[50.0]))
        assert abs(sum(wide["joint"][(d, z)][0] for d in selection.levels) - 1.0) < 1e-9


def test_observable_continuous_matches_direct_formula():
    outcome = dgp.linear_gaussian_outcome(0.2, 0.8, 1.0, rho=0.35)
    selection = dgp.ContinuousSelection(0.0, 1.0, 0.5, 1.2)
    grid = dgp.EvalGrid(y=np.linspace(-1.5, 2.5, 6), d=np.linspace(-0.8, 1.4, 5))
    tab = dgp.observable_cdfs(outcome, selection, grid)
    rt = math.sqrt(1.0 - 0.35**2)
    for z in (0, 1):
        fdz = ndtr((grid.d - selection.mu[z]) / selection.sd[z])
        assert np.max(np.abs(tab["f_dz"][z] - fdz)) < 1e-14
        for i, dv in enumerate(grid.d):
            Fy = ndtr(grid.y - 0.2 - 0.8 * dv)
            direct = ndtr((ndtri(Fy) - 0.35 * ndtri(fdz[i])) / rt)
            assert np.max(np.abs(tab["f_y_dz"][z][i] - direct)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(mu=st.floats(-1.0, 1.0), rho=st.floats(-0.9, 0.9),
       pi0=st.floats(0.1, 0.85), shift=st.floats(0.05, 0.14))
def test_observable_binary_tables_are_proper(mu, rho, pi0, shift):
    outcome = dgp.OutcomeLaw(
        {0: dgp.GaussianMarginal(0.0, 1.0), 1: dgp.GaussianMarginal(mu, 1.0)},
        {0: -rho, 1: rho})
    selection = dgp.BinarySelection(pi0, pi0 + shift)
    y = np.linspace(-2.5, 2.5, 11)
    tab = dgp.observable_cdfs(outcome, selection, dgp.EvalGrid(y=y))
    for (d, z), p in tab["joint"].items():
        width = selection.pi[z] if d == 1 else 1.0 - selection.pi[z]
        F = outcome.marginal(d).cdf(y)
        assert np.all(np.diff(p) >= -1e-12)                    # monotone in y
        assert np.all(p <= np.minimum(F, width) + 1e-12)       # Frechet box
        assert np.all(p >= np.maximum(F + width - 1.0, 0.0) - 1e-12)


# ---------------------------------------------------------------- sampling

def test_simulate_reproducible_and_prefix_stable():
    outcome, selection = make_binary_law()
    a = dgp.simulate(outcome, selection, 60, seed=11)
    b = dgp.simulate(outcome, selection, 60, seed=11)
    c = dgp.simulate(outcome, selection, 90, seed=11)
    d = dgp.simulate(outcome, selection, 60, seed=12)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.d, b.d) and np.array_equal(a.z, b.z)
    # observation i depends only on (seed, i), not on n
    assert np.array_equal(a.y, c.y[:60]) and np.array_equal(a.z, c.z[:60])
    assert not np.array_equal(a.y, d.y)


def test_simulate_independence_when_rho_zero():
    n = 40000
    outcome, selection = make_binary_law(rho0=0.0, rho1=0.0, v_corr=0.3)
    ds, lat = dgp.simulate(outcome, selection, n, seed=5, return_latent=True)
    bound = 3.0 / math.sqrt(n)
    for level in (0, 1):
        m = ds.d == level
        u1 = ndtri(outcome.marginal(level).cdf(ds.y[m]))
        e = ndtri(lat["v"][m])
        assert abs(np.corrcoef(u1, e)[0, 1]) < bound


def test_simulate_zero_defiers_under_rank_invariance():
    outcome, selection = make_binary_law(pi0=0.3, pi1=0.7, v_corr=1.0)
    ds, lat = dgp.simulate(outcome, selection, 20000, seed=3, return_latent=True)
    assert np.array_equal(lat["v0"], lat["v1"])
    assert int(np.sum(lat["d1"] < lat["d0"])) == 0
    assert int(np.sum(lat["d1"] > lat["d0"])) > 0

    # ordered: the instrument shifts every threshold down, so D moves up
    out3 = dgp.OutcomeLaw({1: dgp.GaussianMarginal(), 2: dgp.GaussianMarginal(),
                           3: dgp.GaussianMarginal()}, 0.2)
    sel3 = dgp.OrderedSelection([0.5, 0.8], [0.3, 0.6], v_copula=1.0)
    _, lat3 = dgp.simulate(out3, sel3, 20000, seed=4, return_latent=True)
    assert int(np.sum(lat3["d1"] < lat3["d0"])) == 0


def test_simulate_matches_tables_dkw():
    # empirical joint CDFs stay within 2/sqrt(n) of the exact tables
    n = 100000
    bound = 2.0 / math.sqrt(n)
    p_z = 0.5

    outcome = dgp.OutcomeLaw(
        {0: dgp.three_atom_marginal(), 1: dgp.GaussianMarginal(0.4, 1.1)},
        {0: 0.3, 1: dgp.bump_rho()})
    selection = dgp.BinarySelection(0.35, 0.65, v_copula=0.5)
    y = np.concatenate((np.array([-1.0, 0.0, 1.5]), np.linspace(-1.8, 2.2, 9)))
    grid = dgp.EvalGrid(y=np.unique(y))
    tab = dgp.observable_cdfs(outcome, selection, grid)
    ds = dgp.simulate(outcome, selection, n, seed=7, p_z=p_z)
    worst = 0.0
    for (d, z), pop in tab["joint"].items():
        share = pop * (p_z if z == 1 else 1.0 - p_z)
        m = (ds.d == d) & (ds.z == z)
        emp = np.mean((ds.y[m, None] <= grid.y[None, :]), axis=0) * np.mean(m)
        worst = max(worst, float(np.max(np.abs(emp - share))))
    assert worst < bound


def test_simulate_continuous_treatment_matches_tables():
    n = 60000
    outcome = dgp.linear_gaussian_outcome(0.0, 1.0, 0.8, rho=0.4)
    selection = dgp.ContinuousSelection(0.0, 1.0, 0.6, 1.0, v_copula=0.8)
    grid = dgp.EvalGrid(y=np.linspace(-2.0, 3.0, 7), d=np.linspace(-1.0, 1.5, 6))
    tab = dgp.observable_cdfs(outcome, selection, grid)
    ds = dgp.simulate(outcome, selection, n, seed=21)
    for z in (0, 1):
        m = ds.z == z
        emp = np.mean(ds.d[m, None] <= grid.d[None, :], axis=0)
        assert np.max(np.abs(emp - tab["f_dz"][z])) < 2.0 / math.sqrt(m.sum())
    # conditional outcome distribution given a d-window around each grid point
    z0 = ds.z == 0
    for i, dv in enumerate(grid.d[2:4], start=2):
        w = z0 & (np.abs(ds.d - dv) < 0.05)
        emp = np.mean(ds.y[w, None] <= grid.y[None, :], axis=0)
        assert np.max(np.abs(emp - tab["f_y_dz"][0][i])) < 0.05


def test_simulate_grid_inversion_curve_path():
    # varying rho forces the grid-inversion path for a continuous marginal
    outcome = dgp.OutcomeLaw(
        {0: dgp.GaussianMarginal(), 1: dgp.GaussianMarginal()},
        {0: dgp.bump_rho(), 1: dgp.bump_rho()})
    selection = dgp.BinarySelection(0.4, 0.6)
    n = 30000
    ds = dgp.simulate(outcome, selection, n, seed=9)
    grid = dgp.EvalGrid(y=np.linspace(-1.5, 2.0, 8))
    tab = dgp.observable_cdfs(outcome, selection, grid)
    for (d, z), pop in tab["joint"].items():
        m = (ds.d == d) & (ds.z == z)
        emp = np.mean((ds.y[m, None] <= grid.y[None, :]), axis=0) * np.mean(m) * 2.0
        assert np.max(np.abs(emp - pop)) < 2.5 / math.sqrt(m.sum())

    # continuous treatment with a shared curve exercises the standardized grid
    out_c = dgp.linear_gaussian_outcome(0.0, 0.5, 1.0, rho=dgp.bump_rho())
    sel_c = dgp.ContinuousSelection(0.0, 1.0, 0.4, 1.0)
    ds_c = dgp.simulate(out_c, sel_c, 500, seed=10)
    assert np.all(np.isfinite(ds_c.y))


def test_simulate_validation_errors():
    outcome, selection = make_binary_law()
    with pytest.raises(ValueError):
        dgp.simulate(outcome, selection, 0, seed=1)
    with pytest.raises(ValueError):
        dgp.simulate(outcome, selection, 10, seed=None)
    with pytest.raises(ValueError):
        dgp.simulate(outcome, selection, 10, seed=1, p_z=1.0)
    with pytest.raises(ValueError):
        dgp.BinarySelection(0.0, 0.5)
    with pytest.raises(ValueError):
        dgp.OrderedSelection([0.6, 0.4], [0.3, 0.5])
    with pytest.raises(ValueError):
        dgp.constant_rho(1.0)
    with pytest.raises(ValueError):
        dgp.OutcomeLaw({0: dgp.GaussianMarginal()}, 1.2)
    # ordered selection over an outcome law lacking a level
    out2 = dgp.OutcomeLaw({1: dgp.GaussianMarginal(), 2: dgp.GaussianMarginal()}, 0.1)
    with pytest.raises(ValueError):
        dgp.simulate(out2, dgp.OrderedSelection([0.3, 0.6], [0.2, 0.5]), 10, seed=1)


# --------------------------------------------------------------- invariance

def test_population_joint_is_copula_invariant():
    outcome = dgp.OutcomeLaw(
        {0: dgp.three_atom_marginal(), 1: dgp.GaussianMarginal(0.4, 1.1)},
        {0: 0.3, 1: dgp.bump_rho()})
    vs = np.linspace(0.08, 0.92, 10)
    for d, y in ((1, -0.4), (1, 0.9), (0, 0.0)):
        prof = dgp.ci_profile(outcome, d, y, vs)
        target = float(np.asarray(outcome.rho(d, y)))
        assert np.max(np.abs(prof - target)) < 1e-9


def test_instrument_independent_of_selection_rank():
    n = 50000
    outcome, selection = make_binary_law(v_corr=0.6)
    ds, lat = dgp.simulate(outcome, selection, n, seed=13, return_latent=True)
    # V_z is uniform within each instrument arm
    from scipy.stats import kstest
    for z in (0, 1):
        m = ds.z == z
        assert kstest(lat["v"][m], "uniform").pvalue > 0.01
    assert abs(np.corrcoef(ds.z, lat["v"])[0, 1]) < 3.0 / math.sqrt(n)


# --------------------------------------------------------- control function

def test_control_function_closed_form():
    assert dgp.control_function(0.0, 0.37) == 0.0
    got = dgp.control_function(0.5, 0.5)
    assert abs(got - (-0.5 * (1.0 / math.sqrt(2.0 * math.pi)) / 0.5)) < 1e-14
    assert abs(got - (-0.3989)) < 5e-5
    with pytest.raises(ValueError):
        dgp.control_function(0.5, 0.0)
    with pytest.raises(ValueError):
        dgp.control_function(dgp.bump_rho(), 0.5, method="closed")


def test_control_function_quadrature_matches_closed_form():
    for rho in (-0.6, 0.25, 0.5):
        for pi in (0.2, 0.5, 0.85):
            quad = dgp.control_function(rho, pi, method="quadrature")
            closed = dgp.control_function(rho, pi)
            assert abs(quad - closed) < 1e-10


def test_control_function_bump_curve_changes_slope():
    # the dip sits deep in the left tail (around pi = 3e-4), so the grid
    # must reach well below the usual propensity range to see both signs
    pis = np.concatenate((np.geomspace(1e-4, 0.04, 10), np.linspace(0.08, 0.95, 15)))
    vals = np.array([dgp.control_function(dgp.bump_rho(), p) for p in pis])
    signs = np.sign(np.diff(vals))
    assert np.any(signs > 0) and np.any(signs < 0)


# -------------------------------------------------------- compliance shares

def test_compliance_rank_invariance_has_no_defiers():
    sel = dgp.OrderedSelection([0.5, 0.8], [0.3, 0.6], v_copula=1.0)
    out = dgp.compliance_shares(sel, 200000, seed=2)
    assert out["defier"] == 0.0
    assert out["complier"] > 0.1
    assert out["flags"] == []


def test_compliance_symmetric_thresholds_balance():
    sel = dgp.BinarySelection(0.55, 0.55, v_copula=0.4)
    out = dgp.compliance_shares(sel, 400000, seed=6)
    se = math.hypot(out["complier_se"], out["defier_se"])
    assert abs(out["complier"] - out["defier"]) < 5.0 * se


def test_compliance_dominance_favors_compliers():
    sel = dgp.OrderedSelection([0.5, 0.8], [0.3, 0.6], v_copula=0.5)
    out = dgp.compliance_shares(sel, 200000, seed=8)
    se = math.hypot(out["complier_se"], out["defier_se"])
    assert out["complier"] - out["defier"] > 5.0 * se


def test_compliance_non_exchangeable_flag():
    sel = dgp.BinarySelection(0.4, 0.7, v_copula=dgp.KhoudrajiVCopula(0.6, a=0.3))
    out = dgp.compliance_shares(sel, 50000, seed=14)
    assert "non_exchangeable" in out["flags"]
    assert 0.0 <= out["defier"] <= out["complier"] <= 1.0
    with pytest.raises(ValueError):
        dgp.compliance_shares(dgp.ContinuousSelection(0.0, 1.0, 0.5, 1.0), 100, seed=1)


def test_khoudraji_margins_are_uniform():
    cop = dgp.KhoudrajiVCopula(0.6, a=0.3)
    v0, v1 = cop.sample(dgp.rng_for(99).random((200000, 3)))
    for v in (v0, v1):
        emp = np.mean(v[:, None] <= np.linspace(0.1, 0.9, 9)[None, :], axis=0)
        assert np.max(np.abs(emp - np.linspace(0.1, 0.9, 9))) < 0.005
    # asymmetry shows up in the joint at a reflected pair
    c01 = np.mean((v0 <= 0.3) & (v1 <= 0.7))
    c10 = np.mean((v0 <= 0.7) & (v1 <= 0.3))
    assert abs(c01 - c10) > 0.01


# ------------------------------------------------------------ serialization

def test_dataset_csv_round_trip(tmp_path):
    outcome, selection = make_binary_law()
    ds = dgp.simulate(outcome, selection, 200, seed=17)
    ds = dgp.Dataset(y=ds.y, d=ds.d, z=ds.z, x=np.column_stack((ds.y * 0.0 + 1.0, ds.y**2)))
    path = tmp_path / "sample.csv"
    ds.to_csv(path)
    import pandas as pd
    back = dgp.Dataset.from_frame(pd.read_csv(path))
    assert np.allclose(back.y, ds.y, atol=1e-12)
    assert np.allclose(back.d, ds.d, atol=1e-12)
    assert np.array_equal(back.z, ds.z)
    assert np.allclose(back.x, ds.x, atol=1e-12)
    assert list(pd.read_csv(path).columns) == ["y", "d", "z", "x1", "x2"]


def test_config_round_trip():
    out_cfg = {"marginals": {"0": {"kind": "three_atom"},
                             "1": {"kind": "gaussian", "mean": 0.4, "sd": 1.1}},
               "rho": {"0": 0.3, "1": {"kind": "bump"}}}
    sel_cfg = {"kind": "binary", "pi": [0.35, 0.65], "v_copula": 0.5}
    outcome = dgp.outcome_from_config(out_cfg)
    selection = dgp.selection_from_config(sel_cfg)
    direct_out = dgp.OutcomeLaw(
        {0: dgp.three_atom_marginal(), 1: dgp.GaussianMarginal(0.4, 1.1)},
        {0: 0.3, 1: dgp.bump_rho()})
    a = dgp.simulate(outcome, selection, 500, seed=23)
    b = dgp.simulate(direct_out, dgp.BinarySelection(0.35, 0.65, 0.5), 500, seed=23)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.d, b.d)
    with pytest.raises(ValueError):
        dgp.selection_from_config({"kind": "nearest"})
