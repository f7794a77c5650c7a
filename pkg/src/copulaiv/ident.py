"""Population identification solvers.

Given observed joint probabilities Pr[Y <= y, D = d | Z = z] and treatment
propensities, these solvers invert the Gaussian local-representation system
for the marginal F_{Y_d}(y) and local dependence rho_{Y_d}(y), one y at a
time. Everything here is exact population arithmetic: estimation feeds in
fitted probabilities, tests feed in closed-form ones.

Binary treatment (d = 1):   C(F, pi(z); rho) = Pr[Y <= y, D = 1 | Z = z]
Binary treatment (d = 0):   F - C(F, pi(z); rho) = Pr[Y <= y, D = 0 | Z = z],
                            equivalent to C(F, 1 - pi(z); -rho) on the left.
Ordered level d:            C(F, pi_d(z); rho) - C(F, pi_{d-1}(z); rho)
Continuous treatment:       Phi^-1(F_{Y|D,Z}(y|d,z)) is linear in
                            Phi^-1(F_{D|Z}(d|z)), solved in closed form.
"""

import numpy as np
from dataclasses import dataclass, field

from .copulas import GAUSSIAN, C, C1, Crho, InfeasibleJointError, solve_rho
from .gauss import Phi, Phi_inv, phi

WEAK_TOL = 1e-6

WITHIN_LEVELS = "within_levels"
BETWEEN_LEVELS = "between_levels"


class WeakInstrumentError(ValueError):
    pass


class AssumptionError(ValueError):
    pass


class DegenerateWeightError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass
class BinarySystemInput:
    """Observed joint probabilities and propensities for one outcome point.

    p0, p1 are Pr[Y <= y, D = d | Z = z] for z = 0, 1 at the requested
    treatment level d; pi0, pi1 are Pr[D = 1 | Z = z].
    """
    p0: float
    p1: float
    pi0: float
    pi1: float


@dataclass
class IdentSolution:
    F: float
    rho: float
    residual: float = 0.0
    iterations: int = 0
    flags: list = field(default_factory=list)


# ------------------------------------------------------------- newton core

def _tanh_c(x):
    # tanh that stays strictly inside (-1, 1) when a Newton step overshoots
    return np.clip(np.tanh(x), -1.0 + 1e-9, 1.0 - 1e-9)


def _fwd_binary(x, pis):
    # x = (Phi^-1 F, atanh rho); returns C(F, pi_z; rho) for each z
    F, rho = Phi(x[0]), _tanh_c(x[1])
    return np.array([C(GAUSSIAN, F, p, rho) for p in pis])


def _jac_binary(x, pis):
    F, rho = Phi(x[0]), _tanh_c(x[1])
    dF, drho = phi(x[0]), 1.0 - rho ** 2
    return np.array([[C1(GAUSSIAN, F, p, rho) * dF,
                      Crho(GAUSSIAN, F, p, rho) * drho] for p in pis])


def _newton(x, fwd, jac, target, tol=1e-12, max_iter=100):
    """Damped Newton with backtracking; returns (x, resid, iters, ok)."""
    r = fwd(x) - target
    nrm = np.max(np.abs(r))
    for it in range(1, max_iter + 1):
        if nrm <= tol:
            return x, nrm, it - 1, True
        try:
            step = np.linalg.solve(jac(x), -r)
        except np.linalg.LinAlgError:
            return x, nrm, it - 1, False
        lam = 1.0
        for _ in range(40):
            x_new = x + lam * step
            r_new = fwd(x_new) - target
            n_new = np.max(np.abs(r_new))
            if np.isfinite(n_new) and n_new < nrm:
                break
            lam *= 0.5
        else:
            return x, nrm, it, False
        x, r, nrm = x_new, r_new, n_new
    return x, nrm, max_iter, nrm <= tol


def _grid_seed(fwd, target, n=40):
    # coarse scan in unconstrained coordinates, best residual wins
    g1 = np.linspace(-6.0, 6.0, n)
    g2 = np.linspace(-6.0, 6.0, n)
    best, bx = np.inf, None
    for a in g1:
        for b in g2:
            r = fwd(np.array([a, b])) - target
            nrm = np.max(np.abs(r))
            if nrm < best:
                best, bx = nrm, np.array([a, b])
    return bx


def _check_prob(name, value):
    if not 0.0 <= value <= 1.0:
        raise InfeasibleJointError(f"{name}={value} outside [0, 1]")


# ------------------------------------------------------------ binary solver

def solve_binary(inp, level=1):
    """Invert the binary-treatment system for (F_{Y_d}(y), rho_{Y_d}(y)).

    level=1 solves C(F, pi(z); rho) = p_z; level=0 uses the complementary
    form, equivalent to the level-1 system at propensities 1 - pi(z) with
    the sign of rho flipped.
    """
    for name in ("p0", "p1", "pi0", "pi1"):
        _check_prob(name, getattr(inp, name))
    if abs(inp.pi1 - inp.pi0) < WEAK_TOL:
        raise WeakInstrumentError(
            f"propensities pi(0)={inp.pi0} and pi(1)={inp.pi1} are too close "
            "to separate F from rho; with one-sided variation consider "
            "treated_counterfactual")
    pis = (inp.pi0, inp.pi1) if level == 1 else (1.0 - inp.pi0, 1.0 - inp.pi1)
    for z, (p, cap) in enumerate(zip((inp.p0, inp.p1), pis)):
        if p > cap + 1e-12:
            raise InfeasibleJointError(
                f"p{z}={p} exceeds the treatment share {cap} at z={z}")

    target = np.array([inp.p0, inp.p1])
    naive = np.clip(target.sum() / (pis[0] + pis[1]), 1e-10, 1 - 1e-10)
    fwd = lambda x: _fwd_binary(x, pis)
    jac = lambda x: _jac_binary(x, pis)
    x0 = np.array([Phi_inv(naive), 0.0])
    x, resid, iters, ok = _newton(x0, fwd, jac, target)
    if not ok or resid > 1e-10:
        x, resid2, it2, ok = _newton(_grid_seed(fwd, target), fwd, jac, target)
        iters += it2
        resid = resid2
    if not ok or resid > 1e-10:
        if np.max(np.abs(x)) > 5.5:
            raise InfeasibleJointError(
                f"no interior (F, rho) reproduces p=({inp.p0}, {inp.p1}) at "
                f"propensities {pis}; best residual {resid:.3g} sits on the "
                "parameter boundary")
        raise ConvergenceError(
            f"binary solver stalled at residual {resid:.3g}")
    F, rho = float(Phi(x[0])), float(_tanh_c(x[1]))
    if level == 0:
        rho = -rho
    return IdentSolution(F=F, rho=rho, residual=float(resid), iterations=iters)


def binary_jacobian(F, rho, pis):
    """Jacobian of the stacked forward map in (F, rho) coordinates."""
    return np.array([[C1(GAUSSIAN, F, p, rho), Crho(GAUSSIAN, F, p, rho)]
                     for p in pis])


# ----------------------------------------------------------- ordered solver

def _dominance_direction(pi_lo, pi_hi):
    # consistent sign of pi_d(0) - pi_d(1) across thresholds, 0/1 rows exempt
    dirs = []
    for a0, a1 in (pi_lo, pi_hi):
        interior = 1e-12 < (a0 + a1) / 2 < 1 - 1e-12
        if interior and abs(a0 - a1) >= WEAK_TOL:
            dirs.append(np.sign(a0 - a1))
    if not dirs:
        raise WeakInstrumentError(
            f"no threshold contrast between z=0 and z=1: lo={pi_lo}, hi={pi_hi}")
    if len(set(dirs)) > 1:
        raise AssumptionError(
            "treatment CDFs cross between instrument values: "
            f"lo contrast {pi_lo[0] - pi_lo[1]:+.4g}, "
            f"hi contrast {pi_hi[0] - pi_hi[1]:+.4g}")
    return dirs[0]


def solve_ordered(p0, p1, pi_lo, pi_hi, f_start=None):
    """Invert one ordered-treatment level for (F_{Y_d}(y), rho_{Y_d}(y)).

    p_z = Pr[Y <= y, D = d | Z = z]. pi_lo and pi_hi are the cumulative
    treatment CDFs (F_{D|Z}(d-1 | z), F_{D|Z}(d | z)) for z = 0, 1. Boundary
    levels (pi_lo = 0 or pi_hi = 1) reduce to the binary system; interior
    levels are solved by homotopy continuation from the rho = 0 solution.
    """
    pi_lo = (float(pi_lo[0]), float(pi_lo[1]))
    pi_hi = (float(pi_hi[0]), float(pi_hi[1]))
    for z in (0, 1):
        if not 0.0 <= pi_lo[z] <= pi_hi[z] <= 1.0:
            raise AssumptionError(
                f"cumulative thresholds out of order at z={z}: "
                f"{pi_lo[z]} > {pi_hi[z]}")
    _dominance_direction(pi_lo, pi_hi)

    if pi_lo[0] <= 1e-12 and pi_lo[1] <= 1e-12:
        # bottom level: Pr[Y<=y, D=d|z] = C(F, pi_hi(z); rho)
        return solve_binary(BinarySystemInput(p0, p1, pi_hi[0], pi_hi[1]))
    if pi_hi[0] >= 1 - 1e-12 and pi_hi[1] >= 1 - 1e-12:
        # top level: complementary binary system at 1 - pi_lo with -rho
        sol = solve_binary(
            BinarySystemInput(p0, p1, 1.0 - pi_lo[0], 1.0 - pi_lo[1]))
        return IdentSolution(F=sol.F, rho=-sol.rho, residual=sol.residual,
                             iterations=sol.iterations, flags=sol.flags)

    widths = (pi_hi[0] - pi_lo[0], pi_hi[1] - pi_lo[1])
    for z in (0, 1):
        _check_prob(f"p{z}", (p0, p1)[z])
        if (p0, p1)[z] > widths[z] + 1e-12:
            raise InfeasibleJointError(
                f"p{z}={(p0, p1)[z]} exceeds the cell width {widths[z]} at z={z}")

    def fwd(x):
        F, rho = Phi(x[0]), _tanh_c(x[1])
        return np.array([C(GAUSSIAN, F, pi_hi[z], rho)
                         - C(GAUSSIAN, F, pi_lo[z], rho) for z in (0, 1)])

    def jac(x):
        F, rho = Phi(x[0]), _tanh_c(x[1])
        dF, drho = phi(x[0]), 1.0 - rho ** 2
        return np.array(
            [[(C1(GAUSSIAN, F, pi_hi[z], rho) - C1(GAUSSIAN, F, pi_lo[z], rho)) * dF,
              (Crho(GAUSSIAN, F, pi_hi[z], rho) - Crho(GAUSSIAN, F, pi_lo[z], rho)) * drho]
             for z in (0, 1)])

    target = np.array([p0, p1])
    if f_start is None:
        f_start = (p0 + p1) / (widths[0] + widths[1])
    f_start = float(np.clip(f_start, 1e-10, 1 - 1e-10))
    x = np.array([Phi_inv(f_start), 0.0])
    base = fwd(x)    # exact at t=0 by construction of the path

    t, step = 0.0, 0.25
    total_iters = 0
    trace = [(0.0, f_start, 0.0)]
    while t < 1.0:
        t_new = min(1.0, t + step)
        goal = (1.0 - t_new) * base + t_new * target
        x_new, resid, iters, ok = _newton(x, fwd, jac, goal, max_iter=25)
        total_iters += iters
        if ok:
            t, x = t_new, x_new
            trace.append((t, float(Phi(x[0])), float(_tanh_c(x[1]))))
            step = min(step * 1.7, 1.0 - t) if t < 1.0 else step
        else:
            step *= 0.5
            if step < 1e-5:
                raise ConvergenceError(
                    "ordered homotopy stalled at t="
                    f"{t:.6f} (residual {resid:.3g}); path so far: {trace}")
    x, resid, iters, ok = _newton(x, fwd, jac, target)
    total_iters += iters
    if not ok or resid > 1e-8:
        raise ConvergenceError(f"ordered polish stalled at residual {resid:.3g}")
    return IdentSolution(F=float(Phi(x[0])), rho=float(_tanh_c(x[1])),
                         residual=float(resid), iterations=total_iters)


# -------------------------------------------------------- continuous solver

def solve_continuous(FyDZ0, FyDZ1, FD0, FD1):
    """Closed-form inversion for continuous treatment at one (y, d) point.

    FyDZz = F_{Y|D,Z}(y | d, z), FDz = F_{D|Z}(d | z). The probit transform
    of FyDZ is linear in the probit transform of FD with coefficients (a, b),
    from which F = Phi(a / sqrt(1 + b^2)) and rho = -b / sqrt(1 + b^2).
    """
    for name, v in (("FyDZ0", FyDZ0), ("FyDZ1", FyDZ1),
                    ("FD0", FD0), ("FD1", FD1)):
        _check_prob(name, v)
    q0, q1 = Phi_inv(FD0), Phi_inv(FD1)
    if abs(q1 - q0) < WEAK_TOL:
        raise WeakInstrumentError(
            f"treatment CDF contrast Phi^-1({FD1}) - Phi^-1({FD0}) = "
            f"{q1 - q0:.3g} is below {WEAK_TOL}")
    y0, y1 = Phi_inv(FyDZ0), Phi_inv(FyDZ1)
    a = (y0 * q1 - y1 * q0) / (q1 - q0)
    b = (y1 - y0) / (q1 - q0)
    s = np.sqrt(1.0 + b * b)
    F, rho = float(Phi(a / s)), float(-b / s)
    resid = max(abs(float(Phi(a + b * q0)) - FyDZ0),
                abs(float(Phi(a + b * q1)) - FyDZ1))
    return IdentSolution(F=F, rho=rho, residual=resid, iterations=0)


def solve_continuous_spearman(FyDZ0, FyDZ1, FD0, FD1):
    """Continuous-treatment inversion under the local Spearman representation.

    F_{Y|D,Z}(y|d,z) = F + (rho/2) w(d,z) sqrt(F(1-F)) with
    w(d,z) = (1 - 2 FDz) / sqrt(FDz (1 - FDz)); linear in (F, rho-scale).
    """
    for name, v in (("FyDZ0", FyDZ0), ("FyDZ1", FyDZ1),
                    ("FD0", FD0), ("FD1", FD1)):
        _check_prob(name, v)
    w0 = (1.0 - 2.0 * FD0) / np.sqrt(FD0 * (1.0 - FD0))
    w1 = (1.0 - 2.0 * FD1) / np.sqrt(FD1 * (1.0 - FD1))
    if abs(w0 - w1) < WEAK_TOL:
        raise DegenerateWeightError(
            f"weights w(d,0)={w0:.6g} and w(d,1)={w1:.6g} coincide; the "
            "linear system for (F, rho) is singular")
    F = (FyDZ1 * w0 - FyDZ0 * w1) / (w0 - w1)
    if not 0.0 < F < 1.0:
        raise InfeasibleJointError(
            f"recovered marginal F={F:.6g} outside (0, 1)")
    s = np.sqrt(F * (1.0 - F))
    r0 = 2.0 * (FyDZ0 - F) / (w0 * s) if abs(w0) > 1e-12 else np.nan
    r1 = 2.0 * (FyDZ1 - F) / (w1 * s) if abs(w1) > 1e-12 else np.nan
    both = [r for r in (r0, r1) if np.isfinite(r)]
    rho = float(np.mean(both))
    resid = abs(r0 - r1) if len(both) == 2 else 0.0
    return IdentSolution(F=float(F), rho=rho, residual=float(resid),
                         iterations=0)


# ---------------------------------------------------------------- multi-IV

def solve_multi_iv(p_by_cell, pi_by_cell):
    """Binary treatment with K binary instruments (2^K cells).

    p_by_cell maps each instrument cell (a 0/1 tuple) to
    Pr[Y <= y, D = 1 | Z = cell]; pi_by_cell maps cells to propensities.
    The status-quo pair (0,...,0,0)/(0,...,0,1) pins down (F, rho0) through
    the binary solver; every other cell's rho follows from one-dimensional
    inversion at the common F. Returns {"F", "rho_by_cell", "residuals"}.
    """
    cells = sorted(p_by_cell)
    if set(cells) != set(pi_by_cell):
        raise ValueError("p_by_cell and pi_by_cell index different cells")
    K = len(cells[0])
    sq0 = (0,) * K
    sq1 = (0,) * (K - 1) + (1,)
    if sq0 not in p_by_cell or sq1 not in p_by_cell:
        raise ValueError(f"status-quo cells {sq0} and {sq1} are required")
    if abs(pi_by_cell[sq1] - pi_by_cell[sq0]) < WEAK_TOL:
        raise WeakInstrumentError(
            f"status-quo propensities {pi_by_cell[sq0]} and {pi_by_cell[sq1]} "
            "do not move")
    base = solve_binary(BinarySystemInput(
        p_by_cell[sq0], p_by_cell[sq1], pi_by_cell[sq0], pi_by_cell[sq1]))
    rho_by_cell = {sq0: base.rho, sq1: base.rho}
    residuals = {}
    for cell in (sq0, sq1):
        residuals[cell] = abs(
            C(GAUSSIAN, base.F, pi_by_cell[cell], base.rho) - p_by_cell[cell])
    for cell in cells:
        if cell in (sq0, sq1):
            continue
        r = solve_rho(GAUSSIAN, p_by_cell[cell], base.F, pi_by_cell[cell])
        rho_by_cell[cell] = float(r)
        residuals[cell] = abs(
            C(GAUSSIAN, base.F, pi_by_cell[cell], float(r)) - p_by_cell[cell])
    return {"F": base.F, "rho_by_cell": rho_by_cell, "residuals": residuals}


# ------------------------------------------------------- alternative system

def solve_alt_system(mode, pa, pb, pi0, pi1, seed=0):
    """Four-equation systems that move copula invariance across y or d.

    WITHIN_LEVELS: pa = Pr[Y <= y, D=1 | Z=z] and pb = Pr[Y <= y', D=1 | Z=z]
    (each a (z=0, z=1) pair); rho is allowed to depend on z but not on the
    outcome point, giving unknowns (F(y), F(y'), rho_0, rho_1).

    BETWEEN_LEVELS: pa = Pr[Y <= y, D=1 | Z=z], pb = Pr[Y <= y, D=0 | Z=z];
    rho is shared across treatment arms at each z, giving unknowns
    (F_1(y), F_0(y), rho_0, rho_1).

    Returns two IdentSolutions: the first carries (F_a, rho_0), the second
    (F_b, rho_1); both share the residual and flags.
    """
    if mode not in (WITHIN_LEVELS, BETWEEN_LEVELS):
        raise ValueError(f"unknown mode {mode!r}")
    for z, p in enumerate(pa):
        _check_prob(f"pa{z}", p)
    for z, p in enumerate(pb):
        _check_prob(f"pb{z}", p)
    pis = (float(pi0), float(pi1))

    if mode == WITHIN_LEVELS:
        def fwd(x):
            Fa, Fb = Phi(x[0]), Phi(x[1])
            r = _tanh_c(x[2:4])
            return np.array([C(GAUSSIAN, Fa, pis[0], r[0]),
                             C(GAUSSIAN, Fa, pis[1], r[1]),
                             C(GAUSSIAN, Fb, pis[0], r[0]),
                             C(GAUSSIAN, Fb, pis[1], r[1])])
        naive_b = np.clip((pb[0] + pb[1]) / (pis[0] + pis[1]), 1e-6, 1 - 1e-6)
    else:
        def fwd(x):
            Fa, Fb = Phi(x[0]), Phi(x[1])
            r = _tanh_c(x[2:4])
            return np.array([C(GAUSSIAN, Fa, pis[0], r[0]),
                             C(GAUSSIAN, Fa, pis[1], r[1]),
                             C(GAUSSIAN, Fb, 1.0 - pis[0], -r[0]),
                             C(GAUSSIAN, Fb, 1.0 - pis[1], -r[1])])
        naive_b = np.clip((pb[0] + pb[1]) / (2.0 - pis[0] - pis[1]),
                          1e-6, 1 - 1e-6)

    def jac(x):
        h = 1e-7
        cols = []
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            cols.append((fwd(x + e) - fwd(x - e)) / (2 * h))
        return np.column_stack(cols)

    target = np.array([pa[0], pa[1], pb[0], pb[1]])
    naive_a = np.clip((pa[0] + pa[1]) / (pis[0] + pis[1]), 1e-6, 1 - 1e-6)
    x0 = np.array([Phi_inv(naive_a), Phi_inv(naive_b), 0.0, 0.0])
    x, resid, iters, ok = _newton(x0, fwd, jac, target, tol=1e-11)
    rng = np.random.default_rng(seed)
    restarts = 0
    while (not ok or resid > 1e-8) and restarts < 5:
        x0 = rng.normal(scale=1.5, size=4)
        x, resid, it2, ok = _newton(x0, fwd, jac, target, tol=1e-11)
        iters += it2
        restarts += 1
    if not ok or resid > 1e-8:
        raise ConvergenceError(
            f"alternative system stalled at residual {resid:.3g} "
            f"after {restarts} restarts")
    flags = []
    det = abs(np.linalg.det(jac(x)))
    if det < 1e-8:
        flags.append("singular_jacobian")
    Fa, Fb = float(Phi(x[0])), float(Phi(x[1]))
    r0, r1 = float(_tanh_c(x[2])), float(_tanh_c(x[3]))
    return (IdentSolution(F=Fa, rho=r0, residual=float(resid),
                          iterations=iters, flags=flags),
            IdentSolution(F=Fb, rho=r1, residual=float(resid),
                          iterations=iters, flags=flags))


# ------------------------------------------------------------- diagnostics

def check_assumptions(fdz0, fdz1, rho_by_cell=None, rho_draws=None):
    """Diagnostic report on instrument relevance and ordered dominance.

    fdz0, fdz1: cumulative treatment CDFs F_{D|Z}(d | z) over the level grid
    for z = 0 and z = 1 (the last entry may be 1). rho_by_cell optionally
    carries multi-IV cell solutions whose spread is an informal
    overidentification diagnostic; rho_draws (B x cells) adds a bootstrap
    dispersion to compare the spread against.
    """
    fdz0 = np.asarray(fdz0, dtype=float)
    fdz1 = np.asarray(fdz1, dtype=float)
    contrasts = fdz0 - fdz1
    interior = (fdz0 * (1 - fdz0) > 1e-12) & (fdz1 * (1 - fdz1) > 1e-12)
    report = {"rel_contrasts": contrasts,
              "rel_min_gap": np.inf, "dominance_direction": "degenerate",
              "dominance_violations": []}
    if interior.any():
        gaps = np.abs(Phi_inv(fdz1[interior]) - Phi_inv(fdz0[interior]))
        report["rel_min_gap"] = float(np.min(gaps))
        c = contrasts[interior]
        if np.all(c >= -WEAK_TOL) and np.any(c > WEAK_TOL):
            report["dominance_direction"] = "z0_dominates"
        elif np.all(c <= WEAK_TOL) and np.any(c < -WEAK_TOL):
            report["dominance_direction"] = "z1_dominates"
        else:
            report["dominance_direction"] = "violated"
            idx = np.where(interior)[0]
            sign_ref = np.sign(c[np.argmax(np.abs(c))])
            report["dominance_violations"] = [
                int(i) for i, v in zip(idx, c) if np.sign(v) == -sign_ref
                and abs(v) > WEAK_TOL]
    if rho_by_cell is not None:
        vals = np.array([rho_by_cell[k] for k in sorted(rho_by_cell)])
        report["overid_cells"] = sorted(rho_by_cell)
        report["overid_discrepancy"] = vals - vals.mean()
        if rho_draws is not None:
            draws = np.asarray(rho_draws, dtype=float)
            report["overid_dispersion"] = draws.std(axis=0, ddof=1)
    return report
