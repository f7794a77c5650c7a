"""Synthetic treatment-selection laws with known copula structure.

Every law built here satisfies copula invariance by construction: the local
dependence between a potential outcome and the selection rank V depends only
on the outcome level, never on (v, z).  That makes these laws exact oracles.
observable_cdfs() returns the population tables that the solvers in ident
must invert, and simulate() draws finite samples from the same law.
"""

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import integrate
from scipy.optimize import root

from .copulas import C, C2, GAUSSIAN, solve_rho
from .gauss import Phi, Phi_inv, phi

GRID_N = 4096        # cached y-grid used to invert conditional outcome CDFs
GRID_TAIL = 1e-5     # quantile range covered by that grid
_CHUNK = 1024        # observations per block in the grid-inversion sweep


# ------------------------------------------------------------- random draws

def rng_for(seed, index=0):
    """Counter-based generator keyed by (seed, index).

    Observation i always consumes the stream keyed (seed, i), so simulated
    output is identical no matter how the loop is chunked or threaded.
    """
    return np.random.Generator(np.random.Philox(key=[int(seed), int(index)]))


def _uniform_block(seed, n, k):
    out = np.empty((n, k))
    for i in range(n):
        out[i] = rng_for(seed, i).random(k)
    return out


# ---------------------------------------------------------------- marginals

class GaussianMarginal:
    """Normal(mean, sd) outcome marginal."""

    discrete = False

    def __init__(self, mean=0.0, sd=1.0):
        if sd <= 0.0:
            raise ValueError("sd must be positive")
        self.mean = float(mean)
        self.sd = float(sd)
        self._grid = None

    def cdf(self, y):
        return Phi((np.asarray(y, dtype=float) - self.mean) / self.sd)

    def ppf(self, u):
        return self.mean + self.sd * Phi_inv(u)

    def support_grid(self):
        # equal-probability grid covering quantiles [GRID_TAIL, 1 - GRID_TAIL]
        if self._grid is None:
            self._grid = self.ppf(np.linspace(GRID_TAIL, 1.0 - GRID_TAIL, GRID_N))
        return self._grid


class StepMarginal:
    """Discrete outcome marginal supported on finitely many atoms."""

    discrete = True

    def __init__(self, atoms, probs):
        atoms = np.asarray(atoms, dtype=float)
        probs = np.asarray(probs, dtype=float)
        if atoms.ndim != 1 or atoms.size == 0 or probs.shape != atoms.shape:
            raise ValueError("atoms and probs must be matching 1-d arrays")
        if np.any(np.diff(atoms) <= 0.0):
            raise ValueError("atoms must be strictly increasing")
        if np.any(probs <= 0.0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("probs must be positive and sum to one")
        self.atoms = atoms
        self.probs = probs / probs.sum()
        self.cum = np.cumsum(self.probs)
        self.cum[-1] = 1.0

    def cdf(self, y):
        idx = np.searchsorted(self.atoms, np.asarray(y, dtype=float), side="right")
        return np.concatenate(([0.0], self.cum))[idx]

    def ppf(self, u):
        # generalized inverse: the smallest atom with cumulative mass >= u
        idx = np.searchsorted(self.cum, np.asarray(u, dtype=float), side="left")
        return self.atoms[np.minimum(idx, self.atoms.size - 1)]


_THREE_ATOM_AB = None


def three_atom_calibration():
    """(a, b) making the three-atom marginal have zero mean and unit variance.

    Atoms sit at (-1, 0, 1.5) and the cumulative probability at each atom is
    Phi(a * atom + b).  The two moment equations are solved numerically; the
    resulting atom probabilities are the exact rationals (2/5, 1/3, 4/15).
    """
    global _THREE_ATOM_AB
    if _THREE_ATOM_AB is None:
        atoms = np.array([-1.0, 0.0, 1.5])

        def moments(ab):
            cum = Phi(ab[0] * atoms[:2] + ab[1])
            p = np.diff(np.concatenate(([0.0], cum, [1.0])))
            return [p @ atoms, p @ atoms**2 - 1.0]

        sol = root(moments, x0=[1.0, 0.5])
        if np.max(np.abs(moments(sol.x))) > 1e-12:
            raise RuntimeError("three-atom moment equations did not converge")
        _THREE_ATOM_AB = (float(sol.x[0]), float(sol.x[1]))
    return _THREE_ATOM_AB


def three_atom_marginal():
    """Asymmetric three-atom marginal with zero mean and unit variance."""
    a, b = three_atom_calibration()
    atoms = np.array([-1.0, 0.0, 1.5])
    cum = Phi(a * atoms[:2] + b)
    return StepMarginal(atoms, np.diff(np.concatenate(([0.0], cum, [1.0]))))


# -------------------------------------------------------- dependence curves

def constant_rho(rho):
    """Local dependence that is flat in y."""
    r = float(rho)
    if not -1.0 < r < 1.0:
        raise ValueError("rho must lie in (-1, 1)")
    return lambda y: r + 0.0 * np.asarray(y, dtype=float)


def bump_rho(center=1.0):
    """Hump-shaped local dependence phi(5 * (y - center) / 3) - phi(5 / 3).

    Peaks at phi(0) - phi(5/3), about 0.2995, at y = center; crosses zero at
    center +- 1 and approaches -phi(5/3), about -0.0995, in the tails.
    """
    c = float(center)

    def curve(y):
        return phi(5.0 * (np.asarray(y, dtype=float) - c) / 3.0) - phi(5.0 / 3.0)

    return curve


# -------------------------------------------------------------- outcome law

class OutcomeLaw:
    """Marginals F_{Y_d} and local dependence rho_d(y) per treatment level.

    marginals is either a mapping level -> marginal or, for continuous
    treatments, a callable d -> marginal.  rho is a scalar, a curve rho(y),
    or a mapping level -> scalar or curve.
    """

    def __init__(self, marginals, rho):
        if callable(marginals):
            self.levels = None
            self._marginal_fn = marginals
        else:
            table = dict(marginals)
            if not table:
                raise ValueError("at least one treatment level is required")
            self.levels = tuple(sorted(table))
            self._marginal_fn = table.__getitem__
        self._rho = rho
        if self.levels is not None:
            for d in self.levels:
                self._probe(d)

    def marginal(self, d):
        return self._marginal_fn(d)

    def rho_entry(self, d):
        if isinstance(self._rho, dict):
            if d not in self._rho:
                raise ValueError(f"no local dependence entry for level {d!r}")
            return self._rho[d]
        return self._rho

    def rho(self, d, y):
        """Local dependence rho_d(y); values must stay inside (-1, 1)."""
        entry = self.rho_entry(d)
        if callable(entry):
            vals = entry(y)
        else:
            vals = float(entry) + 0.0 * np.asarray(y, dtype=float)
        if np.any(np.abs(vals) >= 1.0):
            raise ValueError("local dependence must stay inside (-1, 1)")
        return vals

    def cond_cdf(self, d, y, v):
        """F_{Y_d | V}(y | v) in single-index form."""
        return C2(GAUSSIAN, self.marginal(d).cdf(y), v, self.rho(d, y))

    def joint_cdf(self, d, y, t):
        """Pr[Y_d <= y, V <= t]."""
        return C(GAUSSIAN, self.marginal(d).cdf(y), t, self.rho(d, y))

    def _probe(self, d):
        m = self.marginal(d)
        ys = m.atoms if m.discrete else m.ppf(np.linspace(0.001, 0.999, 101))
        F = np.asarray(m.cdf(ys))
        if np.any(np.diff(F) < -1e-12) or np.any(F < 0.0) or np.any(F > 1.0):
            raise ValueError("marginal cdf must be a nondecreasing map into [0, 1]")
        self.rho(d, ys)


def linear_gaussian_outcome(alpha, beta, sd, rho):
    """Y_d ~ Normal(alpha + beta * d, sd) for every level d, shared rho."""
    a, b, s = float(alpha), float(beta), float(sd)
    return OutcomeLaw(lambda d: GaussianMarginal(a + b * float(d), s), rho)


# ------------------------------------------------------- (V0, V1) couplings

class GaussianVCopula:
    """(V0, V1) coupled by a Gaussian copula; corr = 1 means V1 = V0 exactly."""

    exchangeable = True

    def __init__(self, corr):
        c = float(corr)
        if not -1.0 <= c <= 1.0:
            raise ValueError("corr must lie in [-1, 1]")
        self.corr = c

    def sample(self, u):
        v0 = u[:, 0]
        if self.corr == 1.0:
            return v0, v0.copy()
        e1 = self.corr * Phi_inv(v0) + math.sqrt(1.0 - self.corr**2) * Phi_inv(u[:, 1])
        return v0, Phi(e1)


class KhoudrajiVCopula:
    """Non-exchangeable (V0, V1) with uniform margins.

    V0 = max(U^(1/(1-a)), W0^(1/a)) for an independent uniform U, where
    (W0, V1) carries a Gaussian copula.  Asymmetric whenever corr != 0.
    """

    exchangeable = False

    def __init__(self, corr, a=0.5):
        if not -1.0 < corr < 1.0:
            raise ValueError("corr must lie in (-1, 1)")
        if not 0.0 < a < 1.0:
            raise ValueError("a must lie in (0, 1)")
        self.corr = float(corr)
        self.a = float(a)

    def sample(self, u):
        w0 = u[:, 0]
        e1 = self.corr * Phi_inv(w0) + math.sqrt(1.0 - self.corr**2) * Phi_inv(u[:, 1])
        v0 = np.maximum(u[:, 2] ** (1.0 / (1.0 - self.a)), w0 ** (1.0 / self.a))
        return v0, Phi(e1)


def _as_v_copula(v):
    return v if hasattr(v, "sample") else GaussianVCopula(v)


# ------------------------------------------------------------ selection laws

class BinarySelection:
    """D = 1{V <= pi(z)}: the instrument shifts the propensity pi(z)."""

    kind = "binary"
    levels = (0, 1)

    def __init__(self, pi0, pi1, v_copula=1.0):
        for p in (pi0, pi1):
            if not 0.0 < p < 1.0:
                raise ValueError("propensities must lie in (0, 1)")
        self.pi = (float(pi0), float(pi1))
        self.v_copula = _as_v_copula(v_copula)

    def propensity(self, z):
        return np.where(np.asarray(z) == 1, self.pi[1], self.pi[0])

    def assign(self, z, v):
        return (np.asarray(v) <= self.propensity(z)).astype(int)

    def v_interval(self, d, z):
        """The V-slab selected into level d when Z = z."""
        p = self.pi[z]
        return (0.0, p) if d == 1 else (p, 1.0)


class OrderedSelection:
    """D = d iff pi_{d-1}(z) < V <= pi_d(z) for levels 1..K.

    cuts0 and cuts1 hold the interior thresholds (pi_1(z), ..., pi_{K-1}(z));
    pi_0 = 0 and pi_K = 1 are implicit.
    """

    kind = "ordered"

    def __init__(self, cuts0, cuts1, v_copula=1.0):
        c0 = np.atleast_1d(np.asarray(cuts0, dtype=float))
        c1 = np.atleast_1d(np.asarray(cuts1, dtype=float))
        if c0.shape != c1.shape or c0.ndim != 1 or c0.size == 0:
            raise ValueError("cuts0 and cuts1 must be matching 1-d arrays")
        for c in (c0, c1):
            if c[0] <= 0.0 or c[-1] >= 1.0 or np.any(np.diff(c) <= 0.0):
                raise ValueError("interior thresholds must increase strictly inside (0, 1)")
        self._cuts = (c0, c1)
        self.levels = tuple(range(1, c0.size + 2))
        self.v_copula = _as_v_copula(v_copula)

    def thresholds(self, z):
        """Full threshold vector (pi_0(z), ..., pi_K(z)) including 0 and 1."""
        return np.concatenate(([0.0], self._cuts[z], [1.0]))

    def assign(self, z, v):
        z = np.asarray(z)
        v = np.asarray(v)
        out = np.empty(v.shape, dtype=int)
        for zv in (0, 1):
            m = z == zv
            out[m] = 1 + np.searchsorted(self._cuts[zv], v[m], side="left")
        return out

    def v_interval(self, d, z):
        t = self.thresholds(z)
        return (float(t[d - 1]), float(t[d]))


class ContinuousSelection:
    """D | Z = z ~ Normal(mu_z, sd_z), drawn as the V-quantile."""

    kind = "continuous"
    levels = None

    def __init__(self, mu0, sd0, mu1, sd1, v_copula=1.0):
        if sd0 <= 0.0 or sd1 <= 0.0:
            raise ValueError("sd must be positive")
        self.mu = (float(mu0), float(mu1))
        self.sd = (float(sd0), float(sd1))
        self.v_copula = _as_v_copula(v_copula)

    def assign(self, z, v):
        z = np.asarray(z)
        mu = np.where(z == 1, self.mu[1], self.mu[0])
        sd = np.where(z == 1, self.sd[1], self.sd[0])
        return mu + sd * Phi_inv(v)

    def treatment_cdf(self, d, z):
        """F_{D | Z}(d | z)."""
        return Phi((np.asarray(d, dtype=float) - self.mu[z]) / self.sd[z])


# ------------------------------------------------------------- data carriers

@dataclass
class EvalGrid:
    """Sorted evaluation points: outcome thresholds y, treatment levels d,
    and quantile indices q."""

    y: np.ndarray = None
    d: np.ndarray = None
    q: np.ndarray = None

    def __post_init__(self):
        for name in ("y", "d", "q"):
            a = getattr(self, name)
            if a is None:
                continue
            a = np.atleast_1d(np.asarray(a, dtype=float))
            if np.any(np.diff(a) <= 0.0):
                raise ValueError(f"{name} grid must be strictly increasing")
            setattr(self, name, a)
        if self.q is not None and (self.q[0] <= 0.0 or self.q[-1] >= 1.0):
            raise ValueError("quantile grid must lie inside (0, 1)")


@dataclass
class Dataset:
    """Observation table: outcome y, treatment d, binary instrument z,
    optional covariates x (n rows by k columns)."""

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    x: np.ndarray = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.d = np.asarray(self.d, dtype=float)
        self.z = np.asarray(self.z)
        if self.y.ndim != 1 or self.y.shape != self.d.shape or self.y.shape != self.z.shape:
            raise ValueError("y, d, z must be 1-d arrays of equal length")
        if not np.isin(self.z, (0, 1)).all():
            raise ValueError("z must be binary")
        self.z = self.z.astype(int)
        if self.x is not None:
            self.x = np.asarray(self.x, dtype=float)
            if self.x.ndim != 2 or self.x.shape[0] != self.y.size:
                raise ValueError("x must be an (n, k) matrix")

    @property
    def n(self):
        return self.y.size

    def to_frame(self):
        cols = {"y": self.y, "d": self.d, "z": self.z}
        if self.x is not None:
            for j in range(self.x.shape[1]):
                cols[f"x{j + 1}"] = self.x[:, j]
        return pd.DataFrame(cols)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_frame(cls, frame):
        xcols = [c for c in frame.columns if c.startswith("x")]
        x = frame[xcols].to_numpy(dtype=float) if xcols else None
        return cls(y=frame["y"].to_numpy(dtype=float),
                   d=frame["d"].to_numpy(dtype=float),
                   z=frame["z"].to_numpy(), x=x)


# ----------------------------------------------------------------- sampling

def _check_laws(outcome, selection):
    if selection.kind == "continuous":
        if outcome.levels is not None:
            raise ValueError("continuous treatments need a callable marginal family")
        return
    if outcome.levels is not None:
        missing = set(selection.levels) - set(outcome.levels)
        if missing:
            raise ValueError(f"outcome law lacks levels {sorted(missing)}")


def simulate(outcome, selection, n, seed, p_z=0.5, return_latent=False):
    """Draw n observations from the law.

    Z ~ Bernoulli(p_z), (V0, V1) from the selection's V copula, D = h(Z, V_Z),
    and Y inverted from F_{Y_d | V}(y | v) = Phi(a_{d,y} + b_{d,y} Phi_inv(v))
    at (D, V_Z).  Observation i uses the stream keyed (seed, i), so output is
    reproducible and independent of chunking.
    """
    _check_laws(outcome, selection)
    n = int(n)
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0.0 < p_z < 1.0:
        raise ValueError("p_z must lie in (0, 1)")
    if seed is None:
        raise ValueError("a seed is required")
    u = _uniform_block(seed, n, 5)
    z = (u[:, 0] < p_z).astype(int)
    v0, v1 = selection.v_copula.sample(u[:, 1:4])
    v = np.where(z == 1, v1, v0)
    d = selection.assign(z, v)
    y = _invert_outcome(outcome, selection, d, v, u[:, 4])
    ds = Dataset(y=y, d=np.asarray(d, dtype=float), z=z)
    if not return_latent:
        return ds
    zeros = np.zeros(n, dtype=int)
    latent = {"v0": v0, "v1": v1, "v": v,
              "d0": selection.assign(zeros, v0),
              "d1": selection.assign(zeros + 1, v1)}
    return ds, latent


def _invert_outcome(outcome, selection, d, v, uy):
    e = Phi_inv(v)
    if selection.kind == "continuous":
        return _invert_continuous_treatment(outcome, d, e, uy)
    y = np.empty(v.shape)
    for level in selection.levels:
        m = d == level
        if not np.any(m):
            continue
        y[m] = _invert_level(outcome, level, e[m], uy[m])
    return y


def _invert_level(outcome, level, e, uy):
    marg = outcome.marginal(level)
    entry = outcome.rho_entry(level)
    if not callable(entry):
        # constant rho: the conditional quantile has the exact closed form
        r = float(entry)
        rt = math.sqrt(1.0 - r * r)
        return marg.ppf(Phi(r * e + rt * Phi_inv(uy)))
    if marg.discrete:
        cond = _si_cond(marg.cum, outcome.rho(level, marg.atoms), e)
        hit = cond >= uy[:, None]
        idx = hit.argmax(axis=1)
        idx[~hit.any(axis=1)] = marg.atoms.size - 1
        return marg.atoms[idx]
    yg = marg.support_grid()
    rho = outcome.rho(level, yg)
    out = np.empty(e.shape)
    for lo in range(0, e.size, _CHUNK):
        sl = slice(lo, min(lo + _CHUNK, e.size))
        cond = _si_cond(marg.cdf(yg), rho, e[sl])
        np.maximum.accumulate(cond, axis=1, out=cond)  # guard tiny wiggles
        out[sl] = _interp_rows(uy[sl], cond, yg)
    return out


def _si_cond(F, rho, e):
    # Phi(a_j + b_j * e_i) over grid points j and observations i
    rt = np.sqrt(1.0 - np.asarray(rho) ** 2)
    a = Phi_inv(F) / rt
    b = -np.asarray(rho) / rt
    return Phi(a[None, :] + b[None, :] * e[:, None])


def _interp_rows(t, rows, grid):
    # rows are nondecreasing along axis 1; clamp t outside each row's range
    m = rows.shape[1]
    idx = np.clip(np.sum(rows < t[:, None], axis=1), 1, m - 1)
    hi = np.take_along_axis(rows, idx[:, None], 1)[:, 0]
    lo = np.take_along_axis(rows, (idx - 1)[:, None], 1)[:, 0]
    gap = hi - lo
    w = np.clip(np.where(gap > 0.0, (t - lo) / np.where(gap > 0.0, gap, 1.0), 0.0), 0.0, 1.0)
    return grid[idx - 1] + w * (grid[idx] - grid[idx - 1])


def _invert_continuous_treatment(outcome, d, e, uy):
    margs = [outcome.marginal(float(di)) for di in d]
    if not all(isinstance(m, GaussianMarginal) for m in margs):
        raise ValueError("continuous treatments need Gaussian outcome marginals")
    mean = np.array([m.mean for m in margs])
    sd = np.array([m.sd for m in margs])
    if isinstance(outcome._rho, dict):
        raise ValueError("continuous treatments need a shared rho (scalar or curve)")
    entry = outcome._rho
    if not callable(entry):
        r = float(entry)
        rt = math.sqrt(1.0 - r * r)
        return mean + sd * (r * e + rt * Phi_inv(uy))
    g0 = Phi_inv(np.linspace(GRID_TAIL, 1.0 - GRID_TAIL, GRID_N))
    out = np.empty(e.shape)
    for lo in range(0, e.size, _CHUNK):
        sl = slice(lo, min(lo + _CHUNK, e.size))
        ymat = mean[sl, None] + sd[sl, None] * g0[None, :]
        rho = np.asarray(entry(ymat))
        if np.any(np.abs(rho) >= 1.0):
            raise ValueError("local dependence must stay inside (-1, 1)")
        rt = np.sqrt(1.0 - rho**2)
        cond = Phi(g0[None, :] / rt - rho / rt * e[sl, None])
        np.maximum.accumulate(cond, axis=1, out=cond)
        out[sl] = mean[sl] + sd[sl] * _interp_rows(uy[sl], cond, g0)
    return out


# ----------------------------------------------------------- exact oracles

def observable_cdfs(outcome, selection, grid):
    """Exact population tables implied by the law.

    Discrete treatments: joint[(d, z)][j] = Pr[Y <= y_j, D = d | Z = z].
    Continuous treatments: f_dz[z][i] = F_{D|Z}(d_i | z) and
    f_y_dz[z][i, j] = F_{Y|D,Z}(y_j | d_i, z).
    """
    _check_laws(outcome, selection)
    y = grid.y
    if selection.kind == "continuous":
        if grid.d is None:
            raise ValueError("continuous treatments need a d grid")
        dd = grid.d
        f_dz = {z: np.asarray(selection.treatment_cdf(dd, z)) for z in (0, 1)}
        f_y_dz = {}
        for z in (0, 1):
            rows = np.empty((dd.size, y.size))
            for i, dv in enumerate(dd):
                rows[i] = outcome.cond_cdf(float(dv), y, f_dz[z][i])
            f_y_dz[z] = rows
        return {"kind": "continuous", "y": y, "d": dd, "f_dz": f_dz, "f_y_dz": f_y_dz}

    joint = {}
    for d in selection.levels:
        F = np.asarray(outcome.marginal(d).cdf(y))
        r = outcome.rho(d, y)
        for z in (0, 1):
            lo, hi = selection.v_interval(d, z)
            joint[(d, z)] = _slab(F, r, lo, hi)
    out = {"kind": selection.kind, "y": y, "levels": selection.levels, "joint": joint}
    if selection.kind == "binary":
        out["pi"] = {0: selection.pi[0], 1: selection.pi[1]}
    else:
        out["thresholds"] = {z: selection.thresholds(z) for z in (0, 1)}
    return out


def _slab(F, rho, lo, hi):
    # Pr[Y_d <= y, lo < V <= hi] with exact endpoints at lo = 0 and hi = 1
    top = F.copy() if hi >= 1.0 else np.asarray(C(GAUSSIAN, F, hi, rho))
    if lo <= 0.0:
        return top
    return top - np.asarray(C(GAUSSIAN, F, lo, rho))


def ci_profile(outcome, d, y, vs):
    """Local dependence recovered from the population joint at each v in vs.

    Constant output (up to solver tolerance) is exactly the copula-invariance
    property the identification results rest on.
    """
    F = float(np.asarray(outcome.marginal(d).cdf(y)))
    out = []
    for v in np.asarray(vs, dtype=float):
        t = float(np.asarray(outcome.joint_cdf(d, float(y), v)))
        out.append(float(solve_rho(GAUSSIAN, t, F, float(v))))
    return np.array(out)


def control_function(rho, pi, method="auto"):
    """E[U1 | V <= pi] for a standard Gaussian outcome index U1.

    A scalar rho has the closed form -rho * phi(Phi_inv(pi)) / pi.  A curve
    rho(y) is handled by quadrature against the joint law of (U1, V).
    """
    p = float(pi)
    if not 0.0 < p < 1.0:
        raise ValueError("pi must lie in (0, 1)")
    if method not in ("auto", "closed", "quadrature"):
        raise ValueError("method must be auto, closed, or quadrature")
    if method == "closed" and callable(rho):
        raise ValueError("the closed form needs a scalar rho")
    use_quad = callable(rho) if method == "auto" else method == "quadrature"
    if not use_quad:
        r = float(rho)
        return -r * phi(Phi_inv(p)) / p

    curve = rho if callable(rho) else constant_rho(rho)

    def joint(u):
        return float(np.asarray(C(GAUSSIAN, Phi(u), p, float(np.asarray(curve(u))))))

    # E[U1 1{V <= p}] via the tail formula, split at the integrand kink
    upper, _ = integrate.quad(lambda u: p - joint(u), 0.0, 12.0,
                              epsabs=1e-13, epsrel=1e-11, limit=300)
    lower, _ = integrate.quad(joint, -12.0, 0.0,
                              epsabs=1e-13, epsrel=1e-11, limit=300)
    return (upper - lower) / p


def compliance_shares(selection, n, seed):
    """Monte Carlo shares of compliers (D1 > D0) and defiers (D1 < D0).

    Uses a single seeded stream: this is a plain Monte Carlo integral over
    (V0, V1), not an observation table.  Flags the estimate when the V copula
    is not exchangeable, since the dominance-implies-more-compliers reading
    needs exchangeability.
    """
    if selection.kind == "continuous":
        raise ValueError("compliance shares need a binary or ordered treatment")
    if seed is None:
        raise ValueError("a seed is required")
    n = int(n)
    if n < 1:
        raise ValueError("n must be at least 1")
    u = rng_for(seed).random((n, 3))
    v0, v1 = selection.v_copula.sample(u)
    zeros = np.zeros(n, dtype=int)
    d0 = selection.assign(zeros, v0)
    d1 = selection.assign(zeros + 1, v1)
    comp = float(np.mean(d1 > d0))
    defi = float(np.mean(d1 < d0))
    out = {"complier": comp, "defier": defi,
           "complier_se": math.sqrt(comp * (1.0 - comp) / n),
           "defier_se": math.sqrt(defi * (1.0 - defi) / n),
           "n": n, "flags": []}
    if not selection.v_copula.exchangeable:
        out["flags"].append("non_exchangeable")
    return out


# ------------------------------------------------------------ configuration

def _marginal_from_config(cfg):
    if isinstance(cfg, dict):
        kind = cfg.get("kind", "gaussian")
        if kind == "gaussian":
            return GaussianMarginal(cfg.get("mean", 0.0), cfg.get("sd", 1.0))
        if kind == "three_atom":
            return three_atom_marginal()
        if kind == "step":
            return StepMarginal(cfg["atoms"], cfg["probs"])
    raise ValueError(f"unknown marginal spec {cfg!r}")


def _rho_from_config(cfg):
    if isinstance(cfg, (int, float)):
        return float(cfg)
    if isinstance(cfg, dict) and cfg.get("kind") == "bump":
        return bump_rho(cfg.get("center", 1.0))
    if isinstance(cfg, dict):
        return {_level_key(k): _rho_from_config(v) for k, v in cfg.items()}
    raise ValueError(f"unknown rho spec {cfg!r}")


def _level_key(k):
    return int(k) if not isinstance(k, int) else k


def outcome_from_config(cfg):
    """Build an OutcomeLaw from a plain dict (the shared config format)."""
    if cfg.get("kind") == "linear_gaussian":
        return linear_gaussian_outcome(cfg.get("alpha", 0.0), cfg.get("beta", 1.0),
                                       cfg.get("sd", 1.0), _rho_from_config(cfg["rho"]))
    marginals = {_level_key(k): _marginal_from_config(v)
                 for k, v in cfg["marginals"].items()}
    return OutcomeLaw(marginals, _rho_from_config(cfg["rho"]))


def selection_from_config(cfg):
    """Build a selection law from a plain dict (the shared config format)."""
    vc = cfg.get("v_copula", 1.0)
    if isinstance(vc, dict):
        vc = KhoudrajiVCopula(vc["corr"], vc.get("a", 0.5))
    kind = cfg["kind"]
    if kind == "binary":
        return BinarySelection(cfg["pi"][0], cfg["pi"][1], vc)
    if kind == "ordered":
        return OrderedSelection(cfg["cuts"][0], cfg["cuts"][1], vc)
    if kind == "continuous":
        return ContinuousSelection(cfg["mu"][0], cfg["sd"][0],
                                   cfg["mu"][1], cfg["sd"][1], vc)
    raise ValueError(f"unknown selection kind {kind!r}")
