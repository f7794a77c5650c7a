"""Two-step sample estimators of potential-outcome distributions.

Discrete treatments: a first-stage probit for the treatment equation, then
per outcome threshold a bivariate-probit cell likelihood maximized in the
outcome coefficients and the local dependence coefficients (tanh link).
Continuous treatments: two distribution regressions and a closed-form
inversion of the fitted indices.  Baselines: a conditional-exogeneity
distribution regression and two-stage least squares.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr, ndtri

from .dr import (
    BasisSpec, DRFit, OUTCOME, SeparationError, TREATMENT, _as_x,
    _check_full_rank, _check_interior, _interior_mask, _newton_probit,
    _resolve_grid, check_weights, default_grid, probit_fit,
)
from .gauss import Phi, Phi2, Phi_inv, phi, phi2
from .ident import AssumptionError, WeakInstrumentError

BINARY = "binary"
ORDERED = "ordered"
CONTINUOUS = "continuous"
EXOGENOUS = "exogenous"

STEP2_GRAD_TOL = 1e-6      # score sup-norm for the cell likelihoods
STEP2_MAX_ITER = 60
# a cell run whose MLE sits at a frequency boundary drifts outward until
# the score dips under the tolerance, around |index| 6 for practical n;
# interior optima this extreme would need cell frequencies beyond 1e-8
STEP2_INDEX_CAP = 5.5
WEAK_CONTRAST = 1e-4       # minimum treatment-index contrast across arms
RHO_CAP = 1.0 - 1e-12
CELL_FLOOR = 1e-300


class CellCollapseError(ValueError):
    """Two adjacent fitted treatment thresholds tie at a sample row, so the
    cell between them has no probability mass to attribute."""


class _Step2Failure(RuntimeError):
    pass


# ----------------------------------------------------- cell log likelihoods

def _binary_cell_loglik(theta, design, w, tsign, ssign, weight):
    """Log likelihood and gradient for one binary-treatment cell.

    Each observation contributes log Phi2(t v, s w; t s rho) where
    v = B(x)'b, rho = tanh(B(x)'g), t = +-1 codes the outcome indicator
    and s = +-1 codes the treatment arm; w is the fixed first-stage index.
    """
    p = design.shape[1]
    v = design @ theta[:p]
    rho = np.clip(np.tanh(design @ theta[p:]), -RHO_CAP, RHO_CAP)
    x1 = tsign * v
    r = tsign * ssign * rho
    x2 = ssign * w
    prob = np.maximum(Phi2(x1, x2, r), CELL_FLOOR)
    d1 = phi(x1) * Phi((x2 - r * x1) / np.sqrt(1.0 - r * r))
    dr_ = phi2(x1, x2, r)
    ll = float(np.sum(weight * np.log(prob)))
    share = weight / prob
    grad_b = design.T @ (share * d1 * tsign)
    grad_g = design.T @ (share * dr_ * tsign * ssign * (1.0 - rho * rho))
    return ll, np.concatenate([grad_b, grad_g])


def _ordered_cell_loglik(theta, design, t_lo, t_hi, width, ind, weight):
    """Log likelihood and gradient for one ordered-treatment cell.

    The cell probability is g = Phi2(v, t_hi; rho) - Phi2(v, t_lo; rho)
    with complement width - g; infinite thresholds mark boundary cells.
    """
    p = design.shape[1]
    v = design @ theta[:p]
    rho = np.clip(np.tanh(design @ theta[p:]), -RHO_CAP, RHO_CAP)
    q = np.sqrt(1.0 - rho * rho)
    hi_inf = np.isinf(t_hi)
    lo_inf = np.isinf(t_lo)
    th = np.where(hi_inf, 0.0, t_hi)
    tl = np.where(lo_inf, 0.0, t_lo)
    cell = (np.where(hi_inf, Phi(v), Phi2(v, th, rho))
            - np.where(lo_inf, 0.0, Phi2(v, tl, rho)))
    dv = phi(v) * (np.where(hi_inf, 1.0, Phi((th - rho * v) / q))
                   - np.where(lo_inf, 0.0, Phi((tl - rho * v) / q)))
    dr_ = (np.where(hi_inf, 0.0, phi2(v, th, rho))
           - np.where(lo_inf, 0.0, phi2(v, tl, rho)))
    cell = np.clip(cell, CELL_FLOOR, None)
    rest = np.clip(width - cell, CELL_FLOOR, None)
    ll = float(np.sum(weight * (ind * np.log(cell)
                                + (1.0 - ind) * np.log(rest))))
    f = weight * (ind / cell - (1.0 - ind) / rest)
    grad_b = design.T @ (f * dv)
    grad_g = design.T @ (f * dr_ * (1.0 - rho * rho))
    return ll, np.concatenate([grad_b, grad_g])


# ------------------------------------------------------------ cell maximizer

def _fd_hessian(fun, theta, grad):
    k = theta.size
    hess = np.empty((k, k))
    for j in range(k):
        h = 1e-6 * (1.0 + abs(theta[j]))
        bumped = theta.copy()
        bumped[j] += h
        hess[:, j] = (fun(bumped)[1] - grad) / h
    return 0.5 * (hess + hess.T)


def _maximize(fun, start, gtol=STEP2_GRAD_TOL, max_iter=STEP2_MAX_ITER):
    """Newton ascent with an analytic gradient, a finite-difference Hessian
    of that gradient, damping, and step halving."""
    theta = np.asarray(start, dtype=float).copy()
    ll, grad = fun(theta)
    eye = np.eye(theta.size)
    for it in range(max_iter + 1):
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= gtol:
            return theta, {"iterations": it, "gradient_norm": gnorm,
                           "loglik": ll}
        if it == max_iter:
            break
        hess = _fd_hessian(fun, theta, grad)
        lam, step = 0.0, None
        for _ in range(10):
            try:
                cand = np.linalg.solve(hess - lam * eye, -grad)
            except np.linalg.LinAlgError:
                cand = None
            if cand is not None and grad @ cand > 0.0:
                step = cand
                break
            lam = 10.0 * lam if lam > 0.0 else \
                1e-3 * (1.0 + float(np.abs(np.diag(hess)).max()))
        if step is None:
            step = grad / (1.0 + gnorm)
        noise = 1e-10 * (1.0 + abs(ll))
        scale = 1.0
        for _ in range(31):
            ll_new, grad_new = fun(theta + scale * step)
            if ll_new >= ll - noise:
                break
            scale *= 0.5
        else:
            raise _Step2Failure(
                f"line search stalled at gradient sup-norm {gnorm:.3g}")
        theta = theta + scale * step
        ll, grad = ll_new, grad_new
    raise _Step2Failure(
        f"no convergence in {max_iter} iterations "
        f"(gradient sup-norm {gnorm:.3g})")


def _collapse_rows(matrix, row_weight=None):
    # duplicate rows carry weights so intercept-only cells cost O(1);
    # external row weights aggregate within each duplicate group
    uniq, inverse, counts = np.unique(matrix, axis=0, return_inverse=True,
                                      return_counts=True)
    if uniq.shape[0] > matrix.shape[0] // 2:
        if row_weight is None:
            return matrix, np.ones(matrix.shape[0])
        return matrix, row_weight
    if row_weight is None:
        return uniq, counts.astype(float)
    return uniq, np.bincount(inverse, weights=row_weight,
                             minlength=uniq.shape[0])


def _start_beta(ind, design):
    # marginal probit of the indicator inside the cell; fall back to a
    # matched intercept when that probit has no interior maximum
    try:
        beta, _ = _newton_probit(ind, design, np.zeros(design.shape[1]))
        return beta
    except (SeparationError, RuntimeError):
        beta = np.zeros(design.shape[1])
        share = float(np.clip(np.mean(ind), 1.0 / (ind.size + 1.0),
                              1.0 - 1.0 / (ind.size + 1.0)))
        for j in range(design.shape[1]):
            col = design[:, j]
            if np.ptp(col) == 0.0 and col[0] == 1.0:
                beta[j] = ndtri(share)
                break
        return beta


def _fill_flagged(grid, curve, ok):
    if ok.all() or not ok.any():
        return curve
    good = np.flatnonzero(ok)
    for j in range(curve.shape[1]):
        curve[~ok, j] = np.interp(grid[~ok], grid[good], curve[good, j])
    return curve


def _start_candidates(ind, design, p, warm, prev):
    # warm coefficients first, the pinned marginal start only on demand
    if warm is not None and np.isfinite(warm).all():
        yield warm
    yield np.concatenate([_start_beta(ind, design), np.zeros(p)])
    if prev is not None:
        yield prev


def _fit_cell_curves(grid, design, yvals, cell_fun_factory,
                     warm_curves=None):
    """Run the per-threshold maximizations for one treatment cell.

    cell_fun_factory(ind_unique, design_unique, weights) must return the
    (loglik, gradient) closure for the collapsed rows.  `warm_curves`,
    when given, is a (beta, gamma) coefficient-curve pair from an earlier
    fit on the same grid, tried first as the start at each threshold.
    Returns filled coefficient curves, flag indices, and per-point
    diagnostics.
    """
    m = grid.size
    p = design.shape[1]
    beta = np.full((m, p), np.nan)
    gamma = np.full((m, p), np.nan)
    flags, infos = [], []
    prev = None
    for j in range(m):
        ind = (yvals <= grid[j]).astype(float)
        fun, key = cell_fun_factory(ind)
        warm = None if warm_curves is None else \
            np.concatenate([warm_curves[0][j], warm_curves[1][j]])
        theta = info = None
        for start in _start_candidates(ind, design, p, warm, prev):
            try:
                cand, cand_info = _maximize(fun, start)
            except _Step2Failure:
                continue
            index_b = design @ cand[:p]
            index_g = design @ cand[p:]
            if max(np.max(np.abs(index_b)), np.max(np.abs(index_g))) \
                    > STEP2_INDEX_CAP:
                continue    # diverged to a boundary; treat as a failure
            theta, info = cand, cand_info
            break
        if theta is None:
            flags.append(j)
            infos.append({"threshold": float(grid[j]), "converged": False})
            continue
        beta[j] = theta[:p]
        gamma[j] = theta[p:]
        prev = theta
        infos.append({"threshold": float(grid[j]), "converged": True,
                      "iterations": info["iterations"],
                      "gradient_norm": info["gradient_norm"]})
    ok = np.ones(m, dtype=bool)
    ok[flags] = False
    return (_fill_flagged(grid, beta, ok), _fill_flagged(grid, gamma, ok),
            flags, infos)


# ------------------------------------------------------------ fitted object

@dataclass
class PotentialOutcomeFit:
    """Fitted conditional potential-outcome distributions.

    Discrete kinds carry per-level coefficient curves (beta for the CDF
    index, gamma for the tanh-linked dependence); the continuous kind
    carries the two underlying distribution regressions and derives
    (a, b) on demand.  `x` stores the sample covariate rows used for
    marginalization downstream.
    """

    kind: str
    y_grid: np.ndarray
    d_levels: np.ndarray
    basis: BasisSpec
    n: int
    x: np.ndarray = None
    beta: list = None
    gamma: list = None
    pi_coef: np.ndarray = None
    fit_y: DRFit = None
    fit_d: DRFit = None
    diagnostics: dict = field(default_factory=dict)

    def level_index(self, d):
        hit = np.flatnonzero(np.abs(self.d_levels - float(d)) <= 1e-9)
        if hit.size != 1:
            raise ValueError(f"treatment level {d} is not on the fitted "
                             f"grid {self.d_levels}")
        return int(hit[0])

    def _x_rows(self, x):
        if x is None:
            return self.x if self.x is not None else np.zeros((1, 0))
        return _as_x(x)

    def _ab(self, d, x):
        j = self.level_index(d)
        rows = self._x_rows(x)
        fy0 = self.fit_y.spec.design_dzx(float(d), 0, rows) @ self.fit_y.coef.T
        fy1 = self.fit_y.spec.design_dzx(float(d), 1, rows) @ self.fit_y.coef.T
        t0 = self.fit_d.spec.design_zx(0, rows) @ self.fit_d.coef[j]
        t1 = self.fit_d.spec.design_zx(1, rows) @ self.fit_d.coef[j]
        delta = t1 - t0
        weak = np.abs(delta) < WEAK_CONTRAST
        safe = np.where(weak, 1.0, delta)
        b = (fy1 - fy0) / safe[:, None]
        a = (fy0 * t1[:, None] - fy1 * t0[:, None]) / safe[:, None]
        return a, b, ~weak

    def conditional_cdf(self, d, x=None, rearranged=True):
        """F-hat_{Y_d | X}(y | x) over the y grid, one row per covariate
        row, monotone in y after rearrangement."""
        if self.kind in (BINARY, ORDERED):
            design = self.basis.design_x(self._x_rows(x))
            cdf = ndtr(design @ self.beta[self.level_index(d)].T)
        elif self.kind == CONTINUOUS:
            a, b, _ = self._ab(d, x)
            cdf = ndtr(a / np.sqrt(1.0 + b * b))
        else:
            design = self.fit_y.spec.design_dzx(float(d), 0, self._x_rows(x))
            cdf = ndtr(design @ self.fit_y.coef.T)
        if rearranged:
            cdf = np.sort(cdf, axis=-1)
        return cdf

    def conditional_rho(self, d, x=None):
        """rho-hat_{Y_d; X}(y; x) over the y grid, strictly inside (-1, 1)."""
        if self.kind in (BINARY, ORDERED):
            design = self.basis.design_x(self._x_rows(x))
            return np.clip(np.tanh(design @ self.gamma[self.level_index(d)].T),
                           -RHO_CAP, RHO_CAP)
        if self.kind == CONTINUOUS:
            _, b, _ = self._ab(d, x)
            return np.clip(-b / np.sqrt(1.0 + b * b), -RHO_CAP, RHO_CAP)
        rows = self._x_rows(x)
        return np.zeros((rows.shape[0], self.y_grid.size))

    def valid_mask(self, d, x=None):
        """Rows where the level-d evaluation is usable (continuous fits
        exclude rows with a weak treatment-index contrast)."""
        if self.kind == CONTINUOUS:
            return self._ab(d, x)[2]
        return np.ones(self._x_rows(x).shape[0], dtype=bool)

    def flagged_points(self, d):
        """Outcome-grid indices excluded (and interpolated) at level d."""
        return tuple(self.diagnostics.get("flagged", {}).get(_lkey(d), ()))

    def to_json(self):
        payload = {
            "kind": self.kind,
            "y_grid": self.y_grid.tolist(),
            "d_levels": self.d_levels.tolist(),
            "basis": self.basis.to_config(),
            "n": self.n,
            "x": None if self.x is None else self.x.tolist(),
            "beta": None if self.beta is None else
                    [c.tolist() for c in self.beta],
            "gamma": None if self.gamma is None else
                     [c.tolist() for c in self.gamma],
            "pi_coef": None if self.pi_coef is None else self.pi_coef.tolist(),
            "fit_y": None if self.fit_y is None else self.fit_y.to_json(),
            "fit_d": None if self.fit_d is None else self.fit_d.to_json(),
            "diagnostics": self.diagnostics,
        }
        return payload

    @classmethod
    def from_json(cls, payload):
        def arr(v):
            return None if v is None else np.asarray(v, dtype=float)

        return cls(
            kind=payload["kind"],
            y_grid=np.asarray(payload["y_grid"], dtype=float),
            d_levels=np.asarray(payload["d_levels"], dtype=float),
            basis=BasisSpec.from_config(payload["basis"]),
            n=int(payload["n"]),
            x=arr(payload["x"]),
            beta=None if payload["beta"] is None else
                 [np.asarray(c, dtype=float) for c in payload["beta"]],
            gamma=None if payload["gamma"] is None else
                  [np.asarray(c, dtype=float) for c in payload["gamma"]],
            pi_coef=arr(payload["pi_coef"]),
            fit_y=None if payload["fit_y"] is None else
                  DRFit.from_json(payload["fit_y"]),
            fit_d=None if payload["fit_d"] is None else
                  DRFit.from_json(payload["fit_d"]),
            diagnostics=payload["diagnostics"],
        )


def _lkey(level):
    return f"{float(level):g}"


def _y_threshold_grid(dataset, grid):
    if grid is None:
        full = default_grid(dataset.y)
        keep = _interior_mask(full, dataset.y, dataset.n)[2]
        full = full[keep]
        if full.size == 0:
            raise ValueError("no default grid point leaves enough "
                             "observations on both sides")
        return full
    grid = _resolve_grid(grid, dataset.y, OUTCOME)
    _check_interior(grid, dataset.y, dataset.n)
    return grid


def _covariate_count(dataset):
    return 0 if dataset.x is None else dataset.x.shape[1]


def _check_warm(warm, kind, grid, p):
    if warm is None:
        return
    if warm.kind != kind:
        raise ValueError(f"warm start comes from a {warm.kind} fit, "
                         f"not {kind}")
    if warm.y_grid.size != grid.size or \
            not np.allclose(warm.y_grid, grid):
        raise ValueError("warm start was fitted on a different outcome "
                         "grid")
    if np.asarray(warm.beta[0]).shape != (grid.size, p):
        raise ValueError("warm start has a different basis width")


# -------------------------------------------------------- binary treatments

def fit_binary(dataset, basis=None, grid=None, weights=None, warm=None):
    """Two-step fit for a binary treatment with a binary instrument.

    First stage: probit of D on B(Z, X).  Second stage, per treatment arm
    and outcome threshold: maximize the bivariate-probit cell likelihood
    in the outcome index coefficients and the tanh-linked dependence
    coefficients, holding the first-stage index fixed.  Non-converged
    thresholds are flagged, excluded, and bridged by linear interpolation.
    Optional row weights rescale every likelihood term; `warm` (an earlier
    fit on the same grid and basis) seeds all maximizations.
    """
    if basis is None:
        basis = BasisSpec()
    levels = np.unique(dataset.d)
    if not np.array_equal(levels, [0.0, 1.0]):
        raise ValueError("fit_binary needs D in {0, 1}")
    if basis.z_terms == "none":
        raise WeakInstrumentError(
            "the basis gives the instrument no role in the treatment "
            "equation")
    if weights is not None:
        weights = check_weights(weights, dataset.n)
    k = _covariate_count(dataset)
    zx = basis.design_zx(dataset.z, dataset.x)
    zx_names = basis.column_names("zx", k)
    pi_coef = probit_fit(dataset.d, zx, names=zx_names, weights=weights,
                         start=None if warm is None else warm.pi_coef)
    w_all = zx @ pi_coef
    prop = Phi(w_all)
    if np.any((prop < 1e-6) | (prop > 1.0 - 1e-6)):
        raise SeparationError(
            "the first-stage fit pins some propensities at 0 or 1; the "
            "instrument and covariates separate the treatment")
    arm0 = basis.design_zx(0, _as_x(dataset.x, dataset.n)) @ pi_coef
    arm1 = basis.design_zx(1, _as_x(dataset.x, dataset.n)) @ pi_coef
    contrast = float(np.mean(np.abs(Phi(arm1) - Phi(arm0))))
    if contrast < 1e-6:
        raise WeakInstrumentError(
            f"fitted propensities barely move with the instrument "
            f"(mean contrast {contrast:.2g})")

    grid = _y_threshold_grid(dataset, grid)
    design_all = basis.design_x(dataset.x, dataset.n)
    _check_full_rank(design_all, basis.column_names("x", k))
    _check_warm(warm, BINARY, grid, design_all.shape[1])

    beta, gamma, flagged, step2 = [], [], {}, {}
    for c, (level, ssign) in enumerate(((0.0, -1.0), (1.0, 1.0))):
        cell = dataset.d == level
        design = design_all[cell]
        w = w_all[cell]
        yvals = dataset.y[cell]
        wrow = None if weights is None else weights[cell]
        p = design.shape[1]

        def factory(ind, design=design, w=w, ssign=ssign, p=p, wrow=wrow):
            rows, weight = _collapse_rows(np.column_stack([design, w, ind]),
                                          wrow)
            du, wu, iu = rows[:, :p], rows[:, p], rows[:, p + 1]
            tsign = 2.0 * iu - 1.0

            def fun(theta):
                return _binary_cell_loglik(theta, du, wu, tsign, ssign,
                                           weight)
            return fun, None

        curves = None if warm is None else (warm.beta[c], warm.gamma[c])
        b, g, fl, infos = _fit_cell_curves(grid, design, yvals, factory,
                                           warm_curves=curves)
        beta.append(b)
        gamma.append(g)
        if fl:
            flagged[_lkey(level)] = [int(j) for j in fl]
        step2[_lkey(level)] = _summarize(infos)

    diagnostics = {"flagged": flagged, "step2": step2,
                   "propensity_contrast": contrast,
                   "flag_count": sum(len(v) for v in flagged.values())}
    return PotentialOutcomeFit(
        kind=BINARY, y_grid=grid, d_levels=levels, basis=basis,
        n=dataset.n, x=dataset.x, beta=beta, gamma=gamma, pi_coef=pi_coef,
        diagnostics=diagnostics)


def _summarize(infos):
    iters = [i["iterations"] for i in infos if i.get("converged")]
    return {"points": len(infos),
            "converged": len(iters),
            "max_iterations": max(iters) if iters else None}


# ------------------------------------------------------- ordered treatments

def _cell_width(pr_lo, pr_hi, level):
    """Probability mass the fitted thresholds leave for one level's cell,
    checked at that cell's own observations."""
    width = np.asarray(pr_hi) - np.asarray(pr_lo)
    ties = width <= 1e-12
    if np.any(ties):
        raise CellCollapseError(
            f"cell for treatment level {level:g} collapses: the "
            f"bracketing fitted thresholds tie at {int(ties.sum())} of "
            "its observations")
    return width


def fit_ordered(dataset, basis=None, grid=None, weights=None, warm=None):
    """Two-step fit for an ordered treatment with a binary instrument.

    First stage: one probit of 1{D <= d} per interior level (a treatment-
    side distribution regression), with fitted threshold curves rearranged
    in d at every sample row.  Second stage, per level and outcome
    threshold: maximize the cell likelihood built from bivariate-probit
    differences between the two fitted thresholds that bracket the level.
    Optional row weights rescale every likelihood term; `warm` (an earlier
    fit on the same grid and basis) seeds all maximizations.
    """
    if basis is None:
        basis = BasisSpec()
    levels = np.unique(dataset.d)
    if levels.size < 2:
        raise ValueError("fit_ordered needs at least two treatment levels")
    if basis.z_terms == "none":
        raise WeakInstrumentError(
            "the basis gives the instrument no role in the treatment "
            "equation")
    if weights is not None:
        weights = check_weights(weights, dataset.n)
    from .dr import dr_fit     # deferred to keep module import cheap

    first = dr_fit(dataset, TREATMENT, basis, grid=levels[:-1],
                   weights=weights,
                   start_from=None if warm is None else warm.fit_d)
    x_rows = _as_x(dataset.x, dataset.n)
    cum = first.cdf_matrix(basis.design_zx(dataset.z, x_rows))
    cum0 = first.cdf_matrix(basis.design_zx(0, x_rows))
    cum1 = first.cdf_matrix(basis.design_zx(1, x_rows))
    shift = np.mean(cum0 - cum1, axis=0)
    if np.abs(shift).min() < 1e-6:
        raise WeakInstrumentError(
            "the instrument leaves some fitted treatment threshold "
            f"unchanged (smallest mean shift {np.abs(shift).min():.2g})")
    if not (np.all(shift > 0.0) or np.all(shift < 0.0)):
        raise AssumptionError(
            "the instrument shifts the fitted treatment distribution in "
            "different directions at different levels")

    grid = _y_threshold_grid(dataset, grid)
    design_all = basis.design_x(dataset.x, dataset.n)
    k = _covariate_count(dataset)
    _check_full_rank(design_all, basis.column_names("x", k))
    _check_warm(warm, ORDERED, grid, design_all.shape[1])

    lo_all = np.column_stack([np.zeros(dataset.n), cum])
    hi_all = np.column_stack([cum, np.ones(dataset.n)])
    beta, gamma, flagged, step2 = [], [], {}, {}
    for c, level in enumerate(levels):
        cell = dataset.d == level
        pr_lo, pr_hi = lo_all[cell, c], hi_all[cell, c]
        width = _cell_width(pr_lo, pr_hi, level)
        t_lo = np.where(pr_lo <= 0.0, -np.inf, Phi_inv(np.clip(pr_lo,
                                                               1e-300, 1.0)))
        t_hi = np.where(pr_hi >= 1.0, np.inf, Phi_inv(np.clip(pr_hi,
                                                              0.0, 1.0)))
        design = design_all[cell]
        yvals = dataset.y[cell]
        wrow = None if weights is None else weights[cell]
        p = design.shape[1]

        def factory(ind, design=design, t_lo=t_lo, t_hi=t_hi, width=width,
                    p=p, wrow=wrow):
            rows, weight = _collapse_rows(
                np.column_stack([design, t_lo, t_hi, width, ind]), wrow)
            du = rows[:, :p]

            def fun(theta):
                return _ordered_cell_loglik(
                    theta, du, rows[:, p], rows[:, p + 1], rows[:, p + 2],
                    rows[:, p + 3], weight)
            return fun, None

        curves = None if warm is None else (warm.beta[c], warm.gamma[c])
        b, g, fl, infos = _fit_cell_curves(grid, design, yvals, factory,
                                           warm_curves=curves)
        beta.append(b)
        gamma.append(g)
        if fl:
            flagged[_lkey(level)] = [int(j) for j in fl]
        step2[_lkey(level)] = _summarize(infos)

    diagnostics = {"flagged": flagged, "step2": step2,
                   "threshold_shift": shift.tolist(),
                   "flag_count": sum(len(v) for v in flagged.values())}
    return PotentialOutcomeFit(
        kind=ORDERED, y_grid=grid, d_levels=levels, basis=basis,
        n=dataset.n, x=dataset.x, beta=beta, gamma=gamma, fit_d=first,
        diagnostics=diagnostics)


# ---------------------------------------------------- continuous treatments

def fit_continuous(dataset, basis=None, grid_y=None, grid_d=None,
                   treatment_basis=None, weights=None, warm=None):
    """Plug-in fit for a continuous treatment with a binary instrument.

    Two distribution regressions (outcome on B(D, Z, X), treatment on
    B(Z, X)) feed a closed form: with index contrasts across the two
    instrument arms, b = (fy1 - fy0) / (t1 - t0), a is the matching affine
    combination, F = Phi(a / sqrt(1 + b^2)) and rho = -b / sqrt(1 + b^2).
    Rows whose treatment-index contrast is below 1e-4 are flagged and
    excluded from marginalization.  Optional row weights rescale every
    likelihood term; `warm` (an earlier fit on the same grids and bases)
    seeds the probits.
    """
    if basis is None:
        basis = BasisSpec(z_terms="saturated")
    tbasis = treatment_basis if treatment_basis is not None else basis
    if tbasis.z_terms == "none":
        raise WeakInstrumentError(
            "the treatment basis gives the instrument no role, so the "
            "index contrast across arms is identically zero")
    if weights is not None:
        weights = check_weights(weights, dataset.n)
    from .dr import dr_fit

    fit_y = dr_fit(dataset, OUTCOME, basis, grid_y, weights=weights,
                   start_from=None if warm is None else warm.fit_y)
    fit_d = dr_fit(dataset, TREATMENT, tbasis, grid_d, weights=weights,
                   start_from=None if warm is None else warm.fit_d)
    rows = _as_x(dataset.x, dataset.n)
    t0 = fit_d.spec.design_zx(0, rows) @ fit_d.coef.T
    t1 = fit_d.spec.design_zx(1, rows) @ fit_d.coef.T
    weak = np.abs(t1 - t0) < WEAK_CONTRAST
    if weak.all():
        raise WeakInstrumentError(
            "every (row, level) treatment-index contrast is below "
            f"{WEAK_CONTRAST:g}")
    per_level = weak.sum(axis=0)
    diagnostics = {
        "weak_contrast": {"count": int(weak.sum()),
                          "per_level": [int(c) for c in per_level]},
        "flag_count": int(weak.sum()),
    }
    return PotentialOutcomeFit(
        kind=CONTINUOUS, y_grid=fit_y.grid, d_levels=fit_d.grid,
        basis=basis, n=dataset.n, x=dataset.x, fit_y=fit_y, fit_d=fit_d,
        diagnostics=diagnostics)


# ---------------------------------------------------------------- baselines

def fit_exogenous_dr(dataset, basis=None, grid=None, d_levels=None,
                     weights=None, warm=None):
    """Distribution-regression baseline that assumes the treatment is
    exogenous given X: probit of 1{Y <= y} on B(D, X), with potential-
    outcome CDFs read off by plugging counterfactual treatment levels
    into the fitted index."""
    if basis is None:
        basis = BasisSpec()
    ex_basis = replace(basis, z_terms="none")
    from .dr import dr_fit

    fit_y = dr_fit(dataset, OUTCOME, ex_basis, grid, weights=weights,
                   start_from=None if warm is None else warm.fit_y)
    if d_levels is None:
        uniq = np.unique(dataset.d)
        if uniq.size <= 10:
            d_levels = uniq
        else:
            full = default_grid(dataset.d)
            d_levels = full[_interior_mask(full, dataset.d, dataset.n)[2]]
    else:
        d_levels = np.atleast_1d(np.asarray(d_levels, dtype=float))
    return PotentialOutcomeFit(
        kind=EXOGENOUS, y_grid=fit_y.grid, d_levels=d_levels,
        basis=ex_basis, n=dataset.n, x=dataset.x, fit_y=fit_y,
        diagnostics={"flag_count": 0})


@dataclass
class TwoSLSResult:
    """Two-stage least squares summary: the treatment slope, its
    heteroskedasticity-robust standard error, and the first-stage F."""

    coef: float
    se: float
    first_stage_f: float
    flags: tuple
    beta: np.ndarray
    names: list


def fit_2sls(dataset):
    """Two-stage least squares of Y on (1, D, X) instrumented by (1, Z, X).

    Just-identified IV with an HC0 sandwich standard error; flags the fit
    when the first-stage F statistic for the instrument is below 10.
    """
    n = dataset.n
    x = _as_x(dataset.x, n)
    if n <= x.shape[1] + 2:
        raise ValueError("too few observations for the regressors")
    regs = np.column_stack([np.ones(n), dataset.d, x])
    inst = np.column_stack([np.ones(n), dataset.z.astype(float), x])
    names = ["const", "d"] + [f"x{j + 1}" for j in range(x.shape[1])]
    cross = inst.T @ regs
    try:
        beta = np.linalg.solve(cross, inst.T @ dataset.y)
        cross_inv = np.linalg.inv(cross)
    except np.linalg.LinAlgError:
        raise ValueError("singular moment matrix; the instruments do not "
                         "span the regressors") from None
    resid = dataset.y - regs @ beta
    meat = inst.T @ (inst * resid[:, None] ** 2)
    cov = cross_inv @ meat @ cross_inv.T
    se = float(np.sqrt(cov[1, 1]))

    gram = inst.T @ inst
    gamma = np.linalg.solve(gram, inst.T @ dataset.d)
    fs_resid = dataset.d - inst @ gamma
    dof = n - inst.shape[1]
    sigma2 = float(fs_resid @ fs_resid) / dof
    gamma_var = sigma2 * np.linalg.inv(gram)[1, 1]
    fstat = float(gamma[1] ** 2 / gamma_var) if gamma_var > 0 else np.inf
    flags = ("weak_instrument",) if fstat < 10.0 else ()
    return TwoSLSResult(coef=float(beta[1]), se=se, first_stage_f=fstat,
                        flags=flags, beta=beta, names=names)
