"""Bootstrap inference: pointwise and uniform confidence bands.

Draws come from either the empirical bootstrap (resample rows, rerun the
pipeline) or the multiplier bootstrap (reweight every likelihood and
average term by mean-one unit-exponential weights, warm-started at the
full-sample solution).  Standard errors are the normal-scaled bootstrap
interquartile range; uniform bands scale the pointwise standard errors by
the (1 - alpha)-quantile of the max absolute t statistic across the grid.
A Monte Carlo coverage harness checks the bands against known truths.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import ndtri

from .dgp import Dataset, rng_for
from .estimate import (fit_binary, fit_continuous, fit_exogenous_dr,
                       fit_ordered)
from .functionals import marginalize, qte

EMPIRICAL = "empirical"
MULTIPLIER = "multiplier"
DEFAULT_B = 5000
MAX_FAILURE_SHARE = 0.05
# width of the standard normal interquartile range
NORMAL_IQR = float(ndtri(0.75) - ndtri(0.25))

_REPLICATE_ERRORS = (ValueError, RuntimeError, ArithmeticError,
                     np.linalg.LinAlgError)


class SEResult(float):
    """Standard error as a plain float; `degenerate` marks fewer than two
    distinct draws (the value is then 0)."""

    def __new__(cls, value, degenerate=False):
        out = super().__new__(cls, value)
        out.degenerate = degenerate
        return out


class BootstrapDraws(np.ndarray):
    """(kept replicates x grid) draw matrix; `failures` counts replicates
    dropped because the pipeline raised or returned non-finite values."""

    failures = 0

    def __array_finalize__(self, obj):
        if obj is not None:
            self.failures = getattr(obj, "failures", 0)


def _resample(dataset, idx):
    return Dataset(y=dataset.y[idx], d=dataset.d[idx], z=dataset.z[idx],
                   x=None if dataset.x is None else dataset.x[idx])


def bootstrap(dataset, pipeline, B=DEFAULT_B, scheme=EMPIRICAL, seed=0,
              threads=1):
    """Bootstrap draws of a pipeline's output vector.

    `pipeline(data, weights)` must return a fixed-length vector; the
    empirical scheme calls it on row resamples with weights None, the
    multiplier scheme on the original data with mean-one unit-exponential
    weights.  Replicate RNG is keyed by (seed, replicate index), so the
    draws do not depend on `threads`.  Failed replicates are dropped; more
    than 5% failures is an error.
    """
    if B < 100:
        raise ValueError("B must be at least 100")
    if scheme not in (EMPIRICAL, MULTIPLIER):
        raise ValueError(f"scheme must be {EMPIRICAL} or {MULTIPLIER}")
    n = dataset.n

    def one(b):
        rng = rng_for(seed, b)
        try:
            if scheme == EMPIRICAL:
                vec = pipeline(_resample(dataset, rng.integers(0, n, n)),
                               None)
            else:
                vec = pipeline(dataset, rng.standard_exponential(n))
            vec = np.asarray(vec, dtype=float).ravel()
            if not np.all(np.isfinite(vec)):
                return None, "pipeline returned non-finite values"
            return vec, None
        except _REPLICATE_ERRORS as err:
            return None, str(err)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(B)))
    else:
        results = [one(b) for b in range(B)]

    kept, first_error, failures = [], None, 0
    for vec, err in results:
        if vec is None:
            failures += 1
            if first_error is None:
                first_error = err
        else:
            kept.append(vec)
    if failures > MAX_FAILURE_SHARE * B:
        raise RuntimeError(
            f"{failures} of {B} bootstrap replicates failed (more than "
            f"{MAX_FAILURE_SHARE:.0%}); first failure: {first_error}")
    widths = {v.size for v in kept}
    if len(widths) != 1:
        raise ValueError(f"pipeline output length varies across "
                         f"replicates: {sorted(widths)}")
    draws = np.vstack(kept).view(BootstrapDraws)
    draws.failures = failures
    return draws


# ------------------------------------------------------------------ bands

def robust_se(draws):
    """Normal-scaled interquartile range of the draws for one grid point:
    (Q_0.75 - Q_0.25) / (Phi^-1(0.75) - Phi^-1(0.25))."""
    v = np.asarray(draws, dtype=float).ravel()
    if v.size < 2 or np.all(v == v[0]):
        return SEResult(0.0, degenerate=True)
    q1, q3 = np.quantile(v, (0.25, 0.75))
    return SEResult((q3 - q1) / NORMAL_IQR)


def _order_quantile(values, level):
    # k-th order statistic with k = ceil((B + 1) * level), capped at B
    v = np.sort(np.asarray(values, dtype=float))
    k = min(v.size, max(1, math.ceil((v.size + 1) * level)))
    return float(v[k - 1])


@dataclass
class BandResult:
    """Point estimates with pointwise and uniform confidence bands.

    `excluded` lists grid indices whose bootstrap SE was zero; they are
    left out of the uniform max and their bands collapse to the point
    estimate.
    """

    u: np.ndarray
    estimates: np.ndarray
    se: np.ndarray
    cv_pointwise: np.ndarray
    cv_uniform: float
    lo_pointwise: np.ndarray
    hi_pointwise: np.ndarray
    lo_uniform: np.ndarray
    hi_uniform: np.ndarray
    alpha: float
    excluded: tuple = ()
    meta: dict = field(default_factory=dict)
    draws: np.ndarray = None

    def to_frame(self):
        return pd.DataFrame({
            "u": self.u, "estimate": self.estimates,
            "lo_pt": self.lo_pointwise, "hi_pt": self.hi_pointwise,
            "lo_unif": self.lo_uniform, "hi_unif": self.hi_uniform,
        })

    def to_json(self):
        return {"u": self.u.tolist(),
                "estimates": self.estimates.tolist(),
                "se": [float(s) for s in self.se],
                "cv_pointwise": self.cv_pointwise.tolist(),
                "cv_uniform": self.cv_uniform,
                "lo_pointwise": self.lo_pointwise.tolist(),
                "hi_pointwise": self.hi_pointwise.tolist(),
                "lo_uniform": self.lo_uniform.tolist(),
                "hi_uniform": self.hi_uniform.tolist(),
                "alpha": self.alpha,
                "excluded": list(self.excluded),
                "meta": dict(self.meta)}


def bands(estimates, draws, alpha=0.1, u=None, keep_draws=False):
    """Pointwise and uniform bands from bootstrap draws.

    The uniform critical value is the (1 - alpha)-quantile (order-
    statistic convention k = ceil((B + 1)(1 - alpha))) of the max over the
    grid of |draw - estimate| / SE; pointwise critical values use the same
    quantile of each grid point's own |t|.  Zero-SE points are excluded
    from the max and flagged; all SEs zero is an error.
    """
    est = np.asarray(estimates, dtype=float).ravel()
    d = np.asarray(draws, dtype=float)
    if d.ndim != 2 or d.shape[1] != est.size:
        raise ValueError("draws must be a (replicates, grid) matrix "
                         "matching the estimates")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    m = est.size
    u = np.arange(m, dtype=float) if u is None else \
        np.asarray(u, dtype=float).ravel()
    if u.size != m:
        raise ValueError("u must match the estimates in length")
    se = np.array([robust_se(d[:, j]) for j in range(m)], dtype=float)
    kept = se > 0.0
    if not kept.any():
        raise ValueError("every grid point has a zero bootstrap standard "
                         "error; no band can be formed")
    level = 1.0 - alpha
    tstats = np.abs(d[:, kept] - est[kept]) / se[kept]
    cv_uniform = _order_quantile(tstats.max(axis=1), level)
    cv_pointwise = np.zeros(m)
    for pos, j in enumerate(np.flatnonzero(kept)):
        cv_pointwise[j] = _order_quantile(tstats[:, pos], level)
    return BandResult(
        u=u, estimates=est, se=se,
        cv_pointwise=cv_pointwise, cv_uniform=cv_uniform,
        lo_pointwise=est - cv_pointwise * se,
        hi_pointwise=est + cv_pointwise * se,
        lo_uniform=est - cv_uniform * se,
        hi_uniform=est + cv_uniform * se,
        alpha=alpha, excluded=tuple(int(j) for j in np.flatnonzero(~kept)),
        draws=d if keep_draws else None)


def bootstrap_bands(dataset, pipeline, B=DEFAULT_B, scheme=EMPIRICAL,
                    seed=0, alpha=0.1, u=None, threads=1, keep_draws=False):
    """Point estimate, bootstrap draws, and bands in one call."""
    est = np.asarray(pipeline(dataset, None), dtype=float).ravel()
    draws = bootstrap(dataset, pipeline, B=B, scheme=scheme, seed=seed,
                      threads=threads)
    out = bands(est, draws, alpha=alpha, u=u, keep_draws=keep_draws)
    out.meta = {"seed": int(seed), "B": int(B), "scheme": scheme,
                "alpha": float(alpha), "failures": int(draws.failures)}
    return out


# -------------------------------------------------------------- pipelines

def _armwise_interior(values, z, grid):
    # keep thresholds with enough observations on both sides within every
    # instrument arm, so arm-specific probits stay away from separation
    keep = np.ones(grid.size, dtype=bool)
    for arm in np.unique(z):
        vv = np.sort(np.asarray(values)[z == arm])
        # the floor leaves room for row resamples to thin the tail cells;
        # trimming harder would narrow the fitted CDF range and push the
        # requested quantile levels outside it
        need = max(15, math.ceil(0.025 * vv.size))
        below = np.searchsorted(vv, grid, side="right")
        keep &= (below >= need) & (vv.size - below >= need)
    return keep


def _default_grid(dataset, kind, points=21):
    y = dataset.y
    if kind in ("binary", "ordered"):
        # span the central 90% of every treatment cell, not of pooled Y:
        # a shifted or wide treated marginal otherwise ends below the
        # upper quantile levels the pipeline must reach
        cells = [y[dataset.d == lev] for lev in np.unique(dataset.d)]
        lo = min(np.quantile(c, 0.05) for c in cells if c.size)
        hi = max(np.quantile(c, 0.95) for c in cells if c.size)
        q_lo = max(0.02, float(np.mean(y <= lo)))
        q_hi = min(0.98, float(np.mean(y < hi)))
        return np.unique(np.quantile(y, np.linspace(q_lo, q_hi, points)))
    grid = np.unique(np.quantile(y, np.linspace(0.05, 0.95, points)))
    grid = grid[_armwise_interior(y, dataset.z, grid)]
    if grid.size < 3:
        raise ValueError("too few interior outcome thresholds for a "
                         "default grid; pass one explicitly")
    return grid


def make_qte_pipeline(dataset, kind, taus=(0.25, 0.5, 0.75), pair=None,
                      basis=None, grid=None, interpolate=True):
    """Build a quantile-treatment-effect pipeline for bootstrap().

    Fits the full sample once to pin the outcome grid and provide warm
    starts, then returns (pipeline, taus) where pipeline(data, weights)
    re-estimates the model and reads the QTE between the treatment pair at
    each tau.  The default grid spans every treatment cell's central 90%
    (discrete kinds) or trims to thresholds interior within each
    instrument arm (continuous kinds), so replicates keep every threshold
    estimable.
    """
    taus = np.asarray(taus, dtype=float)
    if grid is None:
        grid = _default_grid(dataset, kind)
    if kind == "binary":
        pair = (1.0, 0.0) if pair is None else pair
        full = fit_binary(dataset, basis, grid=grid)

        def refit(data, w):
            return fit_binary(data, basis, grid=grid, weights=w, warm=full)
    elif kind == "ordered":
        levels = np.unique(dataset.d)
        pair = (float(levels[-1]), float(levels[0])) if pair is None \
            else pair
        full = fit_ordered(dataset, basis, grid=grid)

        def refit(data, w):
            return fit_ordered(data, basis, grid=grid, weights=w,
                               warm=full)
    elif kind == "continuous":
        pair = (1.0, 0.0) if pair is None else pair
        grid_d = np.unique(np.asarray(pair, dtype=float))
        full = fit_continuous(dataset, basis, grid_y=grid, grid_d=grid_d)

        def refit(data, w):
            return fit_continuous(data, basis, grid_y=grid, grid_d=grid_d,
                                  weights=w, warm=full)
    elif kind == "exogenous":
        pair = (1.0, 0.0) if pair is None else pair
        d_levels = np.unique(np.asarray(pair, dtype=float))
        full = fit_exogenous_dr(dataset, basis, grid=grid,
                                d_levels=d_levels)

        def refit(data, w):
            return fit_exogenous_dr(data, basis, grid=grid,
                                    d_levels=d_levels, weights=w,
                                    warm=full)
    else:
        raise ValueError(f"unknown treatment kind {kind!r}")
    d_hi, d_lo = float(pair[0]), float(pair[1])

    def pipeline(data, weights=None):
        fit = refit(data, weights)
        marg = marginalize(fit, weights=weights)
        return np.array([qte(marg, t, d_hi, d_lo, interpolate)
                         for t in taus])

    pipeline.full_fit = full
    pipeline.grid = grid
    pipeline.pair = (d_hi, d_lo)
    return pipeline, taus


# -------------------------------------------------------- coverage harness

@dataclass
class CoverageReport:
    """Monte Carlo band coverage against a known truth."""

    u: np.ndarray
    pointwise: np.ndarray
    uniform: float
    mc_error_pointwise: np.ndarray
    mc_error_uniform: float
    completed: int
    failed: int
    alpha: float
    n: int
    B: int
    scheme: str

    def to_json(self):
        return {"u": self.u.tolist(),
                "pointwise": self.pointwise.tolist(),
                "uniform": self.uniform,
                "mc_error_pointwise": self.mc_error_pointwise.tolist(),
                "mc_error_uniform": self.mc_error_uniform,
                "completed": self.completed, "failed": self.failed,
                "alpha": self.alpha, "n": self.n, "B": self.B,
                "scheme": self.scheme}


def _binomial_half_width(p, reps):
    return 1.96 * np.sqrt(np.maximum(p * (1.0 - p), 0.0) / reps)


def coverage_study(make_data, make_pipeline, truth, n, reps, B=299,
                   alpha=0.1, scheme=EMPIRICAL, seed=0, threads=1,
                   budget=1e8):
    """Monte Carlo coverage of the bands against a known truth.

    `make_data(n, seed)` simulates a dataset; `make_pipeline(dataset)`
    returns (pipeline, u); `truth` is the true functional vector on u.
    Reports the fraction of replications whose pointwise band covers the
    truth at each u and whose uniform band covers the whole curve, with
    binomial Monte Carlo error.  Refuses budgets beyond reps*B*n cells.
    """
    cost = float(reps) * float(B) * float(n)
    if cost > budget:
        raise ValueError(
            f"coverage study needs about {cost:.3g} pipeline-row "
            f"evaluations, beyond the budget of {budget:.3g}; lower reps, "
            f"B, or n, or raise the budget")
    truth = np.asarray(truth, dtype=float).ravel()
    cover_pt, cover_unif, failed, u_ref = [], [], 0, None
    for r in range(reps):
        spawn = rng_for(seed, r)
        data_seed, boot_seed = (int(s) for s in
                                spawn.integers(0, 2**31 - 1, size=2))
        try:
            ds = make_data(n, data_seed)
            pipeline, u = make_pipeline(ds)
            band = bootstrap_bands(ds, pipeline, B=B, scheme=scheme,
                                   seed=boot_seed, alpha=alpha, u=u,
                                   threads=threads)
        except _REPLICATE_ERRORS:
            failed += 1
            continue
        if truth.size != band.u.size:
            raise ValueError("truth must match the pipeline grid")
        u_ref = band.u
        cover_pt.append((band.lo_pointwise <= truth)
                        & (truth <= band.hi_pointwise))
        cover_unif.append(bool(np.all((band.lo_uniform <= truth)
                                      & (truth <= band.hi_uniform))))
    if not cover_pt:
        raise RuntimeError(f"all {reps} coverage replications failed")
    pt = np.mean(cover_pt, axis=0)
    unif = float(np.mean(cover_unif))
    done = len(cover_pt)
    return CoverageReport(
        u=u_ref, pointwise=pt, uniform=unif,
        mc_error_pointwise=_binomial_half_width(pt, done),
        mc_error_uniform=float(_binomial_half_width(unif, done)),
        completed=done, failed=failed, alpha=alpha, n=int(n), B=int(B),
        scheme=scheme)
