"""Marginal potential-outcome distributions and treatment-effect summaries.

Marginalization averages the fitted conditional CDFs over the sample
covariate rows.  On top of the marginal CDFs: quantile and average
structural functions with difference-quotient treatment effects, the
counterfactual distribution of the untreated outcome among the treated,
and the marginal local dependence implied by averaging the conditional
copula.
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .copulas import C, GAUSSIAN, frechet_bounds, solve_rho

STEP = "step"
LINEAR = "linear"


class BoundaryError(ValueError):
    """A requested functional falls outside what the fitted grid can
    support (quantile censored at the grid floor or ceiling)."""


@dataclass
class MarginalCDF:
    """Marginal CDFs F-hat_{Y_d} on a y grid, one row per treatment level.

    `rule` tags how off-grid points are evaluated: "step" carries the
    largest fitted value at or below y (zero under the grid floor),
    "linear" interpolates between grid points and clamps outside.
    """

    grid: np.ndarray
    d_levels: np.ndarray
    values: np.ndarray
    rule: str
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.d_levels = np.asarray(self.d_levels, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.d_levels.size, self.grid.size):
            raise ValueError("values must be a (levels, grid) matrix")
        if self.rule not in (STEP, LINEAR):
            raise ValueError("rule must be step or linear")

    def level_index(self, d):
        hit = np.flatnonzero(np.abs(self.d_levels - float(d)) <= 1e-9)
        if hit.size != 1:
            raise ValueError(f"treatment level {d} is not on the grid "
                             f"{self.d_levels}")
        return int(hit[0])

    def row(self, d):
        return self.values[self.level_index(d)]

    def cdf(self, d, y):
        """F-hat_{Y_d}(y) with the tagged off-grid rule."""
        row = self.row(d)
        y = np.asarray(y, dtype=float)
        if self.rule == LINEAR:
            out = np.interp(y, self.grid, row)
        else:
            idx = np.searchsorted(self.grid, y, side="right") - 1
            out = np.where(idx < 0, 0.0, row[np.clip(idx, 0, None)])
        return float(out) if out.ndim == 0 else out

    def to_json(self):
        return {"grid": self.grid.tolist(),
                "d_levels": self.d_levels.tolist(),
                "values": self.values.tolist(),
                "rule": self.rule,
                "diagnostics": self.diagnostics}

    @classmethod
    def from_json(cls, payload):
        return cls(grid=payload["grid"], d_levels=payload["d_levels"],
                   values=payload["values"], rule=payload["rule"],
                   diagnostics=payload.get("diagnostics", {}))


def marginalize(fit, rule=None, weights=None):
    """Average the fitted conditional CDFs over the sample covariate rows.

    Continuous-treatment fits drop rows flagged for a weak treatment-index
    contrast at each level (counts reported); a level with every row or
    every grid point excluded is an error.  Optional row weights turn the
    sample average into a weighted one.
    """
    if rule is None:
        rule = LINEAR if fit.kind == "continuous" else STEP
    if rule not in (STEP, LINEAR):
        raise ValueError("rule must be step or linear")
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (fit.n,):
            raise ValueError(f"weights must be a length-{fit.n} vector")
        if fit.x is None:
            # all covariate rows coincide, so any weighting is a no-op
            weights = None
    rows, excluded = [], {}
    for level in fit.d_levels:
        mask = fit.valid_mask(level)
        dropped = int((~mask).sum())
        if dropped:
            excluded[f"{level:g}"] = dropped
        if not mask.any() or (weights is not None
                              and weights[mask].sum() <= 0.0):
            raise ValueError(
                f"every covariate row is excluded at treatment level "
                f"{level:g}")
        cdf = fit.conditional_cdf(level)[mask]
        if weights is None:
            curve = cdf.mean(axis=0)
        else:
            curve = np.average(cdf, axis=0, weights=weights[mask])
        if not np.isfinite(curve).all():
            raise ValueError(
                f"every grid point is flagged at treatment level "
                f"{level:g}")
        rows.append(np.sort(curve))
    diagnostics = {"excluded_rows": excluded,
                   "flag_count": fit.diagnostics.get("flag_count", 0)}
    return MarginalCDF(grid=fit.y_grid, d_levels=fit.d_levels,
                       values=np.vstack(rows), rule=rule,
                       diagnostics=diagnostics)


# ------------------------------------------------------ effect functionals

def qsf(cdf, tau, d, interpolate=False):
    """Quantile structural function: the smallest grid y with F(y) >= tau.

    With `interpolate` the crossing is located linearly between the
    bracketing grid points instead of snapping up to the next one.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    row = cdf.row(d)
    if tau <= row[0]:
        raise BoundaryError(
            f"tau={tau:g} is at or below the fitted CDF at the grid floor "
            f"({row[0]:.4g}); the quantile is censored")
    if tau > row[-1]:
        raise BoundaryError(
            f"tau={tau:g} exceeds the fitted CDF at the grid ceiling "
            f"({row[-1]:.4g})")
    j = int(np.searchsorted(row, tau, side="left"))
    if not interpolate:
        return float(cdf.grid[j])
    lo, hi = row[j - 1], row[j]
    if hi - lo <= 1e-12:
        return float(cdf.grid[j])
    frac = (tau - lo) / (hi - lo)
    return float(cdf.grid[j - 1] + frac * (cdf.grid[j] - cdf.grid[j - 1]))


def qte(cdf, tau, d, d_prime, interpolate=False):
    """Quantile treatment effect per unit of treatment."""
    gap = float(d) - float(d_prime)
    if abs(gap) <= 1e-12:
        raise ValueError("d and d_prime must differ")
    return (qsf(cdf, tau, d, interpolate)
            - qsf(cdf, tau, d_prime, interpolate)) / gap


def asf(cdf, d):
    """Average structural function as a left-Riemann sum of the survival
    curve above the grid floor."""
    row = cdf.row(d)
    return float(cdf.grid[0] + np.sum((1.0 - row[:-1]) * np.diff(cdf.grid)))


def asf_bias_bound(cdf, d):
    """Bound on the mass-below-the-floor bias of asf: F(y_min) x range."""
    row = cdf.row(d)
    return float(row[0] * (cdf.grid[-1] - cdf.grid[0]))


def ate(cdf, d, d_prime):
    """Average treatment effect per unit of treatment."""
    gap = float(d) - float(d_prime)
    if abs(gap) <= 1e-12:
        raise ValueError("d and d_prime must differ")
    return (asf(cdf, d) - asf(cdf, d_prime)) / gap


# ------------------------------------------- treated-subpopulation curves

def empirical_cdf(sample, grid):
    """Fraction of the sample at or below each grid point."""
    sample = np.sort(np.asarray(sample, dtype=float))
    if sample.size == 0:
        raise ValueError("the conditioning cell is empty")
    return np.searchsorted(sample, np.asarray(grid, dtype=float),
                           side="right") / sample.size


@dataclass
class TreatedCounterfactual:
    """F-hat of the untreated potential outcome among the treated."""

    grid: np.ndarray
    values: np.ndarray
    clipped: int
    route: str


def treated_counterfactual(f_y0, f_y_given_d0=None, pi=None, dataset=None):
    """Distribution of Y_0 among the treated:
    [F_{Y_0}(y) - (1 - pi) F_{Y|D}(y|0)] / pi with pi = Pr[D = 1].

    f_y0 is a MarginalCDF containing level 0.  f_y_given_d0 is the
    empirical CDF of Y in the untreated cell on the same grid (computed
    from `dataset` when omitted).  Under one-sided non-compliance
    (Pr[D=0|Z=0] = 1 in the dataset) the marginal F_{Y_0} input is
    replaced by the empirical CDF of Y given Z = 0, which identifies it
    directly.  Values are clipped to [0, 1] and rearranged; clip events
    are counted.
    """
    grid = f_y0.grid
    route = "marginal"
    base = f_y0.row(0.0)
    if dataset is not None:
        if pi is None:
            pi = float(np.mean(dataset.d == 1))
        if f_y_given_d0 is None:
            f_y_given_d0 = empirical_cdf(dataset.y[dataset.d == 0], grid)
        arm0 = dataset.z == 0
        if arm0.any() and np.all(dataset.d[arm0] == 0):
            base = empirical_cdf(dataset.y[arm0], grid)
            route = "one_sided"
    if pi is None or f_y_given_d0 is None:
        raise ValueError("pi and f_y_given_d0 are required when no "
                         "dataset is given")
    if not 0.0 < pi < 1.0:
        raise ValueError("pi must lie strictly inside (0, 1)")
    f_y_given_d0 = np.asarray(f_y_given_d0, dtype=float)
    if f_y_given_d0.shape != grid.shape:
        raise ValueError("f_y_given_d0 must be aligned with the grid")
    raw = (base - (1.0 - pi) * f_y_given_d0) / pi
    clipped = int(np.sum((raw < -1e-12) | (raw > 1.0 + 1e-12)))
    values = np.sort(np.clip(raw, 0.0, 1.0))
    return TreatedCounterfactual(grid=grid, values=values, clipped=clipped,
                                 route=route)


# ---------------------------------------------- marginal local dependence

@dataclass
class MarginalDependence:
    """Dependence of the marginal potential outcome on the latent
    treatment rank, implied by averaging the conditional copula."""

    rho: float
    average: float
    flags: tuple


def marginal_local_dependence(fit, v, d, y):
    """Solve C(F-hat_{Y_d}(y), v; rho) = mean_i C(F-hat(y|X_i), v;
    rho-hat(y; X_i)) for rho (the copula is strictly increasing in rho)."""
    if not 0.0 < v < 1.0:
        raise ValueError("v must lie strictly inside (0, 1)")
    hit = np.flatnonzero(np.abs(fit.y_grid - float(y)) <= 1e-9)
    if hit.size != 1:
        raise ValueError(f"y={y} is not on the fitted outcome grid")
    j = int(hit[0])
    mask = fit.valid_mask(d)
    if not mask.any():
        raise ValueError(f"every covariate row is excluded at level {d:g}")
    # unrearranged so each threshold's F pairs with its own rho
    f_rows = fit.conditional_cdf(d, rearranged=False)[mask, j]
    rho_rows = fit.conditional_rho(d)[mask, j]
    average = float(np.mean(C(GAUSSIAN, f_rows, v, rho_rows)))
    f_bar = float(np.mean(f_rows))
    lo, hi = frechet_bounds(f_bar, v)
    target, flags = average, []
    if target < lo or target > hi:
        target = float(np.clip(target, lo, hi))
        flags.append("frechet")
    rho = solve_rho(GAUSSIAN, target, f_bar, v)
    if rho.boundary:
        flags.append("boundary")
    return MarginalDependence(rho=float(rho), average=average,
                              flags=tuple(flags))


# ------------------------------------------------------------ tidy output

def summary_table(cdf, taus=(0.25, 0.5, 0.75), pairs=None):
    """Tidy frame of QSF/ASF levels and QTE/ATE contrasts.

    Columns: parameter, d, d_prime, tau_or_y, estimate.  `pairs` defaults
    to every level contrasted with the lowest one.
    """
    levels = cdf.d_levels
    if pairs is None:
        pairs = [(float(dv), float(levels[0])) for dv in levels[1:]]
    rows = []
    for dv in levels:
        for tau in taus:
            rows.append(("qsf", float(dv), np.nan, float(tau),
                         qsf(cdf, tau, dv)))
        rows.append(("asf", float(dv), np.nan, np.nan, asf(cdf, dv)))
    for d_hi, d_lo in pairs:
        for tau in taus:
            rows.append(("qte", d_hi, d_lo, float(tau),
                         qte(cdf, tau, d_hi, d_lo)))
        rows.append(("ate", d_hi, d_lo, np.nan, ate(cdf, d_hi, d_lo)))
    return pd.DataFrame(rows, columns=["parameter", "d", "d_prime",
                                       "tau_or_y", "estimate"])
