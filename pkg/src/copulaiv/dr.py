"""Distribution regression: probit likelihoods over threshold grids.

A function-valued coefficient is estimated by one probit fit per grid
point, each regressing the threshold indicator 1{Y <= y} (or 1{D <= d})
on a basis of the conditioning variables.  Fits along the grid are warm
started from their neighbor, and fitted curves are made monotone by
rearrangement, which here is just sorting along the grid.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr
from scipy.special import log_ndtr, ndtr, ndtri

from .dgp import Dataset, EvalGrid

OUTCOME = "outcome"        # regress 1{Y <= y} on B(D, Z, X)
TREATMENT = "treatment"    # regress 1{D <= d} on B(Z, X)

MAX_NEWTON_ITER = 50
MAX_HALVINGS = 30
GRAD_TOL = 1e-8            # sup-norm of the score at convergence
SEPARATION_INDEX = 8.0     # |index| beyond this with a growing likelihood
DEFAULT_GRID_SIZE = 99
DEFAULT_GRID_RANGE = (0.01, 0.99)

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class SeparationError(RuntimeError):
    """The probit likelihood has no interior maximum: some fitted index
    diverges.  `columns` holds the indices of the design columns driving
    the divergence."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(int(c) for c in columns)


# ------------------------------------------------------------ probit pieces

def _mills(u):
    # phi(u) / Phi(u), in log space so the u -> -inf tail stays finite
    u = np.asarray(u, dtype=float)
    return np.exp(-0.5 * u * u - _LOG_SQRT_2PI - log_ndtr(u))


def probit_loglik(beta, responses, design, weights=None):
    """Bernoulli-probit log likelihood at coefficient vector beta."""
    eta = np.asarray(design, dtype=float) @ np.asarray(beta, dtype=float)
    r = np.asarray(responses, dtype=float)
    terms = r * log_ndtr(eta) + (1.0 - r) * log_ndtr(-eta)
    if weights is not None:
        terms = np.asarray(weights, dtype=float) * terms
    return float(np.sum(terms))


def check_weights(weights, n):
    """Validate a nonnegative per-row weight vector of length n."""
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"weights must be a length-{n} vector")
    if not np.all(np.isfinite(w)) or np.any(w < 0.0):
        raise ValueError("weights must be finite and nonnegative")
    if w.sum() <= 0.0:
        raise ValueError("weights must not all be zero")
    return w


def probit_score(beta, responses, design, weights=None):
    """Analytic gradient of probit_loglik in beta."""
    design = np.asarray(design, dtype=float)
    eta = design @ np.asarray(beta, dtype=float)
    r = np.asarray(responses, dtype=float)
    per_row = r * _mills(eta) - (1.0 - r) * _mills(-eta)
    if weights is not None:
        per_row = np.asarray(weights, dtype=float) * per_row
    return design.T @ per_row


def _column_label(j, names):
    return names[j] if names is not None else f"column {j}"


def _separation_columns(design, beta, bad_rows):
    # columns contributing most to the diverging indices
    contrib = np.max(np.abs(design[bad_rows] * beta), axis=0)
    top = contrib.max()
    return np.flatnonzero(contrib >= 0.5 * top)


def _newton_probit(responses, design, start, names=None, weights=None):
    """Maximize the (optionally row-weighted) probit log likelihood by
    Newton-Raphson with step halving.  Returns (beta, info dict)."""
    r = np.asarray(responses, dtype=float)
    X = np.asarray(design, dtype=float)
    if np.all(r == r[0]):
        raise SeparationError(
            f"responses are all {int(r[0])}; the likelihood has no maximizer",
            columns=range(X.shape[1]))
    w = None if weights is None else np.asarray(weights, dtype=float)

    def evaluate(beta):
        # log likelihood plus the tail quantities the score reuses
        eta = X @ beta
        lp1 = log_ndtr(eta)
        lp0 = log_ndtr(-eta)
        terms = r * lp1 + (1.0 - r) * lp0
        if w is not None:
            terms = w * terms
        return float(np.sum(terms)), eta, lp1, lp0

    beta = np.asarray(start, dtype=float).copy()
    ll, eta, lp1, lp0 = evaluate(beta)
    improved = False
    for it in range(MAX_NEWTON_ITER + 1):
        core = -0.5 * eta * eta - _LOG_SQRT_2PI
        m1 = np.exp(core - lp1)
        m0 = np.exp(core - lp0)
        resid = r * m1 - (1.0 - r) * m0
        if w is not None:
            resid = w * resid
        score = X.T @ resid
        gnorm = float(np.max(np.abs(score)))
        if gnorm <= GRAD_TOL:
            return beta, {"iterations": it, "gradient_norm": gnorm,
                          "loglik": ll, "converged": True}
        bad = np.abs(eta) > SEPARATION_INDEX
        if improved and bad.any():
            cols = _separation_columns(X, beta, bad)
            labels = ", ".join(_column_label(j, names) for j in cols)
            raise SeparationError(
                f"separation: {int(bad.sum())} fitted indices beyond "
                f"{SEPARATION_INDEX:g} with a growing likelihood ({labels})",
                columns=cols)
        if it == MAX_NEWTON_ITER:
            break
        weight = r * m1 * (m1 + eta) + (1.0 - r) * m0 * (m0 - eta)
        if w is not None:
            weight = w * weight
        hess = X.T @ (X * weight[:, None])
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            raise RuntimeError(
                f"singular probit Hessian at iteration {it}") from None
        # near the optimum the Newton gain falls below the rounding noise
        # of the summed log likelihood, so ties within noise are accepted
        noise = 1e-10 * (1.0 + abs(ll))
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + scale * step
            ll_new, eta_new, lp1_new, lp0_new = evaluate(cand)
            if ll_new >= ll - noise:
                break
            scale *= 0.5
        else:
            raise RuntimeError(
                "probit line search stalled at gradient sup-norm "
                f"{gnorm:.3g}")
        improved = ll_new > ll
        beta, ll = cand, ll_new
        eta, lp1, lp0 = eta_new, lp1_new, lp0_new
    raise RuntimeError(
        f"probit did not converge in {MAX_NEWTON_ITER} iterations "
        f"(gradient sup-norm {gnorm:.3g})")


def _check_full_rank(design, names=None):
    n, p = design.shape
    if p == 0:
        raise ValueError("design matrix has no columns")
    _, rmat, piv = qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(rmat))
    tol = diag.max() * max(n, p) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    if rank < p:
        labels = ", ".join(_column_label(j, names) for j in sorted(piv[rank:]))
        raise ValueError(f"design matrix is rank deficient; dependent "
                         f"columns: {labels}")


def probit_fit(responses, design, start=None, names=None, weights=None):
    """Probit maximum likelihood coefficients.

    Newton-Raphson with an analytic Hessian and step halving; converges
    when the score sup-norm is at most 1e-8.  Raises SeparationError when
    some fitted index diverges and ValueError on a rank-deficient design.
    Optional nonnegative row weights rescale every likelihood term.
    """
    X = np.asarray(design, dtype=float)
    if X.ndim != 2:
        raise ValueError("design must be an (n, p) matrix")
    r = np.asarray(responses, dtype=float)
    if r.shape != (X.shape[0],):
        raise ValueError("responses must be a vector matching the design rows")
    if not np.isin(r, (0.0, 1.0)).all():
        raise ValueError("responses must be binary")
    if weights is not None:
        weights = check_weights(weights, X.shape[0])
    _check_full_rank(X, names)
    if start is None:
        start = np.zeros(X.shape[1])
    beta, _ = _newton_probit(r, X, start, names, weights)
    return beta


# ------------------------------------------------------------- basis design

def _as_x(x, n=None):
    if x is None:
        if n is None:
            raise ValueError("row count is needed when x is absent")
        return np.zeros((int(n), 0))
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("x must be an (n, k) matrix")
    return x


@dataclass(frozen=True)
class BasisSpec:
    """Declarative description of the transformation vectors.

    One spec builds all of B(x), B(z, x) and B(d, z, x): the base block is
    an intercept plus polynomial terms in the selected covariate columns,
    the treatment enters through its own powers, and the instrument enters
    either additively or through a fully saturated per-arm copy of the
    whole block (separate coefficients for z = 0 and z = 1).
    """

    intercept: bool = True
    x_cols: tuple = None      # covariate column indices; None selects all
    degree: int = 1           # polynomial degree for covariate columns
    d_degree: int = 1         # polynomial degree for the treatment column
    z_terms: str = "additive"  # "none", "additive" or "saturated"

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be at least 1")
        if self.d_degree < 0:
            raise ValueError("d_degree must be nonnegative")
        if self.z_terms not in ("none", "additive", "saturated"):
            raise ValueError("z_terms must be none, additive or saturated")
        if self.x_cols is not None:
            cols = tuple(int(j) for j in self.x_cols)
            if len(set(cols)) != len(cols) or any(j < 0 for j in cols):
                raise ValueError("x_cols must be distinct nonnegative indices")
            object.__setattr__(self, "x_cols", cols)

    def _cols(self, k):
        cols = tuple(range(k)) if self.x_cols is None else self.x_cols
        if any(j >= k for j in cols):
            raise ValueError(f"x_cols {self.x_cols} out of range for "
                             f"{k} covariate columns")
        return cols

    def _base(self, x, d=None):
        # block [1, x powers, d powers]; returns (matrix, names)
        parts, names = [], []
        n = x.shape[0]
        if self.intercept:
            parts.append(np.ones(n))
            names.append("const")
        for j in self._cols(x.shape[1]):
            for p in range(1, self.degree + 1):
                parts.append(x[:, j] ** p)
                names.append(f"x{j + 1}" if p == 1 else f"x{j + 1}^{p}")
        if d is not None:
            for p in range(1, self.d_degree + 1):
                parts.append(d ** p)
                names.append("d" if p == 1 else f"d^{p}")
        if not parts:
            raise ValueError("basis spec produces no columns")
        return np.column_stack(parts), names

    def _with_z(self, block, names, z):
        if self.z_terms == "none":
            return block, names
        z = np.asarray(z, dtype=float)
        if not np.isin(z, (0.0, 1.0)).all():
            raise ValueError("z must be binary")
        if self.z_terms == "additive":
            return (np.column_stack([block, z]), names + ["z"])
        arm0 = block * (1.0 - z)[:, None]
        arm1 = block * z[:, None]
        return (np.hstack([arm0, arm1]),
                [f"z0:{nm}" for nm in names] + [f"z1:{nm}" for nm in names])

    @staticmethod
    def _broadcast(n, *vecs):
        out = []
        for v in vecs:
            v = np.atleast_1d(np.asarray(v, dtype=float))
            if v.size == 1:
                v = np.full(n, v[0])
            elif v.size != n:
                raise ValueError("inputs have inconsistent lengths")
            out.append(v)
        return out

    def design_x(self, x, n=None):
        """B(x): intercept and covariate polynomial terms."""
        return self._base(_as_x(x, n))[0]

    def design_zx(self, z, x=None):
        """B(z, x): the base block with the instrument terms."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        x = _as_x(x, z.size)
        z, = self._broadcast(x.shape[0], z)
        block, names = self._base(x)
        return self._with_z(block, names, z)[0]

    def design_dzx(self, d, z, x=None):
        """B(d, z, x): the base block with treatment and instrument terms."""
        d = np.atleast_1d(np.asarray(d, dtype=float))
        z = np.atleast_1d(np.asarray(z, dtype=float))
        x = _as_x(x, max(d.size, z.size))
        d, z = self._broadcast(x.shape[0], d, z)
        block, names = self._base(x, d)
        return self._with_z(block, names, z)[0]

    def column_names(self, kind, n_covariates=0):
        """Column labels for kind "x", "zx" or "dzx"."""
        x = np.zeros((1, int(n_covariates)))
        if kind == "x":
            return self._base(x)[1]
        d = np.zeros(1) if kind == "dzx" else None
        if kind not in ("zx", "dzx"):
            raise ValueError("kind must be x, zx or dzx")
        block, names = self._base(x, d)
        return self._with_z(block, names, np.zeros(1))[1]

    def to_config(self):
        return {"intercept": self.intercept,
                "x_cols": None if self.x_cols is None else list(self.x_cols),
                "degree": self.degree, "d_degree": self.d_degree,
                "z_terms": self.z_terms}

    @classmethod
    def from_config(cls, config):
        config = dict(config)
        cols = config.get("x_cols")
        if cols is not None:
            config["x_cols"] = tuple(cols)
        return cls(**config)


# ----------------------------------------------------------- gridwise fits

def rearrange(values):
    """Monotone rearrangement of estimates over a sorted grid: sorting.

    Idempotent, preserves the multiset of values, and never moves the
    curve farther (in sup-norm) from any monotone target.
    """
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("rearrange needs finite values")
    return np.sort(v)


def default_grid(values, size=DEFAULT_GRID_SIZE):
    """Threshold grid at `size` equi-spaced empirical quantiles inside the
    support (duplicates from ties are dropped)."""
    probs = np.linspace(DEFAULT_GRID_RANGE[0], DEFAULT_GRID_RANGE[1], size)
    return np.unique(np.quantile(np.asarray(values, dtype=float), probs))


@dataclass
class DRFit:
    """Function-valued probit coefficients over a threshold grid.

    `coef` holds the raw per-point estimates (row t for grid point t);
    fitted CDF curves are rearranged on evaluation, so the raw values stay
    available for diagnostics.
    """

    side: str
    grid: np.ndarray
    coef: np.ndarray
    names: list
    spec: BasisSpec
    diagnostics: list

    def index_matrix(self, design):
        """Raw indices B'beta_t: rows follow `design`, columns the grid."""
        return np.asarray(design, dtype=float) @ self.coef.T

    def cdf_matrix(self, design, rearranged=True):
        """Fitted CDF curves over the grid, monotone after rearrangement."""
        cdf = ndtr(self.index_matrix(design))
        if rearranged:
            cdf = np.sort(cdf, axis=-1)
        return cdf

    def to_json(self):
        return {"side": self.side,
                "grid": self.grid.tolist(),
                "coef": self.coef.tolist(),
                "names": list(self.names),
                "spec": self.spec.to_config(),
                "diagnostics": self.diagnostics}

    @classmethod
    def from_json(cls, payload):
        return cls(side=payload["side"],
                   grid=np.asarray(payload["grid"], dtype=float),
                   coef=np.asarray(payload["coef"], dtype=float),
                   names=list(payload["names"]),
                   spec=BasisSpec.from_config(payload["spec"]),
                   diagnostics=list(payload["diagnostics"]))


def _resolve_grid(grid, values, side):
    if grid is None:
        return default_grid(values)
    if isinstance(grid, EvalGrid):
        grid = grid.y if side == OUTCOME else grid.d
        if grid is None:
            raise ValueError(f"EvalGrid lacks the {side} threshold grid")
        return grid
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if not np.all(np.isfinite(grid)) or np.any(np.diff(grid) <= 0.0):
        raise ValueError("grid must be finite and strictly increasing")
    return grid


def _interior_mask(grid, values, n):
    need = max(10, math.ceil(0.01 * n))
    below = np.searchsorted(np.sort(values), grid, side="right")
    return need, below, (below >= need) & (n - below >= need)


def _check_interior(grid, values, n):
    need, below, ok = _interior_mask(grid, values, n)
    for i in np.flatnonzero(~ok):
        lo = int(below[i])
        raise ValueError(
            f"grid point {i} at {grid[i]:.6g} leaves {lo} observations at "
            f"or below and {n - lo} above; need at least {need} on both "
            f"sides")


def dr_fit(dataset, side, basis=None, grid=None, sweep="forward",
           weights=None, start_from=None):
    """Distribution regression of threshold indicators on the basis.

    Side "outcome" regresses 1{Y <= y} on B(D, Z, X); side "treatment"
    regresses 1{D <= d} on B(Z, X).  One probit per grid point, warm
    started from its neighbor along the sweep; `sweep` ("forward" or
    "backward") only sets the traversal direction and must not change the
    result beyond solver tolerance.  Optional row weights rescale every
    likelihood term; `start_from` (a DRFit on the same grid) seeds each
    probit at previously fitted coefficients instead of the sweep ladder.
    """
    side = str(side).lower()
    if side not in (OUTCOME, TREATMENT):
        raise ValueError(f"side must be {OUTCOME} or {TREATMENT}")
    if sweep not in ("forward", "backward"):
        raise ValueError("sweep must be forward or backward")
    if basis is None:
        basis = BasisSpec()
    values = dataset.y if side == OUTCOME else dataset.d
    defaulted = grid is None
    grid = _resolve_grid(grid, values, side)
    if defaulted:
        # the default quantile grid trims itself to the support interior;
        # explicitly requested grids must satisfy the rule as given
        grid = grid[_interior_mask(grid, values, dataset.n)[2]]
        if grid.size == 0:
            raise ValueError("no default grid point leaves enough "
                             "observations on both sides")
    else:
        _check_interior(grid, values, dataset.n)
    k = 0 if dataset.x is None else dataset.x.shape[1]
    if side == OUTCOME:
        design = basis.design_dzx(dataset.d, dataset.z, dataset.x)
        names = basis.column_names("dzx", k)
    else:
        design = basis.design_zx(dataset.z, dataset.x)
        names = basis.column_names("zx", k)
    _check_full_rank(design, names)
    if weights is not None:
        weights = check_weights(weights, dataset.n)
    m, p = grid.size, design.shape[1]
    if start_from is not None:
        if start_from.coef.shape != (m, p) or \
                not np.allclose(start_from.grid, grid):
            raise ValueError("start_from must be a fit on the same grid "
                             "and basis")
    coef = np.empty((m, p))
    diagnostics = [None] * m
    order = range(m) if sweep == "forward" else range(m - 1, -1, -1)
    start = np.zeros(p)
    for i in order:
        r = (values <= grid[i]).astype(float)
        this_start = start if start_from is None else start_from.coef[i]
        try:
            beta, info = _newton_probit(r, design, this_start, names,
                                        weights)
        except SeparationError as err:
            raise SeparationError(
                f"{side} grid point {grid[i]:.6g}: {err}",
                columns=err.columns) from err
        except RuntimeError as err:
            raise RuntimeError(
                f"{side} grid point {grid[i]:.6g}: {err}") from err
        info["threshold"] = float(grid[i])
        coef[i] = beta
        diagnostics[i] = info
        start = beta
    return DRFit(side=side, grid=grid, coef=coef, names=names,
                 spec=basis, diagnostics=diagnostics)
