"""Dense GLM machinery: families, weighted least squares, IRLS and the
full-data reference fit that every distributed result is checked against.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from .exceptions import (
    ConstantColumn,
    DataError,
    DegenerateColumn,
    NonFinite,
    ShapeMismatch,
    SingularGram,
)

BINOMIAL_CLAMP = 1e-10
POISSON_FLOOR = 1e-10
DEGENERATE_SS = 1e-12
INTERCEPT = "(Intercept)"


class ConvergenceWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FamilySpec:
    """A GLM family with its canonical link.

    ``mean_fn`` maps the linear predictor to the mean, ``mean_derivative`` is
    dmu/deta and ``variance_fn`` the variance function of the mean.
    """

    family: str
    link: str
    tag: int
    mean_fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    mean_derivative: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    variance_fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    link_fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    @property
    def is_gaussian(self) -> bool:
        return self.family == "gaussian"

    def validate_target(self, y: np.ndarray) -> None:
        if not np.all(np.isfinite(y)):
            raise NonFinite("target contains non-finite values")
        if self.family == "binomial" and not np.all((y == 0) | (y == 1)):
            raise DataError("binomial target must take values in {0, 1}")
        if self.family == "poisson" and (np.any(y < 0) or np.any(y != np.round(y))):
            raise DataError("poisson target must be non-negative integers")


def _binomial_mean(eta):
    return np.clip(expit(eta), BINOMIAL_CLAMP, 1.0 - BINOMIAL_CLAMP)


def _binomial_dmu(eta):
    mu = expit(eta)
    return mu * (1.0 - mu)


def _poisson_mean(eta):
    return np.maximum(np.exp(np.minimum(eta, 700.0)), POISSON_FLOOR)


GAUSSIAN = FamilySpec(
    "gaussian", "identity", 0,
    mean_fn=lambda eta: np.asarray(eta, dtype=float).copy(),
    mean_derivative=lambda eta: np.ones_like(eta, dtype=float),
    variance_fn=lambda mu: np.ones_like(mu, dtype=float),
    link_fn=lambda mu: np.asarray(mu, dtype=float).copy(),
)
BINOMIAL = FamilySpec(
    "binomial", "logit", 1,
    mean_fn=_binomial_mean,
    mean_derivative=_binomial_dmu,
    variance_fn=lambda mu: mu * (1.0 - mu),
    link_fn=lambda mu: np.log(mu / (1.0 - mu)),
)
POISSON = FamilySpec(
    "poisson", "log", 2,
    mean_fn=_poisson_mean,
    mean_derivative=lambda eta: np.exp(np.minimum(eta, 700.0)),
    variance_fn=lambda mu: mu,
    link_fn=np.log,
)

FAMILIES = {f.family: f for f in (GAUSSIAN, BINOMIAL, POISSON)}
FAMILIES_BY_TAG = {f.tag: f for f in FAMILIES.values()}


def get_family(family) -> FamilySpec:
    if isinstance(family, FamilySpec):
        return family
    try:
        if isinstance(family, (int, np.integer)):
            return FAMILIES_BY_TAG[int(family)]
        return FAMILIES[str(family).lower()]
    except KeyError:
        raise ValueError(f"unknown family {family!r}; choose from {sorted(FAMILIES)}") from None


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DesignBlock:
    """One party's feature matrix plus the transform that produced it."""

    values: np.ndarray
    column_names: tuple
    centered: bool = False
    column_means: Optional[np.ndarray] = None
    column_scales: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise ShapeMismatch("design block must be a 2-d matrix")
        n, p = values.shape
        if n < 2 or p < 1:
            raise ShapeMismatch(f"design block needs >= 2 rows and >= 1 column, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NonFinite("design block contains non-finite entries")
        names = tuple(str(c) for c in self.column_names)
        if len(names) != p:
            raise ShapeMismatch(f"{len(names)} column names for {p} columns")
        if len(set(names)) != p:
            raise DataError("column names must be unique within a block")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_names", names)
        if self.column_means is None:
            object.__setattr__(self, "column_means", np.zeros(p))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_array(cls, values, column_names=None, prefix="x"):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if column_names is None:
            column_names = [f"{prefix}{j}" for j in range(values.shape[1])]
        return cls(values, tuple(column_names))


@dataclass(frozen=True)
class TargetVector:
    values: np.ndarray
    family_tag: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        fam = get_family(self.family_tag)
        fam.validate_target(values)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "family_tag", fam.family)

    def __len__(self):
        return self.values.shape[0]


def make_target(values, family, center=True) -> TargetVector:
    """Build a target; Gaussian targets are centered unless ``center=False``."""
    fam = get_family(family)
    y = np.asarray(values, dtype=float).ravel()
    if fam.is_gaussian and center:
        fam.validate_target(y)
        y = y - y.mean()
    return TargetVector(y, fam.family)


@dataclass(frozen=True)
class WorkingSet:
    eta: np.ndarray
    mu: np.ndarray
    weights: np.ndarray
    working_response: np.ndarray


@dataclass
class FullFit:
    coefficients: np.ndarray
    standard_errors: np.ndarray
    sigma2: float
    iterations: int
    converged: bool
    column_names: tuple = ()
    fitted_eta: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def center_block(raw, standardize=False, column_names=None) -> DesignBlock:
    """Center (and optionally standardize) the columns of ``raw``.

    Constant columns are rejected when standardizing.
    """
    X = np.asarray(raw, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 1:
        raise ShapeMismatch(f"need >= 2 rows and >= 1 column, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NonFinite("input contains non-finite entries")
    if column_names is None:
        column_names = [f"x{j}" for j in range(X.shape[1])]
    means = X.mean(axis=0)
    Xc = X - means
    scales = None
    if standardize:
        scales = Xc.std(axis=0, ddof=1)
        bad = np.flatnonzero(scales <= 1e-12 * np.maximum(1.0, np.abs(means)))
        if bad.size:
            name = list(column_names)[bad[0]]
            raise ConstantColumn(f"column {name!r} has zero variance", column=name)
        Xc = Xc / scales
    return DesignBlock(Xc, tuple(column_names), centered=True,
                       column_means=means, column_scales=scales)


def add_intercept(block: DesignBlock) -> DesignBlock:
    """Prepend a column of ones (owned by whoever holds this block)."""
    if INTERCEPT in block.column_names:
        return block
    values = np.column_stack([np.ones(block.n_rows), block.values])
    means = np.concatenate([[0.0], block.column_means])
    scales = None
    if block.column_scales is not None:
        scales = np.concatenate([[1.0], block.column_scales])
    return DesignBlock(values, (INTERCEPT,) + block.column_names, centered=False,
                       column_means=means, column_scales=scales)


def marginal_coefficient(x, r, w=None) -> float:
    """Weighted marginal regression coefficient <x, r>_w / <x, x>_w."""
    x = np.asarray(x, dtype=float)
    r = np.asarray(r, dtype=float)
    w = np.ones_like(x) if w is None else np.asarray(w, dtype=float)
    if not (x.shape == r.shape == w.shape):
        raise ShapeMismatch("x, r and w must have equal length")
    ss = np.dot(w * x, x)
    if ss < DEGENERATE_SS:
        raise DegenerateColumn(f"weighted sum of squares {ss:.3g} is degenerate")
    return float(np.dot(w * x, r) / ss)


def _qr_factor(X, sqrt_w=None, label=None):
    A = X if sqrt_w is None else X * sqrt_w[:, None]
    Q, R = np.linalg.qr(A, mode="reduced")
    d = np.abs(np.diag(R))
    if d.size == 0 or d.min() <= 1e-10 * max(d.max(), 1e-300):
        where = f" in block {label!r}" if label is not None else ""
        raise SingularGram(f"collinear columns{where}; drop or merge features", block=label)
    return Q, R


def weighted_ls_solve(block, r, w=None) -> np.ndarray:
    """Minimise the weighted residual sum of squares of ``r`` on ``block``.

    Solved through a QR factorization of the row-weighted design.
    """
    X = block.values if isinstance(block, DesignBlock) else np.asarray(block, dtype=float)
    r = np.asarray(r, dtype=float)
    if X.shape[1] > X.shape[0]:
        raise SingularGram("more columns than rows")
    if w is None:
        Q, R = _qr_factor(X)
        return solve_triangular(R, Q.T @ r)
    sw = np.sqrt(np.asarray(w, dtype=float))
    Q, R = _qr_factor(X, sw)
    return solve_triangular(R, Q.T @ (sw * r))


class BlockSolver:
    """Weighted LS solver for one block that caches the unit-weight factor.

    Used by both the local descent and the networked party so that the two
    paths share arithmetic exactly.
    """

    def __init__(self, block: DesignBlock, label=None):
        self.block = block
        self.label = label
        self._unit = None

    def solve(self, r, w=None):
        X = self.block.values
        if w is None:
            if self._unit is None:
                self._unit = _qr_factor(X, label=self.label)
            Q, R = self._unit
            return solve_triangular(R, Q.T @ r)
        sw = np.sqrt(w)
        Q, R = _qr_factor(X, sw, label=self.label)
        return solve_triangular(R, Q.T @ (sw * r))


def update_working_set(fam, y, eta) -> WorkingSet:
    """IRLS working quantities at the linear predictor ``eta``."""
    fam = get_family(fam)
    yv = y.values if isinstance(y, TargetVector) else np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise NonFinite("linear predictor contains non-finite values")
    if fam.is_gaussian:
        return WorkingSet(eta, eta.copy(), np.ones_like(eta), yv.copy())
    mu = fam.mean_fn(eta)
    if fam.family == "binomial":
        dmu = mu * (1.0 - mu)  # clamped mu keeps this away from 0
    else:
        dmu = mu
    weights = dmu * dmu / fam.variance_fn(mu)
    z = eta + (yv - mu) / dmu
    return WorkingSet(eta, mu, weights, z)


def block_update(solver: BlockSolver, fam, y, offset, own_pred):
    """One block step: refresh IRLS quantities from the combined predictor,
    regress the block's working residual and return ``(beta, weights)``.

    ``offset`` is the summed prediction of every other block.
    """
    fam = get_family(fam)
    if fam.is_gaussian:
        yv = y.values if isinstance(y, TargetVector) else y
        return solver.solve(yv - offset), None
    ws = update_working_set(fam, y, own_pred + offset)
    return solver.solve(ws.working_response - offset, ws.weights), ws.weights


def _as_blocks(blocks) -> list:
    if isinstance(blocks, DesignBlock):
        return [blocks]
    return list(blocks)


def fit_full_glm(blocks, y, fam, tol=1e-8, max_iter=100) -> FullFit:
    """Maximum-likelihood GLM on the column-concatenated blocks.

    Gaussian fits are solved in closed form with sigma2 = RSS / (N - P);
    other families run IRLS and report standard errors with dispersion 1.
    """
    fam = get_family(fam)
    blocks = _as_blocks(blocks)
    n = {b.n_rows for b in blocks}
    if len(n) != 1:
        raise ShapeMismatch("blocks do not share a row count")
    X = np.hstack([b.values for b in blocks])
    names = tuple(c for b in blocks for c in b.column_names)
    N, P = X.shape
    yv = y.values if isinstance(y, TargetVector) else np.asarray(y, dtype=float)
    if yv.shape[0] != N:
        raise ShapeMismatch(f"target length {yv.shape[0]} != {N} rows")
    if P >= N:
        raise SingularGram(f"P={P} must be below N={N}")

    if fam.is_gaussian:
        Q, R = _qr_factor(X)
        beta = solve_triangular(R, Q.T @ yv)
        eta = X @ beta
        resid = yv - eta
        sigma2 = float(resid @ resid / (N - P))
        Rinv = solve_triangular(R, np.eye(P))
        se = np.sqrt(sigma2 * np.sum(Rinv * Rinv, axis=1))
        return FullFit(beta, se, sigma2, 1, True, names, eta)

    # R-style starting values keep the first working response finite
    if fam.family == "binomial":
        mu0 = (yv + 0.5) / 2.0
    else:
        mu0 = yv + 0.1
    eta = fam.link_fn(mu0)
    beta = np.zeros(P)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        ws = update_working_set(fam, yv, eta)
        new = weighted_ls_solve(X, ws.working_response, ws.weights)
        delta = np.max(np.abs(new - beta))
        beta = new
        eta = X @ beta
        if delta < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"IRLS did not converge in {max_iter} iterations", ConvergenceWarning)
    w = update_working_set(fam, yv, eta).weights
    _, R = _qr_factor(X, np.sqrt(w))
    Rinv = solve_triangular(R, np.eye(P))
    se = np.sqrt(np.sum(Rinv * Rinv, axis=1))
    return FullFit(beta, se, 1.0, it, converged, names, eta)


def deviance(fam, y, eta) -> float:
    fam = get_family(fam)
    yv = y.values if isinstance(y, TargetVector) else np.asarray(y, dtype=float)
    mu = fam.mean_fn(np.asarray(eta, dtype=float))
    if fam.is_gaussian:
        return float(np.sum((yv - mu) ** 2))
    if fam.family == "binomial":
        return float(-2.0 * np.sum(yv * np.log(mu) + (1 - yv) * np.log1p(-mu)))
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(yv > 0, yv * np.log(yv / mu), 0.0)
    return float(2.0 * np.sum(term - (yv - mu)))


def concat_names(blocks: Sequence[DesignBlock]) -> tuple:
    return tuple(c for b in blocks for c in b.column_names)
