"""Single-process coordinate descent.

``cyclic_descent`` updates one coefficient at a time starting from the
marginal estimates; ``block_descent`` updates whole blocks in round-robin
order from zero, which is the arithmetic each networked party runs.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeMismatch, SingularGram
from .glm import (
    BlockSolver,
    ConvergenceWarning,
    DesignBlock,
    FamilySpec,
    GAUSSIAN,
    TargetVector,
    block_update,
    get_family,
    marginal_coefficient,
)


@dataclass(frozen=True)
class DescentConfig:
    tolerance: float = 1e-8
    max_sweeps: int = 10_000
    min_sweeps: int = 1
    family: FamilySpec = GAUSSIAN

    def __post_init__(self):
        object.__setattr__(self, "family", get_family(self.family))
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.min_sweeps > self.max_sweeps:
            raise ValueError("min_sweeps must not exceed max_sweeps")


@dataclass(frozen=True)
class DescentTracePoint:
    sweep_index: int
    coefficients_snapshot: np.ndarray
    max_delta: float


@dataclass
class DescentResult:
    coefficients: list
    trace: list
    converged: bool
    sweeps: int
    block_deltas: list = field(default_factory=list)

    @property
    def coef(self) -> np.ndarray:
        return np.concatenate(self.coefficients)

    def active_sweeps(self, tolerance) -> int:
        """Number of sweeps in which some coefficient moved by >= tolerance."""
        return sum(1 for t in self.trace if t.max_delta >= tolerance)


def _check(blocks, y):
    n = blocks[0].n_rows
    if any(b.n_rows != n for b in blocks):
        raise ShapeMismatch("blocks do not share a row count")
    if len(y) != n:
        raise ShapeMismatch(f"target length {len(y)} != {n} rows")
    if sum(b.n_cols for b in blocks) >= n:
        raise SingularGram("total number of columns must be below N")


def cyclic_descent(block: DesignBlock, y: TargetVector, cfg: DescentConfig):
    """Coordinate-wise descent for the linear model (Gaussian only)."""
    if not cfg.family.is_gaussian:
        raise ValueError("cyclic_descent is implemented for the gaussian family only")
    _check([block], y)
    X = block.values
    yv = y.values
    P = X.shape[1]
    beta = np.array([marginal_coefficient(X[:, p], yv) for p in range(P)])
    ss = np.einsum("ij,ij->j", X, X)
    fitted = X @ beta
    trace = []
    converged = False
    sweep = 0
    for sweep in range(1, cfg.max_sweeps + 1):
        prev = beta.copy()
        for p in range(P):
            xp = X[:, p]
            partial = yv - fitted + xp * beta[p]
            new = np.dot(xp, partial) / ss[p]
            fitted += xp * (new - beta[p])
            beta[p] = new
        delta = float(np.max(np.abs(beta - prev)))
        trace.append(DescentTracePoint(sweep, beta.copy(), delta))
        if delta < cfg.tolerance and sweep >= cfg.min_sweeps:
            converged = True
            break
    if not converged:
        warnings.warn(f"cyclic descent stopped after {cfg.max_sweeps} sweeps", ConvergenceWarning)
    return DescentResult([beta], trace, converged, sweep)


def block_descent(blocks, y: TargetVector, cfg: DescentConfig):
    """Round-robin block descent from zero coefficients.

    Each block update refreshes the IRLS weights and working response from
    the latest combined predictor and regresses the block's working residual.
    Convergence needs every block's change below tolerance in one sweep.
    """
    blocks = [blocks] if isinstance(blocks, DesignBlock) else list(blocks)
    _check(blocks, y)
    fam = cfg.family
    solvers = [BlockSolver(b, label=i) for i, b in enumerate(blocks)]
    betas = [np.zeros(b.n_cols) for b in blocks]
    preds = [np.zeros(b.n_rows) for b in blocks]
    trace, block_deltas = [], []
    converged = False
    sweep = 0
    for sweep in range(1, cfg.max_sweeps + 1):
        deltas = []
        for k, solver in enumerate(solvers):
            offset = _offset(preds, k)
            new, _ = block_update(solver, fam, y, offset, preds[k])
            deltas.append(float(np.max(np.abs(new - betas[k]))))
            betas[k] = new
            preds[k] = blocks[k].values @ new
        block_deltas.append(deltas)
        delta = max(deltas)
        trace.append(DescentTracePoint(sweep, np.concatenate(betas), delta))
        if delta < cfg.tolerance and sweep >= cfg.min_sweeps:
            converged = True
            break
    if not converged:
        warnings.warn(f"block descent stopped after {cfg.max_sweeps} sweeps", ConvergenceWarning)
    return DescentResult(betas, trace, converged, sweep, block_deltas)


def _offset(preds, k):
    others = [p for j, p in enumerate(preds) if j != k]
    if not others:
        return np.zeros_like(preds[k])
    total = others[0]
    for p in others[1:]:
        total = total + p
    return total


def export_trace_csv(trace, path, column_names=None):
    """Write one row per sweep: sweep index, max delta, then coefficients."""
    p = len(trace[0].coefficients_snapshot) if trace else 0
    names = list(column_names) if column_names is not None else [f"b{j}" for j in range(p)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sweep_index", "max_delta", *names])
        for t in trace:
            writer.writerow([t.sweep_index, repr(t.max_delta), *map(repr, t.coefficients_snapshot.tolist())])
