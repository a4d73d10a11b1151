"""Standard errors for one party's coefficients from the session trace.

The partner's design enters a party's covariance only through its column
space.  Every prediction the partner sends is ``X_partner @ b`` for some
``b``, so an orthonormal basis ``V`` of the received predictions stands in
for ``X_partner`` in ``Z = [X_own, V]``; the own-coefficient block of
``(Z' W Z)^-1`` then equals the full-data one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import (
    DfExhausted,
    RankAmbiguous,
    RankDeficientTrace,
    ShapeMismatch,
    SingularGram,
)
from .glm import DesignBlock, TargetVector, get_family, update_working_set

RANK_RTOL = 1e-8
# singular values in this band (relative to the largest) are neither
# clearly signal nor clearly rounding noise
AMBIGUOUS_BAND = (1e-11, 1e-5)
PINV_RCOND = 1e-10
MAX_HAT_ROWS = 20_000


@dataclass
class IterationTrace:
    """Columnwise record of one party's view of a session.

    ``received_residual_inputs[:, r]`` is the working residual the partner
    regressed to produce ``received_predictions[:, r]``.  ``own_coefficients``
    never leaves the party; it is kept for attack studies.
    """

    sent_predictions: np.ndarray
    received_residual_inputs: np.ndarray
    received_predictions: np.ndarray
    weights_final: np.ndarray
    descent_rounds: int = 0
    own_coefficients: Optional[np.ndarray] = None

    def __post_init__(self):
        shapes = {self.received_residual_inputs.shape, self.received_predictions.shape}
        if len(shapes) != 1:
            raise ShapeMismatch(f"trace matrices disagree in shape: {shapes}")

    @property
    def n_rounds(self) -> int:
        return self.received_predictions.shape[1]

    def save(self, path) -> None:
        arrays = {k: np.asarray(v) for k, v in self.__dict__.items() if v is not None}
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path) -> "IterationTrace":
        with np.load(path) as data:
            kw = {k: data[k] for k in data.files}
        kw["descent_rounds"] = int(kw.get("descent_rounds", 0))
        return cls(**kw)


@dataclass
class SubstituteBlock:
    V: np.ndarray
    estimated_partner_rank: int
    spectrum: np.ndarray


def _rank_from_spectrum(s):
    if s.size == 0 or s[0] <= 0:
        raise RankDeficientTrace("trace carries no information about the partner")
    rel = s / s[0]
    lo, hi = AMBIGUOUS_BAND
    if np.any((rel > lo) & (rel < hi)):
        raise RankAmbiguous(
            "no clear gap in the spectrum; the trace is too short or too noisy "
            "to pin down the partner's column space")
    return int(np.sum(rel > RANK_RTOL))


def estimate_hat(trace: IterationTrace, max_rows=MAX_HAT_ROWS) -> np.ndarray:
    """Minimum-norm estimate of the partner's projection, ``Y E^+``.

    Materialises an N x N matrix; refused above ``max_rows`` rows.
    """
    E = np.asarray(trace.received_residual_inputs, dtype=float)
    Y = np.asarray(trace.received_predictions, dtype=float)
    N, R = E.shape
    if N > max_rows:
        raise MemoryError(f"N={N} exceeds the {max_rows}-row cap for a dense hat matrix")
    if R < 2:
        raise RankDeficientTrace(f"need at least 2 trace columns, got {R}")
    U, s, Vt = np.linalg.svd(E, full_matrices=False)
    keep = s > PINV_RCOND * s[0] if s.size and s[0] > 0 else np.zeros(0, bool)
    if keep.sum() < 2:
        raise RankDeficientTrace(
            f"residual inputs have numerical rank {int(keep.sum())}; extra rounds are needed")
    E_pinv = (Vt[keep].T / s[keep]) @ U[:, keep].T
    return Y @ E_pinv


def extract_substitute(H) -> SubstituteBlock:
    """Orthonormal basis of the range of a hat-matrix estimate.

    For an exact projection this is the set of eigenvectors with eigenvalue
    one; for a finite-trace estimate it is the span of what the partner's
    projection was observed to produce.
    """
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ShapeMismatch("hat matrix estimate must be square")
    U, s, _ = np.linalg.svd(H)
    rank = _rank_from_spectrum(s)
    return SubstituteBlock(U[:, :rank], rank, s)


def substitute_from_trace(trace: IterationTrace) -> SubstituteBlock:
    """Substitute block straight from the received predictions.

    Same span as ``extract_substitute(estimate_hat(trace))`` whenever the
    residual inputs have full column rank, without the N x N intermediate.
    """
    Y = np.asarray(trace.received_predictions, dtype=float)
    norms = np.linalg.norm(Y, axis=0)
    Y = Y[:, norms > 0] / norms[norms > 0]
    if Y.shape[1] == 0:
        raise RankDeficientTrace("no non-zero predictions were received")
    U, s, _ = np.linalg.svd(Y, full_matrices=False)
    rank = _rank_from_spectrum(s)
    return SubstituteBlock(U[:, :rank], rank, s)


def augmented_covariance(own: DesignBlock, sub: SubstituteBlock, y: TargetVector, final_eta, fam):
    """Standard errors of the own coefficients from ``Z = [X_own, V]``.

    Returns ``(standard_errors, sigma2)``.  Gaussian fits estimate sigma2
    from the combined residual with ``N - P_own - rank(V)`` degrees of
    freedom; other families use the final IRLS weights and dispersion 1.
    """
    fam = get_family(fam)
    X = own.values
    N, p_own = X.shape
    if sub.V.shape[0] != N:
        raise ShapeMismatch("substitute block and design block disagree in rows")
    df = N - p_own - sub.estimated_partner_rank
    if df <= 0:
        raise DfExhausted(f"{p_own} + {sub.estimated_partner_rank} parameters leave no residual degrees of freedom")
    Z = np.hstack([X, sub.V])
    eta = np.asarray(final_eta, dtype=float)
    if fam.is_gaussian:
        resid = y.values - eta
        sigma2 = float(resid @ resid / df)
        A = Z
    else:
        sigma2 = 1.0
        A = Z * np.sqrt(update_working_set(fam, y, eta).weights)[:, None]
    _, R = np.linalg.qr(A)
    d = np.abs(np.diag(R))
    if d.min() <= 1e-10 * d.max():
        raise SingularGram("own block overlaps the partner's column space")
    Rinv = solve_triangular(R, np.eye(R.shape[0]))
    var = sigma2 * np.sum(Rinv[:p_own] ** 2, axis=1)
    return np.sqrt(var), sigma2


def recover_standard_errors(own: DesignBlock, trace: IterationTrace, y: TargetVector, final_eta,
                            fam, method="range"):
    """Full pipeline; ``method="hat"`` goes through the dense hat estimate."""
    if method == "hat":
        sub = extract_substitute(estimate_hat(trace))
    elif method == "range":
        sub = substitute_from_trace(trace)
    else:
        raise ValueError(f"unknown method {method!r}")
    se, sigma2 = augmented_covariance(own, sub, y, final_eta, fam)
    return se, sigma2, sub
