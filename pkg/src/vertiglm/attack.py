"""What a curious partner can rebuild from what it received.

A semi-honest partner sees every prediction ``Y = X B`` but only the
coefficient columns the victim chose to disclose.  With ``R`` of the ``P``
columns of ``B`` known, the minimum-norm reconstruction ``Y B^+`` recovers
on average a fraction ``R / P`` of the variance of uncorrelated features.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .exceptions import NoCoefficients, ShapeMismatch


@dataclass
class AdversaryView:
    received_predictions: np.ndarray
    known_coefficients: Optional[np.ndarray] = None
    known_indices: Optional[Sequence[int]] = None

    def __post_init__(self):
        Y = np.asarray(self.received_predictions, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        self.received_predictions = Y
        if self.known_coefficients is not None:
            B = np.asarray(self.known_coefficients, dtype=float)
            if B.ndim == 1:
                B = B[:, None]
            self.known_coefficients = B
            r_known = B.shape[1]
            if r_known > Y.shape[1]:
                raise ShapeMismatch("more coefficient columns than predictions")
            if self.known_indices is None:
                # protocol default: the victim discloses its final estimates
                self.known_indices = list(range(Y.shape[1] - r_known, Y.shape[1]))
            if len(self.known_indices) != r_known:
                raise ShapeMismatch("known_indices must match the coefficient columns")

    @property
    def r_known(self) -> int:
        return 0 if self.known_coefficients is None else self.known_coefficients.shape[1]


@dataclass
class ReconstructionReport:
    X_hat: np.ndarray
    mse: float
    revealed_variance_fraction: float
    expected_mse: float


def reconstruct(view: AdversaryView, feature_cov=None) -> np.ndarray:
    """Minimum-norm reconstruction ``Y_known B_known^+``.

    With ``feature_cov`` (the attacker's prior covariance of the victim's
    features) the conditional-mean estimate ``Y (B' S B)^+ B' S`` is used
    instead; it reduces to the plain one when ``S`` is the identity.
    """
    if view.r_known == 0:
        raise NoCoefficients("without disclosed coefficients the reconstruction is underidentified")
    Y = view.received_predictions[:, list(view.known_indices)]
    B = view.known_coefficients
    if feature_cov is None:
        return Y @ np.linalg.pinv(B)
    S = np.asarray(feature_cov, dtype=float)
    return Y @ np.linalg.pinv(B.T @ S @ B) @ B.T @ S


def expected_mse(sigma2_a, r, p) -> float:
    if p < 1 or r < 0:
        raise ValueError("need p >= 1 and r >= 0")
    if r > p:
        raise ValueError(f"r={r} cannot exceed p={p}")
    return float(sigma2_a) * (1.0 - r / p)


def reconstruction_mse(X, X_hat) -> float:
    X = np.asarray(getattr(X, "values", X), dtype=float)
    X_hat = np.asarray(X_hat, dtype=float)
    if X.shape != X_hat.shape:
        raise ShapeMismatch(f"shapes {X.shape} and {X_hat.shape} differ")
    return float(np.mean((X - X_hat) ** 2))


def revealed_fraction(true_block, x_hat) -> float:
    """``1 - MSE / total variance``, clamped to [0, 1]."""
    X = np.asarray(getattr(true_block, "values", true_block), dtype=float)
    total = float(np.mean((X - X.mean(axis=0)) ** 2))
    if total <= 0:
        raise ValueError("true block has no variance")
    frac = 1.0 - reconstruction_mse(X, x_hat) / total
    return float(min(1.0, max(0.0, frac)))


def add_prediction_noise(predictions, noise_sd, rng=None) -> np.ndarray:
    """Return ``predictions`` plus elementwise N(0, noise_sd^2) noise."""
    predictions = np.asarray(predictions, dtype=float)
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    if noise_sd == 0:
        return predictions
    rng = np.random.default_rng() if rng is None else rng
    return predictions + rng.normal(0.0, noise_sd, size=predictions.shape)


@dataclass(frozen=True)
class Mitigation:
    """Disclosure limits a party can impose on its own outgoing data.

    ``iteration_cap`` stops the descent early, which shrinks estimates
    towards the marginal ones.
    """

    noise_sd: float = 0.0
    iteration_cap: Optional[int] = None

    def __post_init__(self):
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if self.iteration_cap is not None and self.iteration_cap < 1:
            raise ValueError("iteration_cap must be >= 1")

    def configure(self, cfg):
        """Apply to a :class:`~vertiglm.protocol.SessionConfig`."""
        kw = {"noise_sd": self.noise_sd}
        if self.iteration_cap is not None:
            kw["max_iterations"] = min(cfg.max_iterations, self.iteration_cap)
        return replace(cfg, **kw)


@dataclass(frozen=True)
class MitigatedOutput:
    predictions: np.ndarray
    max_iterations: Optional[int]


def apply_mitigation(predictions, mitigation: Mitigation, rng=None) -> MitigatedOutput:
    return MitigatedOutput(add_prediction_noise(predictions, mitigation.noise_sd, rng),
                           mitigation.iteration_cap)


def equicorrelated(p, rho) -> np.ndarray:
    return np.full((p, p), rho) + (1.0 - rho) * np.eye(p)


def simulate_reconstruction(p, r_known, sigma2=2.0, n=200, rng=None, correlation=0.0,
                            covariance_aware=False):
    """One replication: random features and coefficients, then attack."""
    rng = np.random.default_rng() if rng is None else rng
    cov = sigma2 * equicorrelated(p, correlation)
    X = rng.multivariate_normal(np.zeros(p), cov, size=n) if correlation else \
        rng.normal(0.0, np.sqrt(sigma2), size=(n, p))
    B = rng.standard_normal((p, max(r_known, 1)))
    view = AdversaryView(X @ B, B[:, :r_known] if r_known else None)
    if r_known == 0:
        X_hat = np.zeros_like(X)
    else:
        X_hat = reconstruct(view, cov if covariance_aware else None)
    mse = reconstruction_mse(X, X_hat)
    return ReconstructionReport(X_hat, mse, revealed_fraction(X, X_hat),
                                expected_mse(sigma2, r_known, p))


def mse_study(p_values=(4, 20), r_values=None, sigma2=2.0, n=200, reps=200, seed=0,
              correlation=0.0):
    """Monte-Carlo grid; one row per (p, r, replication).

    Every replication draws from its own stream derived from ``seed``.
    """
    rows = []
    root = np.random.SeedSequence(seed)
    for p in p_values:
        rs = r_values or sorted({1, max(1, p // 4), max(1, p // 2), p})
        for r in rs:
            if r > p:
                continue
            streams = root.spawn(reps)
            for i, ss in enumerate(streams):
                rep = simulate_reconstruction(p, r, sigma2, n, np.random.default_rng(ss), correlation)
                rows.append({"P": p, "R_known": r, "replication": i, "mse": rep.mse,
                             "expected_mse": rep.expected_mse,
                             "revealed_fraction": rep.revealed_variance_fraction})
    return rows


def write_report(rows, path):
    """CSV when ``path`` ends in .csv, JSON lines otherwise."""
    path = str(path)
    if path.endswith(".csv"):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    else:
        with open(path, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
