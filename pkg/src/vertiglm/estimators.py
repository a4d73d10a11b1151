"""scikit-learn style wrappers.

``VerticalGLM`` splits the columns of ``X`` between two simulated parties
and fits over the in-process channel; ``FullDataGLM`` is the pooled fit it
should agree with.  Both center (and optionally standardize) features the
same way, so ``coef_`` refers to the transformed columns.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .glm import INTERCEPT, add_intercept, center_block, fit_full_glm, get_family, make_target
from .protocol import SessionConfig
from .simulation import run_loopback, split_blocks


class BlockCenterer(TransformerMixin, BaseEstimator):
    """Column centering with optional scaling to unit (ddof=1) variance."""

    def __init__(self, standardize=False):
        self.standardize = standardize

    def fit(self, X, y=None):
        X = check_array(X)
        block = center_block(X, self.standardize)
        self.mean_ = block.column_means
        self.scale_ = block.column_scales if block.column_scales is not None else np.ones(X.shape[1])
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        return check_array(X) * self.scale_ + self.mean_


class _GLMBase(RegressorMixin, BaseEstimator):
    def _prepare(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        fam = get_family(self.family)
        self.centerer_ = BlockCenterer(self.standardize).fit(X)
        names = [f"x{j}" for j in range(X.shape[1])]
        block = center_block(X, self.standardize, names)
        target = make_target(y, fam)
        self.n_features_in_ = X.shape[1]
        self._y_offset = float(np.mean(y)) if fam.is_gaussian else 0.0
        return fam, block, target

    def _store(self, names, coef, se):
        names = list(names)
        coef = np.asarray(coef, dtype=float)
        se = np.asarray(se, dtype=float)
        order = [names.index(f"x{j}") for j in range(self.n_features_in_)]
        self.coef_ = coef[order]
        self.bse_ = se[order]
        if INTERCEPT in names:
            k = names.index(INTERCEPT)
            self.intercept_, self.intercept_bse_ = float(coef[k]), float(se[k])
        else:
            self.intercept_, self.intercept_bse_ = self._y_offset, float("nan")

    def decision_function(self, X):
        """Linear predictor on new data."""
        check_is_fitted(self, "coef_")
        return self.centerer_.transform(X) @ self.coef_ + self.intercept_

    def predict(self, X):
        """Mean response on new data."""
        return get_family(self.family).mean_fn(self.decision_function(X))


class VerticalGLM(_GLMBase):
    """GLM fitted by the two-party protocol over an in-process channel.

    Parameters
    ----------
    family : {"gaussian", "binomial", "poisson"}
    split : int or sequence of int, optional
        Columns held by the first party (an int ``k`` means the first ``k``).
        Defaults to the first half.
    standardize : bool
        Scale features to unit variance after centering.
    tol, max_iter, min_iterations, noise_sd :
        Passed to :class:`~vertiglm.protocol.SessionConfig`.
    random_state : int, optional
        Seeds the parties' private randomness.
    """

    def __init__(self, family="gaussian", split=None, standardize=False, tol=1e-8,
                 max_iter=10_000, min_iterations=None, noise_sd=0.0, random_state=None):
        self.family = family
        self.split = split
        self.standardize = standardize
        self.tol = tol
        self.max_iter = max_iter
        self.min_iterations = min_iterations
        self.noise_sd = noise_sd
        self.random_state = random_state

    def fit(self, X, y):
        fam, block, target = self._prepare(X, y)
        p = block.n_cols
        if p < 2:
            raise ValueError("VerticalGLM needs at least two features to split")
        if self.split is None:
            first = range(p // 2)
        elif np.isscalar(self.split):
            first = range(int(self.split))
        else:
            first = [int(j) for j in self.split]
        a, b = split_blocks(block, first, fam)
        cfg = SessionConfig(family=fam, tolerance=self.tol, max_iterations=self.max_iter,
                            min_iterations=self.min_iterations, noise_sd=self.noise_sd,
                            seed=self.random_state)
        (ra, _), (rb, _) = run_loopback(a, b, target, cfg)
        self.results_ = (ra, rb)
        self._store(ra.column_names + rb.column_names,
                    np.concatenate([ra.local_coefficients, rb.local_coefficients]),
                    np.concatenate([ra.local_standard_errors, rb.local_standard_errors]))
        self.n_iter_ = ra.iterations_used
        self.converged_ = ra.converged and rb.converged
        return self


class FullDataGLM(_GLMBase):
    """Pooled IRLS fit on all columns; the reference for :class:`VerticalGLM`."""

    def __init__(self, family="gaussian", standardize=False, tol=1e-8, max_iter=100):
        self.family = family
        self.standardize = standardize
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        fam, block, target = self._prepare(X, y)
        blocks = [block if fam.is_gaussian else add_intercept(block)]
        fit = fit_full_glm(blocks, target, fam, tol=self.tol, max_iter=self.max_iter)
        self.fit_ = fit
        self._store(fit.column_names, fit.coefficients, fit.standard_errors)
        self.n_iter_ = fit.iterations
        self.converged_ = fit.converged
        return self
