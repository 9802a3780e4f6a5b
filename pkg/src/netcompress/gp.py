"""Gaussian-process regression with a fixed Matérn-5/2 kernel."""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from netcompress.exceptions import NumericError

SQRT5 = np.sqrt(5.0)


def matern52(r, length_scale: float = 1.0, signal_variance: float = 1.0):
    """Matérn covariance with smoothness 5/2 as a function of distance ``r``."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0) or length_scale <= 0:
        raise ValueError("need r >= 0 and length_scale > 0")
    z = SQRT5 * r / length_scale
    return signal_variance * (1.0 + z + z * z / 3.0) * np.exp(-z)


def matern52_gram(A, B, length_scale=1.0, signal_variance=1.0):
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    d2 = np.sum(A ** 2, 1)[:, None] + np.sum(B ** 2, 1)[None, :] - 2.0 * A @ B.T
    return matern52(np.sqrt(np.maximum(d2, 0.0)), length_scale, signal_variance)


def _as_inputs(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim <= 1:
        X = X.reshape(-1, 1)
    return check_array(X, dtype=np.float64)


class GPRegressor(RegressorMixin, BaseEstimator):
    """GP regressor with z-scored targets and no hyperparameter learning.

    Parameters
    ----------
    length_scale, signal_variance : float
        Matérn-5/2 kernel constants.
    alpha : float
        Observation-noise variance added to the Gram diagonal (in normalized
        target units).
    jitter : float
        Extra diagonal term for numerical stability. Escalated x10 up to
        three times if the Cholesky factorization fails.
    normalize_y : bool
        Fit on z-scored targets and de-normalize predictions.
    """

    def __init__(self, length_scale=1.0, signal_variance=1.0, alpha=0.1, jitter=1e-6,
                 normalize_y=True):
        self.length_scale = length_scale
        self.signal_variance = signal_variance
        self.alpha = alpha
        self.jitter = jitter
        self.normalize_y = normalize_y

    def _kernel(self, A, B):
        return matern52_gram(A, B, self.length_scale, self.signal_variance)

    def fit(self, X, y):
        X = _as_inputs(X)
        y = column_or_1d(y).astype(np.float64)
        if len(y) != len(X) or len(y) == 0:
            raise ValueError("X and y must be non-empty and of equal length")
        if self.normalize_y:
            self.y_mean_ = float(np.mean(y))
            std = float(np.std(y))
            # constant targets leave round-off in std; treat those as exactly constant
            self.y_std_ = std if std > 1e-12 * max(1.0, abs(self.y_mean_)) else 1.0
        else:
            self.y_mean_, self.y_std_ = 0.0, 1.0
        y_norm = (y - self.y_mean_) / self.y_std_
        K = self._kernel(X, X)
        jitter = self.jitter
        for attempt in range(4):
            try:
                L = np.linalg.cholesky(K + (self.alpha + jitter) * np.eye(len(X)))
                break
            except np.linalg.LinAlgError:
                if attempt == 3:
                    raise NumericError(f"Gram matrix not positive definite with jitter {jitter:g}")
                jitter *= 10.0
        self.X_train_ = X
        self.y_train_ = y
        self.L_ = L
        self.jitter_ = jitter
        self.dual_coef_ = cho_solve((L, True), y_norm)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "L_")
        X = _as_inputs(X)
        Ks = self._kernel(X, self.X_train_)
        mean = Ks @ self.dual_coef_ * self.y_std_ + self.y_mean_
        if not return_std:
            return mean
        v = solve_triangular(self.L_, Ks.T, lower=True)
        var = self.signal_variance - np.sum(v * v, axis=0)
        std = np.sqrt(np.maximum(var, 0.0)) * self.y_std_
        return mean, std

    def prior_std(self) -> float:
        check_is_fitted(self, "L_")
        return float(np.sqrt(self.signal_variance) * self.y_std_)
