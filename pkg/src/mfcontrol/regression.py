"""Least-squares conditional-expectation estimators.

Two feature maps are used throughout:

* observation features {1, Y(t), Y(t)^2} for conditioning on the observation
  sigma-algebra (policy basis and the maximum-principle conditionals), and
* a degree-2 polynomial basis over (x - mean, Y) for the backward LSMC
  regressions, which is exact for the linear-quadratic models.

All solves carry a small ridge term for numerical safety.
"""

from __future__ import annotations

import numpy as np

from .errors import EstimatorError

__all__ = ["y_features", "state_features", "fit_ls", "ConditionalEstimator"]


def y_features(y):
    """Feature matrix {1, Y, Y^2}, shape (n, 3)."""
    y = np.asarray(y, dtype=float)
    return np.column_stack([np.ones_like(y), y, y * y])


def state_features(x, y, mean):
    """Degree-2 basis over (x - mean, Y), shape (n, 6)."""
    xc = np.asarray(x, dtype=float) - mean
    y = np.asarray(y, dtype=float)
    return np.column_stack([np.ones_like(xc), xc, y, xc * xc, y * y, xc * y])


def fit_ls(X, target, ridge=1e-8):
    """Ridge-damped least squares; returns (coefficients, fitted values)."""
    X = np.asarray(X, dtype=float)
    target = np.asarray(target, dtype=float)
    if not np.all(np.isfinite(target)):
        raise EstimatorError("non-finite regression target")
    A = X.T @ X + ridge * np.eye(X.shape[1])
    try:
        coef = np.linalg.solve(A, X.T @ target)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - ridge makes this rare
        raise EstimatorError(f"singular regression: {exc}") from None
    return coef, X @ coef


class ConditionalEstimator:
    """Projection on {1, Y(t_i), Y(t_i)^2} per grid time.

    fit() regresses a pathwise target on the observation features at step i
    and returns the fitted conditional-expectation values per path.
    """

    def __init__(self, ridge=1e-8):
        self.ridge = ridge

    def fit(self, y_values, target):
        coef, fitted = fit_ls(y_features(y_values), target, self.ridge)
        return coef, fitted

    def conditional_ratio(self, y_values, numerator, weight):
        """Fitted E[num | Y] / E[weight | Y]; the reweighted conditional mean.

        The denominator projection is floored away from 0 at 5% of its mean
        to keep the ratio stable in the regression tails.
        """
        X = y_features(y_values)
        _, num_fit = fit_ls(X, numerator, self.ridge)
        _, den_fit = fit_ls(X, weight, self.ridge)
        mean_w = float(np.mean(weight))
        floor = 0.05 * abs(mean_w) if mean_w != 0 else 1e-12
        den_fit = np.where(np.abs(den_fit) < floor, np.sign(den_fit + (den_fit == 0)) * floor,
                           den_fit)
        return num_fit / den_fit

    def residual_stats(self, y_values, target):
        """(rms of fitted values, its standard error) for a mean-zero check.

        The rms of the fitted conditional expectation measures how far the
        target is from having zero conditional mean; the SE combines the OLS
        coefficient covariance through the feature design.
        """
        X = y_features(y_values)
        n = X.shape[0]
        coef, fitted = fit_ls(X, target, self.ridge)
        resid = target - fitted
        sigma2 = float(resid @ resid) / max(n - X.shape[1], 1)
        XtX = X.T @ X + self.ridge * np.eye(X.shape[1])
        cov = sigma2 * np.linalg.inv(XtX)
        # per-path SE of fitted value, averaged in quadrature
        per_path_var = np.einsum("ij,jk,ik->i", X, cov, X)
        rms = float(np.sqrt(np.mean(fitted ** 2)))
        se = float(np.sqrt(np.mean(per_path_var)))
        return rms, se
