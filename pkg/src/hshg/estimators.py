"""Estimator-style wrappers (``fit`` / ``transform`` / ``predict``) around the pipeline stages."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import correctors as C
from . import halfspace as H
from . import regularity as R
from . import solver as S
from .fields import CoefficientField, GridSpec


def _check_field(X):
    if not isinstance(X, CoefficientField):
        raise TypeError(f"expected a CoefficientField, got {type(X).__name__}")
    if not all(X.grid.periodic):
        raise ValueError("coefficient field must live on a periodic grid")
    return X


class WholeSpaceCorrector(TransformerMixin, BaseEstimator):
    """Periodic correctors of a coefficient field; ``transform`` returns ``phi``."""

    def __init__(self, tol=S.DEFAULT_TOL, method="amg", radii=None):
        self.tol = tol
        self.method = method
        self.radii = radii

    def fit(self, X, y=None):
        X = _check_field(X)
        self.correctors_ = C.compute_correctors(X, self.tol, self.method, self.radii)
        self.a_hom_ = self.correctors_.a_hom
        self.delta_table_ = self.correctors_.delta_table
        self.grid_ = X.grid
        return self

    def transform(self, X):
        check_is_fitted(self, "correctors_")
        X = _check_field(X)
        if X.grid != self.grid_:
            raise ValueError("field grid differs from the fitted grid")
        return self.correctors_.phi


class HalfSpaceAdapter(TransformerMixin, BaseEstimator):
    """Dyadic half-space adaptation; ``transform`` returns ``phi^H_d`` on the half box."""

    def __init__(self, r0=None, M_max=None, smallness_threshold=0.1, tail_threshold=float("inf"),
                 anchor="boundary-mean", margin=4.0, tol=S.DEFAULT_TOL, method="amg", psi_tol=0.02,
                 check_smallness=True):
        self.r0 = r0
        self.M_max = M_max
        self.smallness_threshold = smallness_threshold
        self.tail_threshold = tail_threshold
        self.anchor = anchor
        self.margin = margin
        self.tol = tol
        self.method = method
        self.psi_tol = psi_tol
        self.check_smallness = check_smallness

    def _config(self):
        return H.AdaptConfig(r0=self.r0, M_max=self.M_max, smallness_threshold=self.smallness_threshold,
                             tail_threshold=self.tail_threshold, margin=self.margin, tol=self.tol,
                             method=self.method, check_smallness=self.check_smallness,
                             psi_tol=self.psi_tol, anchor=self.anchor)

    def fit(self, X, y=None, correctors=None):
        X = _check_field(X)
        if correctors is None:
            correctors = C.compute_correctors(X, self.tol, self.method)
        elif correctors.grid != X.grid:
            raise ValueError("correctors were computed on a different grid")
        self.correctors_ = correctors
        self.result_ = H.induction_driver(X, correctors, self._config())
        self.ledger_ = self.result_.ledger
        self.residuals_ = self.result_.residuals
        return self

    def transform(self, X):
        check_is_fitted(self, "result_")
        X = _check_field(X)
        if X.grid != self.correctors_.grid:
            raise ValueError("field grid differs from the fitted grid")
        return self.result_.phiH_d

    def deltaH(self, radii):
        check_is_fitted(self, "result_")
        return H.deltaH_table(self.result_, self.correctors_, radii)


class TiltExcess(BaseEstimator):
    """Tilt-excess of functions against a fixed ``x_d + phi^H_d``.

    ``fit`` stores ``phi^H_d``; ``transform(u)`` returns the excess at each
    radius and ``predict(u)`` the minimising coefficients ``b_min``.
    """

    def __init__(self, grid=None, radii=(8.0, 16.0, 32.0), alpha=0.5, c_pass=10.0):
        self.grid = grid
        self.radii = radii
        self.alpha = alpha
        self.c_pass = c_pass

    def _check_u(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != self.grid_.shape:
            raise ValueError(f"expected an array of shape {self.grid_.shape}, got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("input contains non-finite values")
        return u

    def fit(self, X, y=None):
        if not isinstance(self.grid, GridSpec):
            raise TypeError("grid must be a GridSpec")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        self.grid_ = self.grid
        self.phiH_d_ = self._check_u(X)
        self.curvature_ = {float(r): R.curvature(self.phiH_d_, self.grid_, r) for r in self.radii}
        return self

    def transform(self, u):
        check_is_fitted(self, "phiH_d_")
        u = self._check_u(u)
        return np.array([R.excess(u, self.phiH_d_, self.grid_, r)[0] for r in self.radii])

    def predict(self, u):
        check_is_fitted(self, "phiH_d_")
        u = self._check_u(u)
        return np.array([R.excess(u, self.phiH_d_, self.grid_, r)[1] for r in self.radii])

    def report(self, u):
        check_is_fitted(self, "phiH_d_")
        return R.excess_report(self._check_u(u), self.phiH_d_, self.grid_, self.radii, self.alpha, self.c_pass)
