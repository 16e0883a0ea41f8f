"""Penalized cubic smoothing spline with generalized cross-validation."""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from mgcp_cox.errors import ValidationError


def _knot_vector(x):
    return np.concatenate([[x[0]] * 4, x[1:-1], [x[-1]] * 4])


def _roughness_penalty(knots, n_basis):
    # B'' is piecewise linear, so two Gauss points per knot interval are exact.
    gx, gw = np.polynomial.legendre.leggauss(2)
    inner = np.unique(knots)
    lo, hi = inner[:-1], inner[1:]
    half = 0.5 * (hi - lo)
    pts = (0.5 * (hi + lo))[:, None] + half[:, None] * gx[None, :]
    wts = half[:, None] * gw[None, :]
    second = BSpline(knots, np.eye(n_basis), 3).derivative(2)(pts.ravel())
    return second.T @ (wts.ravel()[:, None] * second)


@dataclass
class SmoothingSpline:
    """Minimiser of ``sum (y - g(x))^2 + lam * int g''(x)^2 dx``.

    The penalty is chosen by GCV over ``n_lambda`` log-spaced values. Outside
    the data range the spline continues linearly, as a natural spline does.
    """

    n_lambda: int = 20
    log10_range: tuple = (-8.0, 4.0)
    knots: np.ndarray = field(default=None, repr=False)
    coefficients: np.ndarray = field(default=None, repr=False)
    lam: float = None
    gcv_scores: np.ndarray = field(default=None, repr=False)

    def fit(self, x, y, lam=None):
        """Fit to ``(x, y)``; ``lam`` fixes the penalty instead of the GCV search."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        order = np.argsort(x, kind="stable")
        x, y = x[order], y[order]
        if np.any(np.diff(x) <= 0):
            raise ValidationError("smoothing spline abscissae must be distinct")
        if x.size < 3:
            raise ValidationError("smoothing spline needs at least 3 points")
        knots = _knot_vector(x)
        n_basis = knots.size - 4
        B = BSpline.design_matrix(x, knots, 3).toarray()
        Omega = _roughness_penalty(knots, n_basis)
        BtB, Bty = B.T @ B, B.T @ y
        # Penalty grid relative to the data/penalty scale ratio.
        if lam is None:
            scale = np.trace(BtB) / np.trace(Omega)
            lams = scale * np.logspace(*self.log10_range, self.n_lambda)
        else:
            lams = np.array([float(lam)])
        n = x.size
        best = None
        scores = np.empty(lams.size)
        for idx, lam_i in enumerate(lams):
            lhs = BtB + lam_i * Omega
            coef = np.linalg.solve(lhs, Bty)
            rss = np.sum((y - B @ coef) ** 2)
            edf = np.trace(np.linalg.solve(lhs, BtB))
            scores[idx] = n * rss / max(n - edf, 1e-8) ** 2
            if best is None or scores[idx] < scores[best[0]]:
                best = (idx, coef)
        self.knots = knots
        self.coefficients = best[1]
        self.lam = float(lams[best[0]])
        self.gcv_scores = scores
        return self

    @classmethod
    def from_coefficients(cls, knots, coefficients, lam):
        return cls(knots=np.asarray(knots, float), coefficients=np.asarray(coefficients, float),
                   lam=float(lam))

    @property
    def _spline(self):
        return BSpline(self.knots, self.coefficients, 3, extrapolate=False)

    def _split(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.knots[0], self.knots[-1]
        return x, lo, hi, np.clip(x, lo, hi)

    def __call__(self, x):
        x, lo, hi, xc = self._split(x)
        spl = self._spline
        slope = spl.derivative(1)
        val = spl(xc)
        val = np.where(x < lo, spl(lo) + slope(lo) * (x - lo), val)
        return np.where(x > hi, spl(hi) + slope(hi) * (x - hi), val)

    def derivative(self, x):
        x, lo, hi, xc = self._split(x)
        return self._spline.derivative(1)(xc)
