"""Cox model terms under a Gaussian posterior over the latent signal.

The baseline hazard is ``exp(b + psi * (t - t_min))`` for ``t >= t_min`` and
zero before the earliest event/censoring time ``t_min``. Expectations of the
Cox log-likelihood under ``f ~ N(mu, sigma^2)`` use the normal moment
generating function for the cumulative-hazard integral and Gauss-Legendre
quadrature over time.
"""

from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np

from mgcp_cox.errors import ValidationError
from mgcp_cox.spline import SmoothingSpline

LIKELIHOOD_NODES = 32
MRL_NODES = 64
MGF_MODES = ("exact", "linear")


@dataclass(frozen=True)
class CoxParams:
    gamma: np.ndarray
    beta: float
    b: float
    psi: float
    t_min: float

    def __post_init__(self):
        object.__setattr__(self, "gamma", np.atleast_1d(np.asarray(self.gamma, dtype=float)))
        for name in ("beta", "b", "psi", "t_min"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.psi < 0:
            raise ValidationError("baseline slope psi must be non-negative")

    def linear_predictor(self, w):
        w = np.atleast_1d(np.asarray(w, dtype=float))
        if w.size == 0 and self.gamma.size == 0:
            return 0.0
        return float(self.gamma @ w)


@dataclass(frozen=True)
class BaselineHazardCurve:
    """Smoothed cumulative baseline hazard; its clipped slope is the hazard."""

    grid: np.ndarray
    H: np.ndarray
    spline: SmoothingSpline = field(repr=False)

    def cumulative(self, t):
        return self.spline(t)

    def hazard(self, t):
        return np.maximum(self.spline.derivative(t), 0.0)


@dataclass(frozen=True)
class SurvivalCurve:
    t_star: float
    horizon: float
    times: np.ndarray
    survival: np.ndarray

    def __post_init__(self):
        s = self.survival
        if s.size and (abs(s[0] - 1.0) > 1e-12 or np.any(np.diff(s) > 1e-12)):
            raise ValidationError("survival curve must start at 1 and be non-increasing")


def gauss_legendre(lo, hi, n):
    """Nodes and weights on ``[lo, hi]``; ``lo``/``hi`` may be arrays (broadcast)."""
    x, w = np.polynomial.legendre.leggauss(n)
    lo = np.asarray(lo, dtype=float)[..., None]
    hi = np.asarray(hi, dtype=float)[..., None]
    half = 0.5 * (hi - lo)
    return lo + half * (x + 1.0), half * w


def baseline_hazard(t, cp):
    """Exponential baseline hazard, zero before ``cp.t_min``."""
    t = np.asarray(t, dtype=float)
    val = np.exp(cp.b + cp.psi * (t - cp.t_min))
    out = np.where(t < cp.t_min, 0.0, val)
    return float(out) if out.ndim == 0 else out


def mgf_exponent(beta, mean, var, mode="exact"):
    """Log of ``E[exp(beta f)]`` for ``f ~ N(mean, var)``.

    ``mode="linear"`` gives the variant ``beta * (mean + var / 2)``.
    """
    if mode == "exact":
        return beta * mean + 0.5 * beta**2 * var
    if mode == "linear":
        return beta * (mean + 0.5 * var)
    raise ValidationError(f"unknown MGF mode {mode!r}; expected one of {MGF_MODES}")


def expected_event_term(unit, mu_at_V, cp):
    """``delta * (log h0(V) + gamma^T w + beta * mu(V))``."""
    if unit.delta == 0:
        return 0.0
    if unit.V < cp.t_min:
        raise ValidationError(f"unit {unit.id}: event at {unit.V} before t_min={cp.t_min}; log(0)")
    log_h0 = cp.b + cp.psi * (unit.V - cp.t_min)
    return float(log_h0 + cp.linear_predictor(unit.w) + cp.beta * mu_at_V)


def expected_cumhaz_term(unit, mean_fn, var_fn, cp, n_nodes=LIKELIHOOD_NODES, mgf="exact"):
    """``-int_0^V h0(u) exp(gamma^T w) E[exp(beta f(u))] du`` by Gauss-Legendre.

    The integrand vanishes below ``t_min``, so nodes are placed on
    ``[t_min, V]`` only.
    """
    if not unit.V > 0:
        raise ValidationError(f"unit {unit.id}: event/censoring time must be positive")
    if unit.V <= cp.t_min:
        return 0.0
    u, wts = gauss_legendre(cp.t_min, unit.V, n_nodes)
    log_rate = (cp.b + cp.psi * (u - cp.t_min) + cp.linear_predictor(unit.w)
                + mgf_exponent(cp.beta, np.asarray(mean_fn(u)), np.asarray(var_fn(u)), mgf))
    return float(-np.sum(wts * np.exp(log_rate)))


def expected_cox_loglik(units, moments, cp, n_nodes=LIKELIHOOD_NODES, mgf="exact"):
    """Sum of expected event and cumulative-hazard terms over units.

    ``moments(i, times)`` returns the posterior mean and variance of the
    signal of unit ``i`` at ``times``.
    """
    total = 0.0
    for i, unit in enumerate(units):
        mu_V, _ = moments(i, np.array([unit.V]))
        total += expected_event_term(unit, float(np.asarray(mu_V)[0]), cp)
        total += expected_cumhaz_term(
            unit,
            lambda t, i=i: moments(i, t)[0],
            lambda t, i=i: moments(i, t)[1],
            cp, n_nodes=n_nodes, mgf=mgf,
        )
    return total


def _cox_terms(mu_V, mu_q, var_q, nodes, weights, V, delta, mask, lin, beta, b, psi, t_min, mgf):
    """Vectorised expected Cox log-likelihood (jax-traceable)."""
    event = delta * (b + psi * (V - t_min) + lin + beta * mu_V)
    expo = beta * mu_q + (0.5 * beta**2 * var_q if mgf == "exact" else 0.5 * beta * var_q)
    rate = jnp.exp(b + psi * (nodes - t_min) + lin[:, None] + expo)
    cum = jnp.sum(weights * rate, axis=1)
    return jnp.sum(mask * (event - cum))


# ---------------------------------------------------------------------------
# baseline curve and prediction


def risk_grid(event_times):
    """Union of the ordered event times except the largest and the integers up to it."""
    V = np.sort(np.asarray(event_times, dtype=float))
    if V.size < 2:
        raise ValidationError("at least two event times are required")
    ints = np.arange(0.0, np.floor(V[-1]) + 1.0)
    return np.union1d(V[:-1], ints)


def cumulative_grid_hazard(grid, t, cp):
    """``H(t)``: baseline hazard summed over grid points no later than ``t``."""
    pts = grid[grid <= t]
    return float(np.sum(baseline_hazard(pts, cp)))


def fit_baseline_curve(event_times, cp):
    """Accumulate the fitted baseline hazard on the risk grid and smooth it."""
    grid = risk_grid(event_times)
    H = np.cumsum(np.atleast_1d(baseline_hazard(grid, cp)))
    spline = SmoothingSpline().fit(grid, H)
    return BaselineHazardCurve(grid=grid, H=H, spline=spline)


def _baseline_rate(u, bh, cp):
    return baseline_hazard(u, cp) if bh is None else bh.hazard(u)


def _window_cumhaz(t_star, ends, w, f_hat, bh, cp, n_nodes, f_var=None, mgf="exact"):
    ends = np.asarray(ends, dtype=float)
    # The parametric baseline jumps at t_min; integrate only where it is positive.
    lo = t_star if bh is not None else max(t_star, cp.t_min)
    ends = np.maximum(ends, lo)
    u, wts = gauss_legendre(np.full_like(ends, lo), ends, n_nodes)
    f = np.asarray(f_hat(u.ravel())).reshape(u.shape)
    expo = cp.beta * f
    if f_var is not None:
        var = np.asarray(f_var(u.ravel())).reshape(u.shape)
        expo = mgf_exponent(cp.beta, f, var, mgf)
    rate = _baseline_rate(u, bh, cp) * np.exp(cp.linear_predictor(w) + expo)
    return np.sum(wts * rate, axis=-1)


def survival_window_prob(t_star, dt, w, f_hat, bh, cp, n_nodes=LIKELIHOOD_NODES, f_var=None,
                         mgf="exact"):
    """Probability of an event in ``(t_star, t_star + dt]`` given survival to ``t_star``.

    ``f_hat`` maps times to the predicted signal. Passing ``f_var`` applies the
    MGF variance correction. ``bh=None`` uses the parametric baseline of ``cp``.
    """
    if dt < 0:
        raise ValidationError("window length must be non-negative")
    if dt == 0:
        return 0.0
    H = _window_cumhaz(t_star, np.array([t_star + dt]), w, f_hat, bh, cp, n_nodes, f_var, mgf)[0]
    return float(np.clip(-np.expm1(-H), 0.0, 1.0))


def survival_curve(t_star, horizon, w, f_hat, bh, cp, n_points=101, n_nodes=LIKELIHOOD_NODES,
                   f_var=None, mgf="exact"):
    """Tabulate ``S(t | t_star)`` on ``n_points`` equally spaced times."""
    times = np.linspace(t_star, t_star + horizon, n_points)
    H = _window_cumhaz(t_star, times, w, f_hat, bh, cp, n_nodes, f_var, mgf)
    # Cumulative hazards from independent quadratures can dip by rounding.
    surv = np.minimum.accumulate(np.exp(-np.maximum.accumulate(np.maximum(H, 0.0))))
    surv[0] = 1.0
    return SurvivalCurve(t_star=float(t_star), horizon=float(horizon), times=times, survival=surv)


def mean_remaining_life(t_star, w, f_hat, bh, cp, horizon_cap, n_nodes=MRL_NODES,
                        inner_nodes=LIKELIHOOD_NODES, f_var=None, mgf="exact"):
    """``int_{t*}^{cap} S(u | t*) du`` by Gauss-Legendre; the tail past ``cap`` is dropped."""
    if not horizon_cap > t_star:
        raise ValidationError("horizon_cap must exceed t_star")
    u, wts = gauss_legendre(t_star, horizon_cap, n_nodes)
    H = _window_cumhaz(t_star, u, w, f_hat, bh, cp, inner_nodes, f_var, mgf)
    return float(np.sum(wts * np.exp(-H)))
