"""Joint training objective and its maximisation.

The objective is the collapsed Gaussian bound of the convolution process
plus the expected Cox log-likelihood under the induced Gaussian posterior of
the signals. The optimal posterior over the latent pseudo-input values is
recomputed in closed form at every evaluation, so the free vector holds only
hyperparameters and Cox coefficients.
"""

import logging
import warnings
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np
from scipy.optimize import minimize

from mgcp_cox import cox as coxlib
from mgcp_cox.errors import NumericalError, ValidationError
from mgcp_cox.kernels import DEFAULT_JITTER, KernelParams, _ff_diag, _fX, _XX, build_grams
from mgcp_cox.sparse_gp import (
    _gaussian_terms,
    _inner_factor,
    _output_moments,
    _posterior_weights,
    optimal_q1,
    signal_posterior,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelParams:
    kernel: KernelParams
    cox: coxlib.CoxParams


@dataclass
class FitConfig:
    M: int = 10
    K: int = 1
    max_iters: int = 5000
    rel_tol: float = 1e-9
    lik_nodes: int = coxlib.LIKELIHOOD_NODES
    mrl_nodes: int = coxlib.MRL_NODES
    seed: int = 0
    gradient: str = "analytic"  # or "central"
    fd_step: float = 1e-5
    test_unit_cox: bool = True
    restarts: int = 3
    jitter: float = DEFAULT_JITTER
    mgf: str = "exact"
    optimize_pseudo_inputs: bool = False
    baseline: str = "spline"  # or "parametric"
    predict_mgf_correction: bool = False

    def __post_init__(self):
        if self.M < 1 or self.K < 1:
            raise ValidationError("M and K must be at least 1")
        if not self.rel_tol > 0:
            raise ValidationError("rel_tol must be positive")
        if self.gradient not in ("analytic", "central"):
            raise ValidationError(f"unknown gradient mode {self.gradient!r}")
        if self.mgf not in coxlib.MGF_MODES:
            raise ValidationError(f"unknown MGF mode {self.mgf!r}")
        if self.baseline not in ("spline", "parametric"):
            raise ValidationError(f"unknown baseline {self.baseline!r}")
        if self.restarts < 1:
            raise ValidationError("restarts must be at least 1")


# ---------------------------------------------------------------------------
# parameter transform


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


@dataclass(frozen=True)
class ParamLayout:
    """Positions of each parameter group in the unconstrained vector.

    Order: log lengthscales (K), log widths (N*K), scales (N*K), log noise sd,
    gamma (P), beta, b, softplus^-1(psi), then pseudo-inputs (M) if optimized.
    """

    N: int
    K: int
    P: int
    t_min: float
    M_free: int = 0

    @property
    def size(self):
        return self.K + 2 * self.N * self.K + 1 + self.P + 3 + self.M_free

    def _slices(self):
        K, NK, P = self.K, self.N * self.K, self.P
        pos = 0
        out = {}
        for name, n in (("log_lam", K), ("log_xi", NK), ("alpha", NK), ("log_sigma", 1),
                         ("gamma", P), ("beta", 1), ("b", 1), ("psi_free", 1),
                         ("Z", self.M_free)):
            out[name] = slice(pos, pos + n)
            pos += n
        return out

    def split(self, free, xp=np):
        """Constrained parameter arrays; ``xp`` is ``numpy`` or ``jax.numpy``."""
        sl = self._slices()
        N, K = self.N, self.K
        return dict(
            lengthscales=xp.exp(free[sl["log_lam"]]),
            widths=xp.exp(free[sl["log_xi"]]).reshape(N, K),
            scales=free[sl["alpha"]].reshape(N, K),
            noise_sd=xp.exp(free[sl["log_sigma"]][0]),
            gamma=free[sl["gamma"]],
            beta=free[sl["beta"]][0],
            b=free[sl["b"]][0],
            psi=xp.logaddexp(0.0, free[sl["psi_free"]][0]),
            Z=free[sl["Z"]],
        )

    def unpack(self, free):
        free = np.asarray(free, dtype=float)
        if free.shape != (self.size,):
            raise ValidationError(f"free vector has shape {free.shape}, expected ({self.size},)")
        if not np.all(np.isfinite(free)):
            raise ValidationError("free parameter vector contains non-finite entries")
        d = self.split(free)
        kernel = KernelParams(d["lengthscales"], d["widths"], d["scales"], d["noise_sd"])
        cp = coxlib.CoxParams(d["gamma"], d["beta"], d["b"], d["psi"], self.t_min)
        return ModelParams(kernel=kernel, cox=cp)

    def pack(self, params, Z=None):
        k, c = params.kernel, params.cox
        parts = [
            np.log(k.lengthscales), np.log(k.widths).ravel(), k.scales.ravel(),
            [np.log(k.noise_sd)], c.gamma, [c.beta], [c.b], [softplus_inv(c.psi)],
        ]
        if self.M_free:
            parts.append(np.asarray(Z, dtype=float))
        return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


def transform_params(free, layout):
    """Map an unconstrained vector to ``ModelParams``."""
    return layout.unpack(free)


def inverse_transform(params, layout, Z=None):
    return layout.pack(params, Z)


# ---------------------------------------------------------------------------
# problem data and objective


@dataclass(frozen=True)
class Problem:
    """Arrays the objective needs, fixed for the duration of a fit."""

    t: np.ndarray
    unit: np.ndarray
    Y: np.ndarray
    V: np.ndarray
    delta: np.ndarray
    W: np.ndarray
    cox_mask: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    Z: np.ndarray
    t_min: float

    @property
    def N(self):
        return self.V.shape[0]


def covariate_matrix(units):
    dims = {u.w.size for u in units}
    if len(dims) != 1:
        raise ValidationError("all units must carry the same number of covariates")
    return np.stack([u.w for u in units]) if dims != {0} else np.zeros((len(units), 0))


def default_pseudo_inputs(units, M):
    times = np.concatenate([u.times for u in units])
    if times.size == 0:
        raise ValidationError("no longitudinal observations")
    return np.linspace(times.min(), times.max(), M)


def make_problem(units, Z, cfg, test_unit=None):
    """Stack unit data; ``test_unit`` (an id) is excluded from ``t_min``."""
    if len(units) < 2:
        raise ValidationError("at least two units are required")
    ids = [u.id for u in units]
    if len(set(ids)) != len(ids):
        raise ValidationError("unit ids must be unique")
    if test_unit is not None and test_unit not in ids:
        raise ValidationError(f"test unit {test_unit!r} not in data")
    t = np.concatenate([u.times for u in units])
    unit = np.concatenate([np.full(u.times.size, i, dtype=np.int64) for i, u in enumerate(units)])
    Y = np.concatenate([u.Y for u in units])
    V = np.array([u.V for u in units])
    delta = np.array([u.delta for u in units], dtype=float)
    train = np.array([u.id != test_unit for u in units])
    t_min = float(V[train].min())
    mask = np.where(train | cfg.test_unit_cox, 1.0, 0.0)
    nodes, weights = coxlib.gauss_legendre(np.full(V.shape, t_min), np.maximum(V, t_min),
                                           cfg.lik_nodes)
    return Problem(t=t, unit=unit, Y=Y, V=V, delta=delta, W=covariate_matrix(units),
                   cox_mask=mask, nodes=nodes, weights=weights,
                   Z=np.asarray(Z, dtype=float), t_min=t_min)


def _objective_terms(free, prob, layout, jitter, mgf):
    d = layout.split(free, jnp)
    lam, xi, alpha = d["lengthscales"], d["widths"], d["scales"]
    Z = d["Z"] if layout.M_free else prob.Z
    s2 = d["noise_sd"] ** 2
    KM = layout.K * Z.shape[0]
    L = jnp.linalg.cholesky(_XX(Z, lam) + jitter * jnp.eye(KM))
    KfX = _fX(prob.t, prob.unit, Z, lam, xi, alpha)
    A, LB = _inner_factor(L, KfX, s2)
    kff_sum = jnp.sum(_ff_diag(prob.unit, lam, xi, alpha)) + jitter * prob.t.shape[0]
    log_term, pe_term = _gaussian_terms(A, LB, prob.Y, kff_sum, s2)

    N, Qn = prob.nodes.shape
    pts = np.concatenate([prob.V, prob.nodes.ravel()])
    pu = np.concatenate([np.arange(N), np.repeat(np.arange(N), Qn)])
    Ku = _fX(pts, pu, Z, lam, xi, alpha)
    kuu = _ff_diag(pu, lam, xi, alpha)
    mean, var = _output_moments(Ku, kuu, L, LB, _posterior_weights(A, LB, prob.Y, s2))
    lin = prob.W @ d["gamma"]
    cox_term = coxlib._cox_terms(
        mean[:N], mean[N:].reshape(N, Qn), var[N:].reshape(N, Qn), prob.nodes, prob.weights,
        prob.V, prob.delta, prob.cox_mask, lin, d["beta"], d["b"], d["psi"], prob.t_min, mgf,
    )
    return log_term, pe_term, cox_term


def objective_terms(params, units, Z, cfg, test_unit=None):
    """Components of the objective: (log_term, pe_term, cox_term) as floats."""
    prob = make_problem(units, Z, cfg, test_unit)
    layout = ParamLayout(len(units), cfg.K, prob.W.shape[1], prob.t_min)
    terms = _objective_terms(layout.pack(params), prob, layout, cfg.jitter, cfg.mgf)
    out = []
    for name, val in zip(("log_term", "pe_term", "cox_term"), terms):
        if not np.isfinite(val):
            raise NumericalError(f"objective component {name} is not finite", component=name)
        out.append(float(val))
    return tuple(out)


def objective(params, units, Z, cfg, test_unit=None):
    """Training objective: collapsed Gaussian bound plus expected Cox log-likelihood."""
    return sum(objective_terms(params, units, Z, cfg, test_unit))


def make_value_and_grad(prob, layout, cfg):
    """Jitted ``free -> (objective, gradient)``; gradients from ``cfg.gradient``."""

    def value(free):
        return sum(_objective_terms(free, prob, layout, cfg.jitter, cfg.mgf))

    if cfg.gradient == "analytic":
        return jax.jit(jax.value_and_grad(value))
    value_jit = jax.jit(value)

    def value_and_fd(free):
        free = np.asarray(free, dtype=float)
        return value_jit(free), central_difference(lambda x: float(value_jit(x)), free, cfg.fd_step)

    return value_and_fd


# ---------------------------------------------------------------------------
# gradient checking


def central_difference(fun, x, step=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        g[j] = (fun(x + e) - fun(x - e)) / (2.0 * step)
    return g


def gradient_discrepancy(fun, grad, x, step=1e-5):
    """Largest componentwise relative error between ``grad(x)`` and central differences.

    Components are compared relative to ``max(|analytic|, |numeric|)`` with a
    floor of ``1e-6 * max(1, |fun(x)|)`` so near-zero components do not divide
    by round-off.
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(grad(x), dtype=float)
    fd = central_difference(fun, x, step)
    floor = 1e-6 * max(1.0, abs(float(fun(x))))
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)
    return float(np.max(np.abs(g - fd) / denom))


def grad_check(params, units, cfg, Z=None, test_unit=None, step=1e-5):
    """Max relative error of the autodiff gradient against central differences."""
    Z = default_pseudo_inputs(units, cfg.M) if Z is None else Z
    prob = make_problem(units, Z, cfg, test_unit)
    layout = ParamLayout(len(units), cfg.K, prob.W.shape[1], prob.t_min)
    vg = make_value_and_grad(prob, layout, replace(cfg, gradient="analytic"))
    return gradient_discrepancy(lambda x: float(vg(x)[0]), lambda x: np.asarray(vg(x)[1]),
                                layout.pack(params), step)


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FittedModel:
    params: ModelParams
    posterior: object
    baseline: coxlib.BaselineHazardCurve | None
    elbo_trace: np.ndarray
    data_summary: dict = field(default_factory=dict)
    config: FitConfig = field(default_factory=FitConfig)
    status: str = "converged"

    # ------------------------------------------------------------- prediction
    def unit_index(self, unit_id):
        ids = self.data_summary["unit_ids"]
        try:
            return ids.index(str(unit_id))
        except ValueError:
            raise ValidationError(f"unit {unit_id!r} not in fitted model") from None

    def signal(self, unit_id, times):
        """Posterior mean and variance of a unit's latent signal at ``times``."""
        i = self.unit_index(unit_id)
        times = np.atleast_1d(np.asarray(times, dtype=float))
        empty = np.empty(0)
        eval_times = [times if j == i else empty for j in range(self.params.kernel.num_units)]
        sp = signal_posterior(eval_times, self.posterior, self.params.kernel, full_cov=False)
        return sp.mean, np.maximum(sp.var, 0.0)

    def _predictors(self, unit_id):
        w = np.asarray(self.data_summary["w"][self.unit_index(unit_id)], dtype=float)
        f_hat = lambda t: self.signal(unit_id, t)[0]  # noqa: E731
        f_var = (lambda t: self.signal(unit_id, t)[1]) if self.config.predict_mgf_correction else None
        bh = self.baseline if self.config.baseline == "spline" else None
        return w, f_hat, f_var, bh

    def event_probability(self, unit_id, t_star, dt):
        w, f_hat, f_var, bh = self._predictors(unit_id)
        return coxlib.survival_window_prob(t_star, dt, w, f_hat, bh, self.params.cox,
                                           self.config.lik_nodes, f_var, self.config.mgf)

    def survival_curve(self, unit_id, t_star, horizon, n_points=101):
        w, f_hat, f_var, bh = self._predictors(unit_id)
        return coxlib.survival_curve(t_star, horizon, w, f_hat, bh, self.params.cox, n_points,
                                     self.config.lik_nodes, f_var, self.config.mgf)

    def default_horizon_cap(self, t_star):
        return t_star + 3.0 * self.data_summary["max_lifetime"]

    def mean_remaining_life(self, unit_id, t_star, horizon_cap=None):
        w, f_hat, f_var, bh = self._predictors(unit_id)
        cap = self.default_horizon_cap(t_star) if horizon_cap is None else horizon_cap
        return coxlib.mean_remaining_life(t_star, w, f_hat, bh, self.params.cox, cap,
                                          self.config.mrl_nodes, self.config.lik_nodes,
                                          f_var, self.config.mgf)


def initial_params(units, cfg, rng, t_min):
    """Scale-aware neutral starting point."""
    times = np.concatenate([u.times for u in units])
    span = float(times.max() - times.min()) or 1.0
    N, K = len(units), cfg.K
    diffs = np.concatenate([np.diff(u.Y) for u in units if u.Y.size > 1] or [np.ones(2)])
    sd = 0.5 * float(np.std(diffs, ddof=1)) if diffs.size > 1 else 0.5
    n_events = sum(u.delta for u in units)
    P = covariate_matrix(units).shape[1]
    kernel = KernelParams(
        lengthscales=np.full(K, span / 10.0),
        widths=np.full((N, K), span / 10.0),
        scales=rng.normal(0.0, 0.1, size=(N, K)),
        noise_sd=max(sd, 1e-3),
    )
    cp = coxlib.CoxParams(
        gamma=np.zeros(P), beta=0.0, b=np.log(max(n_events, 1) / sum(u.V for u in units)),
        psi=float(softplus(softplus_inv(1e-3))), t_min=t_min,
    )
    return ModelParams(kernel, cp)


def _jitter_start(x0, layout, rng, scale=0.1):
    sl = layout._slices()
    x = x0.copy()
    for name in ("log_lam", "log_xi", "log_sigma"):
        x[sl[name]] += rng.normal(0.0, scale, size=x[sl[name]].shape)
    x[sl["alpha"]] = rng.normal(0.0, 0.1, size=x[sl["alpha"]].shape)
    return x


def _bounds(layout, units, Z):
    times = np.concatenate([u.times for u in units])
    span = float(times.max() - times.min()) or 1.0
    ysd = float(np.std(np.concatenate([u.Y for u in units]))) or 1.0
    sl = layout._slices()
    bounds = [(None, None)] * layout.size
    for name in ("log_lam", "log_xi"):
        for j in range(sl[name].start, sl[name].stop):
            bounds[j] = (np.log(span * 1e-3), np.log(span * 1e2))
    bounds[sl["log_sigma"].start] = (np.log(ysd * 1e-4), np.log(ysd * 10.0))
    for j in range(sl["Z"].start, sl["Z"].stop):
        bounds[j] = (float(np.min(Z)) - span, float(np.max(Z)) + span)
    return bounds


def _run_optimizer(vg, x0, bounds, cfg):
    trace = []

    def neg(x):
        val, grad = vg(x)
        val = float(val)
        grad = np.asarray(grad, dtype=float)
        if not np.isfinite(val) or not np.all(np.isfinite(grad)):
            return 1e100, np.zeros_like(x)
        return -val, -grad

    def record(intermediate_result):
        trace.append(-float(intermediate_result.fun))

    f0, _ = neg(x0)
    if not np.isfinite(f0) or f0 >= 1e100:
        raise NumericalError("objective is not finite at the initial point", component="objective")
    trace.append(-f0)
    res = minimize(neg, x0, jac=True, method="L-BFGS-B", bounds=bounds, callback=record,
                   options=dict(maxiter=cfg.max_iters, ftol=cfg.rel_tol, gtol=1e-7, maxcor=20))
    return res, np.array(trace)


def fit(units, cfg=None, test_unit=None, Z=None):
    """Maximise the joint objective over all hyperparameters and Cox coefficients.

    ``test_unit`` names a partially observed unit whose record is censored at
    the prediction time; it is left out of ``t_min`` and the baseline curve,
    and its Cox term is included only when ``cfg.test_unit_cox`` is set.
    """
    cfg = FitConfig() if cfg is None else cfg
    train = [u for u in units if u.id != test_unit]
    if len(units) < 2:
        raise ValidationError("fit needs at least two units")
    if not any(u.delta == 1 for u in train):
        raise ValidationError("fit needs at least one observed event")
    Z = default_pseudo_inputs(units, cfg.M) if Z is None else np.asarray(Z, dtype=float)
    prob = make_problem(units, Z, cfg, test_unit)
    layout = ParamLayout(len(units), cfg.K, prob.W.shape[1], prob.t_min,
                         M_free=Z.size if cfg.optimize_pseudo_inputs else 0)
    vg = make_value_and_grad(prob, layout, cfg)
    bounds = _bounds(layout, units, Z)

    rng = np.random.default_rng(cfg.seed)
    x_init = layout.pack(initial_params(units, cfg, rng, prob.t_min), Z)
    best = None
    for r in range(cfg.restarts):
        x0 = x_init if r == 0 else _jitter_start(x_init, layout, rng)
        try:
            res, trace = _run_optimizer(vg, x0, bounds, cfg)
        except NumericalError as exc:
            logger.warning("restart %d failed: %s", r, exc)
            continue
        logger.debug("restart %d: objective %.6f (%s)", r, -res.fun, res.message)
        if best is None or -res.fun > -best[0].fun:
            best = (res, trace)
    if best is None:
        raise NumericalError("all optimizer restarts failed", component="objective")
    res, trace = best
    status = "converged" if res.success else "max_iters"
    if not res.success:
        warnings.warn(f"optimizer did not converge: {res.message}", RuntimeWarning, stacklevel=2)

    params = layout.unpack(res.x)
    Z_fit = layout.split(res.x)["Z"] if layout.M_free else Z
    grams = build_grams([u.times for u in units], Z_fit, params.kernel, cfg.jitter)
    posterior = optimal_q1(prob.Y, grams, params.kernel.noise_sd)
    train_V = np.array([u.V for u in train])
    baseline = coxlib.fit_baseline_curve(train_V, params.cox) if train_V.size >= 2 else None
    summary = dict(
        unit_ids=[u.id for u in units],
        w=[u.w.tolist() for u in units],
        V=[u.V for u in units],
        delta=[u.delta for u in units],
        n_obs=[int(u.times.size) for u in units],
        time_range=[float(np.min(prob.t)), float(np.max(prob.t))],
        max_lifetime=float(train_V.max()),
        test_unit=test_unit,
        t_min=prob.t_min,
    )
    return FittedModel(params=params, posterior=posterior, baseline=baseline,
                       elbo_trace=trace, data_summary=summary, config=cfg, status=status)
