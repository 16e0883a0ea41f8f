"""Synthetic degradation signals with Cox-model event times.

Each unit follows a quadratic random-effects path observed monthly with
Gaussian noise; its event time comes from a Cox model with a Weibull
baseline hazard driven by the noise-free path. A fixed fraction of units is
right-censored.
"""

from dataclasses import dataclass, field

import numpy as np

from mgcp_cox.errors import ValidationError

# Covariance of the random effects (intercept, slope, curvature). The published
# matrix disagrees in its (1,3)/(3,1) entries; the pair is averaged.
DEFAULT_SIGMA_B = np.array(
    [
        [0.2, -4e-4, -4.5e-5],
        [-4e-4, 3e-6, 3e-7],
        [-4.5e-5, 3e-7, 1e-7],
    ]
)


@dataclass
class UnitRecord:
    """Observed data of one unit.

    ``true_event_time`` carries the latent failure time when it is known
    (synthetic data); it is not part of record equality or serialization.
    """

    id: str
    times: np.ndarray
    Y: np.ndarray
    V: float
    delta: int
    w: np.ndarray
    true_event_time: float | None = field(default=None, compare=False)

    def __post_init__(self):
        self.id = str(self.id)
        self.times = np.asarray(self.times, dtype=float).ravel()
        self.Y = np.asarray(self.Y, dtype=float).ravel()
        self.w = np.atleast_1d(np.asarray(self.w, dtype=float)).ravel()
        self.V = float(self.V)
        self.delta = int(self.delta)
        if self.times.shape != self.Y.shape:
            raise ValidationError(f"unit {self.id}: times and Y differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError(f"unit {self.id}: times must be strictly increasing")
        if self.times.size and self.times[-1] > self.V + 1e-12:
            raise ValidationError(f"unit {self.id}: observation after event/censoring time")
        if self.delta not in (0, 1):
            raise ValidationError(f"unit {self.id}: event indicator must be 0 or 1")

    def __eq__(self, other):
        if not isinstance(other, UnitRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.V == other.V
            and self.delta == other.delta
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.Y, other.Y)
            and np.array_equal(self.w, other.w)
        )


@dataclass
class GenConfig:
    """Generator settings; defaults reproduce the published simulation."""

    N: int = 20
    mu_b: tuple = (2.5, 0.1, None)  # None: curvature mean drawn from a_range
    Sigma_b: np.ndarray = field(default_factory=lambda: DEFAULT_SIGMA_B.copy())
    a_range: tuple = (0.003, 0.03)
    a_per_unit: bool = True
    noise_var: float = 0.1
    weibull_lambda: float = 0.001
    weibull_rho: float = 1.05
    gamma_true: float = 0.0
    beta_true: float = 0.5
    censor_frac: float = 0.05
    w_prob: float = 0.5
    t_max: float = 600.0
    grid_points: int = 10_000
    seed: int = 0

    def __post_init__(self):
        S = np.asarray(self.Sigma_b, dtype=float)
        S = 0.5 * (S + S.T)
        if S.shape != (3, 3) or np.linalg.eigvalsh(S).min() < -1e-12:
            raise ValidationError("Sigma_b must be a 3x3 positive semidefinite matrix")
        self.Sigma_b = S
        if not 0.0 <= self.censor_frac < 1.0:
            raise ValidationError("censor_frac must lie in [0, 1)")
        if self.N < 1 or self.noise_var <= 0 or self.weibull_lambda <= 0 or self.weibull_rho <= 0:
            raise ValidationError("N, noise_var and the Weibull parameters must be positive")


def path_basis(t):
    t = np.asarray(t, dtype=float)
    return np.stack([np.ones_like(t), t, t * t], axis=-1)


def sample_event_time(hazard, rng, t_max, grid_points=10_000):
    """Draw ``T`` with ``P(T > t) = exp(-int_0^t hazard)`` by inverse CDF.

    The cumulative hazard is tabulated with the trapezoid rule on a uniform
    grid over ``[0, t_max]``. Returns ``(T, reached_horizon)``; when the drawn
    exponential level exceeds the cumulative hazard at ``t_max`` the sample is
    ``t_max`` with ``reached_horizon=True``.
    """
    grid = np.linspace(0.0, t_max, grid_points)
    h = np.asarray(hazard(grid), dtype=float)
    if np.any(h < 0) or np.any(np.isnan(h)):
        raise ValidationError("hazard must be non-negative")
    H = np.concatenate([[0.0], np.cumsum(0.5 * (h[1:] + h[:-1]) * np.diff(grid))])
    level = rng.exponential()
    if not level < H[-1]:
        return float(t_max), True
    j = int(np.searchsorted(H, level, side="right"))
    # H[j-1] <= level < H[j]
    frac = (level - H[j - 1]) / (H[j] - H[j - 1])
    return float(grid[j - 1] + frac * (grid[j] - grid[j - 1])), False


def _cox_hazard(cfg, b, w):
    lam, rho = cfg.weibull_lambda, cfg.weibull_rho
    base_log = np.log(lam * rho)

    def hazard(t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            log_t = np.log(t)
        log_h = base_log + (rho - 1.0) * log_t + cfg.gamma_true * w + cfg.beta_true * (path_basis(t) @ b)
        # Capping keeps the tabulated cumulative hazard finite far beyond any draw.
        return np.exp(np.minimum(log_h, 300.0))

    return hazard


def _draw_effects(cfg, rng, a):
    mu = np.array([cfg.mu_b[0], cfg.mu_b[1], a if cfg.mu_b[2] is None else cfg.mu_b[2]])
    return rng.multivariate_normal(mu, cfg.Sigma_b, method="eigh")


def gen_unit(cfg, rng, unit_id=0, a=None):
    """Generate one uncensored unit; ``a`` overrides the curvature mean draw."""
    if a is None:
        a = rng.uniform(*cfg.a_range)
    b = _draw_effects(cfg, rng, a)
    w = float(rng.random() < cfg.w_prob)
    T, at_horizon = sample_event_time(_cox_hazard(cfg, b, w), rng, cfg.t_max, cfg.grid_points)
    times = np.arange(1.0, np.floor(T) + 1.0)
    Y = path_basis(times) @ b + rng.normal(0.0, np.sqrt(cfg.noise_var), size=times.size)
    return UnitRecord(
        id=str(unit_id), times=times, Y=Y, V=T, delta=0 if at_horizon else 1,
        w=np.array([w]), true_event_time=T,
    )


def gen_dataset(cfg):
    """Generate ``cfg.N`` units, right-censoring ``round(censor_frac * N)`` of them.

    Censored units get ``C ~ uniform(T/2, T)`` and their signals stop at ``C``.
    """
    rng = np.random.default_rng(cfg.seed)
    shared_a = None if cfg.a_per_unit else rng.uniform(*cfg.a_range)
    units = [gen_unit(cfg, rng, unit_id=i + 1, a=shared_a) for i in range(cfg.N)]
    n_cens = int(round(cfg.censor_frac * cfg.N))
    for idx in np.sort(rng.choice(cfg.N, size=n_cens, replace=False)):
        u = units[idx]
        C = float(rng.uniform(0.5 * u.true_event_time, u.true_event_time))
        keep = u.times <= C
        units[idx] = UnitRecord(
            id=u.id, times=u.times[keep], Y=u.Y[keep], V=C, delta=0, w=u.w,
            true_event_time=u.true_event_time,
        )
    return units
