"""Covariance functions of the multivariate Gaussian convolution process.

Each output ``f_i`` is the sum over latent functions ``X_k`` of the
convolution of ``X_k`` with a scaled Gaussian smoothing kernel
``G_ik(t) = alpha_ik * N(t; 0, xi_ik^2)``. The latent functions are
independent GPs with unit-amplitude squared-exponential covariance of
lengthscale ``lambda_k``. All covariances below are the closed forms of
the corresponding convolution integrals.

The ``_``-prefixed helpers are written against ``jax.numpy`` so the same code
serves the eager numpy-facing API and the differentiated training objective.
"""

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np
from scipy.linalg import solve_triangular

from mgcp_cox.errors import NumericalError, ValidationError

DEFAULT_JITTER = 1e-6
MAX_JITTER = 1e-2


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of the convolution process.

    Attributes
    ----------
    lengthscales : ndarray, shape (K,)
        Lengthscale of each latent squared-exponential process.
    widths : ndarray, shape (N, K)
        Standard deviation of the Gaussian smoothing kernel per (unit, latent).
    scales : ndarray, shape (N, K)
        Amplitude of the smoothing kernel per (unit, latent); may be negative.
    noise_sd : float
        Standard deviation of the observation noise.
    """

    lengthscales: np.ndarray
    widths: np.ndarray
    scales: np.ndarray
    noise_sd: float

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        xi = np.atleast_2d(np.asarray(self.widths, dtype=float))
        alpha = np.atleast_2d(np.asarray(self.scales, dtype=float))
        object.__setattr__(self, "lengthscales", lam)
        object.__setattr__(self, "widths", xi)
        object.__setattr__(self, "scales", alpha)
        object.__setattr__(self, "noise_sd", float(self.noise_sd))
        if lam.ndim != 1:
            raise ValidationError("lengthscales must be a vector of length K")
        if xi.shape != alpha.shape or xi.shape[1] != lam.shape[0]:
            raise ValidationError(
                f"widths {xi.shape} and scales {alpha.shape} must both be N x K "
                f"with K = {lam.shape[0]}"
            )
        if not np.all(lam > 0) or not np.all(xi > 0) or not self.noise_sd > 0:
            raise ValidationError("lengthscales, widths and noise_sd must be positive")
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(xi))
                and np.all(np.isfinite(alpha)) and np.isfinite(self.noise_sd)):
            raise ValidationError("kernel parameters must be finite")

    @property
    def num_units(self):
        return self.widths.shape[0]

    @property
    def num_latent(self):
        return self.lengthscales.shape[0]

    def _check_unit(self, i):
        if not 0 <= i < self.num_units:
            raise IndexError(f"unit index {i} out of range [0, {self.num_units})")

    def _check_latent(self, k):
        if not 0 <= k < self.num_latent:
            raise IndexError(f"latent index {k} out of range [0, {self.num_latent})")


@dataclass(frozen=True)
class GramSet:
    """Covariance matrices of the sparse approximation.

    ``Kff`` is indexed by the stacked observation inputs, ``KfX`` and
    ``KXX`` by the pseudo-inputs of all latent functions (latent-major).
    ``chol_XX`` is the lower Cholesky factor of the jittered ``KXX``.
    """

    Kff: np.ndarray
    KfX: np.ndarray
    KXX: np.ndarray
    Q: np.ndarray
    chol_XX: np.ndarray
    Z: np.ndarray
    jitter: float


# ---------------------------------------------------------------------------
# backend-neutral building blocks


def _ff(t1, u1, t2, u2, lengthscales, widths, scales):
    """Cross-covariance between outputs at (t1, unit u1) and (t2, unit u2)."""
    lam2 = lengthscales**2
    x1 = widths[u1] ** 2
    x2 = widths[u2] ** 2
    eta2 = x1[:, None, :] + x2[None, :, :] + lam2
    d2 = (t1[:, None] - t2[None, :]) ** 2
    amp = scales[u1][:, None, :] * scales[u2][None, :, :]
    return jnp.sum(amp * jnp.sqrt(lam2 / eta2) * jnp.exp(-0.5 * d2[..., None] / eta2), axis=-1)


def _ff_diag(u, lengthscales, widths, scales):
    lam2 = lengthscales**2
    eta2 = 2.0 * widths[u] ** 2 + lam2
    return jnp.sum(scales[u] ** 2 * jnp.sqrt(lam2 / eta2), axis=-1)


def _fX(t, u, Z, lengthscales, widths, scales):
    """Output-to-latent covariance, columns ordered latent-major (k, m)."""
    lam2 = lengthscales**2
    eta2 = widths[u] ** 2 + lam2
    d2 = (t[:, None] - Z[None, :]) ** 2
    vals = (scales[u] * jnp.sqrt(lam2 / eta2))[:, :, None] * jnp.exp(
        -0.5 * d2[:, None, :] / eta2[:, :, None]
    )
    return vals.reshape(t.shape[0], -1)


def _XX(Z, lengthscales):
    """Block-diagonal covariance of the latent values at the pseudo-inputs."""
    d2 = (Z[:, None] - Z[None, :]) ** 2
    blocks = jnp.exp(-0.5 * d2[None, :, :] / lengthscales[:, None, None] ** 2)
    K, M = lengthscales.shape[0], Z.shape[0]
    eye = jnp.eye(K)
    return (eye[:, None, :, None] * blocks[:, :, None, :]).reshape(K * M, K * M)


# ---------------------------------------------------------------------------
# public numpy API


def latent_cov(t, t_prime, lengthscale):
    """Squared-exponential covariance of a latent function."""
    if not np.all(np.asarray(lengthscale) > 0):
        raise ValidationError("lengthscale must be positive")
    d = np.asarray(t, dtype=float) - np.asarray(t_prime, dtype=float)
    return np.exp(-0.5 * d**2 / np.asarray(lengthscale, dtype=float) ** 2)


def cross_cov_ff(i, j, t, t_prime, p):
    """Covariance between ``f_i(t)`` and ``f_j(t_prime)``; broadcasts over times."""
    p._check_unit(i)
    p._check_unit(j)
    t, t_prime = np.broadcast_arrays(np.asarray(t, float), np.asarray(t_prime, float))
    lam2 = p.lengthscales**2
    eta2 = p.widths[i] ** 2 + p.widths[j] ** 2 + lam2
    d2 = (t - t_prime)[..., None] ** 2
    terms = p.scales[i] * p.scales[j] * np.sqrt(lam2 / eta2) * np.exp(-0.5 * d2 / eta2)
    return terms.sum(axis=-1)


def cross_cov_fX(i, k, t, u, p):
    """Covariance between ``f_i(t)`` and the latent value ``X_k(u)``."""
    p._check_unit(i)
    p._check_latent(k)
    lam2 = p.lengthscales[k] ** 2
    eta2 = p.widths[i, k] ** 2 + lam2
    d = np.asarray(t, float) - np.asarray(u, float)
    return p.scales[i, k] * np.sqrt(lam2 / eta2) * np.exp(-0.5 * d**2 / eta2)


def stack_inputs(inputs):
    """Flatten per-unit time vectors into (times, unit index) arrays."""
    times = [np.asarray(t, dtype=float).ravel() for t in inputs]
    units = [np.full(len(t), i, dtype=np.int64) for i, t in enumerate(times)]
    if not times:
        return np.empty(0), np.empty(0, dtype=np.int64)
    return np.concatenate(times), np.concatenate(units)


def cholesky_jittered(K, jitter=DEFAULT_JITTER, name="matrix", max_jitter=MAX_JITTER):
    """Lower Cholesky factor of ``K + jitter * I``, escalating jitter x10 on failure.

    Returns the factor and the jitter that was finally used.
    """
    K = np.asarray(K, dtype=float)
    eye = np.eye(K.shape[0])
    level = jitter
    while True:
        try:
            if not np.all(np.isfinite(K)):
                raise np.linalg.LinAlgError("non-finite entries")
            return np.linalg.cholesky(K + level * eye), level
        except np.linalg.LinAlgError as exc:
            level *= 10.0
            if level > max_jitter * (1 + 1e-12):
                raise NumericalError(
                    f"Cholesky factorization of {name} failed up to jitter {max_jitter:g}: {exc}",
                    component=name,
                ) from exc


def build_grams(inputs, Z, p, jitter=DEFAULT_JITTER):
    """Assemble the covariance matrices of the pseudo-input approximation.

    Parameters
    ----------
    inputs : sequence of array_like
        Observation times of each unit, in unit order.
    Z : array_like, shape (M,)
        Pseudo-input locations shared by all latent functions.
    p : KernelParams
    jitter : float
        Initial diagonal jitter for ``KXX`` and ``Kff``.

    Returns
    -------
    GramSet
    """
    Z = np.asarray(Z, dtype=float).ravel()
    if Z.size < 1:
        raise ValidationError("at least one pseudo-input is required")
    if len(inputs) != p.num_units:
        raise ValidationError(f"got {len(inputs)} input vectors for {p.num_units} units")
    t, u = stack_inputs(inputs)
    lam, xi, alpha = p.lengthscales, p.widths, p.scales

    KXX = np.asarray(_XX(Z, lam))
    L, used = cholesky_jittered(KXX, jitter, name="K_XX")
    Kff = np.asarray(_ff(t, u, t, u, lam, xi, alpha))
    # Kff is only factorized to confirm it is numerically PD at the chosen jitter.
    _, used_ff = cholesky_jittered(Kff, jitter, name="K_ff") if t.size else (None, jitter)
    KfX = np.asarray(_fX(t, u, Z, lam, xi, alpha))
    A = solve_triangular(L, KfX.T, lower=True)
    return GramSet(
        Kff=Kff + used_ff * np.eye(t.size),
        KfX=KfX,
        KXX=KXX + used * np.eye(Z.size * p.num_latent),
        Q=A.T @ A,
        chol_XX=L,
        Z=Z,
        jitter=used,
    )
