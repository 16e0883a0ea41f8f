"""Pseudo-input sparse approximation of the convolution process.

The Gaussian part of the variational bound, the optimal Gaussian posterior
over the latent values at the pseudo-inputs, and the induced posterior over
the outputs. Every ``O(n M^2)`` path factorizes only ``M x M`` matrices:
with ``KXX = L L^T`` and ``A = L^{-1} KXf`` the inner matrix is
``B = I + A A^T / sigma^2``.
"""

from dataclasses import dataclass

import jax.numpy as jnp
import jax.scipy.linalg as jsl
import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from mgcp_cox.errors import NumericalError, ValidationError
from mgcp_cox.kernels import _XX, _ff, _ff_diag, _fX, cholesky_jittered, stack_inputs

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class VariationalPosterior:
    """Gaussian ``q(X) = N(m, s)`` over latent values at pseudo-inputs ``Z``.

    ``jitter`` is the diagonal jitter of ``KXX`` the posterior was computed with;
    predictions refactorize ``KXX`` with the same value.
    """

    Z: np.ndarray
    m: np.ndarray
    s: np.ndarray
    jitter: float = 1e-6

    def __post_init__(self):
        KM = self.m.shape[0]
        if self.s.shape != (KM, KM):
            raise ValidationError(f"s has shape {self.s.shape}, expected {(KM, KM)}")
        if KM % self.Z.shape[0]:
            raise ValidationError("length of m is not a multiple of the pseudo-input count")


@dataclass(frozen=True)
class SignalPosterior:
    """Posterior moments of the outputs at requested times.

    ``cov`` is the full covariance when requested, otherwise ``None`` and only
    ``var`` (its diagonal) is available.
    """

    mean: np.ndarray
    var: np.ndarray
    cov: np.ndarray | None = None


# ---------------------------------------------------------------------------
# backend-neutral cores (shared with the training objective)


def _inner_factor(L, KfX, noise_var):
    A = jsl.solve_triangular(L, KfX.T, lower=True)
    B = jnp.eye(A.shape[0]) + (A @ A.T) / noise_var
    return A, jnp.linalg.cholesky(B)


def _gaussian_terms(A, LB, Y, kff_diag_sum, noise_var):
    """Collapsed bound ``log N(Y; 0, s2 I + Q)`` and trace penalty."""
    n = Y.shape[0]
    c = jsl.solve_triangular(LB, A @ Y, lower=True)
    logdet = n * jnp.log(noise_var) + 2.0 * jnp.sum(jnp.log(jnp.diag(LB)))
    quad = (Y @ Y - (c @ c) / noise_var) / noise_var
    log_term = -0.5 * (n * LOG_2PI + logdet + quad)
    pe_term = -0.5 * (kff_diag_sum - jnp.sum(A * A)) / noise_var
    return log_term, pe_term


def _posterior_weights(A, LB, Y, noise_var):
    """``B^{-1} A Y / s2``; output means are ``a_u^T`` times this vector."""
    return jsl.cho_solve((LB, True), A @ Y) / noise_var


def _output_moments(Ku, kuu, L, LB, weights):
    """Mean and variance of outputs with prior row ``Ku`` and prior variance ``kuu``."""
    a = jsl.solve_triangular(L, Ku.T, lower=True)
    mean = a.T @ weights
    binv_a = jsl.cho_solve((LB, True), a)
    var = kuu - jnp.sum(a * a, axis=0) + jnp.sum(a * binv_a, axis=0)
    return mean, var


# ---------------------------------------------------------------------------
# public numpy API


def _finite_or_raise(values, name):
    arr = np.asarray(values)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {name}", component=name)
    return arr


def _inner(grams, noise_sd):
    A = solve_triangular(grams.chol_XX, grams.KfX.T, lower=True)
    B = np.eye(A.shape[0]) + (A @ A.T) / noise_sd**2
    LB, _ = cholesky_jittered(B, 1e-12, name="inner matrix I + A A^T / sigma^2")
    return A, LB


def optimal_q1(Y, grams, noise_sd):
    """Optimal Gaussian posterior over the latent values at the pseudo-inputs.

    Returns ``N(m, s)`` with ``m = s2^-1 KXX (KXX + s2^-1 KXf KfX)^-1 KXf Y`` and
    ``s = KXX (KXX + s2^-1 KXf KfX)^-1 KXX``.
    """
    Y = np.asarray(Y, dtype=float).ravel()
    if Y.shape[0] != grams.KfX.shape[0]:
        raise ValidationError(f"Y has {Y.shape[0]} entries, grams expect {grams.KfX.shape[0]}")
    L = grams.chol_XX
    A, LB = _inner(grams, noise_sd)
    s2 = noise_sd**2
    # KXX B^-1 = L Binner^-1 L^{-1}
    m = L @ cho_solve((LB, True), A @ Y) / s2
    LBinv_Lt = solve_triangular(LB, L.T, lower=True)
    s = LBinv_Lt.T @ LBinv_Lt
    return VariationalPosterior(
        Z=grams.Z, m=_finite_or_raise(m, "m"), s=_finite_or_raise(s, "s"), jitter=grams.jitter
    )


def signal_posterior(eval_times, vp, p, full_cov=True):
    """Moments of ``q(f) = int q(X) p(f | X) dX`` at arbitrary per-unit times.

    ``eval_times`` has one (possibly empty) time vector per unit of ``p``;
    times may lie outside the training range.
    """
    if len(eval_times) != p.num_units:
        raise ValidationError(f"got {len(eval_times)} time vectors for {p.num_units} units")
    t, u = stack_inputs(eval_times)
    lam, xi, alpha = p.lengthscales, p.widths, p.scales
    L, _ = cholesky_jittered(np.asarray(_XX(vp.Z, lam)), vp.jitter, name="K_XX")
    KfX = np.asarray(_fX(t, u, vp.Z, lam, xi, alpha))
    a = solve_triangular(L, KfX.T, lower=True)
    Linv_m = solve_triangular(L, vp.m, lower=True)
    mean = a.T @ Linv_m
    # L^-1 s L^-T
    S_white = solve_triangular(L, solve_triangular(L, vp.s, lower=True).T, lower=True)
    if full_cov:
        Kff = np.asarray(_ff(t, u, t, u, lam, xi, alpha))
        cov = Kff - a.T @ a + a.T @ S_white @ a
        cov = 0.5 * (cov + cov.T)
        return SignalPosterior(mean=mean, var=np.diag(cov).copy(), cov=cov)
    kdiag = np.asarray(_ff_diag(u, lam, xi, alpha))
    var = kdiag - np.sum(a * a, axis=0) + np.sum(a * (S_white @ a), axis=0)
    return SignalPosterior(mean=mean, var=var)


def gaussian_elbo_terms(Y, grams, noise_sd):
    """Collapsed Gaussian bound in ``O(n M^2)``.

    Returns
    -------
    log_term : float
        ``log N(Y; 0, sigma^2 I + Q)``, via the matrix inversion and
        determinant lemmas.
    pe_term : float
        ``-tr(Kff - Q) / (2 sigma^2)``, never positive.
    """
    Y = np.asarray(Y, dtype=float).ravel()
    A, LB = _inner(grams, noise_sd)
    log_term, pe_term = _gaussian_terms(A, LB, Y, np.trace(grams.Kff), noise_sd**2)
    return float(_finite_or_raise(log_term, "log_term")), float(_finite_or_raise(pe_term, "pe_term"))


def predict_signal(T_star, test_unit, Y, grams, p, noise_sd):
    """Posterior predictive of unit ``test_unit`` at new times.

    Mean ``A D^-1 Y`` and variance ``diag(k** - A D^-1 A^T)`` with
    ``A = K*X KXX^-1 KXf`` and ``D = Q + sigma^2 I``; ``D^-1`` is applied with
    the inversion lemma.
    """
    p._check_unit(test_unit)
    T_star = np.atleast_1d(np.asarray(T_star, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    lam, xi, alpha = p.lengthscales, p.widths, p.scales
    units = np.full(T_star.shape[0], test_unit, dtype=np.int64)
    K_sX = np.asarray(_fX(T_star, units, grams.Z, lam, xi, alpha))
    k_ss = np.asarray(_ff_diag(units, lam, xi, alpha))
    L = grams.chol_XX
    s2 = noise_sd**2
    Af = solve_triangular(L, grams.KfX.T, lower=True)  # KM x n
    a_s = solve_triangular(L, K_sX.T, lower=True)  # KM x T
    A_pred = a_s.T @ Af  # T x n
    # D^-1 v = (v - Af^T (s2 I + Af Af^T)^-1 Af v) / s2
    C, _ = cholesky_jittered(s2 * np.eye(Af.shape[0]) + Af @ Af.T, 1e-12, name="D inner")

    def d_inv(v):
        return (v - Af.T @ cho_solve((C, True), Af @ v)) / s2

    mean = A_pred @ d_inv(Y)
    var = k_ss - np.sum(A_pred * d_inv(A_pred.T).T, axis=1)
    return _finite_or_raise(mean, "predictive mean"), _finite_or_raise(var, "predictive variance")
