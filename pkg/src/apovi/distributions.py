"""Gaussian algebra used by every posterior family.

Diagonal Gaussians carry a log-variance clamped to ``[-10, 10]``; full
Gaussians carry a lower Cholesky factor of the covariance.  Both support
leading batch axes: a full Gaussian with ``mean`` of shape ``(S, K, n)`` is a
batch of ``S * K`` independent ``n``-dimensional Gaussians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor, _lift

LOG_2PI = math.log(2.0 * math.pi)
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


def clamp_log_var(log_var) -> Tensor:
    return T.clip(_lift(log_var), LOG_VAR_MIN, LOG_VAR_MAX)


def _check_trailing(x: Tensor, shape: tuple, what: str) -> None:
    if x.shape[x.ndim - len(shape):] != shape or x.ndim < len(shape):
        raise DimensionError(f"{what} has shape {x.shape}, expected trailing {shape}")


@dataclass
class DiagGaussian:
    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mean = _lift(self.mean)
        lv = _lift(self.log_var)
        if lv.shape != self.mean.shape:
            raise DimensionError(f"mean {self.mean.shape} and log_var {lv.shape} differ")
        self.log_var = clamp_log_var(lv)

    @classmethod
    def isotropic(cls, shape, var: float) -> "DiagGaussian":
        return cls(Tensor(np.zeros(shape)), Tensor(np.full(shape, math.log(var))))

    @property
    def var(self) -> Tensor:
        return T.exp(self.log_var)

    def log_prob(self, x) -> Tensor:
        """Log density summed over the event axes; leading batch axes of ``x`` survive."""
        x = _lift(x)
        _check_trailing(x, self.mean.shape, "x")
        terms = (x - self.mean) ** 2 * T.exp(-self.log_var) + self.log_var + LOG_2PI
        axes = tuple(range(x.ndim - self.mean.ndim, x.ndim))
        return terms.sum(axis=axes) * -0.5 if axes else terms * -0.5

    def sample(self, eps) -> Tensor:
        return reparam_sample(self, eps)


@dataclass
class FullGaussian:
    """Batched Gaussians with ``mean (..., n)`` and lower ``chol_cov (..., n, n)``."""

    mean: Tensor
    chol_cov: Tensor

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def covariance(self) -> Tensor:
        return self.chol_cov @ self.chol_cov.T

    def sample(self, eps) -> Tensor:
        eps = _lift(eps)
        return self.mean + (self.chol_cov @ eps.reshape(eps.shape + (1,)))[..., 0]

    def log_prob(self, x) -> Tensor:
        """Log density of each batch member; shape is the broadcast batch shape."""
        x = _lift(x)
        diff = x - self.mean
        z = T.solve_triangular(self.chol_cov, diff.reshape(diff.shape + (1,)), lower=True)[..., 0]
        return self._log_norm() - 0.5 * (z * z).sum(axis=-1)

    def log_prob_from_noise(self, eps) -> Tensor:
        """Log density at ``sample(eps)``; avoids the triangular solve."""
        eps = _lift(eps)
        return self._log_norm() - 0.5 * (eps * eps).sum(axis=-1)

    def _log_norm(self) -> Tensor:
        logdet = T.log(T.diagonal(self.chol_cov)).sum(axis=-1)
        return -0.5 * self.dim * LOG_2PI - logdet


@dataclass
class GaussianFactorSet:
    """Per-datapoint diagonal factors stored row-wise: ``means``/``log_vars`` are (N, K)."""

    means: Tensor
    log_vars: Tensor

    def __post_init__(self):
        self.means = _lift(self.means)
        lv = _lift(self.log_vars)
        if lv.shape != self.means.shape or self.means.ndim != 2:
            raise DimensionError(f"factor means {self.means.shape} / log_vars {lv.shape} mismatch")
        self.log_vars = clamp_log_var(lv)

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def reparam_sample(g: DiagGaussian, eps) -> Tensor:
    eps = _lift(eps)
    _check_trailing(eps, g.mean.shape, "eps")
    return g.mean + T.exp(0.5 * g.log_var) * eps


def log_prob_diag(g: DiagGaussian, x) -> Tensor:
    return g.log_prob(x)


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    if q.mean.shape != p.mean.shape:
        raise DimensionError(f"KL between shapes {q.mean.shape} and {p.mean.shape}")
    ratio = T.exp(q.log_var - p.log_var)
    maha = (q.mean - p.mean) ** 2 * T.exp(-p.log_var)
    return 0.5 * (ratio + maha - 1.0 - (q.log_var - p.log_var)).sum()


def gaussian_product(factors: GaussianFactorSet, prior: DiagGaussian) -> DiagGaussian:
    """Normalised product of a diagonal prior with per-datapoint diagonal factors.

    Works in natural parameters: precisions add, and so do precision-weighted means.
    """
    if prior.mean.ndim != 1 or factors.dim != prior.mean.shape[0]:
        raise DimensionError(f"factor length {factors.dim} does not match prior {prior.mean.shape}")
    prior_prec = T.exp(-prior.log_var)
    if len(factors) == 0:
        return DiagGaussian(prior.mean, prior.log_var)
    fac_prec = T.exp(-factors.log_vars)
    prec = prior_prec + fac_prec.sum(axis=0)
    eta = prior.mean * prior_prec + (factors.means * fac_prec).sum(axis=0)
    return DiagGaussian(eta / prec, -T.log(prec))


def blr_posterior(features, targets, precisions, prior_var: float) -> FullGaussian:
    """Bayesian linear regression posterior with an isotropic zero-mean prior.

    ``features`` is ``(..., N, Din)``.  ``targets`` and ``precisions`` are either
    ``(N,)`` (one regression) or ``(N, K)`` (K independent regressions sharing the
    features, one per output column).  Returns a ``FullGaussian`` whose batch
    shape is ``features``' leading axes followed by ``K`` when ``K`` is present.

    The precision matrix is factorised once in reversed index order, which
    yields the lower Cholesky factor of the covariance without a second
    factorisation: with ``J`` the exchange matrix and ``J P J = R R^T``, the
    covariance factor is ``J R^{-T} J``.
    """
    if prior_var <= 0:
        raise ValueError("prior_var must be positive")
    phi, t, lam = _lift(features), _lift(targets), _lift(precisions)
    vector = t.ndim == 1
    if vector:
        t, lam = t.reshape(-1, 1), lam.reshape(-1, 1)
    n_data, din = phi.shape[-2], phi.shape[-1]
    if t.shape[0] != n_data or lam.shape != t.shape:
        raise DimensionError(f"features {phi.shape}, targets {t.shape}, precisions {lam.shape} disagree")
    if np.any(lam.data < 0):
        raise ValueError("precisions must be non-negative")
    k = t.shape[1]

    phi_t = phi.T  # (..., Din, N)
    weighted = phi_t.reshape(phi_t.shape[:-2] + (1, din, n_data)) * lam.T.reshape(k, 1, n_data)
    phi_b = phi.reshape(phi.shape[:-2] + (1, n_data, din))
    prec = weighted @ phi_b + np.eye(din) / prior_var  # (..., K, Din, Din)
    prec = 0.5 * (prec + prec.T)
    rhs = weighted @ t.T.reshape(k, n_data, 1)  # (..., K, Din, 1)

    r = T.jittered_cholesky(prec[..., ::-1, ::-1])
    r_inv = T.solve_triangular(r, np.eye(din), lower=True)
    chol_cov = r_inv.T[..., ::-1, ::-1]
    mean = (chol_cov @ (chol_cov.T @ rhs))[..., 0]
    if vector:
        mean, chol_cov = mean[..., 0, :], chol_cov[..., 0, :, :]
    return FullGaussian(mean, chol_cov)
