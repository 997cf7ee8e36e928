"""Closed-form analytics for diagonal Gaussians.

Every objective term in the package reduces to a handful of exact
expressions over axis-aligned Gaussians: KL divergence, cross entropy,
the identity-covariance log-density, reparameterized sampling, and the
2D+1 sigma points used to visualize a latent distribution without
random sampling.  All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

# Log-variances are clamped at construction so that downstream exp()
# calls can neither vanish nor overflow during optimization.
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class DiagGaussian:
    """A diagonal Gaussian parameterized by mean and log-variance."""

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        log_var = np.atleast_1d(np.asarray(self.log_var, dtype=np.float64))
        if self.mean.ndim != 1 or log_var.ndim != 1:
            raise ContractViolation("mean and log_var must be vectors")
        if self.mean.shape != log_var.shape or self.mean.size < 1:
            raise ContractViolation(
                f"mean/log_var shape mismatch: {self.mean.shape} vs {log_var.shape}"
            )
        self.log_var = np.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)


@dataclass
class LatentPoint:
    """A single realization of the continuous latent variable."""

    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.atleast_1d(np.asarray(self.coords, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.coords.size


def _check_same_dim(q: DiagGaussian, p: DiagGaussian):
    if q.dim != p.dim:
        raise ContractViolation(f"dimension mismatch: {q.dim} vs {p.dim}")


def entropy(g: DiagGaussian) -> float:
    """Differential entropy, 0.5 * sum(log_var + ln(2*pi*e))."""
    return float(0.5 * np.sum(g.log_var + _LOG_2PI + 1.0))


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> float:
    """Exact KL(q || p) between diagonal Gaussians of equal dimension."""
    _check_same_dim(q, p)
    dlv = q.log_var - p.log_var
    dm = q.mean - p.mean
    return float(
        0.5 * np.sum(np.exp(dlv) + dm * dm / np.exp(p.log_var) - 1.0 - dlv)
    )


def cross_entropy(q: DiagGaussian, p: DiagGaussian) -> float:
    """Exact H(q, p) = E_q[-ln p] = KL(q || p) + entropy(q)."""
    _check_same_dim(q, p)
    dm = q.mean - p.mean
    return float(
        0.5
        * np.sum(
            _LOG_2PI + p.log_var + (np.exp(q.log_var) + dm * dm) / np.exp(p.log_var)
        )
    )


def log_pdf_identity_cov(mean: np.ndarray, point: np.ndarray) -> float:
    """ln N(point; mean, I), including the normalization constant."""
    mean = np.asarray(mean, dtype=np.float64)
    point = np.asarray(point, dtype=np.float64)
    if mean.shape != point.shape:
        raise ContractViolation(
            f"dimension mismatch: {mean.shape} vs {point.shape}"
        )
    r = point - mean
    return float(-0.5 * (mean.size * _LOG_2PI + np.dot(r, r)))


def sample_reparam(g: DiagGaussian, noise: np.ndarray) -> LatentPoint:
    """mean + sigma * noise for a caller-supplied standard-normal draw.

    Deterministic given `noise`; the differentiable path runs through
    both the mean and the log-variance.
    """
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != g.mean.shape:
        raise ContractViolation(
            f"noise dimension {noise.shape} does not match {g.mean.shape}"
        )
    return LatentPoint(g.mean + g.sigma * noise)


def sigma_points(g: DiagGaussian) -> list[LatentPoint]:
    """The 2D+1 points {mean, mean +/- sigma * e_d}, in fixed order.

    Order is: mean first, then for each dimension d ascending, the +sigma
    point before the -sigma point, so exported plots are byte-stable.
    """
    sig = g.sigma
    pts = [LatentPoint(g.mean.copy())]
    for d in range(g.dim):
        offset = np.zeros(g.dim)
        offset[d] = sig[d]
        pts.append(LatentPoint(g.mean + offset))
        pts.append(LatentPoint(g.mean - offset))
    return pts
