"""q-Gaussian law of instantaneous return fluctuations.

The density is

    P(r) = G(lam/2) / (r0 sqrt(pi) G(lam/2 - 1/2)) * (r0^2 / (r0^2 + r^2))^(lam/2)

which is a Student-t with ``nu = lam - 1`` degrees of freedom rescaled by
``r0 / sqrt(nu)``. Sampling and the CDF use that identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DomainError

DEFAULT_LAMBDA = 5.0


def _check(r0, lam) -> None:
    if not np.all(np.asarray(r0) > 0):
        raise DomainError(f"r0 must be positive, got {r0!r}")
    if not lam > 1:
        raise DomainError(f"lambda must exceed 1, got {lam!r}")


@dataclass(frozen=True)
class QGaussian:
    """Symmetric q-Gaussian with width ``r0`` and tail exponent ``lam``."""

    r0: float = 1.0
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        _check(self.r0, self.lam)

    @property
    def dof(self) -> float:
        return self.lam - 1.0

    def pdf(self, r):
        return pdf(self, r)

    def cdf(self, r):
        return cdf(self, r)

    def sample(self, rng: np.random.Generator, size=None):
        return sample(self, rng, size)


def normalization(d: QGaussian) -> float:
    """Prefactor of the density; equals ``pdf(d, 0)``."""
    _check(d.r0, d.lam)
    log_c = math.lgamma(d.lam / 2) - math.lgamma(d.lam / 2 - 0.5)
    return math.exp(log_c) / (d.r0 * math.sqrt(math.pi))


def pdf(d: QGaussian, r):
    _check(d.r0, d.lam)
    r = np.asarray(r, dtype=float)
    # (r0^2 / (r0^2 + r^2)) written as 1 / (1 + (r/r0)^2) to stay finite for huge r
    z = r / d.r0
    out = normalization(d) * np.power(1.0 + z * z, -d.lam / 2)
    return out if out.ndim else float(out)


def cdf(d: QGaussian, r):
    """Distribution function through the regularized incomplete beta function."""
    _check(d.r0, d.lam)
    r = np.asarray(r, dtype=float)
    nu = d.dof
    t = r / d.r0 * math.sqrt(nu)
    tail = 0.5 * special.betainc(nu / 2, 0.5, nu / (nu + t * t))
    out = np.where(r > 0, 1.0 - tail, tail)
    return out if out.ndim else float(out)


def draw(r0, lam: float, rng: np.random.Generator, size=None):
    """Vectorized sampler; ``r0`` may be an array of per-draw widths."""
    _check(r0, lam)
    nu = lam - 1.0
    if size is None and np.ndim(r0):
        size = np.shape(r0)
    # standard_t is normal / sqrt(chisquare(nu) / nu)
    return np.asarray(r0) * rng.standard_t(nu, size) / math.sqrt(nu)


def sample(d: QGaussian, rng: np.random.Generator, size=None):
    out = draw(d.r0, d.lam, rng, size)
    return float(out) if size is None else out
