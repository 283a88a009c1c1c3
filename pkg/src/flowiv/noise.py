"""Bivariate Gaussian noise with standard-normal marginals and correlation rho.

``rho`` is stored through an unconstrained ``rho_raw`` with
``rho = tanh(rho_raw)`` so it stays strictly inside (-1, 1) during training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np

LOG_2PI = math.log(2 * math.pi)
LOG_2 = math.log(2.0)


def std_normal_logpdf(x):
    return -0.5 * (LOG_2PI + x * x)


def conditional_logpdf(e_y, e_a, rho):
    """log N(e_y; rho * e_a, 1 - rho^2). Traceable; ``rho`` may be an array."""
    var = 1.0 - rho * rho
    r = e_y - rho * e_a
    return -0.5 * (LOG_2PI + jnp.log(var) + r * r / var)


def conditional_logpdf_raw(e_y, e_a, rho_raw):
    """``conditional_logpdf`` with ``rho = tanh(rho_raw)``, stable for large ``|rho_raw|``.

    Uses ``1 - tanh(r)^2 = sech(r)^2`` so the variance never rounds to zero.
    """
    rho = jnp.tanh(rho_raw)
    r_abs = jnp.abs(rho_raw)
    log_var = -2.0 * (r_abs + jnp.log1p(jnp.exp(-2.0 * r_abs)) - LOG_2)
    r = e_y - rho * e_a
    return -0.5 * (LOG_2PI + log_var + r * r * jnp.exp(-log_var))


def joint_logpdf(e_a, e_y, rho):
    var = 1.0 - rho * rho
    q = (e_a * e_a - 2 * rho * e_a * e_y + e_y * e_y) / var
    return -LOG_2PI - 0.5 * jnp.log(var) - 0.5 * q


@dataclass(frozen=True)
class CorrelatedGaussian:
    rho_raw: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.rho_raw):
            raise ValueError("rho_raw must be finite")

    @classmethod
    def from_rho(cls, rho: float) -> "CorrelatedGaussian":
        if not -1.0 < rho < 1.0:
            raise ValueError(f"rho must lie strictly inside (-1, 1), got {rho}")
        return cls(math.atanh(rho))

    @property
    def rho(self) -> float:
        return math.tanh(self.rho_raw)


def log_density_joint(n: CorrelatedGaussian, e_a, e_y):
    return joint_logpdf(e_a, e_y, n.rho)


def log_density_conditional(n: CorrelatedGaussian, e_y, given_e_a):
    return conditional_logpdf(e_y, given_e_a, n.rho)


def sample_pair(n: CorrelatedGaussian, rng: np.random.Generator, size=None):
    """Draw ``(e_a, e_y)``; ``e_y = rho * e_a + sqrt(1 - rho^2) * eta``."""
    return correlated_normals(n.rho, rng, size)


def correlated_normals(rho: float, rng: np.random.Generator, size=None):
    e_a = rng.standard_normal(size)
    eta = rng.standard_normal(size)
    return e_a, rho * e_a + math.sqrt(max(0.0, 1.0 - rho * rho)) * eta
