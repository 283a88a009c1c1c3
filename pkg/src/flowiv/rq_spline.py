"""Monotone rational-quadratic splines with identity tails.

A spline with ``K`` bins maps ``[-B, B]`` onto itself through ``K`` rational
quadratic pieces and is the identity outside that interval. Boundary knot
derivatives are pinned to one, so the map is C^1 on the whole real line.

All functions accept arbitrary leading batch dimensions on the spline
parameters and broadcast them against the input, and all of them can be
traced by JAX.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import jax
import jax.numpy as jnp

from flowiv.errors import NumericalError

N_BINS = 8
BOUND = 6.0
MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3


def n_raw(n_bins: int = N_BINS) -> int:
    """Length of the unconstrained parameter vector for ``n_bins`` bins."""
    return 3 * n_bins - 1


@dataclass(frozen=True)
class SplineTransform:
    widths: jnp.ndarray  # (..., K)
    heights: jnp.ndarray  # (..., K)
    derivatives: jnp.ndarray  # (..., K + 1), both ends equal to 1
    knots_x: jnp.ndarray  # (..., K + 1)
    knots_y: jnp.ndarray  # (..., K + 1)
    bound: float

    @property
    def n_bins(self) -> int:
        return self.widths.shape[-1]


def _knots(fractions, bound):
    cum = jnp.cumsum(fractions, axis=-1)
    zero = jnp.zeros(cum.shape[:-1] + (1,), cum.dtype)
    cum = jnp.concatenate([zero, cum], axis=-1)
    knots = 2 * bound * cum - bound
    # pin the ends exactly; cumsum rounding would otherwise leave them off by an ulp
    knots = knots.at[..., 0].set(-bound).at[..., -1].set(bound)
    return knots, knots[..., 1:] - knots[..., :-1]


def spline_from_raw(
    raw,
    bound: float = BOUND,
    min_bin_width: float = MIN_BIN_WIDTH,
    min_bin_height: float = MIN_BIN_HEIGHT,
    min_derivative: float = MIN_DERIVATIVE,
) -> SplineTransform:
    """Build a spline from ``3K - 1`` unconstrained numbers.

    Layout: ``K`` width logits, ``K`` height logits, ``K - 1`` interior
    derivative pre-activations. An all-zero vector gives the identity.
    """
    raw = jnp.asarray(raw)
    k = (raw.shape[-1] + 1) // 3
    if 3 * k - 1 != raw.shape[-1]:
        raise ValueError(f"raw spline vector has length {raw.shape[-1]}, not 3K-1")
    if min_bin_width * k >= 1 or min_bin_height * k >= 1:
        raise ValueError("minimum bin fraction too large for the number of bins")
    w = jax.nn.softmax(raw[..., :k], axis=-1)
    w = min_bin_width + (1 - min_bin_width * k) * w
    h = jax.nn.softmax(raw[..., k : 2 * k], axis=-1)
    h = min_bin_height + (1 - min_bin_height * k) * h
    # shift so that raw == 0 gives derivative exactly 1
    offset = math.log(math.expm1(1.0 - min_derivative))
    d_inner = min_derivative + jax.nn.softplus(raw[..., 2 * k :] + offset)
    one = jnp.ones(raw.shape[:-1] + (1,), raw.dtype)
    d = jnp.concatenate([one, d_inner, one], axis=-1)
    kx, widths = _knots(w, bound)
    ky, heights = _knots(h, bound)
    return SplineTransform(widths, heights, d, kx, ky, float(bound))


def _gather(arr, idx):
    return jnp.take_along_axis(arr, idx[..., None], axis=-1)[..., 0]


def _bin_params(t: SplineTransform, x, knots):
    shape = jnp.broadcast_shapes(x.shape, t.widths.shape[:-1])
    x = jnp.broadcast_to(x, shape)

    def b(a):
        return jnp.broadcast_to(a, shape + a.shape[-1:])

    k = t.n_bins
    idx = jnp.sum(x[..., None] >= b(knots)[..., 1:k], axis=-1)
    parts = dict(
        x_k=_gather(b(t.knots_x), idx),
        y_k=_gather(b(t.knots_y), idx),
        w_k=_gather(b(t.widths), idx),
        h_k=_gather(b(t.heights), idx),
        d_k=_gather(b(t.derivatives), idx),
        d_k1=_gather(b(t.derivatives), idx + 1),
    )
    return x, parts


def forward(t: SplineTransform, x):
    """Return ``(t(x), log t'(x))``."""
    x = jnp.asarray(x, dtype=t.widths.dtype)
    inside = (x >= -t.bound) & (x <= t.bound)
    xc = jnp.clip(x, -t.bound, t.bound)
    xc, p = _bin_params(t, xc, t.knots_x)
    s = p["h_k"] / p["w_k"]
    theta = (xc - p["x_k"]) / p["w_k"]
    tt = theta * (1 - theta)
    denom = s + (p["d_k1"] + p["d_k"] - 2 * s) * tt
    y = p["y_k"] + p["h_k"] * (s * theta**2 + p["d_k"] * tt) / denom
    dnum = s**2 * (p["d_k1"] * theta**2 + 2 * s * tt + p["d_k"] * (1 - theta) ** 2)
    logdet = jnp.log(dnum) - 2 * jnp.log(denom)
    x_b = jnp.broadcast_to(x, y.shape)
    inside = jnp.broadcast_to(inside, y.shape)
    return jnp.where(inside, y, x_b), jnp.where(inside, logdet, 0.0)


def inverse(t: SplineTransform, y):
    """Return ``(x, log |dx/dy|)`` with ``t(x) == y``.

    Inside the bounds the bin-local quadratic is solved analytically, taking
    the root in [0, 1] in the cancellation-free form ``2c / (-b - sqrt(D))``.
    """
    y = jnp.asarray(y, dtype=t.widths.dtype)
    inside = (y >= -t.bound) & (y <= t.bound)
    yc = jnp.clip(y, -t.bound, t.bound)
    yc, p = _bin_params(t, yc, t.knots_y)
    s = p["h_k"] / p["w_k"]
    dy = yc - p["y_k"]
    slope_sum = p["d_k1"] + p["d_k"] - 2 * s
    qa = p["h_k"] * (s - p["d_k"]) + dy * slope_sum
    qb = p["h_k"] * p["d_k"] - dy * slope_sum
    qc = -s * dy
    disc = qb**2 - 4 * qa * qc
    if not isinstance(disc, jax.core.Tracer):
        scale = qb**2 + jnp.abs(4 * qa * qc) + 1e-300
        if bool(jnp.any(disc < -1e-9 * scale)):
            raise NumericalError("negative discriminant in spline inversion")
    disc = jnp.maximum(disc, 0.0)
    theta = 2 * qc / (-qb - jnp.sqrt(disc))
    x = theta * p["w_k"] + p["x_k"]
    tt = theta * (1 - theta)
    denom = s + slope_sum * tt
    dnum = s**2 * (p["d_k1"] * theta**2 + 2 * s * tt + p["d_k"] * (1 - theta) ** 2)
    logdet = 2 * jnp.log(denom) - jnp.log(dnum)
    y_b = jnp.broadcast_to(y, x.shape)
    inside = jnp.broadcast_to(inside, x.shape)
    return jnp.where(inside, x, y_b), jnp.where(inside, logdet, 0.0)
