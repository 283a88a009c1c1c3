"""Comparison estimators: the linear IV (Wald) slope and a Deep IV style
two-stage network. Both assume additive outcome noise, so counterfactuals are
``prediction(a') + (y - prediction(a))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np

from flowiv.cgnf import Dataset, TreatmentModel
from flowiv.counterfactual import CounterfactualQuery
from flowiv.errors import ValidationError, WeakInstrumentError
from flowiv.nn_core import Mlp, MlpSpec, init_mlp, minimize, mlp_apply

WEAK_INSTRUMENT_TOL = 1e-12


@dataclass(frozen=True)
class WaldModel:
    beta: float
    intercept: float

    def __post_init__(self):
        if not (math.isfinite(self.beta) and math.isfinite(self.intercept)):
            raise ValidationError("Wald coefficients must be finite")


def fit_wald(d: Dataset) -> WaldModel:
    """beta = Cov(Y, Z) / Cov(A, Z), intercept = mean(Y) - beta * mean(A)."""
    zc = d.z - d.z.mean()
    cov_az = float(np.mean((d.a - d.a.mean()) * zc))
    if abs(cov_az) < WEAK_INSTRUMENT_TOL:
        raise WeakInstrumentError(f"Cov(A, Z) = {cov_az:.3g}: instrument is not relevant")
    cov_yz = float(np.mean((d.y - d.y.mean()) * zc))
    beta = cov_yz / cov_az
    return WaldModel(beta, float(d.y.mean() - beta * d.a.mean()))


def counterfactual_wald(m: WaldModel, q: CounterfactualQuery):
    resid = np.asarray(q.y) - m.beta * np.asarray(q.a) - m.intercept
    out = m.beta * np.asarray(q.a_prime) + m.intercept + resid
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# Deep IV
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DeepIvConfig:
    steps: int = 3000
    lr: float = 1e-3
    batch_size: int | None = 512
    hidden: tuple[int, ...] = (20, 20, 20)
    n_samples: int = 32
    seed: int = 0
    dtype: str = "float32"
    average_last: int = 500

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.n_samples < 1:
            raise ValidationError("n_samples must be at least 1")


@dataclass(frozen=True)
class DeepIvModel:
    first_stage: TreatmentModel
    g_hat: Mlp
    a_loc: float
    a_scale: float
    y_loc: float
    y_scale: float
    trace: np.ndarray = field(default=None, repr=False, compare=False)

    def structural(self, a):
        """Predicted g_Y(a) + E[e_Y] in data units."""
        a = np.asarray(a, dtype=np.float64)
        x = jnp.asarray((a - self.a_loc) / self.a_scale)[..., None]
        g = np.asarray(mlp_apply(self.g_hat.spec, jnp.asarray(self.g_hat.params), x))[..., 0]
        out = self.y_loc + self.y_scale * g
        return float(out) if out.ndim == 0 else out


def _second_stage_loss(spec, params, batch, extra):
    y, a_draws = batch
    g = mlp_apply(spec, params, a_draws[..., None])[..., 0]
    return jnp.mean((y - jnp.mean(g, axis=-1)) ** 2)


def draw_treatments(first_stage: TreatmentModel, z, n_samples: int, rng: np.random.Generator, chunk: int = 100_000):
    """``n_samples`` treatment draws per instrument value, shape (len(z), n_samples)."""
    z = np.asarray(z, dtype=np.float64)
    eps = rng.standard_normal((z.shape[0], n_samples))
    zz = np.repeat(z[:, None], n_samples, axis=1).reshape(-1)
    flat = eps.reshape(-1)
    out = np.empty_like(flat)
    for s in range(0, flat.shape[0], chunk):
        out[s : s + chunk] = first_stage.treatment(zz[s : s + chunk], flat[s : s + chunk])
    return out.reshape(z.shape[0], n_samples)


def second_stage_loss(m: DeepIvModel, d: Dataset, a_draws: np.ndarray) -> float:
    """Mean squared error of y against the first-stage average of g_hat."""
    g = m.structural(a_draws.reshape(-1)).reshape(a_draws.shape)
    return float(np.mean((d.y - g.mean(axis=1)) ** 2))


def fit_deep_iv(d: Dataset, first_stage: TreatmentModel, cfg: DeepIvConfig = DeepIvConfig()) -> DeepIvModel:
    """Fit g_hat by minimising sum_i (y_i - mean_j g_hat(a_ij))^2 with a_ij ~ A | Z = z_i.

    The treatment draws are made once up front from ``first_stage``.
    """
    rng = np.random.default_rng([cfg.seed, 7])
    a_loc, a_scale = float(d.a.mean()), float(d.a.std()) or 1.0
    y_loc, y_scale = float(d.y.mean()), float(d.y.std()) or 1.0
    draws = draw_treatments(first_stage, d.z, cfg.n_samples, rng)
    spec = MlpSpec(1, 1, cfg.hidden)
    p0 = init_mlp(spec, rng, zero_last=False)
    res = minimize(
        _second_stage_loss, p0,
        ((d.y - y_loc) / y_scale, (draws - a_loc) / a_scale),
        static=spec, steps=cfg.steps, lr=cfg.lr, batch_size=cfg.batch_size,
        seed=cfg.seed * 1000 + 5, dtype=cfg.dtype, phase="deep_iv",
        average_last=cfg.average_last if cfg.batch_size is not None else 0,
    )
    return DeepIvModel(first_stage, Mlp(spec, res.params), a_loc, a_scale, y_loc, y_scale, res.trace)


def counterfactual_deep_iv(m: DeepIvModel, q: CounterfactualQuery):
    a = np.asarray(q.a, dtype=np.float64)
    a_prime = np.broadcast_to(np.asarray(q.a_prime, dtype=np.float64), a.shape)
    both = m.structural(np.stack([a, a_prime]))
    out = both[1] + (np.asarray(q.y) - both[0])
    return float(out) if np.ndim(out) == 0 else out
