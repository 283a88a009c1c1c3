"""Numeric substrate: flat parameter vectors, gradients, MLPs and Adam.

Reverse-mode differentiation is delegated to :mod:`jax`; everything built on
top of it (parameter layout, the conditioner network, the optimizer and the
training loop) lives here so the trainable modules share one implementation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax

from flowiv.errors import DivergenceError, NonFiniteError

ACTIVATION = "tanh"
_ACTIVATIONS = {"tanh": jnp.tanh}


# --------------------------------------------------------------------------
# Parameter vectors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class ParamVector:
    """A flat vector of parameters with named, contiguous segments.

    ``values`` is normally a read-only float64 numpy array. Inside a traced
    function (see :func:`grad`) it may hold a JAX tracer instead, in which
    case validation is skipped.
    """

    values: np.ndarray
    layout: tuple[Segment, ...]

    def __post_init__(self):
        pos = 0
        for seg in self.layout:
            if seg.start != pos or seg.stop < seg.start:
                raise ValueError(f"segment {seg.name!r} is not contiguous with its predecessor")
            pos = seg.stop
        if len({s.name for s in self.layout}) != len(self.layout):
            raise ValueError("duplicate segment names")
        if isinstance(self.values, np.ndarray):
            if self.values.ndim != 1 or self.values.shape[0] != pos:
                raise ValueError(
                    f"layout covers {pos} values but vector has shape {self.values.shape}"
                )
            vals = np.array(self.values, dtype=np.float64)
            if not np.all(np.isfinite(vals)):
                bad = self.nonfinite_segments(vals)
                raise NonFiniteError(f"non-finite parameters in segments {bad}", segments=bad)
            vals.setflags(write=False)
            object.__setattr__(self, "values", vals)

    @classmethod
    def from_segments(cls, segments: dict[str, np.ndarray] | Sequence[tuple[str, np.ndarray]]):
        items = segments.items() if isinstance(segments, dict) else segments
        layout, chunks, pos = [], [], 0
        for name, arr in items:
            arr = np.ravel(np.asarray(arr, dtype=np.float64))
            layout.append(Segment(name, pos, pos + arr.size))
            chunks.append(arr)
            pos += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, tuple(layout))

    def __len__(self) -> int:
        return self.layout[-1].stop if self.layout else 0

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.layout]

    def _find(self, name: str) -> Segment:
        for seg in self.layout:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def segment(self, name: str):
        seg = self._find(name)
        return self.values[seg.start : seg.stop]

    def replace(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def subset(self, names: Sequence[str]) -> "ParamVector":
        return ParamVector.from_segments([(n, np.asarray(self.segment(n))) for n in names])

    def nonfinite_segments(self, values=None) -> list[str]:
        vals = np.asarray(self.values if values is None else values)
        return [s.name for s in self.layout if not np.all(np.isfinite(vals[s.start : s.stop]))]


def grad(loss: Callable[[ParamVector], jnp.ndarray], at: ParamVector) -> ParamVector:
    """Gradient of a scalar ``loss`` with respect to every entry of ``at``.

    Raises :class:`NonFiniteError` naming the parameter segments involved if
    the loss or any gradient entry is not finite.
    """
    layout = at.layout

    def flat_loss(v):
        return loss(ParamVector(v, layout))

    value, g = jax.value_and_grad(flat_loss)(jnp.asarray(at.values))
    g = np.asarray(g, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(g)):
        bad = at.nonfinite_segments(g) or at.names
        raise NonFiniteError(
            f"loss={float(value)!r} is not finite; offending segments {bad}", segments=bad
        )
    return ParamVector(g, layout)


# --------------------------------------------------------------------------
# Multilayer perceptron
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    d_in: int
    d_out: int
    hidden: tuple[int, ...] = (20, 20, 20)
    activation: str = ACTIVATION

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.d_in, *self.hidden, self.d_out)

    @property
    def n_params(self) -> int:
        s = self.sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))


@dataclass(frozen=True)
class Mlp:
    spec: MlpSpec
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        if np.shape(self.params) != (self.spec.n_params,):
            raise ValueError(
                f"expected {self.spec.n_params} parameters, got shape {np.shape(self.params)}"
            )


def init_mlp(spec: MlpSpec, rng: np.random.Generator, zero_last: bool = True) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.

    With ``zero_last`` the output layer starts at exactly zero, which makes
    every spline driven by this network start as the identity map.
    """
    s = spec.sizes
    chunks = []
    n_layers = len(s) - 1
    for i, (fan_in, fan_out) in enumerate(zip(s[:-1], s[1:])):
        if zero_last and i == n_layers - 1:
            chunks += [np.zeros(fan_in * fan_out), np.zeros(fan_out)]
            continue
        bound = 1.0 / math.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, fan_out))
    return np.concatenate(chunks)


def mlp_apply(spec: MlpSpec, params, x):
    """Evaluate the network on ``x`` of shape (..., d_in); traceable by JAX."""
    act = _ACTIVATIONS[spec.activation]
    s = spec.sizes
    h = x
    pos = 0
    n_layers = len(s) - 1
    for i, (a, b) in enumerate(zip(s[:-1], s[1:])):
        w = params[pos : pos + a * b].reshape(a, b)
        pos += a * b
        bias = params[pos : pos + b]
        pos += b
        h = h @ w + bias
        if i < n_layers - 1:
            h = act(h)
    return h


def mlp_forward(net: Mlp, input) -> np.ndarray:
    x = np.asarray(input, dtype=np.float64)
    if x.shape[-1:] != (net.spec.d_in,):
        raise ValueError(f"input has trailing dimension {x.shape[-1:]}, expected {net.spec.d_in}")
    return np.asarray(mlp_apply(net.spec, jnp.asarray(net.params), jnp.asarray(x)))


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(0, np.zeros(n), np.zeros(n), lr, **kw)


def adam_update(params, grads, m, v, step, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """One bias-corrected Adam update. Pure; works on numpy or traced arrays."""
    step = step + 1
    m = beta1 * m + (1.0 - beta1) * grads
    v = beta2 * v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    params = params - lr * m_hat / (v_hat**0.5 + eps)
    return params, m, v, step


def adam_step(state: AdamState, params: ParamVector, grads: ParamVector):
    if params.layout != grads.layout or state.m.shape != params.values.shape:
        raise ValueError("parameter, gradient and optimizer shapes disagree")
    g = np.asarray(grads.values)
    if not np.all(np.isfinite(g)):
        bad = grads.nonfinite_segments()
        raise NonFiniteError(f"non-finite gradient in segments {bad}", segments=bad)
    new, m, v, step = adam_update(
        params.values, g, state.m, state.v, state.step,
        state.lr, state.beta1, state.beta2, state.eps,
    )
    new_state = AdamState(int(step), np.asarray(m), np.asarray(v), state.lr, state.beta1, state.beta2, state.eps)
    return new_state, params.replace(np.asarray(new))


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

_RUNNERS: dict = {}


def _runner(loss_fn, batch_size, length):
    key = (loss_fn, batch_size, length)
    if key in _RUNNERS:
        return _RUNNERS[key]
    value_and_grad = jax.value_and_grad(loss_fn, argnums=1)

    def run(static, carry, data, extra, lr, avg_start):
        def body(carry, _):
            params, m, v, step, rng, bad, avg_sum, avg_n = carry
            rng, sub = jax.random.split(rng)
            if batch_size is None:
                batch = data
            else:
                idx = jax.random.randint(sub, (batch_size,), 0, data[0].shape[0])
                batch = tuple(d[idx] for d in data)
            loss, g = value_and_grad(static, params, batch, extra)
            ok = jnp.isfinite(loss) & jnp.all(jnp.isfinite(g))
            g = jnp.where(ok, g, 0.0)
            p2, m2, v2, s2 = adam_update(params, g, m, v, step, lr)
            params = jnp.where(ok, p2, params)
            m = jnp.where(ok, m2, m)
            v = jnp.where(ok, v2, v)
            bad = jnp.where((bad < 0) & ~ok, step, bad)
            step = jnp.where(ok, s2, step)
            take = step > avg_start
            avg_sum = jnp.where(take, avg_sum + params, avg_sum)
            avg_n = jnp.where(take, avg_n + 1, avg_n)
            return (params, m, v, step, rng, bad, avg_sum, avg_n), loss

        return lax.scan(body, carry, None, length=length)

    fn = jax.jit(run, static_argnums=0)
    _RUNNERS[key] = fn
    return fn


@dataclass
class OptimizeResult:
    params: np.ndarray
    trace: np.ndarray


def minimize(
    loss_fn,
    params0,
    data: Sequence,
    *,
    static=None,
    extra: Sequence = (),
    steps: int = 3000,
    lr: float = 1e-3,
    batch_size: int | None = None,
    seed: int = 0,
    dtype: str = "float32",
    phase: str = "",
    chunk: int = 500,
    average_last: int = 0,
) -> OptimizeResult:
    """Minimise ``loss_fn(static, params, batch, extra)`` with Adam.

    ``loss_fn`` must be a module-level function so compiled loops can be
    reused across calls. ``data`` arrays share a leading sample axis that is
    subsampled with replacement when ``batch_size`` is smaller than it; the
    ``extra`` arguments are passed through unbatched. ``static`` must be
    hashable and is treated as a compile-time constant.

    With ``average_last > 0`` the returned parameters are the mean of the
    final ``average_last`` iterates rather than the last one, which removes
    most of the minibatch noise a constant learning rate leaves behind.

    Raises :class:`DivergenceError` with the phase name and step index at the
    first non-finite loss or gradient.
    """
    if average_last < 0:
        raise ValueError("average_last must be nonnegative")
    dt = jnp.dtype(dtype)
    data = tuple(jnp.asarray(np.asarray(d), dtype=dt) for d in data)
    extra = tuple(jnp.asarray(np.asarray(e), dtype=dt) for e in extra)
    n = int(data[0].shape[0])
    if batch_size is not None and batch_size >= n:
        batch_size = None
    params = jnp.asarray(np.asarray(params0, dtype=np.float64), dtype=dt)
    carry = (
        params,
        jnp.zeros_like(params),
        jnp.zeros_like(params),
        jnp.asarray(0, dtype=dt),
        jax.random.PRNGKey(seed),
        jnp.asarray(-1, dtype=dt),
        jnp.zeros_like(params),
        jnp.asarray(0, dtype=dt),
    )
    avg_start = jnp.asarray(steps - min(average_last, steps) if average_last else steps, dtype=dt)
    traces = []
    done = 0
    while done < steps:
        length = min(chunk, steps - done)
        carry, losses = _runner(loss_fn, batch_size, length)(
            static, carry, data, extra, jnp.asarray(lr, dtype=dt), avg_start
        )
        traces.append(np.asarray(losses, dtype=np.float64))
        bad = int(carry[5])
        if bad >= 0:
            raise DivergenceError(
                f"non-finite loss or gradient in phase {phase!r} at step {bad}",
                phase=phase,
                step=bad,
            )
        done += length
    params = carry[0]
    if int(carry[7]) > 0:
        params = carry[6] / carry[7]
    return OptimizeResult(
        np.asarray(params, dtype=np.float64),
        np.concatenate(traces) if traces else np.zeros(0),
    )
