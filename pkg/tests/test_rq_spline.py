import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowiv import rq_spline
from flowiv.rq_spline import forward, inverse, n_raw, spline_from_raw

B = 4.0
K = 8

raw_vectors = arrays(np.float64, n_raw(K), elements=st.floats(-4, 4, allow_nan=False))


def random_spline(rng, scale=1.5, bound=B, k=K):
    return spline_from_raw(jnp.asarray(rng.normal(0, scale, n_raw(k))), bound)


def reference_forward(t, x):
    """Scalar, loop-based evaluation of the rational-quadratic map."""
    kx = np.asarray(t.knots_x)
    ky = np.asarray(t.knots_y)
    d = np.asarray(t.derivatives)
    if x < kx[0] or x > kx[-1]:
        return x
    k = min(np.searchsorted(kx, x, side="right") - 1, len(kx) - 2)
    w, h = kx[k + 1] - kx[k], ky[k + 1] - ky[k]
    s = h / w
    th = (x - kx[k]) / w
    num = h * (s * th**2 + d[k] * th * (1 - th))
    den = s + (d[k + 1] + d[k] - 2 * s) * th * (1 - th)
    return ky[k] + num / den


def test_zero_raw_is_identity():
    t = spline_from_raw(jnp.zeros(n_raw(K)), B)
    np.testing.assert_allclose(t.widths, 2 * B / K, rtol=1e-14)
    np.testing.assert_allclose(t.derivatives, 1.0, rtol=1e-14)
    y, ld = forward(t, 0.37)
    assert float(y) == pytest.approx(0.37, abs=1e-14)
    assert float(ld) == pytest.approx(0.0, abs=1e-14)
    x, _ = inverse(t, -1.2)
    assert float(x) == pytest.approx(-1.2, abs=1e-14)


@given(raw_vectors)
def test_knots_strictly_increasing(raw):
    t = spline_from_raw(jnp.asarray(raw), B)
    assert np.all(np.diff(np.asarray(t.knots_x)) > 0)
    assert np.all(np.diff(np.asarray(t.knots_y)) > 0)
    assert float(t.knots_x[0]) == -B and float(t.knots_x[-1]) == B
    assert np.all(np.asarray(t.derivatives) > 0)


def test_saturated_width_logit():
    raw = np.zeros(n_raw(K))
    raw[3] = 1e3
    t = spline_from_raw(jnp.asarray(raw), B)
    assert float(t.widths[3]) >= 2 * B * (1 - (K - 1) * rq_spline.MIN_BIN_WIDTH) - 1e-12


def test_wrong_raw_length():
    with pytest.raises(ValueError):
        spline_from_raw(jnp.zeros(10), B)


@given(raw_vectors, st.floats(1e-9, 30))
def test_tail_is_unit_slope(raw, off):
    t = spline_from_raw(jnp.asarray(raw), B)
    for sign in (1, -1):
        y, ld = forward(t, sign * (B + off))
        assert float(y) == pytest.approx(sign * B + sign * off, abs=1e-12)
        assert float(ld) == 0.0
    y, ld = forward(t, B + 5)
    assert float(y) == pytest.approx(float(forward(t, B)[0]) + 5, abs=1e-12)


def test_forward_matches_loop_reference(rng):
    for _ in range(20):
        t = random_spline(rng)
        xs = rng.uniform(-1.5 * B, 1.5 * B, 50)
        y, _ = forward(t, jnp.asarray(xs))
        ref = [reference_forward(t, x) for x in xs]
        np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_logdet_matches_finite_difference(rng):
    h = 1e-6
    for _ in range(20):
        t = random_spline(rng)
        # keep away from the knots so the difference stays within one bin
        xs = rng.uniform(-B + 0.01, B - 0.01, 100)
        xs = xs[np.min(np.abs(xs[:, None] - np.asarray(t.knots_x)[None]), axis=1) > 2 * h]
        _, ld = forward(t, jnp.asarray(xs))
        fd = (np.asarray(forward(t, jnp.asarray(xs + h))[0]) - np.asarray(forward(t, jnp.asarray(xs - h))[0])) / (2 * h)
        np.testing.assert_allclose(np.asarray(ld), np.log(fd), atol=1e-5)


def test_round_trip_and_logdet_sum(rng):
    for _ in range(20):
        t = random_spline(rng, scale=2.0)
        x = jnp.asarray(rng.uniform(-3 * B, 3 * B, 1000))
        y, ld_f = forward(t, x)
        x2, ld_i = inverse(t, y)
        assert float(jnp.max(jnp.abs(x2 - x))) < 1e-8
        assert float(jnp.max(jnp.abs(ld_f + ld_i))) < 1e-9


@settings(max_examples=50)
@given(raw_vectors, st.lists(st.floats(-3 * B, 3 * B), min_size=2, max_size=30, unique=True))
def test_strictly_monotone(raw, xs):
    t = spline_from_raw(jnp.asarray(raw), B)
    xs = np.sort(np.asarray(xs))
    xs = xs[np.concatenate([[True], np.diff(xs) > 1e-9])]
    y, _ = forward(t, jnp.asarray(xs))
    assert np.all(np.diff(np.asarray(y)) > 0)


def test_c1_at_knots(rng):
    # one-sided derivatives from the analytic slope on both sides of every knot
    slope = jax.vmap(jax.grad(lambda x, t: forward(t, x)[0]), in_axes=(0, None))
    for _ in range(10):
        t = random_spline(rng)
        knots = np.asarray(t.knots_x)
        eps = 1e-12
        left = np.exp(np.asarray(forward(t, jnp.asarray(knots - eps))[1]))
        right = np.exp(np.asarray(forward(t, jnp.asarray(knots + eps))[1]))
        np.testing.assert_allclose(left, right, atol=1e-9)
        # the interior knots take the derivative of the parameterisation
        np.testing.assert_allclose(right[1:-1], np.asarray(t.derivatives)[1:-1], atol=1e-9)
        assert np.all(np.isfinite(np.asarray(slope(jnp.asarray(knots), t))))


def test_gradient_wrt_raw_matches_fd(rng):
    x = jnp.asarray(rng.uniform(-B, B, 40))

    def f(raw):
        y, ld = forward(spline_from_raw(raw, B), x)
        return jnp.sum(y * 0.3 + ld)

    g_fn = jax.jit(jax.grad(f))
    f_jit = jax.jit(f)
    h = 1e-5
    for _ in range(50):
        raw = jnp.asarray(rng.normal(0, 1, n_raw(K)))
        g = np.asarray(g_fn(raw))
        eye = np.eye(raw.shape[0]) * h
        fd = np.array([(float(f_jit(raw + e)) - float(f_jit(raw - e))) / (2 * h) for e in eye])
        assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


def test_batched_parameters_broadcast(rng):
    raws = jnp.asarray(rng.normal(size=(5, n_raw(K))))
    t = spline_from_raw(raws, B)
    x = jnp.asarray(rng.normal(size=5))
    y, _ = forward(t, x)
    for i in range(5):
        yi, _ = forward(spline_from_raw(raws[i], B), x[i])
        assert float(y[i]) == pytest.approx(float(yi), abs=1e-14)
