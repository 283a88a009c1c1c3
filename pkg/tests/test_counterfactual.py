import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowiv.cgnf import ConditionalFlow, FlowArch, FlowTreatmentModel, ScmFlowModel
from flowiv.counterfactual import (
    CounterfactualQuery,
    abduce,
    batch_counterfactuals,
    interventional_mean,
    predict,
    predict_counterfactual,
    write_predictions,
)
from flowiv.errors import ValidationError
from flowiv.synthetic import KnownFirstStage

ARCH = dict(n_layers=3, n_bins=8, bound=4.0, hidden=(20, 20, 20))


def make_model(params_seed=None, spread=0.5, loc=0.0, scale=1.0):
    arch = FlowArch(1, **ARCH)
    if params_seed is None:
        params = np.zeros(arch.n_params)
    else:
        params = np.random.default_rng(params_seed).normal(0, spread, arch.n_params)
    hY = ConditionalFlow(arch, params, loc=loc, scale=scale)
    return ScmFlowModel(KnownFirstStage("DGP2"), hY)


def test_identity_abduction():
    assert abduce(make_model(), 0.3, 1.7) == pytest.approx(1.7, abs=1e-14)


@settings(max_examples=30)
@given(st.integers(0, 1000), st.floats(-3, 3), st.floats(-5, 5))
def test_abduce_predict_round_trip(seed, a, y):
    m = make_model(seed)
    assert predict(m, a, abduce(m, a, y)) == pytest.approx(y, abs=1e-7)


@settings(max_examples=30)
@given(st.integers(0, 1000), st.floats(-3, 3), st.floats(-5, 5), st.floats(-100, 100))
def test_counterfactual_consistency(seed, a, y, z):
    m = make_model(seed)
    assert predict_counterfactual(m, CounterfactualQuery(z, a, y, a)) == pytest.approx(y, abs=1e-7)


def test_instrument_is_ignored():
    m = make_model(4)
    q1 = CounterfactualQuery(-3.0, 0.2, 0.9, 1.1)
    q2 = CounterfactualQuery(5.0, 0.2, 0.9, 1.1)
    assert predict_counterfactual(m, q1) == predict_counterfactual(m, q2)


def test_rank_preservation():
    m = make_model(5, spread=1.0)
    a, a_prime = 0.4, -1.0
    ys = np.linspace(-4, 4, 50)
    e = abduce(m, np.full(50, a), ys)
    assert np.all(np.diff(e) > 0)
    y_cf = predict_counterfactual(m, CounterfactualQuery(0.0, np.full(50, a), ys, np.full(50, a_prime)))
    assert np.all(np.diff(y_cf) > 0)


def test_batch_matches_scalar():
    m = make_model(6)
    q = {"z": np.zeros(4), "a": np.array([0.1, -0.5, 1.0, 2.0]), "y": np.array([0.3, 1.0, -1.0, 0.0]),
         "a_prime": np.array([1.0, 0.0, -1.0, 0.5])}
    e_y, y_cf = batch_counterfactuals(m, q)
    for i in range(4):
        qi = CounterfactualQuery(0.0, q["a"][i], q["y"][i], q["a_prime"][i])
        assert y_cf[i] == pytest.approx(predict_counterfactual(m, qi), abs=1e-14)
        assert e_y[i] == pytest.approx(abduce(m, q["a"][i], q["y"][i]), abs=1e-14)


def test_query_validation():
    with pytest.raises(ValidationError):
        CounterfactualQuery(0.0, float("nan"), 1.0, 1.0)


def test_interventional_mean_identity():
    n_mc = 20_000
    r = interventional_mean(make_model(), 1.3, n_mc, np.random.default_rng(0))
    assert abs(r.mean) < 3 / math.sqrt(n_mc)
    again = interventional_mean(make_model(), 1.3, n_mc, np.random.default_rng(0))
    assert again.mean == r.mean


def test_interventional_mean_is_unconfounded():
    # affine outcome flow y = 2 + 3 e: E[Y | do(a)] = 2 whatever the correlation
    m = make_model(loc=2.0, scale=3.0)
    r = interventional_mean(m, 0.0, 50_000, np.random.default_rng(1))
    assert r.mean == pytest.approx(2.0, abs=4 * r.stderr)


def test_write_predictions(tmp_path):
    m = make_model(7)
    q = {"z": np.zeros(2), "a": np.array([0.1, 0.2]), "y": np.array([0.3, 0.4]), "a_prime": np.array([1.0, 2.0])}
    e_y, y_cf = batch_counterfactuals(m, q)
    write_predictions(tmp_path / "p.csv", q, e_y, y_cf)
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "z,a,y,a_prime,eY,y_cf"
    assert float(rows[2].split(",")[-1]) == y_cf[1]


# ---- fitted models against the analytic counterfactuals of the generating process


def test_dgp1_abduction(dgp1_model):
    m, _, _ = dgp1_model
    # y = 0.5 a^2 + e_Y  =>  e_Y = 1.5 - 0.5 = 1.0 on the data scale
    assert abduce(m, 1.0, 1.5) == pytest.approx(1.0, abs=0.15)


def test_dgp1_counterfactual(dgp1_model):
    m, _, _ = dgp1_model
    assert predict_counterfactual(m, CounterfactualQuery(0.0, 1.0, 1.5, 2.0)) == pytest.approx(3.0, abs=0.2)


def test_dgp1_interventional_mean(dgp1_model):
    m, _, _ = dgp1_model
    r = interventional_mean(m, 2.0, 20_000, np.random.default_rng(2))
    assert r.mean == pytest.approx(2.0, abs=0.1)


def test_dgp2_counterfactual(dgp2_model):
    m, _, _ = dgp2_model
    q = CounterfactualQuery(0.0, 0.0, (math.sin(1.5) + 1) * 0.7, 1.0)
    assert predict_counterfactual(m, q) == pytest.approx((math.sin(2.5) + 1) * 0.7, abs=0.2)
