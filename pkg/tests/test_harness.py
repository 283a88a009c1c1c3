import csv
import json
import math

import numpy as np
import pytest

from flowiv import harness, synthetic
from flowiv.baselines import DeepIvConfig
from flowiv.cgnf import TrainConfig
from flowiv.errors import NonFiniteError, ValidationError
from flowiv.harness import ExperimentConfig, MetricResult, counterfactual_mse, make_eval_set
from flowiv.synthetic import DgpSpec

TINY = dict(
    n_train=600, n_eval=500, repetitions=2,
    train=TrainConfig(steps=60), deep_iv=DeepIvConfig(steps=60, n_samples=4),
)


@pytest.mark.parametrize("dgp", synthetic.DGP_IDS)
def test_oracle_and_unit_bias(dgp):
    ev = make_eval_set(DgpSpec(dgp), 3000, 0.3, 1)
    truth = ev.truth
    assert counterfactual_mse(lambda q: truth, ev) == 0.0
    assert counterfactual_mse(lambda q: truth + 1.0, ev) == pytest.approx(1.0, abs=1e-12)
    assert counterfactual_mse(lambda q: synthetic.outcome(dgp, q.a_prime, ev.latents.eps_Y), ev) == 0.0


def test_nonfinite_prediction_names_query():
    ev = make_eval_set(DgpSpec("DGP1"), 10, 0.0, 2)

    def predict(q):
        out = np.zeros(10)
        out[7] = np.nan
        return out

    with pytest.raises(NonFiniteError, match="query 7") as exc:
        counterfactual_mse(predict, ev)
    assert exc.value.row == 7


def test_eval_set_a_prime_laws():
    ev = make_eval_set(DgpSpec("DGP2"), 1000, 0.0, 3, "marginal")
    np.testing.assert_array_equal(np.sort(ev.a_prime), np.sort(ev.data.a))
    ev = make_eval_set(DgpSpec("DGP2"), 100_000, 0.0, 3)
    assert abs(ev.a_prime.mean()) < 0.02 and abs(ev.a_prime.var() - 1) < 0.03
    # drawn independently of the unit
    assert abs(np.corrcoef(ev.a_prime, ev.data.a)[0, 1]) < 0.02
    with pytest.raises(ValidationError):
        ExperimentConfig(a_prime_law="uniform")


@pytest.mark.parametrize("law, expected", [("standard_normal", 0.632), ("marginal", 0.749)])
def test_wald_dgp2_rho0_closed_form(law, expected):
    # rho = 0 gives beta = 0, so the MSE is E[e_Y^2] E[(s(A) - s(A'))^2] with s = sin(. + 1.5):
    # A ~ N(0, 2) and, with E sin(X + c) = sin(c) exp(-v/2), E sin^2(X + c) = (1 - cos(2c) exp(-2v)) / 2
    def moments(v):
        return math.sin(1.5) * math.exp(-v / 2), (1 - math.cos(3.0) * math.exp(-2 * v)) / 2

    m1, s1 = moments(2.0)
    m2, s2 = moments(1.0 if law == "standard_normal" else 2.0)
    assert s1 + s2 - 2 * m1 * m2 == pytest.approx(expected, abs=1e-3)
    cfg = ExperimentConfig(dgp=DgpSpec("DGP2", 0.0), methods=("usual_iv",), n_train=40_000, n_eval=200_000,
                           repetitions=2, a_prime_law=law)
    (r,) = harness.run_comparison(cfg)
    assert r.mean == pytest.approx(s1 + s2 - 2 * m1 * m2, abs=0.01)


def test_wald_dgp1_near_reference():
    # single fresh draw of rho ~ U(-1, 1) per repetition, as in the comparison experiment
    cfg = ExperimentConfig(dgp=DgpSpec("DGP1", "uniform"), methods=("usual_iv",), n_train=40_000, repetitions=10)
    (r,) = harness.run_comparison(cfg)
    assert r.mean == pytest.approx(1.047, abs=0.15)


def test_config_validation():
    with pytest.raises(ValidationError):
        ExperimentConfig(methods=("magic",))
    with pytest.raises(ValidationError):
        ExperimentConfig(n_eval=0)
    with pytest.raises(ValidationError):
        ExperimentConfig(repetitions=0)
    with pytest.raises(ValidationError):
        ExperimentConfig.from_dict({"nonsense": 1})


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig(experiment="rho_sweep", dgp=DgpSpec("DGP2", 0.0), **TINY)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert harness.load_config(p) == cfg


def test_metric_result_recomputable():
    vals = (0.3, 0.1, 0.25, 0.7)
    r = MetricResult("flow_iv", "DGP2", vals)
    assert abs(r.mean - np.mean(vals)) < 1e-12
    assert abs(r.std - np.std(vals, ddof=1)) < 1e-12
    assert "flow_iv" in str(r)


def test_comparison_reproducible_and_resumable(tmp_path):
    cfg = ExperimentConfig(dgp=DgpSpec("DGP2", "uniform"), seed=4, **TINY)
    out = tmp_path / "res.csv"
    first = harness.run_comparison(cfg, out)
    assert [r.method for r in first] == list(harness.METHODS)
    assert all(len(r.values) == 2 and r.failures == 0 for r in first)
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    assert set(harness.CSV_COLUMNS) == set(rows[0])
    mtime = out.stat().st_mtime_ns

    # a rerun finds every row and computes nothing
    again = harness.run_comparison(cfg, out)
    assert out.stat().st_mtime_ns == mtime
    assert [r.values for r in again] == [r.values for r in first]

    # fresh run in memory reproduces the stored values bit for bit
    fresh = harness.run_comparison(cfg)
    assert [r.values for r in fresh] == [tuple(float(repr(v)) for v in r.values) for r in first]


def test_resume_after_interruption(tmp_path):
    cfg = ExperimentConfig(dgp=DgpSpec("DGP1", 0.2), methods=("usual_iv",), n_train=500, n_eval=200, repetitions=4)
    out = tmp_path / "res.csv"
    full = harness.run_comparison(cfg, out)
    lines = out.read_text().splitlines()
    out.write_text("\n".join(lines[:3]) + "\n")  # header + two completed repetitions
    resumed = harness.run_comparison(cfg, out)
    assert resumed[0].values == full[0].values
    assert len(out.read_text().splitlines()) == 5


def test_resume_refuses_other_config(tmp_path):
    out = tmp_path / "res.csv"
    cfg = ExperimentConfig(dgp=DgpSpec("DGP1", 0.2), methods=("usual_iv",), n_train=500, n_eval=200, repetitions=1)
    harness.run_comparison(cfg, out)
    with pytest.raises(ValidationError):
        harness.run_comparison(ExperimentConfig(**{**cfg.__dict__, "n_eval": 300}), out)


def test_failures_recorded_and_run_continues(tmp_path, monkeypatch):
    calls = []

    def flaky(d):
        calls.append(1)
        if len(calls) == 1:
            raise NonFiniteError("boom")
        return harness.baselines.WaldModel(0.0, 0.0)

    monkeypatch.setattr(harness.baselines, "fit_wald", flaky)
    cfg = ExperimentConfig(dgp=DgpSpec("DGP1", 0.0), methods=("usual_iv",), n_train=200, n_eval=100, repetitions=3)
    (r,) = harness.run_comparison(cfg, tmp_path / "res.csv")
    assert r.failures == 1 and len(r.values) == 2
    assert "NonFiniteError" in (tmp_path / "res.csv").read_text()


def test_convergence_and_sweep_preconditions():
    with pytest.raises(ValidationError):
        harness.run_convergence(ExperimentConfig(dgp=DgpSpec("DGP1")))
    with pytest.raises(ValidationError):
        harness.run_rho_sweep(ExperimentConfig(dgp=DgpSpec("DGP1")))


def test_rho_sweep_layout():
    cfg = ExperimentConfig(dgp=DgpSpec("DGP2", 0.0), methods=("usual_iv",), n_train=2000, n_eval=2000,
                           repetitions=2, rho_grid=(0.0, 0.4, 0.8))
    res = harness.run_rho_sweep(cfg)
    assert [r.rho_setting for r in res] == ["0.0", "0.4", "0.8"]
    table = harness.format_table(res, "rho")
    assert table.splitlines()[0].split()[1:] == ["0.0", "0.4", "0.8"]


def test_convergence_wald_small_at_large_n():
    cfg = ExperimentConfig(dgp=DgpSpec("LINEAR_GAUSS", "uniform"), methods=("usual_iv",), n_grid=(500, 32_000),
                           n_eval=5000, repetitions=5)
    res = harness.run_convergence(cfg)
    by_n = {r.n_train: r.mean for r in res}
    assert by_n[32_000] < 0.01
    assert by_n[32_000] < by_n[500]


def test_fitted_first_stage_path():
    cfg = ExperimentConfig(dgp=DgpSpec("DGP1", 0.3), methods=("deep_iv", "flow_iv"), known_first_stage=False, **{
        **TINY, "repetitions": 1})
    res = harness.run_comparison(cfg)
    assert all(r.failures == 0 and np.isfinite(r.mean) for r in res)
