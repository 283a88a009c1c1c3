"""Experiment orchestration: counterfactual MSE, method comparison, sample-size
convergence and the rho sweep.

Each experiment streams one CSV row per (cell, repetition, method) to its
results file as soon as it is computed. Re-running with the same results file
skips rows that are already there, so long runs can be interrupted and
resumed. A sidecar ``<results>.config.json`` pins the configuration the rows
were produced with; resuming under a different configuration is refused.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from flowiv import baselines, synthetic
from flowiv.cgnf import Dataset, TrainConfig, fit, fit_treatment
from flowiv.counterfactual import CounterfactualQuery, predict_counterfactual
from flowiv.errors import FlowIVError, NonFiniteError, ValidationError
from flowiv.synthetic import DgpSpec, Latents

log = logging.getLogger(__name__)

METHODS = ("usual_iv", "deep_iv", "flow_iv")
EXPERIMENTS = ("comparison", "convergence", "rho_sweep")
CSV_COLUMNS = (
    "experiment", "method", "dgp", "rho", "n_train", "repetition", "mse", "seconds",
    "rho_setting", "error",
)


# --------------------------------------------------------------------------
# Metric
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalSet:
    """Held-out oracle sample plus one counterfactual treatment per unit."""

    dgp_id: str
    data: Dataset
    latents: Latents
    a_prime: np.ndarray

    def __post_init__(self):
        if len(self.data) < 1 or np.shape(self.a_prime) != (len(self.data),):
            raise ValidationError("evaluation set must be non-empty with one a' per row")

    @property
    def queries(self) -> CounterfactualQuery:
        d = self.data
        return CounterfactualQuery(d.z, d.a, d.y, self.a_prime)

    @property
    def truth(self) -> np.ndarray:
        return np.asarray(synthetic.oracle_counterfactual(self.dgp_id, self.latents, self.a_prime))


def make_eval_set(spec: DgpSpec, n: int, rho: float, seed, a_prime_law: str = "standard_normal") -> EvalSet:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    data_seed, a_prime_seed = ss.spawn(2)
    d, lat = synthetic.generate(replace(spec, rho=rho, seed=data_seed), n)
    a_prime = synthetic.counterfactual_treatments(d.a, np.random.default_rng(a_prime_seed), a_prime_law)
    return EvalSet(spec.id, d, lat, a_prime)


def counterfactual_mse(predict: Callable[[CounterfactualQuery], np.ndarray], eval_set: EvalSet) -> float:
    """Monte Carlo mean of (Y(a') - prediction)^2 over the evaluation set.

    ``predict`` receives the whole batch of queries as one
    :class:`CounterfactualQuery` with array fields.
    """
    pred = np.broadcast_to(np.asarray(predict(eval_set.queries), dtype=np.float64), eval_set.a_prime.shape)
    bad = np.flatnonzero(~np.isfinite(pred))
    if bad.size:
        i = int(bad[0])
        d = eval_set.data
        raise NonFiniteError(
            f"non-finite prediction for query {i} (z={d.z[i]!r}, a={d.a[i]!r}, y={d.y[i]!r}, "
            f"a_prime={eval_set.a_prime[i]!r})",
            row=i,
        )
    return float(np.mean((eval_set.truth - pred) ** 2))


# --------------------------------------------------------------------------
# Configuration and results
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "comparison"
    dgp: DgpSpec = DgpSpec("DGP1", "uniform")
    methods: tuple[str, ...] = METHODS
    n_train: int = 10_000
    n_eval: int = 20_000
    repetitions: int = 5
    seed: int = 0
    train: TrainConfig = TrainConfig()
    deep_iv: baselines.DeepIvConfig = baselines.DeepIvConfig()
    known_first_stage: bool = True
    n_grid: tuple[int, ...] = (500, 2000, 8000, 32000)
    rho_grid: tuple[float, ...] = (0.0, 0.4, 0.8)
    a_prime_law: str = "standard_normal"

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        object.__setattr__(self, "rho_grid", tuple(float(r) for r in self.rho_grid))
        if self.experiment not in EXPERIMENTS:
            raise ValidationError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        unknown = set(self.methods) - set(METHODS)
        if unknown or not self.methods:
            raise ValidationError(f"methods must be a non-empty subset of {METHODS}")
        if self.a_prime_law not in synthetic.A_PRIME_LAWS:
            raise ValidationError(f"a_prime_law must be one of {synthetic.A_PRIME_LAWS}")
        if self.n_eval < 1 or self.repetitions < 1 or self.n_train < 1:
            raise ValidationError("n_train, n_eval and repetitions must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["deep_iv"] = {**asdict(self.deep_iv), "hidden": list(self.deep_iv.hidden)}
        for k in ("methods", "n_grid", "rho_grid"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown experiment options: {sorted(unknown)}")
        if "dgp" in d and isinstance(d["dgp"], dict):
            d["dgp"] = DgpSpec(**d["dgp"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "deep_iv" in d:
            d["deep_iv"] = baselines.DeepIvConfig(**d["deep_iv"])
        return cls(**d)


def load_config(path) -> ExperimentConfig:
    try:
        return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise ValidationError(f"{path}: cannot read experiment config ({e})") from e


@dataclass(frozen=True)
class MetricResult:
    method: str
    dgp: str
    values: tuple[float, ...]
    rho_setting: str = ""
    n_train: int = 0
    failures: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else float("nan")

    @property
    def std(self) -> float:
        if len(self.values) < 2:
            return 0.0
        return float(np.std(self.values, ddof=1))

    def __str__(self) -> str:
        return (
            f"{self.method:9s} {self.dgp:12s} rho={self.rho_setting:8s} n={self.n_train:6d} "
            f"mse={self.mean:.4f} ± {self.std:.4f} (reps={len(self.values)}, failures={self.failures})"
        )


# --------------------------------------------------------------------------
# Running cells
# --------------------------------------------------------------------------


@dataclass
class _Cell:
    spec: DgpSpec
    n_train: int

    @property
    def rho_setting(self) -> str:
        return str(self.spec.rho)


def _key(experiment, method, dgp, rho_setting, n_train, rep) -> tuple:
    return (experiment, method, dgp, str(rho_setting), int(n_train), int(rep))


class ResultStore:
    """Append-only CSV of per-repetition results with resume support."""

    def __init__(self, path, cfg: ExperimentConfig):
        self.path = Path(path) if path is not None else None
        self.rows: dict[tuple, dict] = {}
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        sidecar = self.path.with_name(self.path.name + ".config.json")
        cfg_json = json.dumps(cfg.to_dict(), sort_keys=True)
        if sidecar.exists() and self.path.exists():
            if json.loads(sidecar.read_text()) != json.loads(cfg_json):
                raise ValidationError(
                    f"{self.path} was produced with a different configuration; "
                    "remove it or choose another results file"
                )
        sidecar.write_text(cfg_json)
        if self.path.exists():
            with open(self.path, newline="") as fh:
                for row in csv.DictReader(fh):
                    self.rows[self._row_key(row)] = row
        else:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(CSV_COLUMNS)

    @staticmethod
    def _row_key(row: dict) -> tuple:
        return _key(row["experiment"], row["method"], row["dgp"], row["rho_setting"], row["n_train"], row["repetition"])

    def __contains__(self, key) -> bool:
        return key in self.rows

    def add(self, row: dict) -> None:
        row = {c: row.get(c, "") for c in CSV_COLUMNS}
        self.rows[self._row_key(row)] = {k: str(v) for k, v in row.items()}
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[c] for c in CSV_COLUMNS])

    def values(self, experiment, method, dgp, rho_setting, n_train, reps) -> tuple[list[float], int]:
        vals, failures = [], 0
        for rep in range(reps):
            row = self.rows.get(_key(experiment, method, dgp, rho_setting, n_train, rep))
            if row is None:
                continue
            if row["error"]:
                failures += 1
            else:
                vals.append(float(row["mse"]))
        return vals, failures


def _rep_seeds(cfg: ExperimentConfig, cell: _Cell, rep: int):
    tag = [cfg.seed, synthetic.DGP_IDS.index(cell.spec.id), cell.n_train, rep]
    if cell.spec.rho != "uniform":
        tag.append(int(round(float(cell.spec.rho) * 1e6)) + 10**7)
    return np.random.SeedSequence(tag).spawn(4)


def _predictors(method: str, cfg: ExperimentConfig, train: Dataset, spec: DgpSpec, fit_seed: int, shared: dict):
    """Fit ``method`` and return a batch predictor for counterfactual queries."""
    if method == "usual_iv":
        m = baselines.fit_wald(train)
        return lambda q: baselines.counterfactual_wald(m, q)
    first_stage = _first_stage(cfg, train, spec, fit_seed, shared)
    if method == "deep_iv":
        m = baselines.fit_deep_iv(train, first_stage, replace(cfg.deep_iv, seed=fit_seed))
        return lambda q: baselines.counterfactual_deep_iv(m, q)
    if method == "flow_iv":
        m = fit(train, replace(cfg.train, seed=fit_seed), first_stage=first_stage)
        return lambda q: predict_counterfactual(m, q)
    raise ValidationError(f"unknown method {method!r}")


def _first_stage(cfg, train, spec, fit_seed, shared):
    if cfg.known_first_stage:
        return synthetic.KnownFirstStage(spec.id)
    if "first_stage" not in shared:
        shared["first_stage"] = fit_treatment(train, replace(cfg.train, seed=fit_seed))
    return shared["first_stage"]


def _run_cell(cfg: ExperimentConfig, cell: _Cell, store: ResultStore) -> None:
    for rep in range(cfg.repetitions):
        todo = [
            m for m in cfg.methods
            if _key(cfg.experiment, m, cell.spec.id, cell.rho_setting, cell.n_train, rep) not in store
        ]
        if not todo:
            continue
        rho_ss, train_ss, eval_ss, fit_ss = _rep_seeds(cfg, cell, rep)
        rho = cell.spec.resolve_rho(np.random.default_rng(rho_ss))
        train, _ = synthetic.generate(replace(cell.spec, rho=rho, seed=train_ss), cell.n_train)
        eval_set = make_eval_set(cell.spec, cfg.n_eval, rho, eval_ss, cfg.a_prime_law)
        fit_seed = int(fit_ss.generate_state(1)[0] % (2**31))
        shared: dict = {}
        for method in todo:
            t0 = time.perf_counter()
            row = dict(
                experiment=cfg.experiment, method=method, dgp=cell.spec.id, rho=repr(rho),
                n_train=cell.n_train, repetition=rep, rho_setting=cell.rho_setting, error="",
            )
            try:
                predict = _predictors(method, cfg, train, cell.spec, fit_seed, shared)
                row["mse"] = repr(counterfactual_mse(predict, eval_set))
            except (FlowIVError, FloatingPointError) as e:
                log.warning("repetition %d of %s/%s failed: %s", rep, method, cell.spec.id, e)
                row["mse"] = "nan"
                row["error"] = f"{type(e).__name__}: {e}".replace("\n", " ")
            row["seconds"] = f"{time.perf_counter() - t0:.3f}"
            store.add(row)
            log.info("%s %s rho=%s n=%d rep=%d mse=%s", cfg.experiment, method, cell.rho_setting,
                     cell.n_train, rep, row["mse"])


def _collect(cfg: ExperimentConfig, cells: Sequence[_Cell], store: ResultStore) -> list[MetricResult]:
    out = []
    for cell in cells:
        for method in cfg.methods:
            vals, failures = store.values(
                cfg.experiment, method, cell.spec.id, cell.rho_setting, cell.n_train, cfg.repetitions
            )
            out.append(MetricResult(method, cell.spec.id, tuple(vals), cell.rho_setting, cell.n_train, failures))
    return out


def _run(cfg: ExperimentConfig, cells: Sequence[_Cell], results_path) -> list[MetricResult]:
    store = ResultStore(results_path, cfg)
    for cell in cells:
        _run_cell(cfg, cell, store)
    results = _collect(cfg, cells, store)
    failed = sum(r.failures for r in results)
    if failed:
        log.warning("%s: %d failed repetitions", cfg.experiment, failed)
    return results


def run_comparison(cfg: ExperimentConfig, results_path=None) -> list[MetricResult]:
    """Fit every method on fresh data per repetition and score counterfactual MSE."""
    cfg = replace(cfg, experiment="comparison")
    return _run(cfg, [_Cell(cfg.dgp, cfg.n_train)], results_path)


def run_convergence(cfg: ExperimentConfig, results_path=None) -> list[MetricResult]:
    """Counterfactual MSE for each training-set size in ``cfg.n_grid``."""
    cfg = replace(cfg, experiment="convergence")
    if cfg.dgp.id != "LINEAR_GAUSS":
        raise ValidationError("the convergence study uses the LINEAR_GAUSS process")
    return _run(cfg, [_Cell(cfg.dgp, n) for n in cfg.n_grid], results_path)


def run_rho_sweep(cfg: ExperimentConfig, results_path=None) -> list[MetricResult]:
    """Counterfactual MSE on DGP2 for each fixed rho in ``cfg.rho_grid``."""
    cfg = replace(cfg, experiment="rho_sweep")
    if cfg.dgp.id != "DGP2":
        raise ValidationError("the rho sweep uses DGP2")
    cells = [_Cell(replace(cfg.dgp, rho=r), cfg.n_train) for r in cfg.rho_grid]
    return _run(cfg, cells, results_path)


def run_experiment(cfg: ExperimentConfig, results_path=None) -> list[MetricResult]:
    runner = {"comparison": run_comparison, "convergence": run_convergence, "rho_sweep": run_rho_sweep}
    return runner[cfg.experiment](cfg, results_path)


def format_table(results: Sequence[MetricResult], column: str = "dgp") -> str:
    """Method-by-column table of ``mean ± std`` cells."""
    def col_of(r):
        return {"dgp": r.dgp, "rho": r.rho_setting, "n_train": str(r.n_train)}[column]

    cols = list(dict.fromkeys(col_of(r) for r in results))
    methods = list(dict.fromkeys(r.method for r in results))
    cell = {(r.method, col_of(r)): f"{r.mean:.3f} ± {r.std:.3f}" for r in results}
    width = max(15, *(len(c) + 2 for c in cols))
    lines = ["method".ljust(10) + "".join(c.rjust(width) for c in cols)]
    for m in methods:
        lines.append(m.ljust(10) + "".join(cell.get((m, c), "-").rjust(width) for c in cols))
    return "\n".join(lines)
