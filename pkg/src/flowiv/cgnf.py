"""Causal graphical normalizing flow for the instrument -> treatment -> outcome chain.

The model is

    Z = h_Z(e_Z),   A = h_A(Z, e_A),   Y = h_Y(A, e_Y),   (e_A, e_Y) ~ N2(rho)

where every ``h`` is a stack of monotone rational-quadratic splines whose
parameters come from a small MLP of the conditioning variable. ``h_Y`` only
ever sees the treatment, never the instrument (exclusion restriction).

Fitting maximises the log-likelihood in three stages: the marginal of Z over
``h_Z``, the conditional of A given Z over ``h_A``, and finally the
conditional of Y given (Z, A) over ``h_Y`` jointly with rho.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import jax.numpy as jnp
import numpy as np

from flowiv import rq_spline
from flowiv.errors import NonFiniteError, ValidationError
from flowiv.nn_core import MlpSpec, ParamVector, init_mlp, minimize, mlp_apply
from flowiv.noise import CorrelatedGaussian, conditional_logpdf, conditional_logpdf_raw, std_normal_logpdf

log = logging.getLogger(__name__)

MODEL_FORMAT = "flowiv-model/1"


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    z: np.ndarray
    a: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        cols = {}
        for name in ("z", "a", "y"):
            col = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            col.setflags(write=False)
            cols[name] = col
            object.__setattr__(self, name, col)
        n = {c.shape[0] for c in cols.values()}
        if len(n) != 1:
            raise ValidationError("z, a and y must have the same length")
        if cols["z"].shape[0] < 1:
            raise ValidationError("a dataset needs at least one row")
        for name, col in cols.items():
            bad = np.flatnonzero(~np.isfinite(col))
            if bad.size:
                raise ValidationError(f"non-finite value in column {name!r} at row {bad[0]}")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "Dataset":
        arr = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    def __len__(self) -> int:
        return self.z.shape[0]

    def rows(self) -> Iterator[tuple[float, float, float]]:
        return zip(self.z.tolist(), self.a.tolist(), self.y.tolist())

    def take(self, idx) -> "Dataset":
        return Dataset(self.z[idx], self.a[idx], self.y[idx])


def _loc_scale(x: np.ndarray) -> tuple[float, float]:
    scale = float(np.std(x))
    return float(np.mean(x)), scale if scale > 1e-12 else 1.0


# --------------------------------------------------------------------------
# Conditional flows
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowArch:
    n_cond: int
    n_layers: int = 3
    n_bins: int = rq_spline.N_BINS
    bound: float = rq_spline.BOUND
    hidden: tuple[int, ...] = (20, 20, 20)

    def __post_init__(self):
        if self.n_cond not in (0, 1):
            raise ValueError("n_cond must be 0 or 1")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    @property
    def n_raw(self) -> int:
        return rq_spline.n_raw(self.n_bins)

    @property
    def mlp(self) -> MlpSpec:
        return MlpSpec(1, self.n_raw, self.hidden)

    @property
    def layer_size(self) -> int:
        return self.n_raw if self.n_cond == 0 else self.mlp.n_params

    @property
    def n_params(self) -> int:
        return self.n_layers * self.layer_size


def _splines(arch: FlowArch, params, cond):
    out = []
    size = arch.layer_size
    for i in range(arch.n_layers):
        p = params[i * size : (i + 1) * size]
        raw = p if arch.n_cond == 0 else mlp_apply(arch.mlp, p, cond[..., None])
        out.append(rq_spline.spline_from_raw(raw, arch.bound))
    return out


def flow_forward_std(arch: FlowArch, params, cond, eps):
    """Noise -> standardised value through all layers (traceable)."""
    v = eps
    total = 0.0
    for t in _splines(arch, params, cond):
        v, ld = rq_spline.forward(t, v)
        total = total + ld
    return v, total


def flow_inverse_std(arch: FlowArch, params, cond, v):
    """Standardised value -> noise; logdet is log |d eps / d v|."""
    eps = v
    total = 0.0
    for t in reversed(_splines(arch, params, cond)):
        eps, ld = rq_spline.inverse(t, eps)
        total = total + ld
    return eps, total


@dataclass(frozen=True)
class ConditionalFlow:
    """A trained (or freshly initialised) flow plus its affine data scaling.

    The splines act on standardised coordinates: the conditioning input is
    mapped through ``(c - cond_loc) / cond_scale`` and the output through
    ``loc + scale * v``. Both maps are part of the flow, so ``forward`` and
    ``inverse`` work in data units and their log-determinants include the
    scaling.
    """

    arch: FlowArch
    params: np.ndarray = field(repr=False)
    loc: float = 0.0
    scale: float = 1.0
    cond_loc: float = 0.0
    cond_scale: float = 1.0

    def __post_init__(self):
        p = np.array(self.params, dtype=np.float64).reshape(-1)
        if p.shape[0] != self.arch.n_params:
            raise ValueError(f"flow expects {self.arch.n_params} parameters, got {p.shape[0]}")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @classmethod
    def init(cls, arch: FlowArch, rng: np.random.Generator, **scaling) -> "ConditionalFlow":
        if arch.n_cond == 0:
            params = np.zeros(arch.n_params)
        else:
            params = np.concatenate([init_mlp(arch.mlp, rng) for _ in range(arch.n_layers)])
        return cls(arch, params, **scaling)

    @property
    def n_cond_inputs(self) -> int:
        return self.arch.n_cond

    def with_params(self, params) -> "ConditionalFlow":
        return ConditionalFlow(self.arch, params, self.loc, self.scale, self.cond_loc, self.cond_scale)

    def param_vector(self, prefix: str) -> ParamVector:
        size = self.arch.layer_size
        return ParamVector.from_segments(
            [(f"{prefix}.layer{i}", self.params[i * size : (i + 1) * size]) for i in range(self.arch.n_layers)]
        )

    def std_cond(self, cond):
        if self.arch.n_cond == 0:
            return None
        return (jnp.asarray(cond, dtype=jnp.float64) - self.cond_loc) / self.cond_scale

    def _check(self, cond):
        if self.arch.n_cond == 1 and cond is None:
            raise ValidationError("this flow is conditional; a conditioning value is required")
        if self.arch.n_cond == 0 and cond is not None:
            raise ValidationError("this flow is unconditional; no conditioning value accepted")

    def to_dict(self) -> dict:
        return {
            "arch": asdict(self.arch),
            "params": self.params.tolist(),
            "loc": self.loc,
            "scale": self.scale,
            "cond_loc": self.cond_loc,
            "cond_scale": self.cond_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionalFlow":
        arch = dict(d["arch"])
        arch["hidden"] = tuple(arch["hidden"])
        return cls(FlowArch(**arch), np.asarray(d["params"]), d["loc"], d["scale"], d["cond_loc"], d["cond_scale"])


def flow_forward(f: ConditionalFlow, cond, eps):
    """Map noise to a value in data units. Returns ``(value, log dvalue/deps)``."""
    f._check(cond)
    eps = jnp.asarray(eps, dtype=jnp.float64)
    v, ld = flow_forward_std(f.arch, jnp.asarray(f.params), f.std_cond(cond), eps)
    return np.asarray(f.loc + f.scale * v), np.asarray(ld + math.log(f.scale))


def flow_inverse(f: ConditionalFlow, cond, value):
    """Map a value in data units back to noise. Returns ``(eps, log deps/dvalue)``."""
    f._check(cond)
    v = (jnp.asarray(value, dtype=jnp.float64) - f.loc) / f.scale
    eps, ld = flow_inverse_std(f.arch, jnp.asarray(f.params), f.std_cond(cond), v)
    return np.asarray(eps), np.asarray(ld - math.log(f.scale))


# --------------------------------------------------------------------------
# Treatment models (the Z and A|Z parts of the SCM)
# --------------------------------------------------------------------------


class TreatmentModel(Protocol):
    """The instrument and first-stage mechanisms ``g_Z`` and ``g_A``.

    Implementations are the learned :class:`FlowTreatmentModel` and the known
    data-generating mechanisms in :mod:`flowiv.synthetic`.
    """

    kind: str

    def instrument_noise(self, z) -> tuple[np.ndarray, np.ndarray]: ...

    def instrument(self, eps_z) -> np.ndarray: ...

    def treatment_noise(self, z, a) -> tuple[np.ndarray, np.ndarray]: ...

    def treatment(self, z, eps_a) -> np.ndarray: ...

    def to_dict(self) -> dict: ...


@dataclass(frozen=True)
class FlowTreatmentModel:
    hZ: ConditionalFlow
    hA: ConditionalFlow
    kind: str = "flow"

    def instrument_noise(self, z):
        return flow_inverse(self.hZ, None, z)

    def instrument(self, eps_z):
        return flow_forward(self.hZ, None, eps_z)[0]

    def treatment_noise(self, z, a):
        return flow_inverse(self.hA, z, a)

    def treatment(self, z, eps_a):
        return flow_forward(self.hA, z, eps_a)[0]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hZ": self.hZ.to_dict(), "hA": self.hA.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "FlowTreatmentModel":
        return cls(ConditionalFlow.from_dict(d["hZ"]), ConditionalFlow.from_dict(d["hA"]))


TREATMENT_KINDS: dict[str, type] = {"flow": FlowTreatmentModel}


def treatment_from_dict(d: dict) -> TreatmentModel:
    import flowiv.synthetic  # noqa: F401  registers the known mechanisms

    try:
        cls = TREATMENT_KINDS[d["kind"]]
    except KeyError:
        raise ValidationError(f"unknown treatment model kind {d.get('kind')!r}") from None
    return cls.from_dict(d)


# --------------------------------------------------------------------------
# Full model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    lr: float = 1e-3
    batch_size: int | None = 1024
    n_layers: int = 3
    n_bins: int = rq_spline.N_BINS
    bound: float = rq_spline.BOUND
    hidden: tuple[int, ...] = (20, 20, 20)
    seed: int = 0
    dtype: str = "float32"
    min_n: int = 100
    joint_steps: int = 0
    average_last: int = 500

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.steps < 0 or self.joint_steps < 0 or self.average_last < 0:
            raise ValidationError("step counts must be non-negative")
        if self.lr <= 0:
            raise ValidationError("learning rate must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValidationError("batch_size must be positive or None")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be 'float32' or 'float64'")

    def arch(self, n_cond: int) -> FlowArch:
        return FlowArch(n_cond, self.n_layers, self.n_bins, self.bound, self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ScmFlowModel:
    treatment: TreatmentModel
    hY: ConditionalFlow
    noise: CorrelatedGaussian = CorrelatedGaussian()
    config: TrainConfig = TrainConfig()
    traces: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        # exclusion restriction: the outcome flow takes exactly one conditioning input, the treatment
        if self.hY.n_cond_inputs != 1:
            raise ValidationError("the outcome flow must be conditioned on the treatment only")

    @property
    def rho(self) -> float:
        return self.noise.rho

    @property
    def hZ(self) -> ConditionalFlow | None:
        return getattr(self.treatment, "hZ", None)

    @property
    def hA(self) -> ConditionalFlow | None:
        return getattr(self.treatment, "hA", None)

    def param_vector(self) -> ParamVector:
        segs = []
        for prefix, f in (("hZ", self.hZ), ("hA", self.hA), ("hY", self.hY)):
            if f is not None:
                pv = f.param_vector(prefix)
                segs += [(n, np.asarray(pv.segment(n))) for n in pv.names]
        segs.append(("rho_raw", np.array([self.noise.rho_raw])))
        return ParamVector.from_segments(segs)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "treatment": self.treatment.to_dict(),
            "hY": self.hY.to_dict(),
            "rho_raw": self.noise.rho_raw,
            "rho": self.noise.rho,
            "config": self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScmFlowModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValidationError(f"not a {MODEL_FORMAT} file")
        return cls(
            treatment_from_dict(d["treatment"]),
            ConditionalFlow.from_dict(d["hY"]),
            CorrelatedGaussian(float(d["rho_raw"])),
            TrainConfig.from_dict(d["config"]),
        )


def save_model(m: ScmFlowModel, path) -> None:
    # json writes floats with repr, which round-trips exactly
    Path(path).write_text(json.dumps(m.to_dict(), indent=1))


def load_model(path) -> ScmFlowModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: not a model file ({e})") from e
    return ScmFlowModel.from_dict(d)


# --------------------------------------------------------------------------
# Likelihood
# --------------------------------------------------------------------------


def _first_bad_row(*arrays) -> int:
    bad = np.zeros(arrays[0].shape, bool)
    for arr in arrays:
        bad |= ~np.isfinite(arr)
    return int(np.flatnonzero(bad)[0])


def log_lik_rows(m: ScmFlowModel, d: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row contributions to the three likelihood terms, in data units."""
    e_z, ld_z = m.treatment.instrument_noise(d.z)
    e_a, ld_a = m.treatment.treatment_noise(d.z, d.a)
    e_y, ld_y = flow_inverse(m.hY, d.a, d.y)
    l1 = np.asarray(std_normal_logpdf(e_z) + ld_z)
    l2 = np.asarray(std_normal_logpdf(e_a) + ld_a)
    l3 = np.asarray(conditional_logpdf(e_y, e_a, m.rho) + ld_y)
    for name, arr in (("L1", l1), ("L2", l2), ("L3", l3)):
        if not np.all(np.isfinite(arr)):
            row = _first_bad_row(arr)
            raise NonFiniteError(f"non-finite {name} contribution at row {row}", row=row)
    return l1, l2, l3


def log_lik_terms(m: ScmFlowModel, d: Dataset) -> tuple[float, float, float]:
    l1, l2, l3 = log_lik_rows(m, d)
    return float(l1.sum()), float(l2.sum()), float(l3.sum())


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def _nll_marginal(arch, params, batch, extra):
    (v,) = batch
    eps, ld = flow_inverse_std(arch, params, None, v)
    return -jnp.mean(std_normal_logpdf(eps) + ld)


def _nll_conditional(arch, params, batch, extra):
    c, v = batch
    eps, ld = flow_inverse_std(arch, params, c, v)
    return -jnp.mean(std_normal_logpdf(eps) + ld)


def _nll_outcome(arch, params, batch, extra):
    a, y, e_a = batch
    e_y, ld = flow_inverse_std(arch, params[:-1], a, y)
    return -jnp.mean(conditional_logpdf_raw(e_y, e_a, params[-1]) + ld)


def _nll_outcome_fixed_rho(arch, params, batch, extra):
    a, y, e_a = batch
    (rho,) = extra
    e_y, ld = flow_inverse_std(arch, params, a, y)
    return -jnp.mean(conditional_logpdf(e_y, e_a, rho) + ld)


def _nll_joint(archs, params, batch, extra):
    arch_z, arch_a, arch_y = archs
    z, a, y = batch
    nz, na = arch_z.n_params, arch_a.n_params
    pz, pa, py = params[:nz], params[nz : nz + na], params[nz + na : -1]
    e_z, ld_z = flow_inverse_std(arch_z, pz, None, z)
    e_a, ld_a = flow_inverse_std(arch_a, pa, z, a)
    e_y, ld_y = flow_inverse_std(arch_y, py, a, y)
    ll = (
        std_normal_logpdf(e_z) + ld_z
        + std_normal_logpdf(e_a) + ld_a
        + conditional_logpdf_raw(e_y, e_a, params[-1]) + ld_y
    )
    return -jnp.mean(ll)


def _std(x, loc, scale):
    return (np.asarray(x) - loc) / scale


def _check_size(d: Dataset, cfg: TrainConfig):
    if len(d) < cfg.min_n:
        raise ValidationError(f"need at least {cfg.min_n} rows to fit, got {len(d)}")


def _opt_kwargs(cfg: TrainConfig, seed_offset: int, phase: str) -> dict:
    return dict(
        steps=cfg.steps, lr=cfg.lr, batch_size=cfg.batch_size,
        seed=cfg.seed * 1000 + seed_offset, dtype=cfg.dtype, phase=phase,
        average_last=cfg.average_last if cfg.batch_size is not None else 0,
    )


def fit_treatment(d: Dataset, cfg: TrainConfig = TrainConfig(), traces: dict | None = None) -> FlowTreatmentModel:
    """Stages one and two: maximise L1 over h_Z, then L2 over h_A."""
    _check_size(d, cfg)
    rng = np.random.default_rng(cfg.seed)
    z_loc, z_scale = _loc_scale(d.z)
    a_loc, a_scale = _loc_scale(d.a)
    z_std = _std(d.z, z_loc, z_scale)
    a_std = _std(d.a, a_loc, a_scale)

    hZ = ConditionalFlow.init(cfg.arch(0), rng, loc=z_loc, scale=z_scale)
    res = minimize(_nll_marginal, hZ.params, (z_std,), static=hZ.arch, **_opt_kwargs(cfg, 1, "L1"))
    hZ = hZ.with_params(res.params)
    if traces is not None:
        traces["L1"] = res.trace
    log.info("stage L1 done: final batch nll %.4f", res.trace[-1] if res.trace.size else float("nan"))

    hA = ConditionalFlow.init(cfg.arch(1), rng, loc=a_loc, scale=a_scale, cond_loc=z_loc, cond_scale=z_scale)
    res = minimize(_nll_conditional, hA.params, (z_std, a_std), static=hA.arch, **_opt_kwargs(cfg, 2, "L2"))
    hA = hA.with_params(res.params)
    if traces is not None:
        traces["L2"] = res.trace
    log.info("stage L2 done: final batch nll %.4f", res.trace[-1] if res.trace.size else float("nan"))
    return FlowTreatmentModel(hZ, hA)


def _outcome_setup(d: Dataset, cfg: TrainConfig, treatment: TreatmentModel):
    rng = np.random.default_rng([cfg.seed, 3])
    a_loc, a_scale = _loc_scale(d.a)
    y_loc, y_scale = _loc_scale(d.y)
    hY = ConditionalFlow.init(cfg.arch(1), rng, loc=y_loc, scale=y_scale, cond_loc=a_loc, cond_scale=a_scale)
    e_a = np.asarray(treatment.treatment_noise(d.z, d.a)[0])
    if not np.all(np.isfinite(e_a)):
        row = _first_bad_row(e_a)
        raise NonFiniteError(f"treatment noise is not finite at row {row}", row=row)
    batch = (_std(d.a, a_loc, a_scale), _std(d.y, y_loc, y_scale), e_a)
    return hY, batch


def fit(d: Dataset, cfg: TrainConfig = TrainConfig(), first_stage: TreatmentModel | None = None) -> ScmFlowModel:
    """Maximum-likelihood fit of the whole SCM.

    With ``first_stage`` given, the instrument and treatment mechanisms are
    taken as known and only ``h_Y`` and rho are trained.
    """
    _check_size(d, cfg)
    traces: dict = {}
    treatment = first_stage if first_stage is not None else fit_treatment(d, cfg, traces)

    hY, batch = _outcome_setup(d, cfg, treatment)
    x0 = np.concatenate([hY.params, [0.0]])
    res = minimize(_nll_outcome, x0, batch, static=hY.arch, **_opt_kwargs(cfg, 3, "L3"))
    traces["L3"] = res.trace
    hY = hY.with_params(res.params[:-1])
    rho_raw = float(res.params[-1])
    log.info("stage L3 done: rho=%.4f", math.tanh(rho_raw))

    if cfg.joint_steps and isinstance(treatment, FlowTreatmentModel):
        treatment, hY, rho_raw = _joint_finetune(d, cfg, treatment, hY, rho_raw, traces)

    return ScmFlowModel(treatment, hY, CorrelatedGaussian(rho_raw), cfg, traces)


def _joint_finetune(d, cfg, treatment, hY, rho_raw, traces):
    hZ, hA = treatment.hZ, treatment.hA
    archs = (hZ.arch, hA.arch, hY.arch)
    x0 = np.concatenate([hZ.params, hA.params, hY.params, [rho_raw]])
    batch = (
        _std(d.z, hZ.loc, hZ.scale),
        _std(d.a, hA.loc, hA.scale),
        _std(d.y, hY.loc, hY.scale),
    )
    kw = _opt_kwargs(cfg, 4, "joint")
    kw["steps"] = cfg.joint_steps
    res = minimize(_nll_joint, x0, batch, static=archs, **kw)
    traces["joint"] = res.trace
    nz, na = hZ.arch.n_params, hA.arch.n_params
    p = res.params
    treatment = FlowTreatmentModel(hZ.with_params(p[:nz]), hA.with_params(p[nz : nz + na]))
    return treatment, hY.with_params(p[nz + na : -1]), float(p[-1])


# --------------------------------------------------------------------------
# Sampling and the rho profile
# --------------------------------------------------------------------------


def sample(m: ScmFlowModel, n: int, rng: np.random.Generator) -> Dataset:
    """Ancestral sampling with correlated treatment/outcome noise."""
    if n < 1:
        raise ValidationError("n must be at least 1")
    e_z = rng.standard_normal(n)
    e_a = rng.standard_normal(n)
    eta = rng.standard_normal(n)
    rho = m.rho
    e_y = rho * e_a + math.sqrt(1 - rho * rho) * eta
    z = m.treatment.instrument(e_z)
    a = m.treatment.treatment(z, e_a)
    y = flow_forward(m.hY, a, e_y)[0]
    return Dataset(z, a, y)


@dataclass(frozen=True)
class RhoProfile:
    rho: np.ndarray
    log_lik: np.ndarray

    def __iter__(self):
        return iter(zip(self.rho.tolist(), self.log_lik.tolist()))

    def __len__(self):
        return self.rho.shape[0]

    @property
    def argmax(self) -> float:
        return float(self.rho[int(np.argmax(self.log_lik))])


def profile_rho(
    d: Dataset,
    rho_grid: Sequence[float],
    cfg: TrainConfig = TrainConfig(),
    first_stage: TreatmentModel | None = None,
    warm_start: bool = False,
) -> RhoProfile:
    """Maximised L3 as a function of a fixed rho.

    For each grid value only ``h_Y`` is refitted, starting from the same
    initialisation (or from the previous grid point with ``warm_start``), and
    the full-data L3 of the result is reported.
    """
    grid = np.asarray(rho_grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise ValidationError("rho grid must be a non-empty vector")
    if np.any(np.abs(grid) >= 1):
        raise ValidationError("rho grid values must lie strictly inside (-1, 1)")
    _check_size(d, cfg)
    treatment = first_stage if first_stage is not None else fit_treatment(d, cfg)
    hY0, batch = _outcome_setup(d, cfg, treatment)
    e_a = batch[2]
    values = []
    params = hY0.params
    for i, rho in enumerate(grid):
        start = params if warm_start else hY0.params
        res = minimize(
            _nll_outcome_fixed_rho, start, batch, static=hY0.arch, extra=(rho,),
            **_opt_kwargs(cfg, 3, f"L3 profile rho={rho:.3f}"),
        )
        params = res.params
        hY = hY0.with_params(params)
        e_y, ld_y = flow_inverse(hY, d.a, d.y)
        l3 = float(np.sum(conditional_logpdf(e_y, e_a, rho) + ld_y))
        if not math.isfinite(l3):
            raise NonFiniteError(f"non-finite profile likelihood at rho={rho}")
        values.append(l3)
        log.info("profile rho=%.3f L3=%.3f", rho, l3)
    return RhoProfile(grid, np.asarray(values))
