"""Synthetic data-generating processes with known counterfactuals.

All processes share ``Z = e_Z`` and ``A = Z + c * e_A``. They differ in the
outcome mechanism and the noise law:

=============  ============================  =======================================
id             outcome                       noise
=============  ============================  =======================================
DGP1 (c=0.2)   0.5 * A**2 + e_Y              (e_A, e_Y) ~ N2(rho)
DGP2           (sin(A + 1.5) + 1) * e_Y      (e_A, e_Y) ~ N2(rho)
DGP3           0.6 * A + e_Y                 e_Y = e_A**2 + eta / 8 - 1, eta ~ N(0, 1)
LINEAR_GAUSS   0.6 * A + e_Y                 (e_A, e_Y) ~ N2(rho)
=============  ============================  =======================================

Datasets and the latent noise that produced them are returned separately so
estimators can only ever be handed the observable part.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from flowiv.cgnf import TREATMENT_KINDS, Dataset
from flowiv.errors import ValidationError
from flowiv.noise import correlated_normals

DGP_IDS = ("DGP1", "DGP2", "DGP3", "LINEAR_GAUSS")
TREATMENT_NOISE_SCALE = {"DGP1": 0.2, "DGP2": 1.0, "DGP3": 1.0, "LINEAR_GAUSS": 1.0}


@dataclass(frozen=True)
class DgpSpec:
    id: str
    rho: float | str = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.id not in DGP_IDS:
            raise ValidationError(f"unknown DGP {self.id!r}; choose from {DGP_IDS}")
        if isinstance(self.rho, str):
            if self.rho != "uniform":
                raise ValidationError(f"rho must be a number or 'uniform', got {self.rho!r}")
        elif not -1.0 <= self.rho <= 1.0:
            raise ValidationError(f"rho must lie in [-1, 1], got {self.rho}")

    def resolve_rho(self, rng: np.random.Generator) -> float:
        """The fixed rho, or a fresh draw from U(-1, 1) for 'uniform'."""
        if self.rho == "uniform":
            return float(rng.uniform(-1.0, 1.0))
        return float(self.rho)


@dataclass(frozen=True)
class Latents:
    eps_Z: np.ndarray
    eps_A: np.ndarray
    eps_Y: np.ndarray
    rho: float = float("nan")

    def take(self, idx) -> "Latents":
        return Latents(self.eps_Z[idx], self.eps_A[idx], self.eps_Y[idx], self.rho)


@dataclass(frozen=True)
class OracleSample:
    z: float
    a: float
    y: float
    eps_A: float
    eps_Y: float


def outcome(dgp_id: str, a, eps_y):
    """The true structural outcome function ``g_Y(a, e_Y)``."""
    a = np.asarray(a, dtype=np.float64)
    eps_y = np.asarray(eps_y, dtype=np.float64)
    if dgp_id == "DGP1":
        return 0.5 * a * a + eps_y
    if dgp_id == "DGP2":
        return (np.sin(a + 1.5) + 1.0) * eps_y
    if dgp_id in ("DGP3", "LINEAR_GAUSS"):
        return 0.6 * a + eps_y
    raise ValidationError(f"unknown DGP {dgp_id!r}")


def structural(dgp_id: str, eps_z, eps_a, eps_y) -> Dataset:
    """Push latent noise through the structural equations."""
    z = np.asarray(eps_z, dtype=np.float64)
    a = z + TREATMENT_NOISE_SCALE[dgp_id] * np.asarray(eps_a, dtype=np.float64)
    return Dataset(z, a, outcome(dgp_id, a, eps_y))


def generate(spec: DgpSpec, n: int) -> tuple[Dataset, Latents]:
    if n < 1:
        raise ValidationError("n must be at least 1")
    rng = np.random.default_rng(spec.seed)
    rho = spec.resolve_rho(rng)
    eps_z = rng.standard_normal(n)
    if spec.id == "DGP3":
        eps_a = rng.standard_normal(n)
        eta = rng.standard_normal(n)
        eps_y = eps_a**2 + eta / 8.0 - 1.0
    else:
        eps_a, eps_y = correlated_normals(rho, rng, n)
    return structural(spec.id, eps_z, eps_a, eps_y), Latents(eps_z, eps_a, eps_y, rho)


def oracle_counterfactual(spec: DgpSpec | str, s: OracleSample | Latents, a_prime):
    """True counterfactual outcome ``g_Y(a', e_Y)`` for an observed unit."""
    dgp_id = spec if isinstance(spec, str) else spec.id
    return outcome(dgp_id, a_prime, s.eps_Y)


A_PRIME_LAWS = ("standard_normal", "marginal")


def counterfactual_treatments(a, rng: np.random.Generator, law: str = "standard_normal") -> np.ndarray:
    """Draw one counterfactual treatment a' per observed unit, independently of the unit.

    ``standard_normal`` draws a' ~ N(0, 1); ``marginal`` draws from the
    empirical treatment marginal by permuting the observed values.
    """
    a = np.asarray(a, dtype=np.float64)
    if law == "standard_normal":
        return rng.standard_normal(a.shape)
    if law == "marginal":
        return rng.permutation(a)
    raise ValidationError(f"unknown a' law {law!r}; choose from {A_PRIME_LAWS}")


@dataclass(frozen=True)
class KnownFirstStage:
    """The true ``g_Z`` and ``g_A`` of a synthetic process, as a treatment model."""

    dgp_id: str
    kind: str = "known"

    def __post_init__(self):
        if self.dgp_id not in DGP_IDS:
            raise ValidationError(f"unknown DGP {self.dgp_id!r}")

    @property
    def noise_scale(self) -> float:
        return TREATMENT_NOISE_SCALE[self.dgp_id]

    def instrument_noise(self, z):
        z = np.asarray(z, dtype=np.float64)
        return z, np.zeros_like(z)

    def instrument(self, eps_z):
        return np.asarray(eps_z, dtype=np.float64)

    def treatment_noise(self, z, a):
        c = self.noise_scale
        e = (np.asarray(a, dtype=np.float64) - np.asarray(z, dtype=np.float64)) / c
        return e, np.full_like(e, -math.log(c))

    def treatment(self, z, eps_a):
        return np.asarray(z, dtype=np.float64) + self.noise_scale * np.asarray(eps_a, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dgp": self.dgp_id}

    @classmethod
    def from_dict(cls, d: dict) -> "KnownFirstStage":
        return cls(d["dgp"])


TREATMENT_KINDS["known"] = KnownFirstStage


# --------------------------------------------------------------------------
# CSV files
# --------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return np.format_float_positional(x, unique=True, trim="-")


def save_csv(path, d: Dataset, latents: Latents | None = None) -> None:
    cols = [d.z, d.a, d.y]
    header = ["z", "a", "y"]
    if latents is not None:
        cols += [latents.eps_A, latents.eps_Y]
        header += ["eps_A", "eps_Y"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*(c.tolist() for c in cols)):
            w.writerow([_fmt(v) for v in row])


def _read_columns(path, required: tuple[str, ...]) -> tuple[dict[str, np.ndarray], int]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: no such file")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise ValidationError(f"{path}: header lacks columns {missing}")
        pos = [header.index(c) for c in required]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(row[p]) for p in pos]
            except ValueError:
                raise ValidationError(f"{path}: line {lineno}: non-numeric value") from None
            if not all(math.isfinite(v) for v in vals):
                raise ValidationError(f"{path}: line {lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    return {c: arr[:, i] for i, c in enumerate(required)}, len(rows)


def load_csv(path) -> Dataset:
    """Read the observable columns ``z, a, y``; any other columns are ignored."""
    cols, _ = _read_columns(path, ("z", "a", "y"))
    return Dataset(cols["z"], cols["a"], cols["y"])


def load_oracle_csv(path) -> tuple[Dataset, Latents]:
    cols, _ = _read_columns(path, ("z", "a", "y", "eps_A", "eps_Y"))
    d = Dataset(cols["z"], cols["a"], cols["y"])
    return d, Latents(d.z.copy(), cols["eps_A"], cols["eps_Y"])


def load_queries(path) -> dict[str, np.ndarray]:
    cols, _ = _read_columns(path, ("z", "a", "y", "a_prime"))
    return cols
