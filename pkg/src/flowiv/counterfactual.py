"""Abduction, action and prediction on a fitted flow model.

Because the outcome mechanism takes only the treatment and its own noise, the
instrument plays no role once the model is fitted: it is carried in
:class:`CounterfactualQuery` for bookkeeping but never read.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from flowiv.cgnf import ScmFlowModel, flow_forward, flow_inverse
from flowiv.errors import ValidationError


@dataclass(frozen=True)
class CounterfactualQuery:
    """Observed ``(z, a, y)`` plus the counterfactual treatment ``a_prime``.

    Fields may be floats or equally shaped arrays (a batch of queries).
    """

    z: float | np.ndarray
    a: float | np.ndarray
    y: float | np.ndarray
    a_prime: float | np.ndarray

    def __post_init__(self):
        for name in ("z", "a", "y", "a_prime"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"query field {name!r} is not finite")


def _out(x, like):
    return float(x) if np.ndim(like) == 0 else np.asarray(x)


def abduce(m: ScmFlowModel, a, y):
    """Infer the outcome noise ``e_Y = h_Y^{-1}(a, y)``."""
    e_y, _ = flow_inverse(m.hY, a, y)
    return _out(e_y, y)


def predict(m: ScmFlowModel, a, e_y):
    """Evaluate the learned outcome mechanism ``h_Y(a, e_Y)``."""
    y, _ = flow_forward(m.hY, a, e_y)
    return _out(y, e_y)


def predict_counterfactual(m: ScmFlowModel, q: CounterfactualQuery):
    e_y = abduce(m, q.a, q.y)
    a_prime = np.broadcast_to(np.asarray(q.a_prime, dtype=np.float64), np.shape(e_y))
    return _out(flow_forward(m.hY, a_prime, e_y)[0], q.y)


@dataclass(frozen=True)
class InterventionalMean:
    mean: float
    stderr: float
    n_mc: int


def interventional_mean(m: ScmFlowModel, a: float, n_mc: int, rng: np.random.Generator) -> InterventionalMean:
    """Monte Carlo estimate of E[Y | do(A = a)] from fresh outcome noise."""
    if n_mc < 1:
        raise ValidationError("n_mc must be at least 1")
    eps = rng.standard_normal(n_mc)
    ys = flow_forward(m.hY, np.full(n_mc, float(a)), eps)[0]
    sd = float(np.std(ys, ddof=1)) if n_mc > 1 else 0.0
    return InterventionalMean(float(np.mean(ys)), sd / math.sqrt(n_mc), n_mc)


def write_predictions(path, queries: dict[str, np.ndarray], e_y: np.ndarray, y_cf: np.ndarray) -> None:
    """Write the query columns followed by ``eY`` and ``y_cf``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z", "a", "y", "a_prime", "eY", "y_cf"])
        cols = [queries["z"], queries["a"], queries["y"], queries["a_prime"], e_y, y_cf]
        for row in zip(*(np.asarray(c).tolist() for c in cols)):
            w.writerow([repr(v) for v in row])


def batch_counterfactuals(m: ScmFlowModel, queries: dict[str, np.ndarray]):
    """Vectorised abduction and prediction for a table of queries."""
    q = CounterfactualQuery(queries["z"], queries["a"], queries["y"], queries["a_prime"])
    e_y = np.atleast_1d(abduce(m, q.a, q.y))
    y_cf = np.atleast_1d(predict(m, np.asarray(q.a_prime), e_y))
    return e_y, y_cf
