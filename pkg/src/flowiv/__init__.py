"""Counterfactual prediction with instrumental variables and normalizing flows.

Importing the package turns on 64-bit floats in JAX; every numerical check in
the library (inversion tolerances, likelihood identities) is stated in double
precision. Training may still run in float32, see ``TrainConfig.dtype``.
"""
import jax

jax.config.update("jax_enable_x64", True)

from flowiv.cgnf import (  # noqa: E402
    ConditionalFlow,
    Dataset,
    FlowTreatmentModel,
    ScmFlowModel,
    TrainConfig,
    fit,
    log_lik_terms,
    profile_rho,
    sample,
)
from flowiv.counterfactual import (  # noqa: E402
    CounterfactualQuery,
    abduce,
    interventional_mean,
    predict_counterfactual,
)

__version__ = "0.1.0"

__all__ = [
    "ConditionalFlow",
    "CounterfactualQuery",
    "Dataset",
    "FlowTreatmentModel",
    "ScmFlowModel",
    "TrainConfig",
    "abduce",
    "fit",
    "interventional_mean",
    "log_lik_terms",
    "predict_counterfactual",
    "profile_rho",
    "sample",
]
