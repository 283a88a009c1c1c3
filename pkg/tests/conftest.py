import numpy as np
import pytest
from hypothesis import settings

from flowiv import synthetic
from flowiv.cgnf import TrainConfig, fit
from flowiv.synthetic import DgpSpec

# timings are meaningless on a shared single core; jit compiles also dominate first calls
settings.register_profile("default", deadline=None)
settings.load_profile("default")


def _fitted(dgp: str, rho: float, seed: int):
    d, lat = synthetic.generate(DgpSpec(dgp, rho, seed=seed), 40_000)
    m = fit(d, TrainConfig(seed=seed), first_stage=synthetic.KnownFirstStage(dgp))
    return m, d, lat


@pytest.fixture(scope="session")
def dgp1_model():
    """Outcome flow fitted on 40000 rows of DGP1 (rho=0.5), known first stage."""
    return _fitted("DGP1", 0.5, 101)


@pytest.fixture(scope="session")
def dgp2_model():
    return _fitted("DGP2", 0.5, 102)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
