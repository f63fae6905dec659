import numpy as np
import pytest

from curvemix.config import FitConfig
from curvemix.dataset import ClusterSpec, CurveSet, RegimeSpec, SimulationSpec, generate, table1_spec


def quick_config(**overrides) -> FitConfig:
    settings = {"n_restarts": 2, "max_iter": 200, "seed": 0}
    settings.update(overrides)
    return FitConfig(**settings)


def two_level_curves(n_per_cluster: int = 10, m: int = 20, gap: float = 5.0, sd: float = 0.1, seed: int = 0) -> CurveSet:
    rng = np.random.default_rng(seed)
    values = np.vstack(
        [
            rng.normal(0.0, sd, size=(n_per_cluster, m)),
            rng.normal(gap, sd, size=(n_per_cluster, m)),
        ]
    )
    labels = np.repeat([0, 1], n_per_cluster)
    return CurveSet(values=values, grid=np.arange(1, m + 1, dtype=float), labels=labels)


def noiseless_piecewise_spec(n: int = 20, seed: int = 0) -> SimulationSpec:
    """Two clusters of five piecewise-linear regimes, no noise, each regime jumping at its boundaries."""
    first = ClusterSpec(
        boundaries=[0, 20, 60, 115, 140, 160],
        regimes=[
            RegimeSpec(intercept=5.0, sigma=0.0),
            RegimeSpec(intercept=2.0, slope=0.125, sigma=0.0),
            RegimeSpec(intercept=10.0, sigma=0.0),
            RegimeSpec(intercept=12.0, sigma=0.0),
            RegimeSpec(intercept=6.0, sigma=0.0),
        ],
    )
    second = ClusterSpec(
        boundaries=[0, 20, 70, 90, 140, 160],
        regimes=[
            RegimeSpec(intercept=4.0, sigma=0.0),
            RegimeSpec(intercept=3.0, slope=0.1, sigma=0.0),
            RegimeSpec(intercept=11.0, sigma=0.0),
            RegimeSpec(intercept=8.0, sigma=0.0),
            RegimeSpec(intercept=5.5, sigma=0.0),
        ],
    )
    return SimulationSpec(n=n, m=160, mixing=[0.5, 0.5], clusters=[first, second], seed=seed)


@pytest.fixture(scope="session")
def table1_small() -> CurveSet:
    return generate(table1_spec(n=40, seed=11))


@pytest.fixture
def separable() -> CurveSet:
    return two_level_curves()
