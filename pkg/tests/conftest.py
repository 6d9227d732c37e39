import numpy as np
import pytest

from dynfit.estimator import FitConfig
from dynfit.ode import solve_trajectory
from dynfit.sim import SimSpec, run_study, true_gradient_model


@pytest.fixture(scope="session")
def true_model():
    return true_gradient_model()


@pytest.fixture(scope="session")
def true_trajectory(true_model):
    """Fine-step solution of the benchmark dynamics from x(0)=0.25."""
    return solve_trajectory(true_model, 0.0, 1.0, 0.25, h=1e-4)


@pytest.fixture(scope="session")
def benchmark_study():
    """The full 100-replicate benchmark study (shared across tests)."""
    import time

    spec = SimSpec(rng_seed=0, replicates=100)
    start = time.perf_counter()
    reports, summary = run_study(spec, FitConfig(candidate_Ms=(3, 4, 5)))
    summary["_elapsed_s"] = time.perf_counter() - start
    return spec, reports, summary


def make_replicate(true_trajectory, seed, n=None, sigma=0.01):
    """A quick standalone replicate for unit tests."""
    from dynfit.smooth import Dataset

    rng = np.random.default_rng(seed)
    n = n if n is not None else int(rng.integers(60, 101))
    t = np.sort(rng.uniform(0.0, 1.0, n))
    y = true_trajectory.state_at(t)
    if sigma > 0:
        y = y + sigma * rng.standard_normal(n)
    return Dataset(t, y)
