import os
import sys

import numpy as np
import pytest

# Add the project root directory to Python path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..')))


def pytest_configure(config):
    """
    Configure pytest markers for the lab test suite
    """
    config.addinivalue_line(
        "markers",
        "lab_test: mark a test as a deterministic lab functionality test"
    )
    config.addinivalue_line(
        "markers",
        "statistical_test: mark a test whose assertion holds within Monte Carlo error bars"
    )
    config.addinivalue_line(
        "markers",
        "slow: mark test as slow to run"
    )


def pytest_addoption(parser):
    """
    Add custom command-line options for testing
    """
    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="run slow tests"
    )


def pytest_collection_modifyitems(config, items):
    """
    Skip slow tests unless --runslow is given
    """
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="need --runslow option to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def line_geom():
    from backend.lab.potential import BoxGeometry
    return BoxGeometry(d=1, n_box=2, periodic=True)


@pytest.fixture(scope="session")
def square_geom():
    from backend.lab.potential import BoxGeometry
    return BoxGeometry(d=2, n_box=1, periodic=True)


@pytest.fixture(scope="session")
def free_spec():
    from backend.lab.potential import PotentialSpec
    return PotentialSpec(d=1, range_L=1, terms=())


@pytest.fixture(scope="session")
def cos_spec():
    """Single-site potential U(theta) = cos(theta) on the line."""
    from backend.lab.potential import BaseTerm, PotentialSpec
    from backend.lab.trig_poly import TrigPoly
    return PotentialSpec(d=1, range_L=1, terms=(BaseTerm(support=((0,),), poly=TrigPoly.cosine([1])),))


@pytest.fixture(scope="session")
def coupled_spec():
    """cos(theta_0) plus a nearest-neighbour coupling 0.2 cos(theta_0 - theta_1)."""
    from backend.lab.potential import BaseTerm, PotentialSpec
    from backend.lab.trig_poly import TrigPoly
    return PotentialSpec(d=1, range_L=1, terms=(
        BaseTerm(support=((0,),), poly=TrigPoly.cosine([1])),
        BaseTerm(support=((0,), (1,)), poly=TrigPoly.cosine([1, -1], 0.2)),
    ))


@pytest.fixture(scope="session")
def cos_samples(cos_spec, line_geom):
    from backend.lab.torus_dynamics import gibbs_sample
    return gibbs_sample(cos_spec, line_geom, n_chains=4, n_samples=150, burn_in=300, thinning=3,
                        step_size=0.3, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_config(tmp_path):
    """A run configuration small enough for end-to-end pipeline tests."""
    return {
        "potential": {"preset": "cos_1d"},
        "geometry": {"n_box": 1, "periodic": True},
        "verify": {"sample_count": 8},
        "sampler": {"n_chains": 4, "n_samples": 40, "burn_in": 100, "thinning": 2},
        "mixing": {"times": [0.0, 0.5, 1.0], "n_starts": 4, "paths_per_start": 40},
        "corrector": {"n_points": 16},
        "effective": {"estimators": ["derivative", "exact1d"], "max_cutoff": 6},
        "homogenize": {"eps": [1.0, 0.5], "times": [0.5, 1.0], "paths": 40, "zeta_paths": 16,
                       "dt_quotient": 0.05, "random_env": {"n_environments": 2, "paths_per_environment": 10}},
        "seed": 5,
        "out": str(tmp_path / "run"),
    }
