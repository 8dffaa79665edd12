import numpy as np
import pytest

from actproj.refnet import RefNet, init_params, make_splits, pretrain_reference


def random_net(seed=0, dtype=np.float32):
    """Untrained net with non-trivial BN statistics."""
    params = init_params(seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    for l, c in enumerate(RefNet.channels):
        params[f"bn{l}.gamma"] = rng.uniform(0.5, 1.5, c)
        params[f"bn{l}.beta"] = rng.normal(0, 0.3, c)
        params[f"bn{l}.mean"] = rng.normal(0, 0.2, c)
        params[f"bn{l}.var"] = rng.uniform(0.5, 2.0, c)
    return RefNet({k: v.astype(dtype) for k, v in params.items()})


@pytest.fixture
def net():
    return random_net(0)


@pytest.fixture
def net64():
    return random_net(0, np.float64)


@pytest.fixture(scope="session")
def small_splits():
    return make_splits(7, n_train_per_class=20, n_calibration=64, n_eval_per_class=10)


@pytest.fixture(scope="session")
def reference_splits():
    return make_splits(42)


@pytest.fixture(scope="session")
def pretrained(reference_splits):
    """Default recipe, seed 42."""
    return pretrain_reference(reference_splits, seed=42)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
