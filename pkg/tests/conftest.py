import numpy as np
import pytest

from cdp_authkit.channel import preset, synthesize_dataset
from cdp_authkit.estimator import EstimatorConfig, train_estimator


@pytest.fixture(scope="session")
def small_dataset():
    return synthesize_dataset(24, 16, 16, 0.5, [preset("synth55"), preset("synth76")], seed=3)


@pytest.fixture(scope="session")
def small_ckpt(small_dataset):
    cfg = EstimatorConfig(depth=1, base_channels=4, epochs=3, batch_size=4, seed=1)
    return train_estimator(small_dataset, "synth76", cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: int(k[1:])):
        terminalreporter.write_line(RESULTS[key])
