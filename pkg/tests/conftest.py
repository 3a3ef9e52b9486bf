import numpy as np
import pytest

from fsaudit.config import ExperimentConfig
from fsaudit.data import image_index, split
from fsaudit.synthetic import SyntheticSpec, make_corpus

TINY_SPEC = SyntheticSpec(n_users=12, n_images=12, size=16, seed=0)


@pytest.fixture(scope="session")
def tiny_records():
    return make_corpus(TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_index(tiny_records):
    return image_index(tiny_records)


@pytest.fixture(scope="session")
def tiny_split(tiny_records):
    return split(tiny_records, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> ExperimentConfig:
    """A few-second end-to-end configuration."""
    base = dict(
        synthetic=TINY_SPEC, min_images=12, keep_images=12, image_size=16, width=8,
        k=3, shots=2, queries=2, epochs=1, episodes_per_epoch=3, eval_episodes=5,
        probes_per_user=2, auditor_epochs=20, repetitions=2, seed=0,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(mod.RESULTS):
            terminalreporter.write_line(mod.RESULTS[n])
