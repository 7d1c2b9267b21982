import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from routedrive import world
from routedrive.flow import NoisyActionState
from routedrive.model import Model, ModelConfig


def tiny_config(**kw) -> ModelConfig:
    base = dict(d=16, layers=2, heads=2, d_ff=24, vocab=64, max_len=64)
    base.update(kw)
    return ModelConfig(**base)


def random_state(rng: np.random.Generator, b: int, tau=None) -> NoisyActionState:
    tau = rng.uniform(0, 1, size=b) if tau is None else tau
    return NoisyActionState(rng.standard_normal((b, 20, 2)), rng.standard_normal((b, 10, 1)), tau)


@pytest.fixture(scope="session")
def samples():
    return world.generate(0, 48)


@pytest.fixture
def tiny_model():
    return Model(tiny_config())


@pytest.fixture
def batch(samples):
    return world.batches(samples[:8], 8)[0]


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_log.summary_lines():
        terminalreporter.write_line(line)
