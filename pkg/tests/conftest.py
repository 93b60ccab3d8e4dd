import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from aofl import dataio  # noqa: E402
from aofl.model import ModelDims, ModelParams  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dims():
    return ModelDims(d=8, num_classes=3, num_layers=1, num_heads=2)


@pytest.fixture
def small_params(small_dims):
    return ModelParams.init(small_dims, seed=3)


@pytest.fixture(scope="session")
def tiny_dataset():
    return dataio.synth_generate(dataio.SynthSpec(num_conversations=12, utterances_per_conversation=4, d=8,
                                                  num_classes=3, seed=7))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[key])
