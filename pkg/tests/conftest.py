import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stephys.dataset import generate_classification_set, stack_images  # noqa: E402
from stephys.model import ClassifierModel  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    return stack_images(generate_classification_set(7, 64, 4))


@pytest.fixture(scope="session")
def untrained_model():
    return ClassifierModel(seed=3)


@pytest.fixture(scope="session")
def trained_classifier():
    """The default classifier trained on (seed=7, count=4000, K=4); about 45 s."""
    from stephys.harness import ExperimentConfig, train_classifier

    return train_classifier(ExperimentConfig())


@pytest.fixture(scope="session")
def trained_scene_model():
    from stephys.harness import ExperimentConfig, train_scene_model

    return train_scene_model(ExperimentConfig())


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
