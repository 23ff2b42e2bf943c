import numpy as np
import pytest

from unlearnlab.config import ExperimentConfig
from unlearnlab.experiment import prepare_task
from unlearnlab.nnkit import init_model
from unlearnlab.speechgen import GenSpec, generate, split


@pytest.fixture(scope="session")
def default_cfg():
    return ExperimentConfig()


@pytest.fixture(scope="session")
def keyword_ctx(default_cfg):
    """Default desk corpus, keyword task, original model trained once."""
    return prepare_task(default_cfg, "keyword")


@pytest.fixture(scope="session")
def small_corpus():
    return generate(GenSpec(num_keywords=4, num_speakers=3, frames=3, feature_dim=5,
                            samples_per_class=12, noise_sigma=0.5, seed=3))


@pytest.fixture(scope="session")
def small_split(small_corpus):
    return split(small_corpus, 0.25, 0, "keyword")


@pytest.fixture
def tiny_model():
    return init_model(5, [6, 4], 4, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
