import numpy as np
import pytest

from ltu import synthenv as se
from ltu.corpus import Step, Trajectory, Vocab
from ltu.model import ModelConfig, init_model


@pytest.fixture(scope="session")
def ppc_spec():
    return se.make_domain("ppc", seed=0, lexicon_size=6, n_categories=5, n_calibration=4000)


@pytest.fixture(scope="session")
def seo_spec():
    return se.make_domain("seo", seed=0, lexicon_size=6, n_categories=5, n_calibration=4000)


@pytest.fixture(scope="session")
def vocab(ppc_spec, seo_spec):
    tasks = dict(ppc_spec.vocab_tasks())
    tasks.update(seo_spec.vocab_tasks())
    return Vocab.build(ppc_spec.words() + seo_spec.words() + se.common_words(), tasks)


@pytest.fixture
def tiny_vocab():
    return Vocab.build(["red", "blue", "big", "small", "click", "buy"], {"t": 3})


@pytest.fixture
def tiny_traj():
    return Trajectory("d", "c", [Step("red big", "click", 2)], task="t")


@pytest.fixture
def small_model(vocab):
    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, n_heads=2, n_layers=1, max_seq_len=64)
    return init_model(cfg)


def rng(seed=0):
    return np.random.default_rng(seed)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
