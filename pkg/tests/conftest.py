import numpy as np
import pytest

from mmreward.backbone import ModelConfig
from mmreward.data import CorpusSpec, gen_synthetic_corpus
from mmreward.model import RewardModel


def tiny_config(**kw):
    base = dict(d_model=16, n_layers=2, n_heads=2, max_prompt_len=8, lora_rank=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model():
    m = RewardModel(tiny_config(), seed=0)
    m.add_perspective("alignment", seed=1)
    return m


@pytest.fixture(scope="session")
def small_pairs():
    pairs, _ = gen_synthetic_corpus(0, 12, CorpusSpec())
    return pairs


# one line per acceptance criterion, echoed in the terminal summary so that
# they appear in a plain `pytest -v` run (print output is captured otherwise)
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
