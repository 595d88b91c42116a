import numpy as np
import pytest

from bistil.model import ModelConfig, TaskHead, init_model


def small_config(**kw) -> ModelConfig:
    base = dict(num_layers=4, hidden_dim=16, num_heads=2, ffn_dim=24, vocab_size=40, max_seq_len=12)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(rng, vocab_size, batch=3, length=7, pad_last=True):
    ids = rng.integers(5, vocab_size, size=(batch, length))
    ids[:, 0] = 2
    mask = np.ones_like(ids)
    if pad_last and batch > 1:
        ids[-1, length - 2:] = 0
        mask[-1, length - 2:] = 0
    return ids, mask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mlm_model():
    return init_model(small_config(), seed=7, head=TaskHead("mlm"))


def pytest_terminal_summary(terminalreporter):
    import sys
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
