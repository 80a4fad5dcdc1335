import sys

import pytest
import torch

from groupvox.data import Collator, Sample, gen_corpus
from groupvox.model import ModelConfig, init_params
from groupvox.vocab import JointVocabulary

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def vocab():
    return JointVocabulary()


@pytest.fixture(scope="session")
def small_vocab():
    return JointVocabulary(text_size=32, audio_size=48)


@pytest.fixture
def tiny_cfg(small_vocab):
    """2-layer, dim-16 model small enough for finite differences."""
    return ModelConfig(layers=2, model_dim=16, heads=2, max_positions=96, group_size=3,
                       vocab=small_vocab, init_seed=1, codec_rate=4, max_frames=20)


@pytest.fixture
def tiny_model(tiny_cfg):
    return init_params(tiny_cfg)


@pytest.fixture
def tiny_batch(tiny_cfg):
    samples = [
        Sample("a", (), (6, 7, 8), (6, 7, 8)),
        Sample("b", (((9,), (9,)),), (10, 11), (11, 10)),
        Sample("c", (), (12,), (12,)),
    ]
    return Collator(tiny_cfg)(samples)


@pytest.fixture(scope="session")
def echo_corpus(vocab):
    return gen_corpus(200, {"echo": 1.0}, vocab, seed=3)


@pytest.fixture(scope="session")
def copy_corpus():
    return gen_corpus(1000, {"echo": 1.0}, JointVocabulary(32, 48), seed=0, max_len=3)


@pytest.fixture(scope="session")
def copy_model(copy_corpus):
    """Small echo-task model, trained once per test session (about 20 s)."""
    from groupvox.training import TrainConfig, train

    cfg = ModelConfig(layers=2, model_dim=48, heads=2, vocab=JointVocabulary(32, 48), codec_rate=4,
                      max_frames=20, group_size=3, max_positions=64)
    tcfg = TrainConfig(peak_lr=3e-3, warmup_steps=20, total_steps=2500, batch_size=16, validate_every=625)
    return train(tcfg, cfg, copy_corpus).model


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
