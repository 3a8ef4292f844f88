import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from clearlab.data import train_test
from clearlab.model import ModelConfig

settings.register_profile("default", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    return train_test(num_classes=3, n_train=120, n_test=30, seq_len=6, seed=3)


def tiny_config(kind="adapter", **kw):
    base = dict(num_layers=2, hidden=8, heads=2, ffn=12, vocab_size=30, max_len=7,
                num_classes=3, peft_kind=kind, adapter_dim=3, lora_rank=2, prompt_len=3)
    return ModelConfig(**{**base, **kw})


def tiny_batch(rng, B=4, T=7, V=30):
    ids = rng.integers(4, V, size=(B, T))
    ids[:, 0] = 3
    pad = np.ones((B, T))
    for b in range(B):
        cut = rng.integers(3, T + 1)
        ids[b, cut:] = 0
        pad[b, cut:] = 0
    return ids, pad
