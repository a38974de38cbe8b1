import numpy as np
import pytest
import torch

from supportset.corpus import CorpusSpec, generate_corpus
from supportset.trainer import TrainConfig


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


def tiny_config(**overrides):
    """Small deterministic config for unit tests (dropout off, fast dims)."""
    base = dict(
        embed_dim=16, num_heads=4, ffn_hidden=32, num_layers=2,
        dropout=0.0, batch_size=4, epochs=2, seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def tiny_corpus(num_classes=4, samples_per_class=4, noise=0.1, seed=1, **kw):
    spec = CorpusSpec(
        num_classes=num_classes, samples_per_class=samples_per_class,
        video_len=kw.pop("video_len", 6), caption_len_max=kw.pop("caption_len_max", 10),
        feature_dim=kw.pop("feature_dim", 12), vocab_size=kw.pop("vocab_size", 32),
        intra_class_noise=noise, seed=seed, **kw)
    return generate_corpus(spec)


def rand_embeddings(rng, n, d):
    return torch.tensor(rng.normal(size=(n, d)), dtype=torch.float64)
