"""Shared fixtures: tiny model configs sized for fast tests."""

import numpy as np
import pytest

from monomoe.model import ModelConfig
from monomoe.tensor import Tensor
from monomoe.tokenizers import MultimodalSequence

# raw-sequence experiments (vocab too small for the byte tokenizer)
TINY = ModelConfig(dim=16, layers=2, heads=2, ffn_dim=32, vocab=48, max_seq=64,
                   patch_stride=4, tile_px=8, pe_grid=2, vis_dim=16)

# end-to-end path with the byte vocabulary and a 32px tile (16 patches)
SMALL = ModelConfig(dim=32, layers=2, heads=2, ffn_dim=64, vocab=260, max_seq=256,
                    patch_stride=8, tile_px=32, pe_grid=4, vis_dim=32)


def random_sequence(rng, n, d, n_visual=None, loss_from=None, vocab=48):
    """A raw multimodal sequence from random embeddings."""
    if n_visual is None:
        n_visual = int(rng.integers(0, n))
    emb = Tensor(rng.standard_normal((n, d)).astype(np.float32))
    modality = np.zeros(n, dtype=bool)
    modality[:n_visual] = True
    ids = rng.integers(0, vocab, size=n)
    loss = np.zeros(n, dtype=bool)
    if loss_from is not None:
        loss[loss_from:] = True
    return MultimodalSequence(embeddings=emb, modality=modality,
                              loss_mask=loss, token_ids=ids)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
