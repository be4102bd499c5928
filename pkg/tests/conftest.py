import numpy as np
import pytest

from dsvit.embed import TokenBatch, label_fractions
from dsvit.encoder import DSViTModel, EncoderConfig
from dsvit.slicer import token_layout


def micro_config(**overrides) -> EncoderConfig:
    """Smallest config that still exercises every code path: 24 tokens, dim 4."""
    base = dict(
        dim=4,
        heads=2,
        n_self_layers=1,
        n_cross_layers=1,
        mlp_ratio=2,
        dropout=0.0,
        n_regions=8,
        patch=8,
        slice_stride=8,
        volume_dims=(16, 16, 16),
    )
    base.update(overrides)
    return EncoderConfig(**base)


def random_batch(cfg: EncoderConfig, n: int, seed: int = 0, *,
                 with_pixels: bool = False) -> TokenBatch:
    rng = np.random.default_rng(seed)
    layout = token_layout(cfg.volume_dims, cfg.slice_stride, cfg.patch)
    n_pix = cfg.patch * cfg.patch
    mri = rng.random((n, layout.n_tokens, n_pix)).astype(np.float32)
    label_patches = rng.integers(0, cfg.n_regions, size=(n, layout.n_tokens, n_pix))
    counts = label_fractions(label_patches, cfg.n_regions)
    pixels = None
    if with_pixels:
        pixels = (label_patches / (cfg.n_regions - 1)).astype(np.float32)
    labels = rng.integers(0, cfg.n_classes, size=n)
    return TokenBatch(mri=mri, seg_counts=counts, seg_pixels=pixels, labels=labels)


@pytest.fixture
def micro_cfg():
    return micro_config()


@pytest.fixture
def micro_model(micro_cfg):
    return DSViTModel(micro_cfg, np.random.default_rng(0))
