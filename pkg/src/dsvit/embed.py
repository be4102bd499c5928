"""Dual-stream patch embedding.

Stream 1 projects flattened intensity patches through a learnable linear
map. Stream 2 treats each region label as a vocabulary token: every pixel's
label row is looked up in a K x D table and the rows are averaged per
patch. One positional table is shared by both streams, added after each
stream's own projection.

The per-patch average is computed from label-frequency vectors:
mean_i E[s_i] == (counts / n_pixels) @ E row-for-row, which is the same
mean regrouped by class. The grouped form is what makes the output exactly
invariant to pixel order inside a patch, and it backpropagates into the
table through a plain matmul. The scatter-based ``embedding_lookup`` op
remains available and is used to cross-check the grouped form in tests.

The "collapsed" embedding variant (pixel projection applied to the label
map, labels rescaled to [0, 1]) stays available as an ablation; it gets
its own projection matrix so the two streams remain independently
trainable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InvalidInputError
from .slicer import TokenLayout
from .tensor import Tensor, parameter


@dataclass
class TokenBatch:
    """Model-ready arrays for a batch of samples, canonical token order.

    ``seg_pixels`` (labels rescaled to [0, 1]) is only needed when the
    collapsed-embedding ablation is active.
    """

    mri: np.ndarray  # (B, N, p*p) float32
    seg_counts: np.ndarray  # (B, N, K) float32 label fractions
    seg_pixels: np.ndarray | None = None  # (B, N, p*p) float32
    labels: np.ndarray | None = None  # (B,) int class labels

    @property
    def n(self) -> int:
        return self.mri.shape[0]


def label_fractions(label_patches: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-patch class frequencies: (..., n_pix) int -> (..., K) float32."""
    flat = label_patches.reshape(-1, label_patches.shape[-1])
    if flat.size and (flat.min() < 0 or flat.max() >= n_classes):
        raise InvalidInputError(f"label id out of range [0, {n_classes})")
    n_rows, n_pix = flat.shape
    offsets = (np.arange(n_rows, dtype=np.int64) * n_classes)[:, None]
    counts = np.bincount(
        (flat.astype(np.int64) + offsets).ravel(), minlength=n_rows * n_classes
    ).reshape(n_rows, n_classes)
    out = (counts / n_pix).astype(np.float32)
    return out.reshape(*label_patches.shape[:-1], n_classes)


class PixelEmbedder:
    """Linear projection of flattened patches to the embedding dim."""

    def __init__(self, patch: int, dim: int, rng):
        self.patch = patch
        self.dim = dim
        self.params = {"w_proj": parameter((patch * patch, dim), rng)}

    def __call__(self, patches: Tensor) -> Tensor:
        if patches.shape[-1] != self.patch * self.patch:
            raise InvalidInputError(
                f"expected flattened {self.patch}x{self.patch} patches, "
                f"got trailing dim {patches.shape[-1]}"
            )
        return T.matmul(patches, self.params["w_proj"])


class TokenEmbedder:
    """Learnable K x D lookup table over region labels."""

    def __init__(self, n_classes: int, dim: int, rng):
        self.n_classes = n_classes
        self.dim = dim
        self.params = {"table": parameter((n_classes, dim), rng)}

    def from_fractions(self, fractions: Tensor) -> Tensor:
        if fractions.shape[-1] != self.n_classes:
            raise InvalidInputError(
                f"expected {self.n_classes} label fractions, got {fractions.shape[-1]}"
            )
        return T.matmul(fractions, self.params["table"])

    def from_labels(self, label_patches: np.ndarray) -> Tensor:
        """Reference route: per-pixel lookup then mean over the patch."""
        rows = T.embedding_lookup(self.params["table"], label_patches)
        return T.mean(rows, axis=-2)


class PositionalTable:
    """One learnable D-vector per token position; a single shared instance."""

    def __init__(self, n_tokens: int, dim: int, rng):
        self.n_tokens = n_tokens
        self.params = {"pe": parameter((n_tokens, dim), rng)}

    def add_to(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-2] != self.n_tokens:
            raise InvalidInputError(
                f"positional table built for {self.n_tokens} tokens, got {tokens.shape[-2]}"
            )
        return T.add(tokens, self.params["pe"])


class DualStreamEmbedder:
    """Both streams' embeddings with the one shared positional table."""

    def __init__(self, layout: TokenLayout, dim: int, n_classes: int, rng, *,
                 dual_stream_embedding: bool = True):
        self.layout = layout
        self.dual_stream_embedding = dual_stream_embedding
        self.pixel = PixelEmbedder(layout.patch, dim, rng)
        self.token = TokenEmbedder(n_classes, dim, rng)
        self.pos = PositionalTable(layout.n_tokens, dim, rng)
        # separate projection for the collapsed-embedding ablation
        self.seg_pixel = (
            None if dual_stream_embedding else PixelEmbedder(layout.patch, dim, rng)
        )

    def components(self) -> list[tuple[str, object]]:
        comps = [("embed.pixel", self.pixel), ("embed.token", self.token),
                 ("embed.pos", self.pos)]
        if self.seg_pixel is not None:
            comps.append(("embed.seg_pixel", self.seg_pixel))
        return comps

    def embed_mri(self, patches) -> Tensor:
        x = patches if isinstance(patches, Tensor) else Tensor(patches)
        return self.pos.add_to(self.pixel(x))

    def embed_seg(self, fractions) -> Tensor:
        x = fractions if isinstance(fractions, Tensor) else Tensor(fractions)
        return self.pos.add_to(self.token.from_fractions(x))

    def embed_seg_collapsed(self, pixels) -> Tensor:
        if self.seg_pixel is None:
            raise InvalidInputError(
                "collapsed embedding requested but dual_stream_embedding is on"
            )
        x = pixels if isinstance(pixels, Tensor) else Tensor(pixels)
        return self.pos.add_to(self.seg_pixel(x))
