"""Tri-plane transformer classifier over fused dual-stream tokens.

Plane segments first pass through self-attention layers applied to each
plane independently (weights shared across planes by default, with plane
identity carried by the positional embeddings). A learnable classification
token is then prepended and cross-plane layers attend over the full token
set. The class token's final hidden state is both the logit source and the
per-scan feature handed to the temporal head.

Blocks are pre-norm residual; attention probabilities and MLP outputs carry
dropout, disabled outside training.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .embed import DualStreamEmbedder, TokenBatch
from .errors import InvalidInputError
from .fusion import BottleneckMLP, FusedTokens, concat_planes, fuse_plane
from .slicer import PLANES, token_layout
from .tensor import Tensor, linear_parameter, parameter

ABLATION_MODES = ("dual_stream", "wo_mri", "wo_seg", "wo_dual_stream_embedding")


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 32
    heads: int = 4
    n_self_layers: int = 2
    n_cross_layers: int = 1
    mlp_ratio: int = 2
    dropout: float = 0.1
    n_classes: int = 2
    n_regions: int = 8
    patch: int = 8
    slice_stride: int = 4
    volume_dims: tuple[int, int, int] = (32, 32, 32)
    bottleneck_hidden: int | None = None  # default dim // 2
    use_mri_stream: bool = True
    use_seg_stream: bool = True
    dual_stream_embedding: bool = True
    share_plane_weights: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise InvalidInputError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not (self.use_mri_stream or self.use_seg_stream):
            raise InvalidInputError("at least one stream must stay enabled")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidInputError("dropout must be in [0, 1)")
        if self.n_classes < 2:
            raise InvalidInputError("need at least two classes")
        if self.n_self_layers < 0 or self.n_cross_layers < 1:
            raise InvalidInputError("need n_self_layers >= 0 and n_cross_layers >= 1")
        hidden = self.hidden_bottleneck
        if not 0 < hidden < 2 * self.dim:
            raise InvalidInputError("bottleneck hidden size must be in (0, 2*dim)")

    @property
    def hidden_bottleneck(self) -> int:
        return self.bottleneck_hidden if self.bottleneck_hidden is not None else self.dim // 2

    def with_ablation(self, mode: str) -> "EncoderConfig":
        if mode not in ABLATION_MODES:
            raise InvalidInputError(
                f"unknown ablation {mode!r}; choose from {ABLATION_MODES}"
            )
        return replace(
            self,
            use_mri_stream=mode != "wo_mri",
            use_seg_stream=mode != "wo_seg",
            dual_stream_embedding=mode != "wo_dual_stream_embedding",
        )

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["volume_dims"] = list(self.volume_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown encoder config fields: {sorted(unknown)}")
        d = dict(d)
        if "volume_dims" in d:
            d["volume_dims"] = tuple(d["volume_dims"])
        return cls(**d)


class TransformerBlock:
    """Pre-norm residual block: multi-head self-attention then a 2-layer MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        hidden = dim * mlp_ratio
        self.params = {
            "ln1_g": parameter(np.ones(dim, dtype=np.float32)),
            "ln1_b": parameter((dim,), std=0.0),
            "wq": linear_parameter(rng, dim, dim),
            "bq": parameter((dim,), std=0.0),
            "wk": linear_parameter(rng, dim, dim),
            "bk": parameter((dim,), std=0.0),
            "wv": linear_parameter(rng, dim, dim),
            "bv": parameter((dim,), std=0.0),
            "wo": linear_parameter(rng, dim, dim),
            "bo": parameter((dim,), std=0.0),
            "ln2_g": parameter(np.ones(dim, dtype=np.float32)),
            "ln2_b": parameter((dim,), std=0.0),
            "mlp_w1": linear_parameter(rng, dim, hidden),
            "mlp_b1": parameter((hidden,), std=0.0),
            "mlp_w2": linear_parameter(rng, hidden, dim),
            "mlp_b2": parameter((dim,), std=0.0),
        }

    def _attend(self, x: Tensor) -> Tensor:
        # dropout lives on the residual branches, not on attention
        # probabilities: masking the (N x N) maps dominates desk-scale cost
        p = self.params
        b, n, _ = x.shape

        def heads_first(t):
            return T.transpose(T.reshape(t, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

        q = heads_first(T.add(T.matmul(x, p["wq"]), p["bq"]))
        k = heads_first(T.add(T.matmul(x, p["wk"]), p["bk"]))
        v = heads_first(T.add(T.matmul(x, p["wv"]), p["bv"]))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), self.scale)
        probs = T.softmax(scores, axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, n, self.dim))
        return T.add(T.matmul(ctx, p["wo"]), p["bo"])

    def __call__(self, x: Tensor, *, training: bool = False, rng=None,
                 p_drop: float = 0.0) -> Tensor:
        p = self.params
        attn = self._attend(T.layer_norm(x, p["ln1_g"], p["ln1_b"]))
        x = T.add(x, T.dropout(attn, p_drop, rng, training))
        h = T.layer_norm(x, p["ln2_g"], p["ln2_b"])
        h = T.add(T.matmul(T.relu(T.add(T.matmul(h, p["mlp_w1"]), p["mlp_b1"])),
                           p["mlp_w2"]), p["mlp_b2"])
        return T.add(x, T.dropout(h, p_drop, rng, training))


class DSViTModel:
    """Dual-stream embedder + per-plane fusion + tri-plane encoder + head."""

    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        self.layout = token_layout(cfg.volume_dims, cfg.slice_stride, cfg.patch)
        self.embed = DualStreamEmbedder(
            self.layout, cfg.dim, cfg.n_regions, rng,
            dual_stream_embedding=cfg.dual_stream_embedding,
        )
        self.fusion = {
            plane: BottleneckMLP(plane, cfg.dim, cfg.hidden_bottleneck, rng)
            for plane in PLANES
        }
        if cfg.share_plane_weights:
            self.self_blocks = [
                TransformerBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, rng)
                for _ in range(cfg.n_self_layers)
            ]
            self.plane_blocks = None
        else:
            self.self_blocks = None
            self.plane_blocks = {
                plane: [
                    TransformerBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, rng)
                    for _ in range(cfg.n_self_layers)
                ]
                for plane in PLANES
            }
        self.cross_blocks = [
            TransformerBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, rng)
            for _ in range(cfg.n_cross_layers)
        ]
        self.params = {
            "cls": parameter((cfg.dim,), rng),
            "final_g": parameter(np.ones(cfg.dim, dtype=np.float32)),
            "final_b": parameter((cfg.dim,), std=0.0),
            "head_w": linear_parameter(rng, cfg.dim, cfg.n_classes),
            "head_b": parameter((cfg.n_classes,), std=0.0),
        }

    # -- parameter registry --------------------------------------------------

    def components(self) -> list[tuple[str, object]]:
        comps = list(self.embed.components())
        comps += [(f"fusion.{plane}", self.fusion[plane]) for plane in PLANES]
        if self.self_blocks is not None:
            comps += [(f"encoder.self{i}", b) for i, b in enumerate(self.self_blocks)]
        else:
            comps += [
                (f"encoder.self{i}.{plane}", b)
                for plane in PLANES
                for i, b in enumerate(self.plane_blocks[plane])
            ]
        comps += [(f"encoder.cross{i}", b) for i, b in enumerate(self.cross_blocks)]
        comps.append(("head", self))
        return comps

    def param_slots(self) -> "OrderedDict[str, tuple[dict, str]]":
        slots: OrderedDict[str, tuple[dict, str]] = OrderedDict()
        for prefix, comp in self.components():
            for key in comp.params:
                slots[f"{prefix}.{key}"] = (comp.params, key)
        return slots

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((name, d[k]) for name, (d, k) in self.param_slots().items())

    def load_parameters(self, arrays: dict) -> None:
        slots = self.param_slots()
        missing = set(slots) - set(arrays)
        extra = set(arrays) - set(slots)
        if missing or extra:
            raise InvalidInputError(
                f"parameter names mismatch: missing {sorted(missing)[:3]}, "
                f"unexpected {sorted(extra)[:3]}"
            )
        for name, (d, k) in slots.items():
            arr = np.ascontiguousarray(arrays[name], dtype=np.float32)
            if arr.shape != d[k].data.shape:
                raise InvalidInputError(
                    f"shape mismatch for {name}: {arr.shape} vs {d[k].data.shape}"
                )
            d[k].data = arr
            d[k].grad = None

    # -- forward --------------------------------------------------------------

    def _self_block(self, layer: int, plane: str) -> TransformerBlock:
        if self.self_blocks is not None:
            return self.self_blocks[layer]
        return self.plane_blocks[plane][layer]

    def _stream_tokens(self, batch: TokenBatch) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        b = batch.n
        zeros = None
        if not (cfg.use_mri_stream and cfg.use_seg_stream):
            zeros = Tensor(np.zeros((b, self.layout.n_tokens, cfg.dim), dtype=np.float32))
        t_mri = self.embed.embed_mri(batch.mri) if cfg.use_mri_stream else zeros
        if not cfg.use_seg_stream:
            t_seg = zeros
        elif cfg.dual_stream_embedding:
            t_seg = self.embed.embed_seg(batch.seg_counts)
        else:
            if batch.seg_pixels is None:
                raise InvalidInputError(
                    "collapsed embedding needs seg_pixels in the batch"
                )
            t_seg = self.embed.embed_seg_collapsed(batch.seg_pixels)
        return t_mri, t_seg

    def fuse(self, batch: TokenBatch) -> FusedTokens:
        t_mri, t_seg = self._stream_tokens(batch)
        bounds = self.layout.plane_bounds
        fused = []
        for plane, (lo, hi) in zip(PLANES, bounds):
            fused.append(
                fuse_plane(
                    self.fusion[plane],
                    T.slice_axis(t_mri, 1, lo, hi),
                    T.slice_axis(t_seg, 1, lo, hi),
                    plane,
                )
            )
        return concat_planes(*fused)

    def forward(self, batch: TokenBatch, *, training: bool = False, rng=None
                ) -> tuple[Tensor, Tensor]:
        """Returns (logits, per-scan feature = final class-token state)."""
        cfg = self.cfg
        p_drop = cfg.dropout if training else 0.0
        fused = self.fuse(batch)
        x = fused.tokens
        for layer in range(cfg.n_self_layers):
            segs = []
            for plane, (lo, hi) in zip(PLANES, fused.plane_bounds):
                seg = T.slice_axis(x, 1, lo, hi)
                segs.append(
                    self._self_block(layer, plane)(
                        seg, training=training, rng=rng, p_drop=p_drop
                    )
                )
            x = T.concat(segs, axis=1)
        b = batch.n
        cls = T.broadcast_to(T.reshape(self.params["cls"], (1, 1, cfg.dim)),
                             (b, 1, cfg.dim))
        x = T.concat([cls, x], axis=1)
        for blk in self.cross_blocks:
            x = blk(x, training=training, rng=rng, p_drop=p_drop)
        x = T.layer_norm(x, self.params["final_g"], self.params["final_b"])
        feats = T.reshape(T.slice_axis(x, 1, 0, 1), (b, cfg.dim))
        logits = T.add(T.matmul(feats, self.params["head_w"]), self.params["head_b"])
        return logits, feats

    def predict(self, batch: TokenBatch) -> tuple[np.ndarray, np.ndarray]:
        """Argmax class and its softmax probability, no graph recorded."""
        with T.no_grad():
            logits, _ = self.forward(batch, training=False)
            probs = T.softmax(logits, axis=-1).data
        return probs.argmax(axis=-1), probs.max(axis=-1)


def prediction_from_logits(logits: np.ndarray) -> tuple[int, float]:
    """Single-sample helper: (argmax class, softmax confidence)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    p = np.exp(z) / np.exp(z).sum()
    return int(p.argmax()), float(p.max())
