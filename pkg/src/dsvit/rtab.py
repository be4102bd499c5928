"""Residual temporal attention head for progression-risk prediction.

Given per-scan features M_1..M_T the head forms consecutive residuals
R_t = M_t - M_{t-1}, fuses each (M_t, R_t) pair through a 2d -> d -> d MLP
into M_t', keeps M_1' = M_1 identically, scores each step with a learnable
d x 1 vector, softmax-normalizes the scores across time, pools the steps
with those weights and classifies the pooled vector with a fully connected
layer.

Scores are scalars per step; the softmax runs across the time axis, which
is the only normalization that makes the weights sum to one over steps.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .errors import InvalidInputError
from .tensor import Tensor, linear_parameter, parameter


class RTABHead:
    """Parameters: fusion MLP (2d -> d -> d), attention vector, linear head."""

    def __init__(self, dim: int, n_classes: int, rng):
        self.dim = dim
        self.n_classes = n_classes
        self.params = {
            "fuse_w1": linear_parameter(rng, 2 * dim, dim),
            "fuse_b1": parameter((dim,), std=0.0),
            "fuse_w2": linear_parameter(rng, dim, dim),
            "fuse_b2": parameter((dim,), std=0.0),
            "w_a": linear_parameter(rng, dim, 1),
            "w_c": parameter((n_classes, dim), rng, std=dim**-0.5),
            "b_c": parameter((n_classes,), std=0.0),
        }

    # -- pieces, usable standalone --------------------------------------------

    def fuse_residual(self, m_t: Tensor, r_t: Tensor) -> Tensor:
        """MLP over concat(M_t, R_t); applies only to steps t >= 2."""
        if m_t.shape != r_t.shape or m_t.shape[-1] != self.dim:
            raise InvalidInputError(
                f"feature/residual dims disagree: {m_t.shape} vs {r_t.shape}"
            )
        p = self.params
        merged = T.concat([m_t, r_t], axis=m_t.data.ndim - 1)
        h = T.relu(T.add(T.matmul(merged, p["fuse_w1"]), p["fuse_b1"]))
        return T.add(T.matmul(h, p["fuse_w2"]), p["fuse_b2"])

    def attention_pool(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(pooled vector, weights) for x of shape (B, T, d); weights sum to 1."""
        if x.data.ndim != 3 or x.shape[-1] != self.dim:
            raise InvalidInputError(f"expected (B, T, {self.dim}) features, got {x.shape}")
        if x.shape[1] < 1:
            raise InvalidInputError("attention pooling needs at least one step")
        scores = T.matmul(x, self.params["w_a"])  # (B, T, 1)
        weights = T.softmax(scores, axis=1)
        pooled = T.tsum(T.mul(weights, x), axis=1)  # (B, d)
        b, t = x.shape[0], x.shape[1]
        return pooled, T.reshape(weights, (b, t))

    def classify(self, pooled: Tensor) -> Tensor:
        if pooled.shape[-1] != self.dim:
            raise InvalidInputError(f"pooled dim {pooled.shape[-1]} != {self.dim}")
        p = self.params
        return T.add(T.matmul(pooled, T.transpose(p["w_c"], (1, 0))), p["b_c"])

    # -- full head -------------------------------------------------------------

    def fused_sequence(self, feats: Tensor) -> Tensor:
        """[M_1, MLP(M_2, R_2), ..., MLP(M_T, R_T)] for feats (B, T, d).

        The first step passes through untouched (bit-exact), so a T=1
        sequence reduces to the raw feature.
        """
        t_len = feats.shape[1]
        first = T.slice_axis(feats, 1, 0, 1)
        if t_len == 1:
            return first
        current = T.slice_axis(feats, 1, 1, t_len)
        previous = T.slice_axis(feats, 1, 0, t_len - 1)
        residuals = T.sub(current, previous)
        fused = self.fuse_residual(current, residuals)
        return T.concat([first, fused], axis=1)

    def forward(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        """(risk logits, attention weights) from per-scan features (B, T, d)."""
        pooled, weights = self.attention_pool(self.fused_sequence(feats))
        return self.classify(pooled), weights

    # -- registry ----------------------------------------------------------------

    def param_slots(self) -> "OrderedDict[str, tuple[dict, str]]":
        return OrderedDict(
            (f"rtab.{k}", (self.params, k)) for k in self.params
        )

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((name, d[k]) for name, (d, k) in self.param_slots().items())

    def load_parameters(self, arrays: dict) -> None:
        slots = self.param_slots()
        if set(arrays) != set(slots):
            raise InvalidInputError("rtab parameter names mismatch")
        for name, (d, k) in slots.items():
            arr = np.ascontiguousarray(arrays[name], dtype=np.float32)
            if arr.shape != d[k].data.shape:
                raise InvalidInputError(f"shape mismatch for {name}")
            d[k].data = arr
            d[k].grad = None


def residuals(sequence: list[Tensor]) -> list[Tensor]:
    """R_t = M_t - M_{t-1} for t >= 2; empty for a single-step sequence."""
    if not sequence:
        raise InvalidInputError("empty feature sequence")
    dims = {tuple(m.shape) for m in sequence}
    if len(dims) > 1:
        raise InvalidInputError(f"inconsistent feature shapes {sorted(dims)}")
    return [T.sub(m, prev) for prev, m in zip(sequence, sequence[1:])]


def forward_sequence(model, head: RTABHead, batch_per_scan, *, training=False,
                     rng=None) -> tuple[Tensor, Tensor]:
    """Compose the backbone over each scan and pool with the temporal head.

    ``batch_per_scan`` is a list of TokenBatch, one per time step, each
    holding the same B subjects in the same order.
    """
    if not batch_per_scan:
        raise InvalidInputError("need at least one scan per record")
    feats = []
    b = batch_per_scan[0].n
    for scan_batch in batch_per_scan:
        if scan_batch.n != b:
            raise InvalidInputError("scan batches disagree on subject count")
        _, m = model.forward(scan_batch, training=training, rng=rng)
        feats.append(T.reshape(m, (b, 1, head.dim)))
    stacked = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
    return head.forward(stacked)
