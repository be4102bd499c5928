"""Per-plane bottleneck fusion of the two token streams.

Each plane owns an independent two-layer MLP that takes the concatenated
(2D-wide) stream tokens, squeezes them through a hidden layer narrower
than its input, and restores the embedding dim. Plane outputs are then
row-concatenated in the fixed (axial, coronal, sagittal) order.

Single-stream ablations feed an all-zero token matrix into the missing
slot; the fusion op itself is unchanged, so all ablation arms share one
parameter shape.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import InvalidInputError
from .slicer import PLANES
from .tensor import Tensor, linear_parameter, parameter


class BottleneckMLP:
    """Two-layer per-token MLP, 2D -> hidden -> D with hidden < 2D."""

    def __init__(self, plane: str, dim: int, hidden: int, rng):
        if plane not in PLANES:
            raise InvalidInputError(f"unknown plane {plane!r}")
        if not 0 < hidden < 2 * dim:
            raise InvalidInputError(
                f"bottleneck hidden size must be in (0, {2 * dim}), got {hidden}"
            )
        self.plane = plane
        self.dim = dim
        self.hidden = hidden
        self.params = {
            "w1": linear_parameter(rng, 2 * dim, hidden),
            "b1": parameter((hidden,), std=0.0),
            "w2": linear_parameter(rng, hidden, dim),
            "b2": parameter((dim,), std=0.0),
        }

    def __call__(self, merged: Tensor) -> Tensor:
        h = T.relu(T.add(T.matmul(merged, self.params["w1"]), self.params["b1"]))
        return T.add(T.matmul(h, self.params["w2"]), self.params["b2"])


@dataclass
class FusedTokens:
    """Cross-plane token matrix with its plane segment boundaries."""

    tokens: Tensor  # (..., N_total, D)
    plane_bounds: tuple[tuple[int, int], ...]  # PLANES order

    def segment(self, plane: str) -> Tensor:
        lo, hi = self.plane_bounds[PLANES.index(plane)]
        return T.slice_axis(self.tokens, self.tokens.data.ndim - 2, lo, hi)


def fuse_plane(mlp: BottleneckMLP, t_mri: Tensor, t_seg: Tensor, plane: str) -> Tensor:
    """Token-wise fusion of the two streams for one plane."""
    if plane != mlp.plane:
        raise InvalidInputError(f"{mlp.plane} MLP applied to {plane} tokens")
    if t_mri.shape != t_seg.shape:
        raise InvalidInputError(
            f"stream token shapes disagree: {t_mri.shape} vs {t_seg.shape}"
        )
    if t_mri.shape[-1] != mlp.dim:
        raise InvalidInputError(
            f"token dim {t_mri.shape[-1]} does not match MLP dim {mlp.dim}"
        )
    merged = T.concat([t_mri, t_seg], axis=t_mri.data.ndim - 1)
    return mlp(merged)


def concat_planes(fused_axial: Tensor, fused_coronal: Tensor,
                  fused_sagittal: Tensor) -> FusedTokens:
    """Row-concatenation in fixed plane order, boundaries preserved."""
    parts = (fused_axial, fused_coronal, fused_sagittal)
    dim = parts[0].shape[-1]
    bounds = []
    start = 0
    for plane, part in zip(PLANES, parts):
        if part.shape[-2] == 0:
            raise InvalidInputError(f"{plane} segment is empty")
        if part.shape[-1] != dim:
            raise InvalidInputError("plane token dims disagree")
        bounds.append((start, start + part.shape[-2]))
        start += part.shape[-2]
    axis = parts[0].data.ndim - 2
    return FusedTokens(tokens=T.concat(parts, axis=axis), plane_bounds=tuple(bounds))
