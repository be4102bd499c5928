"""Tri-plane slicing and fixed-size patch grids.

Both streams run through exactly the same machinery: an intensity volume
and its paired segmentation produce identical (plane, slice, patch) index
sequences, which is what lets one positional table serve both.

Canonical token order: planes in PLANES order, slices ascending, patches
row-major within a slice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .volio import SegVolume, Volume

PLANES = ("axial", "coronal", "sagittal")
_PLANE_AXIS = {"axial": 0, "coronal": 1, "sagittal": 2}


@dataclass
class PlaneStack:
    plane: str
    slices: np.ndarray  # (n_slices, a, b)
    slice_stride: int


@dataclass
class PatchGrid:
    plane: str
    patch_size: int
    rows: int
    cols: int
    patches: np.ndarray  # (n_slices, rows*cols, p, p), row-major patch order


def slice_volume(vol: Volume | SegVolume, plane: str, stride: int = 1) -> PlaneStack:
    """Slices at indices 0, stride, 2*stride, ... along the plane's axis."""
    if plane not in _PLANE_AXIS:
        raise InvalidInputError(f"unknown plane {plane!r}")
    if stride < 1:
        raise InvalidInputError("stride must be at least 1")
    arr = vol.voxels if isinstance(vol, Volume) else vol.labels
    axis = _PLANE_AXIS[plane]
    if arr.shape[axis] < stride:
        raise InvalidInputError(
            f"stride {stride} exceeds axis length {arr.shape[axis]}"
        )
    taken = np.ascontiguousarray(
        np.moveaxis(arr, axis, 0)[::stride]
    )
    return PlaneStack(plane=plane, slices=taken, slice_stride=stride)


def patchify(stack: PlaneStack, patch_size: int) -> PatchGrid:
    """Row-major p x p patches per slice; dims must divide exactly."""
    n, a, b = stack.slices.shape
    if patch_size < 1:
        raise InvalidInputError("patch size must be positive")
    if a % patch_size or b % patch_size:
        raise InvalidInputError(
            f"slice dims ({a}, {b}) not divisible by patch size {patch_size}"
        )
    rows, cols = a // patch_size, b // patch_size
    patches = (
        stack.slices.reshape(n, rows, patch_size, cols, patch_size)
        .transpose(0, 1, 3, 2, 4)
        .reshape(n, rows * cols, patch_size, patch_size)
    )
    return PatchGrid(
        plane=stack.plane,
        patch_size=patch_size,
        rows=rows,
        cols=cols,
        patches=np.ascontiguousarray(patches),
    )


def stitch(grid: PatchGrid) -> np.ndarray:
    """Inverse of patchify: reassemble the slices, bit-exact."""
    n, _, p, _ = grid.patches.shape
    return np.ascontiguousarray(
        grid.patches.reshape(n, grid.rows, grid.cols, p, p)
        .transpose(0, 1, 3, 2, 4)
        .reshape(n, grid.rows * p, grid.cols * p)
    )


@dataclass(frozen=True)
class TokenLayout:
    """Canonical token geometry for a (dims, stride, patch) configuration."""

    dims: tuple[int, int, int]
    stride: int
    patch: int
    plane_counts: tuple[int, int, int]  # tokens per plane, PLANES order

    @property
    def n_tokens(self) -> int:
        return sum(self.plane_counts)

    @property
    def plane_bounds(self) -> tuple[tuple[int, int], ...]:
        bounds = []
        start = 0
        for c in self.plane_counts:
            bounds.append((start, start + c))
            start += c
        return tuple(bounds)

    def provenance(self) -> list[tuple[str, int, int]]:
        """(plane, slice index, patch index) per token, canonical order."""
        out = []
        for plane, count in zip(PLANES, self.plane_counts):
            axis = _PLANE_AXIS[plane]
            a, b = [d for i, d in enumerate(self.dims) if i != axis]
            per_slice = (a // self.patch) * (b // self.patch)
            n_slices = count // per_slice
            for s in range(n_slices):
                for q in range(per_slice):
                    out.append((plane, s * self.stride, q))
        return out


def token_layout(dims, stride: int, patch: int) -> TokenLayout:
    dims = tuple(dims)
    counts = []
    for plane in PLANES:
        axis = _PLANE_AXIS[plane]
        n_slices = -(-dims[axis] // stride)  # ceil
        a, b = [d for i, d in enumerate(dims) if i != axis]
        if a % patch or b % patch:
            raise InvalidInputError(
                f"{plane} slice dims ({a}, {b}) not divisible by patch {patch}"
            )
        counts.append(n_slices * (a // patch) * (b // patch))
    return TokenLayout(dims=dims, stride=stride, patch=patch, plane_counts=tuple(counts))


def volume_patches(vol: Volume | SegVolume, stride: int, patch: int) -> np.ndarray:
    """All patches of a volume in canonical token order: (n_tokens, p, p)."""
    pieces = []
    for plane in PLANES:
        grid = patchify(slice_volume(vol, plane, stride), patch)
        n, m, p, _ = grid.patches.shape
        pieces.append(grid.patches.reshape(n * m, p, p))
    return np.concatenate(pieces, axis=0)
