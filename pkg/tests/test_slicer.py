import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsvit import slicer
from dsvit.errors import InvalidInputError
from dsvit.slicer import (
    PLANES,
    patchify,
    slice_volume,
    stitch,
    token_layout,
    volume_patches,
)
from dsvit.volio import SegVolume, Volume


def _vol(dims, seed=0):
    rng = np.random.default_rng(seed)
    return Volume(rng.random(dims).astype(np.float32))


class TestSliceVolume:
    def test_stride_four_gives_eight_slices(self):
        for plane in PLANES:
            stack = slice_volume(_vol((32, 32, 32)), plane, stride=4)
            assert stack.slices.shape[0] == 8

    def test_stride_one_gives_axis_length(self):
        stack = slice_volume(_vol((16, 20, 24)), "coronal", stride=1)
        assert stack.slices.shape[0] == 20

    def test_ceil_count_for_uneven_stride(self):
        stack = slice_volume(_vol((18, 16, 16)), "axial", stride=4)
        assert stack.slices.shape[0] == 5  # ceil(18/4)

    def test_constant_volume_slices_identical(self):
        vol = Volume(np.full((16, 16, 16), 0.25, dtype=np.float32))
        stack = slice_volume(vol, "sagittal", stride=2)
        assert (stack.slices == stack.slices[0]).all()

    def test_invalid_inputs(self):
        with pytest.raises(InvalidInputError):
            slice_volume(_vol((16, 16, 16)), "oblique", 1)
        with pytest.raises(InvalidInputError):
            slice_volume(_vol((16, 16, 16)), "axial", 0)
        with pytest.raises(InvalidInputError):
            slice_volume(_vol((16, 16, 16)), "axial", 17)


class TestPatchify:
    def test_patch_count(self):
        stack = slice_volume(_vol((32, 32, 32)), "axial", 4)
        grid = patchify(stack, 8)
        assert grid.patches.shape == (8, 16, 8, 8)

    def test_roundtrip_bit_exact(self):
        stack = slice_volume(_vol((32, 32, 32), seed=3), "coronal", 4)
        grid = patchify(stack, 8)
        assert np.array_equal(stitch(grid), stack.slices)

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from([2, 4, 8]), st.integers(0, 10_000))
    def test_roundtrip_property(self, p, seed):
        stack = slice_volume(_vol((16, 16, 16), seed=seed), "axial", 8)
        grid = patchify(stack, p)
        assert np.array_equal(stitch(grid), stack.slices)

    def test_indivisible_dims_rejected(self):
        stack = slice_volume(_vol((18, 18, 18)), "axial", 2)
        with pytest.raises(InvalidInputError):
            patchify(stack, 8)

    def test_paired_streams_share_patch_coordinates(self):
        rng = np.random.default_rng(5)
        vol = _vol((16, 16, 16), seed=5)
        seg = SegVolume(rng.integers(0, 8, size=(16, 16, 16)))
        for plane in PLANES:
            gv = patchify(slice_volume(vol, plane, 4), 4)
            gs = patchify(slice_volume(seg, plane, 4), 4)
            assert gv.patches.shape == gs.patches.shape
            assert (gv.rows, gv.cols) == (gs.rows, gs.cols)
            # same coordinates: patch (s, q) of seg stitches back to the
            # same slice location as patch (s, q) of vol
            assert np.array_equal(stitch(gs), slice_volume(seg, plane, 4).slices)


class TestTokenLayout:
    def test_default_config_has_384_tokens(self):
        layout = token_layout((32, 32, 32), stride=4, patch=8)
        assert layout.plane_counts == (128, 128, 128)
        assert layout.n_tokens == 384

    def test_total_token_count_formula(self):
        layout = token_layout((16, 32, 32), stride=4, patch=8)
        expected = 0
        for plane in PLANES:
            axis = {"axial": 0, "coronal": 1, "sagittal": 2}[plane]
            dims = (16, 32, 32)
            n_slices = -(-dims[axis] // 4)
            a, b = [d for i, d in enumerate(dims) if i != axis]
            expected += n_slices * (a // 8) * (b // 8)
        assert layout.n_tokens == expected

    def test_plane_bounds_partition(self):
        layout = token_layout((32, 32, 32), 4, 8)
        bounds = layout.plane_bounds
        assert bounds[0][0] == 0 and bounds[-1][1] == layout.n_tokens
        assert all(b0[1] == b1[0] for b0, b1 in zip(bounds, bounds[1:]))

    def test_provenance_order_matches_token_count(self):
        layout = token_layout((16, 16, 16), 8, 8)
        prov = layout.provenance()
        assert len(prov) == layout.n_tokens
        assert prov[0] == ("axial", 0, 0)
        planes_seen = [p for p, _, _ in prov]
        assert planes_seen == sorted(planes_seen, key=lambda p: PLANES.index(p))


def test_volume_patches_canonical_order():
    vol = _vol((16, 16, 16), seed=8)
    flat = volume_patches(vol, stride=8, patch=8)
    layout = token_layout((16, 16, 16), 8, 8)
    assert flat.shape == (layout.n_tokens, 8, 8)
    first = patchify(slice_volume(vol, "axial", 8), 8).patches.reshape(-1, 8, 8)
    assert np.array_equal(flat[: first.shape[0]], first)
