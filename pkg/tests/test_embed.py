import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsvit import tensor as T
from dsvit.embed import (
    DualStreamEmbedder,
    PixelEmbedder,
    PositionalTable,
    TokenEmbedder,
    label_fractions,
)
from dsvit.errors import InvalidInputError
from dsvit.slicer import token_layout
from dsvit.tensor import Tensor

LAYOUT = token_layout((16, 16, 16), stride=8, patch=8)  # 24 tokens
K, D, NPIX = 8, 4, 64


def embedder(seed=0, dual=True):
    return DualStreamEmbedder(LAYOUT, D, K, np.random.default_rng(seed),
                              dual_stream_embedding=dual)


def rand_labels(seed, n=1):
    rng = np.random.default_rng(seed)
    return rng.integers(0, K, size=(n, LAYOUT.n_tokens, NPIX))


class TestPixelEmbedder:
    def test_zero_projection_and_zero_pe_gives_zeros(self):
        emb = embedder(1)
        emb.pixel.params["w_proj"].data[:] = 0
        emb.pos.params["pe"].data[:] = 0
        out = emb.embed_mri(np.ones((1, LAYOUT.n_tokens, NPIX), dtype=np.float32))
        assert not out.data.any()

    def test_zero_projection_isolates_positional_term(self):
        emb = embedder(2)
        emb.pixel.params["w_proj"].data[:] = 0
        out = emb.embed_mri(np.ones((2, LAYOUT.n_tokens, NPIX), dtype=np.float32))
        assert np.array_equal(out.data[0], emb.pos.params["pe"].data)
        assert np.array_equal(out.data[1], emb.pos.params["pe"].data)

    def test_one_hot_patch_reads_projection_row(self):
        # patch [[1,0],[0,0]] flattens to e_0, so the token is row 0 of the
        # projection plus the positional vector
        layout = token_layout((16, 16, 16), stride=16, patch=2)
        emb = DualStreamEmbedder(layout, D, K, np.random.default_rng(3))
        patches = np.zeros((1, layout.n_tokens, 4), dtype=np.float32)
        patches[:, :, 0] = 1.0
        out = emb.embed_mri(patches)
        expect = emb.pixel.params["w_proj"].data[0] + emb.pos.params["pe"].data
        assert np.allclose(out.data[0], expect, atol=1e-7)

    def test_wrong_patch_dim_rejected(self):
        emb = embedder(4)
        with pytest.raises(InvalidInputError):
            emb.embed_mri(np.ones((1, LAYOUT.n_tokens, 16), dtype=np.float32))


class TestTokenEmbedder:
    def test_uniform_patch_is_exact_lookup(self):
        emb = embedder(5)
        emb.pos.params["pe"].data[:] = 0
        labels = np.full((1, LAYOUT.n_tokens, NPIX), 3)
        out = emb.embed_seg(label_fractions(labels, K))
        table = emb.token.params["table"].data
        assert np.array_equal(out.data[0], np.tile(table[3], (LAYOUT.n_tokens, 1)))

    def test_two_pixel_mean(self):
        tok = TokenEmbedder(2, 2, np.random.default_rng(0))
        tok.params["table"].data[:] = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
        fractions = label_fractions(np.array([[[0, 1]]]), 2)
        out = tok.from_fractions(Tensor(fractions))
        assert np.allclose(out.data, [[[0.5, 0.5]]])

    def test_pixel_permutation_invariance_bitwise(self):
        labels = rand_labels(6)
        rng = np.random.default_rng(7)
        permuted = labels[..., rng.permutation(NPIX)]
        emb = embedder(8)
        a = emb.embed_seg(label_fractions(labels, K))
        b = emb.embed_seg(label_fractions(permuted, K))
        assert a.data.tobytes() == b.data.tobytes()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_fraction_route_matches_lookup_mean_route(self, seed):
        # grouped-by-class mean vs per-pixel lookup mean: same math
        tok = TokenEmbedder(K, D, np.random.default_rng(9))
        labels = np.random.default_rng(seed).integers(0, K, size=(3, 5, 16))
        via_fractions = tok.from_fractions(Tensor(label_fractions(labels, K)))
        via_lookup = tok.from_labels(labels)
        assert np.allclose(via_fractions.data, via_lookup.data, atol=1e-6)

    def test_relabeling_equivariance(self):
        # permuting region ids together with the table rows changes nothing
        tok = TokenEmbedder(K, D, np.random.default_rng(10))
        labels = rand_labels(11)
        perm = np.random.default_rng(12).permutation(K)
        inv = np.argsort(perm)
        relabeled = perm[labels]
        tok2 = TokenEmbedder(K, D, np.random.default_rng(10))
        tok2.params["table"].data = tok.params["table"].data[inv].copy()
        a = tok.from_fractions(Tensor(label_fractions(labels, K)))
        b = tok2.from_fractions(Tensor(label_fractions(relabeled, K)))
        assert np.allclose(a.data, b.data, atol=1e-6)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(InvalidInputError):
            label_fractions(np.array([[[0, K]]]), K)

    def test_gradient_only_into_present_label_rows(self):
        emb = embedder(13)
        labels = np.full((1, LAYOUT.n_tokens, NPIX), 2)
        labels[0, 0, :4] = 5
        out = emb.embed_seg(label_fractions(labels, K))
        out.sum().backward()
        grad = emb.token.params["table"].grad
        present = {2, 5}
        for k in range(K):
            if k in present:
                assert np.abs(grad[k]).sum() > 0
            else:
                assert not grad[k].any()


class TestSharedPositionalTable:
    def test_single_instance_feeds_both_streams(self):
        emb = embedder(14)
        assert emb.pos is emb.pos  # one table object
        mri = np.zeros((1, LAYOUT.n_tokens, NPIX), dtype=np.float32)
        seg = label_fractions(np.zeros((1, LAYOUT.n_tokens, NPIX), dtype=int), K)
        before_m = emb.embed_mri(mri).data.copy()
        before_s = emb.embed_seg(seg).data.copy()
        bump = np.zeros((LAYOUT.n_tokens, D), dtype=np.float32)
        bump[7] = 0.5
        emb.pos.params["pe"].data = emb.pos.params["pe"].data + bump
        after_m = emb.embed_mri(mri).data
        after_s = emb.embed_seg(seg).data
        assert np.allclose(after_m - before_m, bump[None], atol=1e-7)
        assert np.allclose(after_s - before_s, bump[None], atol=1e-7)

    def test_gradient_flows_into_table_from_both_streams(self):
        emb = embedder(15)
        mri = np.random.default_rng(0).random((1, LAYOUT.n_tokens, NPIX)).astype(np.float32)
        seg = label_fractions(rand_labels(1), K)
        T.add(emb.embed_mri(mri).sum(), emb.embed_seg(seg).sum()).backward()
        pe_grad = emb.pos.params["pe"].grad
        # both streams add the table once per token: d(sum)/d(pe) = 2
        assert np.allclose(pe_grad, 2.0)

    def test_token_count_mismatch_rejected(self):
        emb = embedder(16)
        with pytest.raises(InvalidInputError):
            emb.embed_mri(np.ones((1, 7, NPIX), dtype=np.float32))


def test_collapsed_embedding_requires_flag():
    emb = embedder(17, dual=True)
    with pytest.raises(InvalidInputError):
        emb.embed_seg_collapsed(np.ones((1, LAYOUT.n_tokens, NPIX), dtype=np.float32))
    emb2 = embedder(17, dual=False)
    out = emb2.embed_seg_collapsed(
        np.ones((1, LAYOUT.n_tokens, NPIX), dtype=np.float32)
    )
    assert out.shape == (1, LAYOUT.n_tokens, D)
    assert emb2.seg_pixel.params["w_proj"] is not emb2.pixel.params["w_proj"]


def test_label_fractions_rows_sum_to_one():
    fr = label_fractions(rand_labels(18), K)
    assert np.allclose(fr.sum(axis=-1), 1.0, atol=1e-6)
