import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alignkit import ops
from alignkit.adastn import (AffineField, DeformParams, POSITIONAL_GRID,
                             adastn_predict, adastn_v2_predict,
                             flow_from_translation, init_predictor_weights,
                             offsets_from_affine)
from alignkit.errors import ShapeError


def identity_affine(n, H, W):
    A = np.zeros((n, 2, 2, H, W), np.float32)
    A[:, 0, 0] = 1.0
    A[:, 1, 1] = 1.0
    b = np.zeros((n, 2, 1, H, W), np.float32)
    return AffineField(A, b)


class TestPositionalGrid:
    def test_exact_integers(self):
        assert POSITIONAL_GRID.shape == (2, 9)
        assert np.array_equal(POSITIONAL_GRID[0], [-1, -1, -1, 0, 0, 0, 1, 1, 1])
        assert np.array_equal(POSITIONAL_GRID[1], [-1, 0, 1, -1, 0, 1, -1, 0, 1])


class TestOffsetsFromAffine:
    def test_identity_gives_grid(self):
        P = offsets_from_affine(identity_affine(2, 3, 4))
        assert np.array_equal(P, np.broadcast_to(
            POSITIONAL_GRID[None, :, :, None, None], (2, 2, 9, 3, 4)))

    def test_rank_collapse_translation(self):
        af = identity_affine(1, 2, 2)
        af.A[:] = 0.0
        af.b[:, 0] = -0.5  # vertical
        af.b[:, 1] = 1.5   # horizontal
        P = offsets_from_affine(af)
        assert np.all(P[:, 0] == -0.5) and np.all(P[:, 1] == 1.5)

    def test_matmul_oracle_at_one_pixel(self, rng):
        A = rng.standard_normal((1, 2, 2, 1, 1)).astype(np.float32)
        b = rng.standard_normal((1, 2, 1, 1, 1)).astype(np.float32)
        P = offsets_from_affine(AffineField(A, b))[0, :, :, 0, 0]
        hand = A[0, :, :, 0, 0] @ POSITIONAL_GRID + b[0, :, :, 0, 0]
        assert np.abs(P - hand).max() < 1e-6

    @given(seed=st.integers(0, 50))
    @settings(max_examples=25, deadline=None)
    def test_linearity(self, seed):
        """Affine deviations from identity compose additively:
        P(I+D1+D2, b1+b2) = P(I+D1, b1) + P(I+D2, b2) - G."""
        r = np.random.default_rng(seed)
        A1, A2 = (r.standard_normal((1, 2, 2, 2, 2)).astype(np.float32) for _ in range(2))
        b1, b2 = (r.standard_normal((1, 2, 1, 2, 2)).astype(np.float32) for _ in range(2))
        eye = identity_affine(1, 2, 2).A
        G = np.broadcast_to(POSITIONAL_GRID[None, :, :, None, None], (1, 2, 9, 2, 2))
        lhs = offsets_from_affine(AffineField(A1 + A2 - eye, b1 + b2))
        rhs = (offsets_from_affine(AffineField(A1, b1))
               + offsets_from_affine(AffineField(A2, b2)) - G)
        assert np.abs(lhs - rhs).max() < 1e-4

    def test_translation_rigidly_shifts_pattern(self):
        # dyadic translation components keep G + b exact in float32
        af = identity_affine(1, 2, 2)
        af.b[:, 0] = 0.75
        af.b[:, 1] = -0.5
        P = offsets_from_affine(af)
        delta = P - np.broadcast_to(POSITIONAL_GRID[None, :, :, None, None], P.shape)
        assert np.abs(delta - af.b).max() == 0.0


class TestPredictors:
    def test_v1_zero_init_zero_flow(self, rng):
        w = init_predictor_weights(6, rng)
        f1 = rng.standard_normal((6, 8, 9)).astype(np.float32)
        f2 = rng.standard_normal((6, 8, 9)).astype(np.float32)
        out = adastn_predict(f1, f2, w)
        assert out.shape == (2, 8, 9)
        assert np.all(out == 0.0)

    def test_v1_identical_features_zero(self, rng):
        w = init_predictor_weights(4, rng)
        f = rng.standard_normal((4, 6, 6)).astype(np.float32)
        assert np.all(adastn_predict(f, f, w) == 0.0)

    def test_v2_init_state(self, rng):
        w = init_predictor_weights(5, rng, groups=4, affine=True)
        f1 = rng.standard_normal((5, 7, 6)).astype(np.float32)
        f2 = rng.standard_normal((5, 7, 6)).astype(np.float32)
        dp = adastn_v2_predict(f1, f2, w)
        assert dp.offsets.shape == (4, 2, 9, 7, 6)
        assert dp.masks.shape == (4, 9, 7, 6)
        G = np.broadcast_to(POSITIONAL_GRID[None, :, :, None, None], dp.offsets.shape)
        assert np.array_equal(dp.offsets, G)
        s7 = 1.0 / (1.0 + np.exp(-np.float32(7.0)))
        assert np.allclose(dp.masks, s7, atol=1e-6)

    def test_v2_random_weights_masks_in_open_interval(self, rng):
        w = init_predictor_weights(3, rng, groups=2, affine=True)
        w.mask_w = rng.standard_normal(w.mask_w.shape).astype(np.float32) * 0.1
        w.mask_b = rng.standard_normal(w.mask_b.shape).astype(np.float32)
        f1 = rng.random((3, 6, 6)).astype(np.float32)
        f2 = rng.random((3, 6, 6)).astype(np.float32)
        dp = adastn_v2_predict(f1, f2, w)
        assert np.all(dp.masks > 0.0) and np.all(dp.masks < 1.0)

    def test_v1_v2_agree_on_translation_component(self, rng):
        """v2 constrained to A=I, n=1 matches v1 given the same branch weights."""
        w1 = init_predictor_weights(4, rng)
        w1.b_w = rng.standard_normal(w1.b_w.shape).astype(np.float32) * 0.1
        w1.b_b = rng.standard_normal(w1.b_b.shape).astype(np.float32) * 0.1
        w2 = init_predictor_weights(4, np.random.default_rng(0), groups=1, affine=True)
        for f in ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "b_w", "b_b"):
            setattr(w2, f, getattr(w1, f).copy())
        f1 = rng.standard_normal((4, 8, 8)).astype(np.float32)
        f2 = rng.standard_normal((4, 8, 8)).astype(np.float32)
        v1_flow = adastn_predict(f1, f2, w1)
        dp = adastn_v2_predict(f1, f2, w2)
        # with A = I the pattern is G + b, so the translation is P - G
        G = np.broadcast_to(POSITIONAL_GRID[None, :, :, None, None], dp.offsets.shape)
        b = (dp.offsets - G)[:, :, 4:5].transpose(0, 1, 2, 3, 4)  # center tap
        v2_flow = flow_from_translation(b[:, :, 0][:, :, None])
        assert np.array_equal(v1_flow, v2_flow)

    def test_translation_covariance(self, rng):
        """Integer-shifting both inputs shifts the output identically where the
        receptive field avoids both the roll seam and the zero padding."""
        w = init_predictor_weights(3, rng)
        w.b_w = rng.standard_normal(w.b_w.shape).astype(np.float32) * 0.1
        w.b_b = rng.standard_normal(w.b_b.shape).astype(np.float32) * 0.1
        f1 = rng.random((3, 16, 16)).astype(np.float32)
        f2 = rng.random((3, 16, 16)).astype(np.float32)
        out = adastn_predict(f1, f2, w)
        out_s = adastn_predict(np.roll(f1, 2, axis=2), np.roll(f2, 2, axis=2), w)
        # receptive field of the head is +-2; valid columns avoid the seam
        # (cols 0..1 wrap) plus margin, and the zero-pad fringe on both sides
        assert np.array_equal(out_s[:, 4:-4, 6:-6], np.roll(out, 2, axis=2)[:, 4:-4, 6:-6])

    def test_channel_mismatch(self, rng):
        w = init_predictor_weights(4, rng)
        f = rng.random((3, 6, 6)).astype(np.float32)
        with pytest.raises(ShapeError, match="channels"):
            adastn_predict(f, f, w)
