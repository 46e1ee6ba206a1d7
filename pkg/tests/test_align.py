import numpy as np
import pytest

from alignkit import ops
from alignkit.adastn import (DeformParams, POSITIONAL_GRID, adastn_v2_predict,
                             init_predictor_weights)
from alignkit.align import (AlignConfig, AlignWeights, DeformNetWeights,
                            build_pyramid, deform_sample, deformnet, resflownet, align)
from alignkit.errors import ShapeError
from alignkit.flow import FlowEstimatorConfig

from conftest import translated_pair


def grid_params(n, H, W, mask_value=1.0):
    pat = np.broadcast_to(POSITIONAL_GRID[None, :, :, None, None],
                          (n, 2, 9, H, W)).astype(np.float32).copy()
    masks = np.full((n, 9, H, W), mask_value, np.float32)
    return DeformParams(pat, masks)


def make_deform_weights(rng, c, groups=4):
    return DeformNetWeights(
        head=init_predictor_weights(c, rng, groups=groups, affine=True),
        conv_w=rng.standard_normal((c, c, 3, 3)).astype(np.float32) * 0.1,
        conv_b=np.zeros(c, np.float32),
    )


class TestBuildPyramid:
    def test_single_level(self, rng):
        f = rng.random((2, 8, 8)).astype(np.float32)
        pyr = build_pyramid(f, 1)
        assert len(pyr) == 1 and pyr[0] is f

    def test_three_levels_shapes(self, rng):
        pyr = build_pyramid(rng.random((4, 32, 32)).astype(np.float32), 3)
        assert [p.shape[1:] for p in pyr] == [(32, 32), (16, 16), (8, 8)]

    def test_constant_stays_constant(self):
        c = np.full((1, 16, 16), 0.42, np.float32)
        for lvl in build_pyramid(c, 3):
            assert np.all(lvl == np.float32(0.42))

    def test_too_small(self, rng):
        with pytest.raises(ShapeError, match="too small"):
            build_pyramid(rng.random((1, 2, 2)), 3)


class TestResflownet:
    def test_zero_init_returns_zero(self, rng):
        heads = [init_predictor_weights(4, rng) for _ in range(3)]
        f1 = rng.random((4, 32, 32)).astype(np.float32)
        f2 = rng.random((4, 32, 32)).astype(np.float32)
        base = rng.standard_normal((2, 32, 32)).astype(np.float32)
        delta = resflownet(build_pyramid(f1, 3), build_pyramid(f2, 3), base, heads)
        assert np.all(delta == 0.0)

    def test_single_level_degenerates(self, rng):
        from alignkit.adastn import adastn_predict
        head = init_predictor_weights(4, rng)
        head.b_w = rng.standard_normal(head.b_w.shape).astype(np.float32) * 0.1
        f_prev = rng.random((4, 16, 16)).astype(np.float32)
        f_cur = rng.random((4, 16, 16)).astype(np.float32)
        base = rng.standard_normal((2, 16, 16)).astype(np.float32)
        delta = resflownet([f_prev], [f_cur], base, [head])
        expect = adastn_predict(f_cur, ops.warp(f_prev, base), head)
        assert np.array_equal(delta, expect)

    def test_level_mismatch(self, rng):
        heads = [init_predictor_weights(4, rng) for _ in range(2)]
        f = rng.random((4, 16, 16)).astype(np.float32)
        with pytest.raises(ShapeError, match="levels"):
            resflownet(build_pyramid(f, 3), build_pyramid(f, 3),
                       np.zeros((2, 16, 16), np.float32), heads)


class TestDeformSample:
    def test_grid_pattern_equals_conv(self, rng):
        feat = rng.standard_normal((8, 9, 10)).astype(np.float32)
        w = rng.standard_normal((5, 8, 3, 3)).astype(np.float32)
        b = rng.standard_normal(5).astype(np.float32)
        out = deform_sample(feat, grid_params(4, 9, 10), w, b)
        assert np.abs(out - ops.conv2d(feat, w, b)).max() <= 1e-5

    def test_zero_masks_zero_output(self, rng):
        feat = rng.standard_normal((4, 6, 6)).astype(np.float32)
        w = rng.standard_normal((3, 4, 3, 3)).astype(np.float32)
        out = deform_sample(feat, grid_params(2, 6, 6, mask_value=0.0), w)
        assert np.all(out == 0.0)

    def test_uniform_shift_equals_shifted_conv(self, rng):
        feat = rng.standard_normal((4, 8, 12)).astype(np.float32)
        w = rng.standard_normal((4, 4, 3, 3)).astype(np.float32)
        params = grid_params(2, 8, 12)
        params.offsets[:, 1] += 1.0  # horizontal +1: sample from the right
        shifted = np.zeros_like(feat)
        shifted[:, :, :-1] = feat[:, :, 1:]
        out = deform_sample(feat, params, w)
        ref = ops.conv2d(shifted, w)
        assert np.abs(out - ref)[:, 1:-1, 1:-2].max() <= 1e-5

    def test_mask_gradient_matches_product_rule(self, rng):
        from alignkit.harness import analytic_deform_mask_grad
        feat = rng.random((4, 8, 8)).astype(np.float64)
        w = rng.standard_normal((3, 4, 3, 3)).astype(np.float64)
        params = grid_params(2, 8, 8)
        params.offsets = (params.offsets + 0.3 * rng.standard_normal(params.offsets.shape)).astype(np.float64)
        params.masks = (0.3 + 0.5 * rng.random(params.masks.shape)).astype(np.float64)
        ref = analytic_deform_mask_grad(feat, params, w)
        eps = 1e-3
        for (g, k, y, x) in [(0, 4, 3, 3), (1, 0, 5, 2), (0, 8, 2, 6)]:
            m2 = params.masks.copy()
            m2[g, k, y, x] += eps
            hi = deform_sample(feat, DeformParams(params.offsets, m2), w).sum()
            m2[g, k, y, x] -= 2 * eps
            lo = deform_sample(feat, DeformParams(params.offsets, m2), w).sum()
            fd = (hi - lo) / (2 * eps)
            assert abs(fd - ref[g, k, y, x]) <= 1e-3 * max(abs(ref[g, k, y, x]), 1e-6)

    def test_group_mismatch(self, rng):
        feat = rng.random((5, 6, 6)).astype(np.float32)
        w = rng.random((3, 5, 3, 3)).astype(np.float32)
        with pytest.raises(ShapeError, match="groups"):
            deform_sample(feat, grid_params(2, 6, 6), w)


class TestDeformnet:
    def test_init_state_is_modulated_conv_of_warp(self, rng):
        """At ledger init the offsets are exactly G, so deformnet equals the
        composition deform_sample(warp(h), grid, sigmoid(7)); against a plain
        conv the only gap is the constant mask factor 1 - sigmoid(7)."""
        c = 8
        weights = make_deform_weights(rng, c)
        f_cur = rng.random((c, 12, 12)).astype(np.float32)
        f_prev = rng.random((c, 12, 12)).astype(np.float32)
        h_prev = rng.random((c, 12, 12)).astype(np.float32)
        flow = rng.standard_normal((2, 12, 12)).astype(np.float32)
        out = deformnet(f_cur, f_prev, h_prev, flow, weights)
        warped_h = ops.warp(h_prev, flow)
        params = adastn_v2_predict(f_cur, ops.warp(f_prev, flow), weights.head)
        ref = deform_sample(warped_h, params, weights.conv_w, weights.conv_b)
        assert np.array_equal(out, ref)
        plain = ops.conv2d(warped_h, weights.conv_w, weights.conv_b)
        denom = max(np.abs(plain).max(), 1e-6)
        assert np.abs(out - plain).max() / denom <= 1.5e-3

    def test_zero_flow_init_is_conv_of_h(self, rng):
        c = 4
        weights = make_deform_weights(rng, c, groups=2)
        f = rng.random((c, 10, 10)).astype(np.float32)
        h = rng.random((c, 10, 10)).astype(np.float32)
        out = deformnet(f, f, h, np.zeros((2, 10, 10), np.float32), weights)
        plain = ops.conv2d(h, weights.conv_w, weights.conv_b)
        assert np.abs(out - plain).max() <= 1.5e-3 * max(np.abs(plain).max(), 1e-6)


class TestAlign:
    def _setup(self, rng, shift=(2, 0)):
        a, b, gt = translated_pair(shift, size=64, seed=5)
        c = 8
        proj = rng.standard_normal((c, 3, 3, 3)).astype(np.float32) * 0.3
        f_cur = ops.conv2d(a, proj)
        f_prev = ops.conv2d(b, proj)
        h_prev = f_prev.copy()
        weights = AlignWeights(
            resflow=[init_predictor_weights(c, rng) for _ in range(3)],
            deform=make_deform_weights(rng, c),
        )
        return a, b, f_prev, f_cur, h_prev, weights, gt

    def test_static_scene_init_weights(self, rng):
        a, _, f_prev, f_cur, h_prev, weights, _ = self._setup(rng, (0, 0))
        out = align(a, a, f_prev, f_prev, h_prev, AlignConfig(), weights)
        plain = ops.conv2d(h_prev, weights.deform.conv_w, weights.deform.conv_b)
        assert np.abs(out - plain).max() <= 1.5e-3 * max(np.abs(plain).max(), 1e-6)

    def test_ablation_off_off_is_base_warp(self, rng):
        from alignkit.flow import estimate_base_flow
        a, b, f_prev, f_cur, h_prev, weights, _ = self._setup(rng)
        cfg = AlignConfig(use_resflownet=False, use_deformnet=False)
        out = align(b, a, f_prev, f_cur, h_prev, cfg, weights)
        base = estimate_base_flow(a, b, FlowEstimatorConfig.for_size(64, 64)).flow
        assert np.array_equal(out, ops.warp(h_prev, base))

    def test_zero_init_identity_composition(self, rng):
        """Bit-level: align at ledger init equals the manual composition
        base-flow warp + v2 predictor + deformable sampling."""
        from alignkit.flow import estimate_base_flow
        a, b, f_prev, f_cur, h_prev, weights, _ = self._setup(rng)
        out = align(b, a, f_prev, f_cur, h_prev, AlignConfig(), weights)
        base = estimate_base_flow(a, b, FlowEstimatorConfig.for_size(64, 64)).flow
        # zero-init heads change nothing, so the refined flow IS the base flow
        params = adastn_v2_predict(f_cur, ops.warp(f_prev, base), weights.deform.head)
        ref = deform_sample(ops.warp(h_prev, base), params,
                            weights.deform.conv_w, weights.deform.conv_b)
        assert np.array_equal(out, ref)
