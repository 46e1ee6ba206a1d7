import numpy as np
import pytest

from alignkit import ops
from alignkit.errors import ShapeError
from alignkit.flow import (FlowEstimatorConfig, block_match_flow, endpoint_error,
                           estimate_base_flow, interior_mask, luma)

from conftest import translated_pair

INTERIOR = interior_mask(64, 64, 10)


def uniform_flow(dx, dy, size=64):
    f = np.empty((2, size, size), np.float32)
    f[0], f[1] = dx, dy
    return f


class TestEstimateBaseFlow:
    def test_identical_frames_zero_exactly(self):
        a, _, _ = translated_pair((3, 0))
        res = estimate_base_flow(a, a)
        assert np.all(res.flow == 0.0)
        assert not res.low_texture

    def test_integer_translation(self):
        a, b, gt = translated_pair((3, 0))
        res = estimate_base_flow(a, b)
        assert endpoint_error(res.flow, gt, INTERIOR) <= 0.25

    def test_subpixel_translation(self):
        a, b, gt = translated_pair((0.5, 0))
        res = estimate_base_flow(a, b)
        assert endpoint_error(res.flow, gt, INTERIOR) <= 0.2

    @pytest.mark.parametrize("shift", [(2, -1), (-4.5, 2.25), (6, 4), (0.25, -0.75)])
    def test_various_shifts(self, shift):
        a, b, gt = translated_pair(shift, seed=11)
        res = estimate_base_flow(a, b)
        assert endpoint_error(res.flow, gt, INTERIOR) <= 0.3

    def test_constant_image_low_texture(self):
        c = np.full((1, 64, 64), 0.5, np.float32)
        res = estimate_base_flow(c, c)
        assert res.low_texture
        assert np.all(res.flow == 0.0)

    def test_antisymmetry_on_translation(self):
        a, b, _ = translated_pair((4, 2), seed=7)
        f_ab = estimate_base_flow(a, b).flow
        f_ba = estimate_base_flow(b, a).flow
        d = (f_ab + f_ba).astype(np.float64)
        assert np.sqrt(d[0] ** 2 + d[1] ** 2)[INTERIOR].mean() <= 0.3

    def test_pyramid_beats_single_level_on_large_motion(self):
        a, b, gt = translated_pair((4, 0), seed=5)
        e_pyr = endpoint_error(estimate_base_flow(a, b).flow, gt, INTERIOR)
        cfg1 = FlowEstimatorConfig(levels=1)
        e_one = endpoint_error(estimate_base_flow(a, b, cfg1).flow, gt, INTERIOR)
        assert e_pyr <= e_one

    def test_size_precondition(self):
        small = np.zeros((1, 20, 20), np.float32)
        with pytest.raises(ShapeError, match="levels"):
            estimate_base_flow(small, small)

    def test_for_size_clamps_levels(self):
        cfg = FlowEstimatorConfig.for_size(16, 16)
        assert cfg.levels == 2
        assert FlowEstimatorConfig.for_size(64, 64).levels == 3


class TestBlockMatch:
    def test_identical_zero(self):
        a, _, _ = translated_pair((2, 0))
        assert np.all(block_match_flow(a, a, radius=2) == 0.0)

    def test_integer_translation_exact(self):
        a, b, _ = translated_pair((2, -1), seed=9)
        bm = block_match_flow(a, b, radius=3)
        assert np.all(bm[0][INTERIOR] == 2.0)
        assert np.all(bm[1][INTERIOR] == -1.0)

    def test_constant_ties_to_zero(self):
        c = np.full((1, 32, 32), 0.5, np.float32)
        assert np.all(block_match_flow(c, c, radius=2) == 0.0)


class TestEndpointError:
    def test_exact_match(self):
        f = uniform_flow(1, 2)
        assert endpoint_error(f, f) == 0.0

    def test_unit_offset(self):
        assert endpoint_error(uniform_flow(1, 0), uniform_flow(0, 0)) == pytest.approx(1.0)

    def test_half_exact_half_off(self):
        est = uniform_flow(0, 0, size=4)
        gt = uniform_flow(0, 0, size=4)
        est[0, :2], est[1, :2] = 3.0, 4.0  # half the pixels off by (3,4)
        assert endpoint_error(est, gt) == pytest.approx(2.5)

    def test_empty_mask_raises(self):
        f = uniform_flow(0, 0, size=4)
        with pytest.raises(ShapeError, match="empty"):
            endpoint_error(f, f, np.zeros((4, 4), bool))


class TestLuma:
    def test_single_channel_passthrough(self, rng):
        x = rng.random((1, 4, 4)).astype(np.float32)
        assert np.array_equal(luma(x), x[0])

    def test_rec601_weights(self):
        x = np.zeros((3, 1, 1), np.float32)
        x[0] = 1.0
        assert luma(x)[0, 0] == pytest.approx(0.299)

    def test_two_channels_rejected(self, rng):
        with pytest.raises(ShapeError, match="channels"):
            luma(rng.random((2, 4, 4)))
