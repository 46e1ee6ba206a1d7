import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alignkit import ops
from alignkit.errors import ShapeError


def conv2d_oracle(x, w, b=None, groups=1):
    """Direct-summation reference convolution (float64)."""
    Cin, H, W = x.shape
    Cout, cpg, kh, kw = w.shape
    out = np.zeros((Cout, H, W))
    cig, cog = Cin // groups, Cout // groups
    for co in range(Cout):
        g = co // cog
        for y in range(H):
            for xx in range(W):
                s = 0.0
                for ci in range(cpg):
                    for ky in range(kh):
                        for kx in range(kw):
                            yy, xs = y + ky - kh // 2, xx + kx - kw // 2
                            if 0 <= yy < H and 0 <= xs < W:
                                s += float(w[co, ci, ky, kx]) * float(x[g * cig + ci, yy, xs])
                out[co, y, xx] = s + (float(b[co]) if b is not None else 0.0)
    return out


def bilinear_oracle(img, x, y):
    """Scalar four-neighbor weighted sum with clamping."""
    C, H, W = img.shape
    x = min(max(x, 0.0), W - 1.0)
    y = min(max(y, 0.0), H - 1.0)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    fx, fy = x - x0, y - y0
    out = np.empty(C)
    for c in range(C):
        out[c] = ((1 - fy) * (1 - fx) * img[c, y0, x0] + (1 - fy) * fx * img[c, y0, x1]
                  + fy * (1 - fx) * img[c, y1, x0] + fy * fx * img[c, y1, x1])
    return out


class TestBilinearSample:
    def test_integer_coords_exact(self, rng):
        img = rng.random((3, 6, 7)).astype(np.float32)
        xs, ys = np.meshgrid(np.arange(7, dtype=np.float32), np.arange(6, dtype=np.float32))
        out = ops.bilinear_sample(img, np.stack([xs, ys]))
        assert np.array_equal(out, img)

    def test_center_of_2x2_is_mean(self):
        img = np.array([[[1.0, 2.0], [3.0, 4.0]]], np.float32)
        coords = np.full((2, 1, 1), 0.5, np.float32)
        assert ops.bilinear_sample(img, coords)[0, 0, 0] == pytest.approx(2.5)

    def test_matches_scalar_oracle(self, rng):
        img = rng.random((2, 5, 5)).astype(np.float32)
        for _ in range(50):
            x = rng.uniform(0.5, 3.5)
            y = rng.uniform(0.5, 3.5)
            got = ops.bilinear_sample(img, np.array([[[x]], [[y]]], np.float32))[:, 0, 0]
            assert np.abs(got - bilinear_oracle(img, x, y)).max() < 1e-6

    def test_linear_in_image(self, rng):
        a = rng.random((2, 8, 8)).astype(np.float32)
        b = rng.random((2, 8, 8)).astype(np.float32)
        coords = (rng.random((2, 5, 5)) * 7).astype(np.float32)
        lhs = ops.bilinear_sample(2.5 * a + 0.5 * b, coords)
        rhs = 2.5 * ops.bilinear_sample(a, coords) + 0.5 * ops.bilinear_sample(b, coords)
        assert np.abs(lhs - rhs).max() < 1e-6

    def test_shape_error_names_axis(self, rng):
        with pytest.raises(ShapeError, match="axis 0"):
            ops.bilinear_sample(rng.random((2, 4, 4)), rng.random((3, 4, 4)))


class TestWarp:
    def test_zero_flow_identity(self, rng):
        f = rng.standard_normal((4, 9, 11)).astype(np.float32)
        out = ops.warp(f, np.zeros((2, 9, 11), np.float32))
        assert np.array_equal(out, f)

    def test_shifted_pair_interior(self, rng):
        a = rng.random((1, 8, 10)).astype(np.float32)
        b = np.zeros_like(a)
        b[:, :, 1:] = a[:, :, :-1]  # B is A shifted right by 1
        flow = np.zeros((2, 8, 10), np.float32)
        flow[0] = 1.0
        out = ops.warp(b, flow)
        assert np.abs(out[:, :, :-1] - a[:, :, :-1]).max() < 1e-6

    def test_far_out_of_bounds_clamps_to_corner(self, rng):
        f = rng.random((1, 5, 5)).astype(np.float32)
        flow = np.full((2, 5, 5), -20.0, np.float32)
        out = ops.warp(f, flow)
        assert np.all(out == f[0, 0, 0])

    def test_resolution_mismatch(self, rng):
        with pytest.raises(ShapeError, match="resolution"):
            ops.warp(rng.random((1, 4, 4)), np.zeros((2, 5, 5), np.float32))


class TestResize:
    def test_constant_preserved(self):
        c = np.full((3, 6, 6), 0.37, np.float32)
        for mode in ("half", "double"):
            out = ops.resize(c, mode)
            assert np.all(out == np.float32(0.37))

    def test_flow_value_scaling(self):
        fl = np.empty((2, 4, 4), np.float32)
        fl[0], fl[1] = 4.0, 2.0
        half = ops.resize(fl, "half", kind="flow")
        assert half.shape == (2, 2, 2)
        assert np.all(half[0] == 2.0) and np.all(half[1] == 1.0)

    def test_double_half_uniform_flow_exact(self, rng):
        v = rng.standard_normal(2).astype(np.float32)
        fl = np.empty((2, 8, 8), np.float32)
        fl[0], fl[1] = v[0], v[1]
        back = ops.resize(ops.resize(fl, "half", kind="flow"), "double", kind="flow")
        assert np.array_equal(back, fl)

    def test_double_half_roundtrip_on_smooth_field(self):
        ys, xs = np.mgrid[0:32, 0:32].astype(np.float32)
        smooth = np.sin(xs / 8.0) * np.cos(ys / 9.0)
        smooth = smooth[None]
        back = ops.resize(ops.resize(smooth, "half"), "double")
        dynamic = smooth.max() - smooth.min()
        assert np.abs(back - smooth).max() < 0.05 * dynamic

    def test_odd_sizes_pad_reflect(self, rng):
        x = rng.random((1, 7, 9)).astype(np.float32)
        assert ops.resize(x, "half").shape == (1, 4, 5)


class TestConv2d:
    def test_delta_kernel_identity(self, rng):
        x = rng.random((1, 6, 6)).astype(np.float32)
        w = np.zeros((1, 1, 3, 3), np.float32)
        w[0, 0, 1, 1] = 1.0
        assert np.array_equal(ops.conv2d(x, w), x)

    def test_ones_kernel_on_constant(self):
        x = np.full((1, 6, 6), 2.0, np.float32)
        w = np.ones((1, 1, 3, 3), np.float32)
        out = ops.conv2d(x, w)
        assert np.all(out[0, 1:-1, 1:-1] == 18.0)

    @pytest.mark.parametrize("groups", [1, 2])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_bruteforce(self, groups, seed):
        r = np.random.default_rng(seed)
        cin = 4
        x = r.standard_normal((cin, 6, 6)).astype(np.float32)
        w = r.standard_normal((6, cin // groups, 3, 3)).astype(np.float32)
        b = r.standard_normal(6).astype(np.float32)
        got = ops.conv2d(x, w, b, groups=groups)
        ref = conv2d_oracle(x, w, b, groups=groups)
        assert np.abs(got - ref).max() <= 1e-5

    def test_random_sizes_against_bruteforce(self):
        r = np.random.default_rng(99)
        for _ in range(6):
            h, w_ = int(r.integers(3, 9)), int(r.integers(3, 9))
            x = r.standard_normal((4, h, w_)).astype(np.float32)
            wt = r.standard_normal((2, 2, 3, 3)).astype(np.float32)
            got = ops.conv2d(x, wt, groups=2)
            assert np.abs(got - conv2d_oracle(x, wt, groups=2)).max() <= 1e-5

    def test_1x1_kernel(self, rng):
        x = rng.random((4, 5, 5)).astype(np.float32)
        w = rng.standard_normal((3, 4, 1, 1)).astype(np.float32)
        got = ops.conv2d(x, w)
        ref = np.einsum("oi,ihw->ohw", w[:, :, 0, 0].astype(np.float64), x.astype(np.float64))
        assert np.abs(got - ref).max() < 1e-5

    def test_group_mismatch_raises(self, rng):
        with pytest.raises(ShapeError, match="groups"):
            ops.conv2d(rng.random((5, 4, 4)), rng.random((4, 2, 3, 3)), groups=2)

    def test_channel_mismatch_raises(self, rng):
        with pytest.raises(ShapeError, match="channels/group"):
            ops.conv2d(rng.random((4, 4, 4)), rng.random((4, 3, 3, 3)))


class TestPixelShuffle:
    def test_shape(self, rng):
        x = rng.random((4, 2, 2)).astype(np.float32)
        assert ops.pixel_shuffle(x, 2).shape == (1, 4, 4)

    def test_hand_enumerated_map(self):
        x = np.arange(4, dtype=np.float32).reshape(4, 1, 1)
        out = ops.pixel_shuffle(x, 2)
        # out[c, dy, dx] = in[dy*2 + dx]
        assert out[0, 0, 0] == 0 and out[0, 0, 1] == 1
        assert out[0, 1, 0] == 2 and out[0, 1, 1] == 3

    @given(c=st.integers(1, 3), h=st.integers(1, 5), w=st.integers(1, 5),
           s=st.sampled_from([2, 3]), seed=st.integers(0, 10))
    @settings(max_examples=40, deadline=None)
    def test_bijection(self, c, h, w, s, seed):
        x = np.random.default_rng(seed).random((c * s * s, h, w)).astype(np.float32)
        assert np.array_equal(ops.pixel_unshuffle(ops.pixel_shuffle(x, s), s), x)

    def test_indivisible_channels(self, rng):
        with pytest.raises(ShapeError, match="divisible"):
            ops.pixel_shuffle(rng.random((3, 2, 2)), 2)


class TestFiniteDiff:
    def test_sum_gives_ones(self, rng):
        x = rng.random((2, 3, 3))  # float64: the oracle's intended precision
        g = ops.finite_diff_gradient(lambda t: float(t.sum()), x, 1e-3)
        assert np.abs(g - 1.0).max() < 1e-9

    def test_constant_gives_zeros(self, rng):
        x = rng.random((2, 3, 3)).astype(np.float32)
        g = ops.finite_diff_gradient(lambda t: 42.0, x, 1e-3)
        assert np.all(g == 0.0)

    def test_does_not_mutate_input(self, rng):
        x = rng.random((2, 3, 3)).astype(np.float32)
        before = x.copy()
        ops.finite_diff_gradient(lambda t: float((t ** 2).sum()), x, 1e-3)
        assert np.array_equal(x, before)

    def test_nonfinite_raises(self):
        x = np.ones((1, 2, 2), np.float32)
        with pytest.raises(ValueError, match="non-finite"):
            ops.finite_diff_gradient(lambda t: float("nan"), x, 1e-3)


class TestBoxDownsample:
    def test_constant(self):
        x = np.full((3, 8, 8), 0.3, np.float32)
        assert np.all(ops.box_downsample(x, 4) == np.float32(0.3))

    def test_block_means(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        out = ops.box_downsample(x, 2)
        assert out[0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)

    def test_divisibility_error(self, rng):
        with pytest.raises(ShapeError, match="divisible"):
            ops.box_downsample(rng.random((1, 6, 6)), 4)
