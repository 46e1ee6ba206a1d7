"""Dense-array substrate: sampling, resampling, convolution, shuffle kernels.

Conventions used throughout the toolkit:

* images/features are float32 ndarrays shaped (C, H, W), row-major;
* flow fields are (2, H, W): channel 0 = horizontal displacement dx,
  channel 1 = vertical displacement dy, in pixels at the field's resolution;
* sampling outside the image clamps to the edge (out-of-bounds content is
  masked downstream instead of injecting zeros);
* float64 inputs are accepted and processed at double precision so the
  finite-difference oracle can run without float32 cancellation noise.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import backend
from .errors import ShapeError, require

_REAL = (np.float32, np.float64)


def as_tensor(x, name="tensor"):
    """Coerce to a C-contiguous float32/float64 ndarray."""
    a = np.asarray(x)
    if a.dtype not in _REAL:
        a = a.astype(np.float32)
    return np.ascontiguousarray(a)


def _require_chw(t, name):
    require(t.ndim == 3, f"{name}: expected rank 3 (C,H,W), got rank {t.ndim}")
    require(min(t.shape) >= 1, f"{name}: all extents must be >= 1, got {t.shape}")


def _require_flow(f, name="flow"):
    _require_chw(f, name)
    require(f.shape[0] == 2, f"{name}: axis 0 must have 2 channels (dx,dy), got {f.shape[0]}")


def bilinear_sample(img, coords):
    """Sample img (C,H,W) at absolute (x,y) coords (2,H',W'), clamped.

    Integer coordinates reproduce the underlying pixels exactly.
    """
    img = as_tensor(img, "img")
    coords = as_tensor(coords, "coords")
    _require_chw(img, "bilinear_sample: img")
    _require_flow(coords, "bilinear_sample: coords")
    if coords.dtype != img.dtype:
        coords = coords.astype(img.dtype)
    C, H, W = img.shape
    Ho, Wo = coords.shape[1:]
    out = np.empty((C, Ho * Wo), dtype=img.dtype)
    backend.gather_bilinear_clamp(img.reshape(C, -1), H, W,
                                  coords[0].ravel(), coords[1].ravel(), out)
    return out.reshape(C, Ho, Wo)


def warp(feature, flow):
    """Backward-warp: out(x,y) = feature sampled at (x+dx, y+dy).

    Zero flow is the identity map.
    """
    feature = as_tensor(feature, "feature")
    flow = as_tensor(flow, "flow")
    _require_chw(feature, "warp: feature")
    _require_flow(flow, "warp: flow")
    require(flow.shape[1:] == feature.shape[1:],
            f"warp: flow resolution {flow.shape[1:]} != feature resolution {feature.shape[1:]}")
    if flow.dtype != feature.dtype:
        flow = flow.astype(feature.dtype)
    out = np.empty_like(feature)
    backend.warp_gather(feature, flow, out)
    return out


def _half(t):
    C, H, W = t.shape
    if H % 2 or W % 2:
        t = np.pad(t, ((0, 0), (0, H % 2), (0, W % 2)), mode="reflect")
    q = t.dtype.type(0.25)
    a = t[:, 0::2, 0::2]
    b = t[:, 0::2, 1::2]
    c = t[:, 1::2, 0::2]
    d = t[:, 1::2, 1::2]
    return ((a + b) + (c + d)) * q


def _lerp_double_axis(t, axis):
    L = t.shape[axis]
    dt = t.dtype
    pos = (np.arange(2 * L, dtype=dt) + dt.type(0.5)) / dt.type(2) - dt.type(0.5)
    pos = np.clip(pos, 0, L - 1)
    i0f = np.floor(pos)
    i0 = i0f.astype(np.intp)
    i1 = np.minimum(i0 + 1, L - 1)
    f = pos - i0f
    shape = [1] * t.ndim
    shape[axis] = 2 * L
    f = f.reshape(shape)
    v0 = np.take(t, i0, axis=axis)
    v1 = np.take(t, i1, axis=axis)
    # lerp form keeps constant fields exactly constant
    return v0 + f * (v1 - v0)


def _double(t):
    return _lerp_double_axis(_lerp_double_axis(t, 1), 2)


def resize(t, mode, kind="feature"):
    """Bilinear half/double resampling.

    kind="flow" additionally rescales displacement values (x0.5 / x2.0) so
    they stay in pixel units at the new resolution.
    """
    t = as_tensor(t, "t")
    _require_chw(t, "resize: t")
    if kind == "flow":
        _require_flow(t, "resize: t")
    elif kind != "feature":
        raise ValueError(f"resize: kind must be 'feature' or 'flow', got {kind!r}")
    if mode == "half":
        out = _half(t)
        return out * t.dtype.type(0.5) if kind == "flow" else out
    if mode == "double":
        out = _double(t)
        return out * t.dtype.type(2) if kind == "flow" else out
    raise ValueError(f"resize: mode must be 'half' or 'double', got {mode!r}")


def upscale(t, r):
    """Repeated x2 bilinear upsampling; r in {2, 4}."""
    require(r in (2, 4), f"upscale: scale must be 2 or 4, got {r}")
    out = resize(t, "double")
    if r == 4:
        out = resize(out, "double")
    return out


def upscale_flow(flow, r):
    require(r in (2, 4), f"upscale_flow: scale must be 2 or 4, got {r}")
    out = resize(flow, "double", kind="flow")
    if r == 4:
        out = resize(out, "double", kind="flow")
    return out


def box_downsample(t, r):
    """Anti-aliased decimation: mean over r x r blocks."""
    t = as_tensor(t, "t")
    _require_chw(t, "box_downsample: t")
    C, H, W = t.shape
    require(H % r == 0, f"box_downsample: height {H} not divisible by {r}")
    require(W % r == 0, f"box_downsample: width {W} not divisible by {r}")
    return t.reshape(C, H // r, r, W // r, r).mean(axis=(2, 4), dtype=t.dtype)


def _im2col(padded, k):
    win = sliding_window_view(padded, (k, k), axis=(1, 2))  # (C, H, W, k, k)
    C, H, W = win.shape[:3]
    return win.transpose(0, 3, 4, 1, 2).reshape(C * k * k, H * W)


def conv2d(x, weight, bias=None, groups=1):
    """Grouped cross-correlation, stride 1, zero padding k//2 (same size).

    x (Cin,H,W); weight (Cout, Cin/groups, k, k) with k odd (1 or 3 in this
    toolkit); bias (Cout,) optional.
    """
    x = as_tensor(x, "x")
    weight = as_tensor(weight, "weight")
    _require_chw(x, "conv2d: x")
    require(weight.ndim == 4, f"conv2d: weight must be rank 4, got rank {weight.ndim}")
    Cin, H, W = x.shape
    Cout, cpg, kh, kw = weight.shape
    require(kh == kw and kh % 2 == 1, f"conv2d: kernel must be square odd, got {kh}x{kw}")
    require(Cin % groups == 0, f"conv2d: Cin={Cin} not divisible by groups={groups}")
    require(Cout % groups == 0, f"conv2d: Cout={Cout} not divisible by groups={groups}")
    require(cpg == Cin // groups,
            f"conv2d: weight expects {cpg} channels/group, input supplies {Cin // groups}")
    dt = np.result_type(x.dtype, weight.dtype)
    if x.dtype != dt:
        x = x.astype(dt)
    if weight.dtype != dt:
        weight = weight.astype(dt)
    pad = kh // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.empty((Cout, H, W), dtype=dt)
    cig = Cin // groups
    cog = Cout // groups
    for g in range(groups):
        cols = _im2col(xp[g * cig:(g + 1) * cig], kh)
        wg = weight[g * cog:(g + 1) * cog].reshape(cog, cig * kh * kw)
        out[g * cog:(g + 1) * cog] = (wg @ cols).reshape(cog, H, W)
    if bias is not None:
        bias = as_tensor(bias, "bias")
        require(bias.shape == (Cout,), f"conv2d: bias shape {bias.shape} != ({Cout},)")
        out += bias.astype(dt)[:, None, None]
    return out


def pixel_shuffle(x, s):
    """Depth-to-space: out[c, s*y+dy, s*x+dx] = in[c*s^2 + dy*s + dx, y, x]."""
    x = as_tensor(x, "x")
    _require_chw(x, "pixel_shuffle: x")
    C, H, W = x.shape
    require(C % (s * s) == 0, f"pixel_shuffle: {C} channels not divisible by s^2={s * s}")
    c = C // (s * s)
    return x.reshape(c, s, s, H, W).transpose(0, 3, 1, 4, 2).reshape(c, s * H, s * W)


def pixel_unshuffle(x, s):
    """Space-to-depth, exact inverse of pixel_shuffle."""
    x = as_tensor(x, "x")
    _require_chw(x, "pixel_unshuffle: x")
    C, H, W = x.shape
    require(H % s == 0, f"pixel_unshuffle: height {H} not divisible by {s}")
    require(W % s == 0, f"pixel_unshuffle: width {W} not divisible by {s}")
    h, w = H // s, W // s
    return x.reshape(C, h, s, w, s).transpose(0, 2, 4, 1, 3).reshape(C * s * s, h, w)


def finite_diff_gradient(op, x, eps):
    """Central-difference gradient of a scalar-valued op, element by element.

    Oracle utility: O(x.size) evaluations of op, intended for small tensors.
    """
    require(eps > 0, f"finite_diff_gradient: eps must be > 0, got {eps}")
    x = as_tensor(x, "x").copy()  # perturbed in place, so never alias the input
    grad = np.empty(x.size, dtype=np.float64)
    flat = x.ravel()
    for i in range(x.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(op(x))
        flat[i] = orig - eps
        lo = float(op(x))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"finite_diff_gradient: op returned non-finite value at element {i}")
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(x.shape)


def relu(x):
    return np.maximum(x, 0)


def leaky_relu(x, slope=0.1):
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
