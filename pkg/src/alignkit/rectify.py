"""Training-target rectification: guided-filter color transfer, flow-based
position alignment of the HR target, out-of-bounds masking, masked L1.

The HR target is first color-matched to the (upsampled) LR frame, then
warped by the upsampled LR->target flow; pixels whose flow leaves the frame
are masked out of the loss.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .errors import require
from .flow import FlowEstimatorConfig, estimate_base_flow

GF_RADIUS = 8
GF_EPS = 1e-4


@dataclass
class RectifiedTarget:
    y_w: np.ndarray            # warped, color-corrected HR target (3,rH,rW)
    mask: np.ndarray           # binary out-of-bounds mask (1,rH,rW)
    flow: np.ndarray           # LR-scale alignment flow (2,H,W)
    low_texture: bool = False  # flow estimator warning, not a failure


def _box_mean(x, radius):
    """Window mean with border-truncated counts (exact, float64 internals)."""
    H, W = x.shape
    ii = np.zeros((H + 1, W + 1), dtype=np.float64)
    np.cumsum(np.cumsum(x, axis=0, dtype=np.float64), axis=1, out=ii[1:, 1:])
    ys = np.arange(H)
    xs = np.arange(W)
    y0 = np.clip(ys - radius, 0, H)
    y1 = np.clip(ys + radius + 1, 0, H)
    x0 = np.clip(xs - radius, 0, W)
    x1 = np.clip(xs + radius + 1, 0, W)
    sums = (ii[np.ix_(y1, x1)] - ii[np.ix_(y0, x1)]
            - ii[np.ix_(y1, x0)] + ii[np.ix_(y0, x0)])
    counts = (y1 - y0)[:, None].astype(np.float64) * (x1 - x0)[None, :]
    return sums / counts


def guided_filter(guide, src, radius, eps):
    """Per-channel guided image filter (box statistics, linear model)."""
    guide = ops.as_tensor(guide, "guide")
    src = ops.as_tensor(src, "src")
    require(radius >= 1, f"guided_filter: radius must be >= 1, got {radius}")
    require(eps > 0, f"guided_filter: eps must be > 0, got {eps}")
    require(guide.shape == src.shape,
            f"guided_filter: guide {guide.shape} and src {src.shape} disagree")
    out = np.empty_like(src)
    for c in range(src.shape[0]):
        I = guide[c].astype(np.float64)
        p = src[c].astype(np.float64)
        mean_i = _box_mean(I, radius)
        mean_p = _box_mean(p, radius)
        corr_ip = _box_mean(I * p, radius)
        corr_ii = _box_mean(I * I, radius)
        var_i = corr_ii - mean_i * mean_i
        cov_ip = corr_ip - mean_i * mean_p
        a = cov_ip / (var_i + eps)
        b = mean_p - a * mean_i
        out[c] = (_box_mean(a, radius) * I + _box_mean(b, radius)).astype(src.dtype)
    return out


def color_correct(x, y, scale, radius=GF_RADIUS, eps=GF_EPS):
    """Recolor the HR target toward the LR frame's palette.

    The HR target guides the filter and the upsampled LR frame is the
    filtering input: the output then carries the target's structure (the
    guide term) with the LR frame's local color (the filter always
    reproduces the input's window means). Guiding with the upsampled LR
    instead would hand its blurry structure to the target and keep the
    wrong color.
    """
    x = ops.as_tensor(x, "x")
    y = ops.as_tensor(y, "y")
    require(y.shape[1] == scale * x.shape[1] and y.shape[2] == scale * x.shape[2],
            f"color_correct: HR {y.shape[1:]} is not {scale}x LR {x.shape[1:]}")
    return guided_filter(y, ops.upscale(x, scale), radius, eps)


def _oob_mask(flow_hr, H, W):
    """1 where the flow keeps the sample inside the frame, else 0.

    Pixel-edge convention: a sample within half a pixel of the border pixel
    center still reads (approximately) that pixel under clamping, so the
    frame extends to +/-0.5 beyond the centers. Keeps the mask all-ones for
    aligned pairs despite estimator noise at the borders.
    """
    xs = np.arange(W, dtype=np.float64)[None, :] + flow_hr[0]
    ys = np.arange(H, dtype=np.float64)[:, None] + flow_hr[1]
    inside = (xs >= -0.5) & (xs <= W - 0.5) & (ys >= -0.5) & (ys <= H - 0.5)
    return inside.astype(np.float32)[None]


def _match_channel_stats(b, a):
    """Global per-channel affine match of b onto a's statistics."""
    out = np.empty_like(b)
    for c in range(b.shape[0]):
        sb = float(b[c].std())
        scale = float(a[c].std()) / sb if sb > 0 else 1.0
        out[c] = (b[c] - b[c].mean()) * b.dtype.type(scale) + a[c].mean(dtype=np.float64).astype(a.dtype)
    return out


def rectify_target(x, y, scale, flow_cfg=None, color=True, position=True,
                   gf_radius=GF_RADIUS, gf_eps=GF_EPS):
    """Re-align and color-correct an HR target so it can supervise the LR frame.

    The alignment flow is estimated between the LR frame and the
    box-decimated target with its global channel statistics matched to the
    LR frame (a color-consistent flow input, standing in for feeding the
    flow network the filtered target). The guided-filter color transfer
    then runs on the aligned pair, where its window statistics are valid;
    on a misaligned pair the filter attenuates target detail and borrows
    displaced color, which no later warp can undo.

    The color and position steps can be disabled independently (ablation
    switches). Degenerate flow sets the low_texture flag, not a failure.
    """
    x = ops.as_tensor(x, "x")
    y = ops.as_tensor(y, "y")
    require(scale in (2, 4), f"rectify_target: scale must be 2 or 4, got {scale}")
    require(y.shape[1] == scale * x.shape[1] and y.shape[2] == scale * x.shape[2],
            f"rectify_target: HR {y.shape[1:]} is not {scale}x LR {x.shape[1:]}")
    Hh, Wh = y.shape[1:]
    if not position:
        y_w = color_correct(x, y, scale, gf_radius, gf_eps) if color else y
        return RectifiedTarget(
            y_w=y_w,
            mask=np.ones((1, Hh, Wh), np.float32),
            flow=np.zeros((2,) + x.shape[1:], np.float32),
        )
    cfg = flow_cfg or FlowEstimatorConfig.for_size(*x.shape[1:])
    flow_input = _match_channel_stats(ops.box_downsample(y, scale), x)
    res = estimate_base_flow(x, flow_input, cfg)
    flow_hr = ops.upscale_flow(res.flow, scale)
    y_a = ops.warp(y, flow_hr)
    y_w = color_correct(x, y_a, scale, gf_radius, gf_eps) if color else y_a
    mask = _oob_mask(flow_hr.astype(np.float64), Hh, Wh)
    return RectifiedTarget(y_w=y_w, mask=mask, flow=res.flow, low_texture=res.low_texture)


def masked_l1(pred, target, mask):
    """Mean over all elements of |mask * (pred - target)|.

    The mask multiplies inside the norm; the normalizer is the full element
    count, so growing the zero-set never increases the loss.
    """
    pred = ops.as_tensor(pred, "pred")
    target = ops.as_tensor(target, "target")
    mask = ops.as_tensor(mask, "mask")
    require(pred.shape == target.shape,
            f"masked_l1: pred {pred.shape} and target {target.shape} disagree")
    require(mask.shape[1:] == pred.shape[1:] and mask.shape[0] in (1, pred.shape[0]),
            f"masked_l1: mask {mask.shape} not broadcastable over {pred.shape}")
    diff = np.abs(mask * (pred - target))  # broadcasts the mask over channels
    return float(diff.mean(dtype=np.float64))
