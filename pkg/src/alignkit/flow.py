"""Classical coarse-to-fine optical flow and flow-quality metrics.

Plays the role of the pre-trained flow network in the alignment stack: any
estimator satisfying the backward-warp contract ``warp(b, flow) ~ a`` works,
and pyramidal Lucas-Kanade is deterministic and oracle-checkable. Includes a
brute-force block-matching oracle for integer motion.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter

from . import ops
from .errors import ShapeError, require

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class FlowEstimatorConfig:
    levels: int = 3
    iters_per_level: int = 10
    window: int = 7

    def __post_init__(self):
        require(self.levels >= 1, f"FlowEstimatorConfig: levels must be >= 1, got {self.levels}")
        require(self.window >= 3 and self.window % 2 == 1,
                f"FlowEstimatorConfig: window must be odd >= 3, got {self.window}")

    @classmethod
    def for_size(cls, H, W, levels=3, iters_per_level=10, window=7):
        """Clamp pyramid depth so H,W >= 2^(levels-1) * window holds."""
        lv = levels
        while lv > 1 and min(H, W) < (1 << (lv - 1)) * window:
            lv -= 1
        return cls(levels=lv, iters_per_level=iters_per_level, window=window)


@dataclass
class FlowResult:
    flow: np.ndarray
    low_texture: bool = False


def luma(img):
    """(1..3,H,W) -> (H,W); 3-channel input converted with Rec.601 weights."""
    img = ops.as_tensor(img, "img")
    require(img.ndim == 3, f"luma: expected rank 3, got rank {img.ndim}")
    C = img.shape[0]
    if C == 1:
        return img[0]
    if C == 3:
        r, g, b = LUMA_WEIGHTS
        return img[0] * img.dtype.type(r) + img[1] * img.dtype.type(g) + img[2] * img.dtype.type(b)
    raise ShapeError(f"luma: expected 1 or 3 channels on axis 0, got {C}")


def _box_sum(x, radius):
    """Sum over (2r+1)^2 windows, truncated at the borders. float64-exact."""
    H, W = x.shape
    ii = np.zeros((H + 1, W + 1), dtype=np.float64)
    np.cumsum(np.cumsum(x, axis=0, dtype=np.float64), axis=1, out=ii[1:, 1:])
    ys = np.arange(H)
    xs = np.arange(W)
    y0 = np.clip(ys - radius, 0, H)
    y1 = np.clip(ys + radius + 1, 0, H)
    x0 = np.clip(xs - radius, 0, W)
    x1 = np.clip(xs + radius + 1, 0, W)
    return (ii[np.ix_(y1, x1)] - ii[np.ix_(y0, x1)]
            - ii[np.ix_(y1, x0)] + ii[np.ix_(y0, x0)])


def _gradients(img):
    """Central differences with reflect padding."""
    p = np.pad(img, 1, mode="reflect")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) * 0.5
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) * 0.5
    return gx, gy


def _lk_level(a, b, flow, iters, radius):
    """Iterative LK refinement of `flow` at one pyramid level (float64).

    Forward-additive variant (gradients recomputed from the warped moving
    image each iteration) with three safeguards that the dense coupled
    iteration needs:

    * per-iteration updates clamped to +/-1 px, so ill-conditioned pixels
      cannot run away;
    * the flow is median-filtered 3x3 after every update (checkerboard
      error modes are otherwise neutrally stable and slowly grow); the
      filter is exact on uniform fields;
    * the iterate with the best photometric residual wins: the residual is
      computed anyway, and late iterations can drift after convergence.
    """
    best_flow = flow.copy()
    best_res = np.inf
    for step in range(iters + 1):
        wb = ops.warp(b[None], flow.astype(b.dtype))[0].astype(np.float64)
        it = wb - a
        res = float(np.abs(it).mean())
        if res < best_res:
            best_res = res
            best_flow = flow.copy()
        if step == iters:
            break
        gx, gy = _gradients(wb)
        sxx = _box_sum(gx * gx, radius)
        sxy = _box_sum(gx * gy, radius)
        syy = _box_sum(gy * gy, radius)
        det = sxx * syy - sxy * sxy
        lam_min = 0.5 * ((sxx + syy) - np.sqrt((sxx - syy) ** 2 + 4.0 * sxy * sxy))
        solvable = (lam_min >= 1e-6) & (det != 0)
        safe_det = np.where(solvable, det, 1.0)
        sxt = _box_sum(gx * it, radius)
        syt = _box_sum(gy * it, radius)
        du = np.clip((sxy * syt - syy * sxt) / safe_det, -1.0, 1.0)
        dv = np.clip((sxy * sxt - sxx * syt) / safe_det, -1.0, 1.0)
        du = np.where(solvable, du, 0.0)
        dv = np.where(solvable, dv, 0.0)
        flow[0] += du
        flow[1] += dv
        flow[0] = median_filter(flow[0], size=3, mode="nearest")
        flow[1] = median_filter(flow[1], size=3, mode="nearest")
        if max(np.abs(du).max(), np.abs(dv).max()) < 1e-3:
            break
    return best_flow


def estimate_base_flow(a, b, cfg=None):
    """Pyramidal Lucas-Kanade flow such that warp(b, flow) ~ a.

    Returns a FlowResult; degenerate (textureless) inputs yield zero flow
    with the low_texture flag set instead of failing.
    """
    cfg = cfg or FlowEstimatorConfig()
    ga = luma(a).astype(np.float64)
    gb = luma(b).astype(np.float64)
    require(ga.shape == gb.shape,
            f"estimate_base_flow: frame sizes differ, {ga.shape} vs {gb.shape}")
    H, W = ga.shape
    need = (1 << (cfg.levels - 1)) * cfg.window
    require(min(H, W) >= need,
            f"estimate_base_flow: size {H}x{W} below 2^(levels-1)*window = {need}")

    if ga.std() < 1e-7 and gb.std() < 1e-7:
        return FlowResult(np.zeros((2, H, W), dtype=np.float32), low_texture=True)

    pyr_a, pyr_b = [ga], [gb]
    for _ in range(cfg.levels - 1):
        pyr_a.append(ops._half(pyr_a[-1][None])[0])
        pyr_b.append(ops._half(pyr_b[-1][None])[0])

    radius = cfg.window // 2
    flow = np.zeros((2,) + pyr_a[-1].shape, dtype=np.float64)
    for lvl in range(cfg.levels - 1, -1, -1):
        if lvl < cfg.levels - 1:
            h, w = pyr_a[lvl].shape
            flow = ops.resize(flow, "double", kind="flow")[:, :h, :w]
        flow = _lk_level(pyr_a[lvl], pyr_b[lvl], flow, cfg.iters_per_level, radius)
    return FlowResult(flow.astype(np.float32), low_texture=False)


def block_match_flow(a, b, radius, patch=7):
    """Exhaustive per-pixel integer SAD search, ties toward the smallest
    displacement magnitude then lexicographic (dy, dx).

    Independent oracle: exact on integer translations over the valid interior.
    """
    require(radius >= 1, f"block_match_flow: radius must be >= 1, got {radius}")
    require(patch >= 1 and patch % 2 == 1, f"block_match_flow: patch must be odd >= 1, got {patch}")
    ga = luma(a).astype(np.float64)
    gb = luma(b).astype(np.float64)
    require(ga.shape == gb.shape,
            f"block_match_flow: frame sizes differ, {ga.shape} vs {gb.shape}")
    H, W = ga.shape
    pr = patch // 2
    gbp = np.pad(gb, radius, mode="edge")
    candidates = sorted(
        ((dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
        key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]),
    )
    best = np.full((H, W), np.inf)
    out = np.zeros((2, H, W), dtype=np.float32)
    for dy, dx in candidates:
        shifted = gbp[radius + dy:radius + dy + H, radius + dx:radius + dx + W]
        cost = _box_sum(np.abs(ga - shifted), pr)
        better = cost < best
        best[better] = cost[better]
        out[0][better] = dx
        out[1][better] = dy
    return out


def endpoint_error(est, gt, valid_mask=None):
    """Mean Euclidean distance between flow fields over valid pixels."""
    est = ops.as_tensor(est, "est")
    gt = ops.as_tensor(gt, "gt")
    require(est.shape == gt.shape,
            f"endpoint_error: shapes differ, {est.shape} vs {gt.shape}")
    d = est.astype(np.float64) - gt.astype(np.float64)
    e = np.sqrt(d[0] ** 2 + d[1] ** 2)
    if valid_mask is None:
        return float(e.mean())
    m = np.asarray(valid_mask).reshape(e.shape).astype(bool)
    require(m.any(), "endpoint_error: empty valid mask")
    return float(e[m].mean())


def interior_mask(H, W, margin):
    """Boolean (H,W) mask excluding a border strip of `margin` pixels."""
    m = np.zeros((H, W), dtype=bool)
    if H > 2 * margin and W > 2 * margin:
        m[margin:H - margin, margin:W - margin] = True
    return m
