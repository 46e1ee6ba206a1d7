"""Alignment stack: coarse-to-fine residual flow refinement over a feature
pyramid, modulated deformable sampling, and the combined align step feeding
recurrent propagation.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import ops
from .adastn import DeformParams, PredictorWeights, adastn_predict, adastn_v2_predict
from .errors import require
from .flow import FlowEstimatorConfig, estimate_base_flow
from . import backend


@dataclass
class AlignConfig:
    levels: int = 3
    groups: int = 4
    use_resflownet: bool = True
    use_deformnet: bool = True
    flow: Optional[FlowEstimatorConfig] = None

    def __post_init__(self):
        require(self.levels >= 1, f"AlignConfig: levels must be >= 1, got {self.levels}")


@dataclass
class DeformNetWeights:
    head: PredictorWeights          # v2 predictor (affine + mask branches)
    conv_w: np.ndarray              # (Cout, Cin, 3, 3) deformable conv weights
    conv_b: Optional[np.ndarray] = None

    def named_tensors(self, prefix=""):
        out = self.head.named_tensors(prefix + "head.")
        out[prefix + "conv_w"] = self.conv_w
        if self.conv_b is not None:
            out[prefix + "conv_b"] = self.conv_b
        return out


@dataclass
class AlignWeights:
    resflow: List[PredictorWeights] = field(default_factory=list)  # one per level
    deform: Optional[DeformNetWeights] = None

    def named_tensors(self, prefix=""):
        out = {}
        for i, w in enumerate(self.resflow):
            out.update(w.named_tensors(f"{prefix}resflow.{i}."))
        if self.deform is not None:
            out.update(self.deform.named_tensors(prefix + "deform."))
        return out


def build_pyramid(f, levels):
    """Level 0 is f itself, each next level x2 coarser."""
    f = ops.as_tensor(f, "f")
    require(f.ndim == 3, f"build_pyramid: expected (C,H,W), got rank {f.ndim}")
    require(min(f.shape[1:]) >= 1 << (levels - 1),
            f"build_pyramid: size {f.shape[1:]} too small for {levels} levels")
    pyr = [f]
    for _ in range(levels - 1):
        pyr.append(ops.resize(pyr[-1], "half"))
    return pyr


def _crop_to(t, hw):
    return np.ascontiguousarray(t[:, :hw[0], :hw[1]])


def resflownet(pyr_prev, pyr_cur, base_flow, level_weights):
    """Coarse-to-fine residual flow on top of an imperfect base flow.

    Per level (coarsest first): warp the previous features with
    base + upsampled residual, predict a fine residual between the warped
    and current features, and accumulate. Returns the full-resolution
    residual; zero-initialized heads leave the base flow unchanged exactly.
    """
    L = len(level_weights)
    require(len(pyr_prev) == L and len(pyr_cur) == L,
            f"resflownet: {L} weight levels but pyramids have "
            f"{len(pyr_prev)}/{len(pyr_cur)} levels")
    base_flow = ops.as_tensor(base_flow, "base_flow")
    require(base_flow.shape[1:] == pyr_prev[0].shape[1:],
            f"resflownet: base flow {base_flow.shape[1:]} does not match "
            f"finest level {pyr_prev[0].shape[1:]}")
    bases = [base_flow]
    for _ in range(L - 1):
        bases.append(ops.resize(bases[-1], "half", kind="flow"))

    delta = None
    for lvl in range(L - 1, -1, -1):
        hw = pyr_prev[lvl].shape[1:]
        up = (np.zeros((2,) + hw, dtype=base_flow.dtype) if delta is None
              else _crop_to(ops.resize(delta, "double", kind="flow"), hw))
        coarse = bases[lvl] + up
        warped = ops.warp(pyr_prev[lvl], coarse)
        fine = adastn_predict(pyr_cur[lvl], warped, level_weights[lvl])
        delta = up + fine
    return delta


def deform_sample(feature, params, weight, bias=None):
    """Modulated deformable convolution forward (DCNv2 semantics).

    Taps follow the positional-grid column order; sampling out of bounds
    contributes zero, so a grid pattern with unit masks reproduces conv2d
    exactly, zero padding included.
    """
    feature = ops.as_tensor(feature, "feature")
    weight = ops.as_tensor(weight, "weight")
    require(isinstance(params, DeformParams), "deform_sample: params must be DeformParams")
    C, H, W = feature.shape
    n = params.groups
    require(C % n == 0, f"deform_sample: {C} channels not divisible by {n} offset groups")
    require(params.offsets.shape[3:] == (H, W),
            f"deform_sample: offsets at {params.offsets.shape[3:]}, feature at {(H, W)}")
    require(weight.ndim == 4 and weight.shape[1] == C and weight.shape[2:] == (3, 3),
            f"deform_sample: weight must be (Cout,{C},3,3), got {weight.shape}")
    dt = feature.dtype
    offsets = np.ascontiguousarray(params.offsets, dtype=dt)
    masks = np.ascontiguousarray(params.masks, dtype=dt)
    cols = np.empty((C * 9, H * W), dtype=dt)
    backend.deform_im2col(feature, offsets, masks, cols)
    out = (weight.astype(dt).reshape(weight.shape[0], C * 9) @ cols).reshape(-1, H, W)
    if bias is not None:
        out += ops.as_tensor(bias, "bias").astype(dt)[:, None, None]
    return out


def deformnet(f_cur, f_prev, h_prev, flow, weights):
    """Flow-warp both feature streams, predict deformable params from the
    feature pair, and deformable-sample the warped hidden state."""
    warped_f = ops.warp(f_prev, flow)
    warped_h = ops.warp(h_prev, flow)
    params = adastn_v2_predict(f_cur, warped_f, weights.head)
    return deform_sample(warped_h, params, weights.conv_w, weights.conv_b)


def align(x_prev, x_cur, f_prev, f_cur, h_prev, cfg, weights):
    """Full alignment of the propagated hidden state onto the current frame.

    Base flow from the classical estimator, residual refinement when
    enabled, then deformable sampling (or a plain flow warp when disabled).
    """
    flow_cfg = cfg.flow or FlowEstimatorConfig.for_size(*x_cur.shape[1:])
    base = estimate_base_flow(x_cur, x_prev, flow_cfg).flow
    psi = base
    if cfg.use_resflownet:
        require(len(weights.resflow) == cfg.levels,
                f"align: {cfg.levels} levels configured, "
                f"{len(weights.resflow)} resflow heads supplied")
        delta = resflownet(build_pyramid(f_prev, cfg.levels),
                           build_pyramid(f_cur, cfg.levels), base, weights.resflow)
        psi = base + delta
    if cfg.use_deformnet:
        require(weights.deform is not None, "align: deformnet enabled but no weights")
        return deformnet(f_cur, f_prev, h_prev, psi, weights.deform)
    return ops.warp(h_prev, psi)
