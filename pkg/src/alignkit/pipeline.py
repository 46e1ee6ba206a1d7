"""Recurrent VSR forward pass: encoder, bidirectional propagation with
full alignment, RCAB reconstructor, pixel-shuffle upsampler.

Channel widths follow the reference layer tables: encoder
3-64-64-128-128-256 (ReLU), reconstructor fuse 67-64 then 30 RCABs then a
1x1 conv (LeakyReLU 0.1), upsampler 64-256 + pixel shuffle per x2 stage
with a bilinear skip. The 256-channel encoder output is reduced to the
64-channel propagation width by a 1x1 bridge conv.
"""

import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import backend, ops, tensor_io
from .adastn import PredictorWeights, init_predictor_weights
from .align import AlignConfig, AlignWeights, DeformNetWeights, align
from .errors import require
from .flow import FlowEstimatorConfig

ENCODER_CHANNELS = (3, 64, 64, 128, 128, 256)
PROP_CHANNELS = 64
RCAB_COUNT = 30
RCAB_REDUCTION = 16
LEAKY_SLOPE = 0.1


@dataclass
class RCABParams:
    """Residual block: conv-ReLU-conv, channel attention gate, residual add."""
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    att1_w: np.ndarray  # (C/r, C, 1, 1)
    att1_b: np.ndarray
    att2_w: np.ndarray  # (C, C/r, 1, 1)
    att2_b: np.ndarray


@dataclass
class PipelineWeights:
    scale: int
    encoder: List[Tuple[np.ndarray, np.ndarray]]
    bridge_w: np.ndarray
    bridge_b: np.ndarray
    align_backward: AlignWeights
    align_forward: AlignWeights
    prop_backward: Tuple[np.ndarray, np.ndarray]
    prop_forward: Tuple[np.ndarray, np.ndarray]
    fuse_w: np.ndarray
    fuse_b: np.ndarray
    recon_first: Tuple[np.ndarray, np.ndarray]
    rcabs: List[RCABParams]
    recon_last: Tuple[np.ndarray, np.ndarray]
    up_stages: List[Tuple[np.ndarray, np.ndarray]]
    conv_hr: Tuple[np.ndarray, np.ndarray]
    conv_last: Tuple[np.ndarray, np.ndarray]


def _he(rng, cout, cin, k, gain=1.0):
    std = gain * np.sqrt(2.0 / (cin * k * k))
    return (rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32)


def _zeros(c):
    return np.zeros(c, np.float32)


def init_align_weights(rng, levels=3, groups=4, feat=PROP_CHANNELS):
    resflow = [init_predictor_weights(feat, rng) for _ in range(levels)]
    deform = DeformNetWeights(
        head=init_predictor_weights(feat, rng, groups=groups, affine=True),
        conv_w=_he(rng, feat, feat, 3),
        conv_b=_zeros(feat),
    )
    return AlignWeights(resflow=resflow, deform=deform)


def init_pipeline_weights(seed, scale=4, levels=3, groups=4):
    """Deterministic random init; alignment heads at their stable ledger init."""
    require(scale in (2, 4), f"init_pipeline_weights: scale must be 2 or 4, got {scale}")
    rng = np.random.Generator(np.random.Philox(seed))
    enc = []
    for cin, cout in zip(ENCODER_CHANNELS[:-1], ENCODER_CHANNELS[1:]):
        enc.append((_he(rng, cout, cin, 3), _zeros(cout)))
    c = PROP_CHANNELS
    red = c // RCAB_REDUCTION
    rcabs = [
        RCABParams(
            conv1_w=_he(rng, c, c, 3, gain=0.1), conv1_b=_zeros(c),
            conv2_w=_he(rng, c, c, 3, gain=0.1), conv2_b=_zeros(c),
            att1_w=_he(rng, red, c, 1), att1_b=_zeros(red),
            att2_w=_he(rng, c, red, 1), att2_b=_zeros(c),
        )
        for _ in range(RCAB_COUNT)
    ]
    stages = 1 if scale == 2 else 2
    return PipelineWeights(
        scale=scale,
        encoder=enc,
        bridge_w=_he(rng, c, ENCODER_CHANNELS[-1], 1),
        bridge_b=_zeros(c),
        align_backward=init_align_weights(rng, levels, groups, c),
        align_forward=init_align_weights(rng, levels, groups, c),
        prop_backward=(_he(rng, c, 2 * c, 3), _zeros(c)),
        prop_forward=(_he(rng, c, 2 * c, 3), _zeros(c)),
        fuse_w=_he(rng, c, 2 * c, 1),
        fuse_b=_zeros(c),
        recon_first=(_he(rng, c, 3 + c, 3), _zeros(c)),
        rcabs=rcabs,
        recon_last=(_he(rng, c, c, 1), _zeros(c)),
        up_stages=[(_he(rng, 4 * c, c, 3), _zeros(4 * c)) for _ in range(stages)],
        conv_hr=(_he(rng, c, c, 3), _zeros(c)),
        conv_last=(_he(rng, 3, c, 3), _zeros(3)),
    )


def encode(x, weights):
    """Five conv+ReLU layers, spatial size preserved, 3 -> 256 channels."""
    x = ops.as_tensor(x, "x")
    require(x.shape[0] == ENCODER_CHANNELS[0],
            f"encode: expected {ENCODER_CHANNELS[0]} input channels, got {x.shape[0]}")
    h = x
    for w, b in weights:
        h = ops.relu(ops.conv2d(h, w, b))
    return h


def rcab(x, p):
    y = ops.conv2d(x, p.conv1_w, p.conv1_b)
    y = ops.relu(y)
    y = ops.conv2d(y, p.conv2_w, p.conv2_b)
    pooled = y.mean(axis=(1, 2), dtype=y.dtype)[:, None, None]
    s = ops.relu(ops.conv2d(pooled, p.att1_w, p.att1_b))
    s = ops.sigmoid(ops.conv2d(s, p.att2_w, p.att2_b))
    return x + y * s


def reconstruct(x, h_bar, weights):
    """Fuse the LR frame with the propagated feature and run the RCAB trunk."""
    x = ops.as_tensor(x, "x")
    h_bar = ops.as_tensor(h_bar, "h_bar")
    require(h_bar.shape[0] == PROP_CHANNELS,
            f"reconstruct: propagated feature must have {PROP_CHANNELS} channels, "
            f"got {h_bar.shape[0]}")
    require(x.shape[1:] == h_bar.shape[1:],
            f"reconstruct: frame {x.shape[1:]} and feature {h_bar.shape[1:]} disagree")
    h = np.concatenate([x, h_bar], axis=0)
    h = ops.leaky_relu(ops.conv2d(h, *weights.recon_first), LEAKY_SLOPE)
    for p in weights.rcabs:
        h = rcab(h, p)
    return ops.leaky_relu(ops.conv2d(h, *weights.recon_last), LEAKY_SLOPE)


def upsample(h, x, scale, weights):
    """Pixel-shuffle stages + tail convs, plus the bilinear LR skip.

    With all conv weights zero the output equals the bilinear-upsampled LR
    frame exactly.
    """
    require(scale in (2, 4), f"upsample: scale must be 2 or 4, got {scale}")
    require(len(weights.up_stages) == (1 if scale == 2 else 2),
            f"upsample: weights built for {len(weights.up_stages)} stages, "
            f"scale {scale} needs {1 if scale == 2 else 2}")
    for w, b in weights.up_stages:
        h = ops.leaky_relu(ops.pixel_shuffle(ops.conv2d(h, w, b), 2), LEAKY_SLOPE)
    h = ops.leaky_relu(ops.conv2d(h, *weights.conv_hr), LEAKY_SLOPE)
    out = ops.conv2d(h, *weights.conv_last)
    return out + ops.upscale(x, scale)


def _propagate(frames, feats, weights, cfg, backward):
    """One recurrent direction; returns per-frame propagation states."""
    T = len(frames)
    c = PROP_CHANNELS
    order = range(T - 1, -1, -1) if backward else range(T)
    aw = weights.align_backward if backward else weights.align_forward
    pw, pb = weights.prop_backward if backward else weights.prop_forward
    states: List[Optional[np.ndarray]] = [None] * T
    state = None
    for i in order:
        j = i + 1 if backward else i - 1
        if state is None:
            h_bar = np.zeros((c,) + frames[i].shape[1:], np.float32)
        else:
            h_bar = align(frames[j], frames[i], feats[j], feats[i], state, cfg, aw)
        state = ops.leaky_relu(
            ops.conv2d(np.concatenate([feats[i], h_bar], axis=0), pw, pb), LEAKY_SLOPE)
        states[i] = state
    return states


def vsr_forward(seq, scale, weights, cfg=None):
    """Bidirectional recurrent super-resolution of an LR frame sequence.

    Deterministic: no randomness, and the per-frame parallel sections write
    to fixed slots so results do not depend on the worker count.
    """
    require(len(seq) >= 1, "vsr_forward: empty sequence")
    require(scale == weights.scale,
            f"vsr_forward: weights built for x{weights.scale}, asked for x{scale}")
    cfg = cfg or AlignConfig()
    frames = [ops.as_tensor(f, "frame") for f in seq]
    H, W = frames[0].shape[1:]
    for f in frames:
        require(f.shape == frames[0].shape,
                f"vsr_forward: inconsistent frame shapes {f.shape} vs {frames[0].shape}")
    if cfg.flow is None:
        cfg = AlignConfig(levels=cfg.levels, groups=cfg.groups,
                          use_resflownet=cfg.use_resflownet,
                          use_deformnet=cfg.use_deformnet,
                          flow=FlowEstimatorConfig.for_size(H, W))

    def encode_one(x):
        e = encode(x, weights.encoder)
        return ops.leaky_relu(ops.conv2d(e, weights.bridge_w, weights.bridge_b), LEAKY_SLOPE)

    feats = backend.map_ordered(encode_one, frames)
    h_b = _propagate(frames, feats, weights, cfg, backward=True)
    h_f = _propagate(frames, feats, weights, cfg, backward=False)

    def finish(i):
        fused = ops.leaky_relu(
            ops.conv2d(np.concatenate([h_f[i], h_b[i]], axis=0),
                       weights.fuse_w, weights.fuse_b), LEAKY_SLOPE)
        h = reconstruct(frames[i], fused, weights)
        return upsample(h, frames[i], scale, weights)

    return backend.map_ordered(finish, range(len(frames)))


def save_pipeline_weights(path, weights):
    tensors: Dict[str, np.ndarray] = {"meta.scale": np.array([weights.scale], np.float32)}
    for i, (w, b) in enumerate(weights.encoder):
        tensors[f"encoder.{i}.w"] = w
        tensors[f"encoder.{i}.b"] = b
    tensors["bridge.w"] = weights.bridge_w
    tensors["bridge.b"] = weights.bridge_b
    tensors.update(weights.align_backward.named_tensors("align_backward."))
    tensors.update(weights.align_forward.named_tensors("align_forward."))
    tensors["prop_backward.w"], tensors["prop_backward.b"] = weights.prop_backward
    tensors["prop_forward.w"], tensors["prop_forward.b"] = weights.prop_forward
    tensors["fuse.w"] = weights.fuse_w
    tensors["fuse.b"] = weights.fuse_b
    tensors["recon_first.w"], tensors["recon_first.b"] = weights.recon_first
    for i, p in enumerate(weights.rcabs):
        for f in ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
                  "att1_w", "att1_b", "att2_w", "att2_b"):
            tensors[f"rcab.{i}.{f}"] = getattr(p, f)
    tensors["recon_last.w"], tensors["recon_last.b"] = weights.recon_last
    for i, (w, b) in enumerate(weights.up_stages):
        tensors[f"up.{i}.w"] = w
        tensors[f"up.{i}.b"] = b
    tensors["conv_hr.w"], tensors["conv_hr.b"] = weights.conv_hr
    tensors["conv_last.w"], tensors["conv_last.b"] = weights.conv_last
    tensor_io.write_archive(path, tensors)


def _predictor_from(tensors, prefix):
    get = lambda k: tensors.get(prefix + k)
    w = PredictorWeights(
        conv1_w=get("conv1_w"), conv1_b=get("conv1_b"),
        conv2_w=get("conv2_w"), conv2_b=get("conv2_b"),
        b_w=get("b_w"), b_b=get("b_b"),
        a_w=get("a_w"), a_b=get("a_b"),
        mask_w=get("mask_w"), mask_b=get("mask_b"),
    )
    if w.a_w is not None:
        w.groups = w.a_w.shape[0] // 4
    return w


def _align_from(tensors, prefix):
    levels = 0
    while f"{prefix}resflow.{levels}.conv1_w" in tensors:
        levels += 1
    resflow = [_predictor_from(tensors, f"{prefix}resflow.{i}.") for i in range(levels)]
    deform = None
    if f"{prefix}deform.conv_w" in tensors:
        deform = DeformNetWeights(
            head=_predictor_from(tensors, f"{prefix}deform.head."),
            conv_w=tensors[f"{prefix}deform.conv_w"],
            conv_b=tensors.get(f"{prefix}deform.conv_b"),
        )
    return AlignWeights(resflow=resflow, deform=deform)


def load_pipeline_weights(path):
    t = tensor_io.read_archive(path)
    scale = int(t["meta.scale"][0])
    enc_count = len(ENCODER_CHANNELS) - 1
    rcabs = []
    i = 0
    while f"rcab.{i}.conv1_w" in t:
        rcabs.append(RCABParams(*(t[f"rcab.{i}.{f}"] for f in (
            "conv1_w", "conv1_b", "conv2_w", "conv2_b",
            "att1_w", "att1_b", "att2_w", "att2_b"))))
        i += 1
    stages = []
    i = 0
    while f"up.{i}.w" in t:
        stages.append((t[f"up.{i}.w"], t[f"up.{i}.b"]))
        i += 1
    return PipelineWeights(
        scale=scale,
        encoder=[(t[f"encoder.{i}.w"], t[f"encoder.{i}.b"]) for i in range(enc_count)],
        bridge_w=t["bridge.w"], bridge_b=t["bridge.b"],
        align_backward=_align_from(t, "align_backward."),
        align_forward=_align_from(t, "align_forward."),
        prop_backward=(t["prop_backward.w"], t["prop_backward.b"]),
        prop_forward=(t["prop_forward.w"], t["prop_forward.b"]),
        fuse_w=t["fuse.w"], fuse_b=t["fuse.b"],
        recon_first=(t["recon_first.w"], t["recon_first.b"]),
        rcabs=rcabs,
        recon_last=(t["recon_last.w"], t["recon_last.b"]),
        up_stages=stages,
        conv_hr=(t["conv_hr.w"], t["conv_hr.b"]),
        conv_last=(t["conv_last.w"], t["conv_last.b"]),
    )


def zero_pipeline_weights(scale=4, levels=3, groups=4):
    """All-zero network: the forward pass degenerates to the bilinear skip."""
    w = init_pipeline_weights(0, scale=scale, levels=levels, groups=groups)
    for name, t in _all_tensors(w):
        t[...] = 0.0
    return w


def _all_tensors(weights):
    for i, (w, b) in enumerate(weights.encoder):
        yield f"encoder.{i}.w", w
        yield f"encoder.{i}.b", b
    yield "bridge.w", weights.bridge_w
    yield "bridge.b", weights.bridge_b
    for side in ("align_backward", "align_forward"):
        aw = getattr(weights, side)
        for name, t in aw.named_tensors(side + ".").items():
            yield name, t
    yield "prop_backward.w", weights.prop_backward[0]
    yield "prop_backward.b", weights.prop_backward[1]
    yield "prop_forward.w", weights.prop_forward[0]
    yield "prop_forward.b", weights.prop_forward[1]
    yield "fuse.w", weights.fuse_w
    yield "fuse.b", weights.fuse_b
    yield "recon_first.w", weights.recon_first[0]
    yield "recon_first.b", weights.recon_first[1]
    for i, p in enumerate(weights.rcabs):
        for f in ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
                  "att1_w", "att1_b", "att2_w", "att2_b"):
            yield f"rcab.{i}.{f}", getattr(p, f)
    yield "recon_last.w", weights.recon_last[0]
    yield "recon_last.b", weights.recon_last[1]
    for i, (w, b) in enumerate(weights.up_stages):
        yield f"up.{i}.w", w
        yield f"up.{i}.b", b
    yield "conv_hr.w", weights.conv_hr[0]
    yield "conv_hr.b", weights.conv_hr[1]
    yield "conv_last.w", weights.conv_last[0]
    yield "conv_last.b", weights.conv_last[1]
