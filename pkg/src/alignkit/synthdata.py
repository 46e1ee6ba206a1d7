"""Synthetic paired-sequence generator emulating a dual-lens capture rig.

Scenes are sampled from a larger moving canvas so every inter-frame flow is
analytically known; degradation (focal crop, box decimation, blur, noise,
color shift, HR-branch misalignment) records all its parameters as ground
truth. Frames are quantized to the 8-bit grid as the final step, emulating
capture and making the PPM dataset round-trip bit-exact.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from . import ops, tensor_io
from .errors import DataFormatError, require

MARGIN = 24  # canvas margin per side, bounds total usable motion


@dataclass
class SceneParams:
    seed: int = 0
    size: Tuple[int, int] = (64, 64)       # (H, W)
    frames: int = 4
    velocity: Tuple[float, float] = (2.0, 0.0)   # px/frame (dx, dy)
    drift: Tuple[float, float] = (0.0, 0.0)      # px/frame^2 acceleration
    jitter: float = 0.0                          # per-frame random offset sigma
    primitives: int = 5

    def __post_init__(self):
        require(self.frames >= 1, f"SceneParams: frames must be >= 1, got {self.frames}")
        total = (abs(self.velocity[0]) + abs(self.drift[0]) * self.frames) * self.frames
        require(total <= 2 * MARGIN * self.frames,
                "SceneParams: velocity too large, content would leave the canvas")


@dataclass
class DegradeParams:
    focal_crop: float = 0.58
    scale: int = 4
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    color_gain: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    color_offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    misalign: Tuple[float, float] = (0.0, 0.0)   # HR-scale (dx, dy)
    seed: int = 0

    def __post_init__(self):
        require(0.0 < self.focal_crop <= 1.0,
                f"DegradeParams: focal_crop must be in (0,1], got {self.focal_crop}")
        require(self.scale in (2, 4), f"DegradeParams: scale must be 2 or 4, got {self.scale}")


@dataclass
class PairedSequence:
    lr: List[np.ndarray]
    hr: List[np.ndarray]
    gt_flows: List[np.ndarray]     # LR-scale backward flows, warp(lr[k+1], flow[k]) ~ lr[k]
    hr_clean: List[np.ndarray]     # aligned, unshifted HR frames (rectification reference)
    scene: SceneParams
    degrade: DegradeParams

    @property
    def frames(self):
        return len(self.lr)


def quantize8(x):
    """Snap to the 8-bit grid exactly as PPM round-trips it."""
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.float32) / np.float32(255.0)


def _texture(H, W, rng, primitives):
    """Multi-scale band-limited noise with soft geometric primitives blended in.

    Primitives are blended (not flat-filled) so local gradients survive
    everywhere and dense flow stays well-posed.
    """
    t = np.zeros((H, W))
    for sigma, amp in ((6.0, 0.45), (2.5, 0.35), (1.0, 0.20)):
        n = gaussian_filter(rng.standard_normal((H, W)), sigma, mode="wrap")
        n /= max(np.abs(n).max(), 1e-9)
        t += amp * n
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    yy, xx = np.mgrid[0:H, 0:W]
    for _ in range(primitives):
        cy, cx = int(rng.integers(0, H)), int(rng.integers(0, W))
        level = float(rng.random())
        if rng.random() < 0.5:
            h = int(rng.integers(6, max(7, H // 4)))
            w = int(rng.integers(6, max(7, W // 4)))
            m = ((np.abs(yy - cy) < h // 2) & (np.abs(xx - cx) < w // 2)).astype(float)
        else:
            rad = int(rng.integers(4, max(5, H // 6)))
            m = ((yy - cy) ** 2 + (xx - cx) ** 2 < rad * rad).astype(float)
        m = gaussian_filter(m, 1.0)
        t = t * (1.0 - 0.5 * m) + 0.5 * m * level
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    return 0.08 + 0.84 * t


def _colorize(base, rng):
    """Three channels: shared structure with decorrelated detail."""
    H, W = base.shape
    chans = []
    for _ in range(3):
        d = gaussian_filter(rng.standard_normal((H, W)), 2.0, mode="wrap")
        d /= max(np.abs(d).max(), 1e-9)
        chans.append(np.clip(base + 0.08 * d, 0.02, 0.98))
    return np.stack(chans).astype(np.float32)


def make_scene(params):
    """Deterministic HR sequence plus exact analytic inter-frame flows.

    Frame t shows the canvas content displaced by +o_t, so the backward
    flow satisfying warp(frame[t+1], flow) = frame[t] is exactly
    o_{t+1} - o_t, uniform over the frame: velocity (v,0) gives flow (v,0).
    """
    H, W = params.size
    rng = np.random.Generator(np.random.Philox(params.seed))
    canvas = _colorize(_texture(H + 2 * MARGIN, W + 2 * MARGIN, rng, params.primitives), rng)

    offsets = []
    for t in range(params.frames):
        jx = jy = 0.0
        if params.jitter > 0:
            jrng = np.random.Generator(np.random.Philox(key=params.seed + 1000 + t))
            jx, jy = (jrng.standard_normal(2) * params.jitter).tolist()
        ox = params.velocity[0] * t + params.drift[0] * t * t + jx
        oy = params.velocity[1] * t + params.drift[1] * t * t + jy
        offsets.append((ox, oy))

    def grab(ox, oy):
        xs = np.full((H, W), np.float32(MARGIN - ox)) + np.arange(W, dtype=np.float32)[None, :]
        ys = np.full((H, W), np.float32(MARGIN - oy)) + np.arange(H, dtype=np.float32)[:, None]
        return ops.bilinear_sample(canvas, np.stack([xs, ys]))

    frames = [quantize8(grab(ox, oy)) for ox, oy in offsets]
    flows = []
    for t in range(params.frames - 1):
        f = np.empty((2, H, W), np.float32)
        f[0] = np.float32(offsets[t + 1][0] - offsets[t][0])
        f[1] = np.float32(offsets[t + 1][1] - offsets[t][1])
        flows.append(f)
    return frames, flows


def _crop_extent(extent, focal_crop, scale):
    c = int(round(focal_crop * extent))
    c -= c % scale
    require(c >= 16, f"degrade: crop extent {c} below the 16 px minimum")
    return c


def degrade(hr_seq, params, hr_flows=None, scene=None):
    """Emulate the capture pipeline on an HR sequence.

    LR branch: center crop to the focal ratio, box-decimate by the scale,
    Gaussian blur, additive noise, per-channel affine color shift, 8-bit
    quantization. HR branch: same crop, recorded subpixel misalignment,
    quantization. All applied parameters travel with the output record;
    HR-scale flows (from make_scene) are rescaled to LR units.
    """
    require(len(hr_seq) >= 1, "degrade: empty sequence")
    C, H, W = hr_seq[0].shape
    ch = _crop_extent(H, params.focal_crop, params.scale)
    cw = _crop_extent(W, params.focal_crop, params.scale)
    y0 = (H - ch) // 2
    x0 = (W - cw) // 2
    r = params.scale

    gain = np.asarray(params.color_gain, np.float32)[:, None, None]
    offset = np.asarray(params.color_offset, np.float32)[:, None, None]
    mis = np.empty((2, ch, cw), np.float32)
    mis[0] = -params.misalign[0]
    mis[1] = -params.misalign[1]

    lr_frames, hr_frames, clean_frames = [], [], []
    for t, hr in enumerate(hr_seq):
        crop = np.ascontiguousarray(hr[:, y0:y0 + ch, x0:x0 + cw])
        lr = ops.box_downsample(crop, r)
        if params.blur_sigma > 0:
            lr = np.stack([gaussian_filter(lr[c], params.blur_sigma, mode="nearest")
                           for c in range(lr.shape[0])]).astype(np.float32)
        if params.noise_sigma > 0:
            nrng = np.random.Generator(np.random.Philox(key=params.seed + 5000 + t))
            lr = lr + (nrng.standard_normal(lr.shape) * params.noise_sigma).astype(np.float32)
        lr = quantize8(np.clip(gain * lr + offset, 0.0, 1.0))
        hr_shift = crop if params.misalign == (0.0, 0.0) else ops.warp(crop, mis)
        hr_frames.append(quantize8(hr_shift))
        clean_frames.append(quantize8(crop))
        lr_frames.append(lr)

    flows = []
    if hr_flows:
        h, w = lr_frames[0].shape[1:]
        for f in hr_flows:
            # global translations survive cropping; rescale displacements to LR
            g = np.empty((2, h, w), np.float32)
            g[0] = f[0, 0, 0] / np.float32(r)
            g[1] = f[1, 0, 0] / np.float32(r)
            flows.append(g)
    return PairedSequence(lr=lr_frames, hr=hr_frames, gt_flows=flows,
                          hr_clean=clean_frames,
                          scene=scene or SceneParams(frames=len(hr_seq), size=(H, W)),
                          degrade=params)


def make_paired_sequence(scene_params, degrade_params):
    """Full generator: scene, degradation, and LR-scale ground-truth flows."""
    hr_seq, hr_flows = make_scene(scene_params)
    return degrade(hr_seq, degrade_params, hr_flows=hr_flows, scene=scene_params)


def write_dataset(seq, directory):
    """Layout: manifest.json, hr/%04d.ppm, lr/%04d.ppm, gt/flow_%04d.vten,
    gt/misalign.json, gt/clean_%04d.ppm."""
    d = Path(directory)
    (d / "hr").mkdir(parents=True, exist_ok=True)
    (d / "lr").mkdir(exist_ok=True)
    (d / "gt").mkdir(exist_ok=True)
    for t in range(seq.frames):
        tensor_io.write_image(d / "hr" / f"{t:04d}.ppm", seq.hr[t])
        tensor_io.write_image(d / "lr" / f"{t:04d}.ppm", seq.lr[t])
        tensor_io.write_image(d / "gt" / f"clean_{t:04d}.ppm", seq.hr_clean[t])
    for t, f in enumerate(seq.gt_flows):
        tensor_io.write_vten(d / "gt" / f"flow_{t:04d}.vten", f)
    (d / "gt" / "misalign.json").write_text(json.dumps({
        "dx": seq.degrade.misalign[0], "dy": seq.degrade.misalign[1]}))
    manifest = {
        "format": "alignkit-dataset",
        "version": 1,
        "frames": seq.frames,
        "scale": seq.degrade.scale,
        "scene": asdict(seq.scene),
        "degrade": asdict(seq.degrade),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def read_dataset(directory):
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise DataFormatError(f"{d}: corrupt dataset, missing manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{mpath}: corrupt manifest ({e})") from e
    if manifest.get("format") != "alignkit-dataset":
        raise DataFormatError(f"{mpath}: not an alignkit dataset manifest")
    T = manifest["frames"]
    scene = SceneParams(**{**manifest["scene"],
                           "size": tuple(manifest["scene"]["size"]),
                           "velocity": tuple(manifest["scene"]["velocity"]),
                           "drift": tuple(manifest["scene"]["drift"])})
    deg = manifest["degrade"]
    degp = DegradeParams(**{**deg,
                            "color_gain": tuple(deg["color_gain"]),
                            "color_offset": tuple(deg["color_offset"]),
                            "misalign": tuple(deg["misalign"])})
    try:
        lr = [tensor_io.read_image(d / "lr" / f"{t:04d}.ppm") for t in range(T)]
        hr = [tensor_io.read_image(d / "hr" / f"{t:04d}.ppm") for t in range(T)]
        clean = [tensor_io.read_image(d / "gt" / f"clean_{t:04d}.ppm") for t in range(T)]
        flows = [tensor_io.read_vten(d / "gt" / f"flow_{t:04d}.vten") for t in range(T - 1)]
    except (OSError, DataFormatError) as e:
        raise DataFormatError(f"{d}: corrupt dataset ({e})") from e
    return PairedSequence(lr=lr, hr=hr, gt_flows=flows, hr_clean=clean,
                          scene=scene, degrade=degp)
