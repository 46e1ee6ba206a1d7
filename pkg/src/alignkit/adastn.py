"""Per-pixel affine offset predictors (v1: residual flow; v2: deformable params).

The predicted sampling pattern is P = A G + b per pixel and group, where G
enumerates the 3x3 neighborhood. Row 0 of G/P is the vertical offset and
row 1 the horizontal one, so the nine columns follow the row-major order of
conv kernel taps; with A = I, b = 0 the pattern degenerates to a plain
convolution.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .errors import require

#: 3x3 neighborhood enumeration, columns in row-major (vertical, horizontal) order.
POSITIONAL_GRID = np.array(
    [[-1, -1, -1, 0, 0, 0, 1, 1, 1],
     [-1, 0, 1, -1, 0, 1, -1, 0, 1]], dtype=np.float32)

HIDDEN_CHANNELS = 64
MASK_INIT_BIAS = 7.0


@dataclass
class AffineField:
    """Per-pixel, per-group affine transform: A (n,2,2,H,W), b (n,2,1,H,W)."""
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        require(self.A.ndim == 5 and self.A.shape[1:3] == (2, 2),
                f"AffineField: A must be (n,2,2,H,W), got {self.A.shape}")
        require(self.b.ndim == 5 and self.b.shape[1:3] == (2, 1),
                f"AffineField: b must be (n,2,1,H,W), got {self.b.shape}")
        require(self.A.shape[0] == self.b.shape[0] and self.A.shape[3:] == self.b.shape[3:],
                f"AffineField: A {self.A.shape} and b {self.b.shape} disagree")


@dataclass
class DeformParams:
    """Absolute sampling pattern (n,2,9,H,W) plus modulation masks (n,9,H,W)."""
    offsets: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        require(self.offsets.ndim == 5 and self.offsets.shape[1:3] == (2, 9),
                f"DeformParams: offsets must be (n,2,9,H,W), got {self.offsets.shape}")
        require(self.masks.ndim == 4 and self.masks.shape[1] == 9,
                f"DeformParams: masks must be (n,9,H,W), got {self.masks.shape}")
        require(self.offsets.shape[0] == self.masks.shape[0],
                f"DeformParams: group counts disagree, {self.offsets.shape[0]} vs {self.masks.shape[0]}")

    @property
    def groups(self):
        return self.offsets.shape[0]


@dataclass
class PredictorWeights:
    """Two shared 3x3 conv layers then per-branch 3x3 conv heads.

    v1 heads carry only the translation branch (groups=1); v2 heads add the
    affine and mask branches.
    """
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    b_w: np.ndarray
    b_b: np.ndarray
    a_w: Optional[np.ndarray] = None
    a_b: Optional[np.ndarray] = None
    mask_w: Optional[np.ndarray] = None
    mask_b: Optional[np.ndarray] = None
    groups: int = 1

    @property
    def in_channels(self):
        return self.conv1_w.shape[1]

    @property
    def has_affine(self):
        return self.a_w is not None and self.mask_w is not None

    def named_tensors(self, prefix=""):
        out = {}
        for f in ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "b_w", "b_b",
                  "a_w", "a_b", "mask_w", "mask_b"):
            v = getattr(self, f)
            if v is not None:
                out[prefix + f] = v
        return out


def init_predictor_weights(feature_channels, rng, groups=1, affine=False,
                           hidden=HIDDEN_CHANNELS):
    """Ledger initialization: random trunk, branch heads forced to identity.

    The translation/affine/mask branches start at zero weights with biases
    (0, vec(I), +MASK_INIT_BIAS), so the whole predictor reduces to a plain
    warped convolution at init and training starts from a stable point.
    """
    c_in = 2 * feature_channels
    n = groups

    def he(cout, cin):
        std = np.sqrt(2.0 / (cin * 9))
        return (rng.standard_normal((cout, cin, 3, 3)) * std).astype(np.float32)

    w = PredictorWeights(
        conv1_w=he(hidden, c_in),
        conv1_b=np.zeros(hidden, np.float32),
        conv2_w=he(hidden, hidden),
        conv2_b=np.zeros(hidden, np.float32),
        b_w=np.zeros((2 * n, hidden, 3, 3), np.float32),
        b_b=np.zeros(2 * n, np.float32),
        groups=n,
    )
    if affine:
        w.a_w = np.zeros((4 * n, hidden, 3, 3), np.float32)
        w.a_b = np.tile(np.array([1, 0, 0, 1], np.float32), n)
        w.mask_w = np.zeros((9 * n, hidden, 3, 3), np.float32)
        w.mask_b = np.full(9 * n, MASK_INIT_BIAS, np.float32)
    return w


def offsets_from_affine(af):
    """P = A G + b: the absolute per-tap sampling pattern (n,2,9,H,W).

    The deformable delta relative to a plain convolution is P - G.
    """
    if not isinstance(af, AffineField):
        raise TypeError("offsets_from_affine: expected an AffineField")
    A, b = af.A, af.b
    G = POSITIONAL_GRID.astype(A.dtype)
    g0 = G[0].reshape(1, 1, 9, 1, 1)
    g1 = G[1].reshape(1, 1, 9, 1, 1)
    return A[:, :, 0:1] * g0 + A[:, :, 1:2] * g1 + b


def _trunk(f_ref, f_warped, w):
    require(f_ref.shape == f_warped.shape,
            f"predictor: feature shapes differ, {f_ref.shape} vs {f_warped.shape}")
    x = np.concatenate([f_ref, f_warped], axis=0)
    require(x.shape[0] == w.in_channels,
            f"predictor: trunk expects {w.in_channels} input channels, got {x.shape[0]}")
    h = ops.relu(ops.conv2d(x, w.conv1_w, w.conv1_b))
    return ops.relu(ops.conv2d(h, w.conv2_w, w.conv2_b))


def flow_from_translation(b):
    """Group-averaged translation (n,2,1,H,W) -> FlowField (dx, dy)."""
    t = b.mean(axis=0, dtype=b.dtype)[:, 0]  # (2,H,W) in (dy,dx) grid-row order
    return np.ascontiguousarray(t[::-1])


def adastn_predict(f_ref, f_warped, w):
    """v1 predictor: per-pixel residual flow from the translation branch."""
    h = _trunk(f_ref, f_warped, w)
    raw = ops.conv2d(h, w.b_w, w.b_b)
    require(raw.shape[0] == 2, f"adastn_predict: v1 head must emit 2 channels, got {raw.shape[0]}")
    return flow_from_translation(raw[None, :, None])


def adastn_v2_predict(f_ref, f_warped, w, groups=None):
    """v2 predictor: affine+translation branches -> offsets, mask branch -> masks."""
    require(w.has_affine, "adastn_v2_predict: weights carry no affine/mask branches")
    n = w.groups if groups is None else groups
    require(n == w.groups, f"adastn_v2_predict: weights built for {w.groups} groups, asked for {n}")
    h = _trunk(f_ref, f_warped, w)
    H, W = h.shape[1:]
    a_raw = ops.conv2d(h, w.a_w, w.a_b).reshape(n, 2, 2, H, W)
    b_raw = ops.conv2d(h, w.b_w, w.b_b).reshape(n, 2, 1, H, W)
    m_raw = ops.conv2d(h, w.mask_w, w.mask_b).reshape(n, 9, H, W)
    offsets = offsets_from_affine(AffineField(a_raw, b_raw))
    return DeformParams(offsets=offsets, masks=ops.sigmoid(m_raw))
