"""Image quality metrics on RGB in [0,1]: PSNR (capped) and Gaussian-window SSIM."""

import numpy as np
from scipy.ndimage import correlate1d

from . import ops
from .errors import require

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(a, b):
    """10*log10(1/MSE), float64 accumulation, capped at 99 dB."""
    a = ops.as_tensor(a, "a")
    b = ops.as_tensor(b, "b")
    require(a.shape == b.shape, f"psnr: shapes differ, {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size, sigma):
    half = size // 2
    g = np.exp(-0.5 * (np.arange(size, dtype=np.float64) - half) ** 2 / sigma ** 2)
    return g / g.sum()


def ssim(a, b, window=SSIM_WINDOW, k1=0.01, k2=0.03):
    """Canonical Gaussian-window SSIM, mean over channels and the valid region.

    C1=(k1*L)^2, C2=(k2*L)^2 with L=1; the SSIM map is evaluated where the
    window fits entirely inside the image (no padding) and averaged.
    """
    a = ops.as_tensor(a, "a")
    b = ops.as_tensor(b, "b")
    require(a.shape == b.shape, f"ssim: shapes differ, {a.shape} vs {b.shape}")
    require(min(a.shape[1:]) >= window,
            f"ssim: image {a.shape[1:]} smaller than the {window}-px window")
    g = _gaussian_window(window, SSIM_SIGMA)
    half = window // 2
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2

    def filt(x):
        y = correlate1d(x, g, axis=0, mode="constant")
        y = correlate1d(y, g, axis=1, mode="constant")
        return y[half:x.shape[0] - half, half:x.shape[1] - half]

    vals = []
    for c in range(a.shape[0]):
        x = a[c].astype(np.float64)
        y = b[c].astype(np.float64)
        mx = filt(x)
        my = filt(y)
        mxx = filt(x * x)
        myy = filt(y * y)
        mxy = filt(x * y)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(num / den)
    return float(np.mean(vals))
