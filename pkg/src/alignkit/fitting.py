"""Derivative-free fitting of the alignment predictor heads.

Simultaneous-perturbation stochastic approximation: each step evaluates the
objective at an antithetic pair of Bernoulli perturbations and moves along
the implied gradient estimate. Two step schedules are available: classic
Spall gain sequences ("spall") and a per-coordinate adaptive accumulator
("adam", default) that copes with the very different sensitivities of bias
and weight coordinates in the conv heads. Every evaluated perturbation is a
real weight vector, so best-seen tracking costs no extra evaluations.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import numpy as np

from .errors import require


@dataclass
class FitConfig:
    budget: int = 2000
    perturbation: float = 0.02      # c0, perturbation scale
    step: float = 0.01              # a0 (spall) or learning rate (adam)
    schedule: str = "adam"          # {"adam", "spall"}
    alpha: float = 0.602            # spall step decay exponent
    gamma: float = 0.101            # perturbation decay exponent
    objective: str = "epe"          # {"epe", "masked_l1"}, report tag only
    seed: int = 0

    def __post_init__(self):
        require(self.budget >= 1, f"FitConfig: budget must be >= 1, got {self.budget}")
        require(self.schedule in ("adam", "spall"),
                f"FitConfig: unknown schedule {self.schedule!r}")


@dataclass
class FitResult:
    params: List[np.ndarray]    # best-seen tensors, same structure as the input
    trace: np.ndarray           # best-so-far objective after every evaluation
    evaluations: int

    @property
    def initial_loss(self):
        return float(self.trace[0])

    @property
    def final_loss(self):
        return float(self.trace[-1])


def pack_params(tensors):
    flat = np.concatenate([np.asarray(t, np.float64).ravel() for t in tensors])
    shapes = [np.asarray(t).shape for t in tensors]
    return flat, shapes


def unpack_params(flat, shapes, dtype=np.float32):
    out = []
    pos = 0
    for s in shapes:
        n = int(np.prod(s)) if s else 1
        out.append(flat[pos:pos + n].reshape(s).astype(dtype))
        pos += n
    return out


def spsa_minimize(objective: Callable[[np.ndarray], float], x0, cfg: FitConfig):
    """Minimize objective(x) over a flat float64 vector. Returns (x_best, trace)."""
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    x = np.asarray(x0, np.float64).copy()
    trace = []
    best = float(objective(x))
    require(np.isfinite(best), "fit: objective is not finite at the initial point")
    x_best = x.copy()
    trace.append(best)

    steps = (cfg.budget - 1) // 2
    A = max(1.0, 0.1 * steps)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8

    for k in range(steps):
        ck = cfg.perturbation / (k + 1.0) ** cfg.gamma
        delta = rng.integers(0, 2, size=x.size).astype(np.float64) * 2.0 - 1.0
        f_plus = float(objective(x + ck * delta))
        if f_plus < best:
            best, x_best = f_plus, x + ck * delta
        trace.append(best)
        f_minus = float(objective(x - ck * delta))
        if f_minus < best:
            best, x_best = f_minus, x - ck * delta
        trace.append(best)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ArithmeticError(
                f"fit: objective became non-finite at step {k} "
                f"(f+={f_plus}, f-={f_minus}); aborting with trace")
        ghat = (f_plus - f_minus) / (2.0 * ck) * delta  # 1/delta_i == delta_i for +-1
        if cfg.schedule == "spall":
            ak = cfg.step / (k + 1.0 + A) ** cfg.alpha
            x = x - ak * ghat
        else:
            m = beta1 * m + (1.0 - beta1) * ghat
            v = beta2 * v + (1.0 - beta2) * ghat * ghat
            mhat = m / (1.0 - beta1 ** (k + 1))
            vhat = v / (1.0 - beta2 ** (k + 1))
            x = x - cfg.step * mhat / (np.sqrt(vhat) + adam_eps)
    return x_best, np.asarray(trace)


def default_scales(params):
    """Per-tensor perturbation scales, He-style: conv weights move in units
    of 1/sqrt(fan_in), biases in units of 1. Without this, one shared
    perturbation magnitude is either noise-dominated for the weights or
    uselessly small for the biases."""
    scales = []
    for t in params:
        t = np.asarray(t)
        if t.ndim >= 2:
            fan_in = int(np.prod(t.shape[1:]))
            scales.append(np.full(t.size, 1.0 / np.sqrt(fan_in)))
        else:
            scales.append(np.ones(t.size))
    return np.concatenate(scales)


def fit_predictors(objective, params: Sequence[np.ndarray], cfg: FitConfig,
                   scales=None):
    """Fit a collection of head tensors against a scalar objective.

    ``objective`` receives the tensor list (same structure as ``params``)
    and returns the loss. The search runs in scale-normalized coordinates
    (see default_scales). Returns best-seen tensors and the monotone
    best-so-far trace (one entry per objective evaluation).
    """
    flat0, shapes = pack_params(params)
    dtype = np.asarray(params[0]).dtype
    s = default_scales(params) if scales is None else np.asarray(scales, np.float64)

    def flat_objective(z):
        return objective(unpack_params(s * z, shapes, dtype))

    z_best, trace = spsa_minimize(flat_objective, flat0 / s, cfg)
    return FitResult(params=unpack_params(s * z_best, shapes, dtype),
                     trace=trace, evaluations=len(trace))
