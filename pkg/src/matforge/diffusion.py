"""Noise schedules, v-prediction algebra, losses and deterministic guided sampling.

The algebra helpers work on numpy arrays and torch tensors alike: ``t`` is
either a Python int or a per-batch index array broadcast along axis 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray
    sqrt_alpha_bar: np.ndarray
    sqrt_one_minus_alpha_bar: np.ndarray
    zero_snr: bool = False

    @property
    def steps(self) -> int:
        return len(self.beta)

    def snr(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return self.alpha_bar / (1.0 - self.alpha_bar)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  zero_snr: bool = True) -> NoiseSchedule:
    """Linear beta schedule; with ``zero_snr`` the sqrt(alpha_bar) curve is shifted and
    rescaled so its last entry is exactly 0 and its first entry is unchanged."""
    if T < 2:
        raise ValueError("schedule needs T >= 2")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("schedule needs 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    sqrt_ab = np.sqrt(alpha_bar)
    if zero_snr:
        first, last = sqrt_ab[0], sqrt_ab[-1]
        sqrt_ab = (sqrt_ab - last) * (first / (first - last))
        sqrt_ab[-1] = 0.0
        alpha_bar = sqrt_ab ** 2
        beta = np.concatenate([[1.0 - alpha_bar[0]], 1.0 - alpha_bar[1:] / alpha_bar[:-1]])
    for arr in (beta, alpha_bar, sqrt_ab):
        arr.setflags(write=False)
    sqrt_1m = np.sqrt(1.0 - alpha_bar)
    sqrt_1m.setflags(write=False)
    return NoiseSchedule(beta, alpha_bar, sqrt_ab, sqrt_1m, zero_snr)


def _coef(table: np.ndarray, t, like):
    if isinstance(t, (int, np.integer)):
        if not 0 <= int(t) < len(table):
            raise IndexError(f"timestep {t} outside [0, {len(table)})")
        return float(table[int(t)])
    idx = np.asarray(t.cpu() if hasattr(t, "cpu") else t, dtype=np.int64)
    vals = table[idx].reshape((-1,) + (1,) * (like.ndim - 1))
    if hasattr(like, "new_tensor"):
        return like.new_tensor(vals)
    return vals


def _same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(schedule: NoiseSchedule, x0, eps, t):
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    _same_shape(x0, eps)
    return _coef(schedule.sqrt_alpha_bar, t, x0) * x0 + _coef(schedule.sqrt_one_minus_alpha_bar, t, x0) * eps


def v_target(schedule: NoiseSchedule, x0, eps, t):
    """v_t = sqrt(ab_t) eps - sqrt(1 - ab_t) x0."""
    _same_shape(x0, eps)
    return _coef(schedule.sqrt_alpha_bar, t, x0) * eps - _coef(schedule.sqrt_one_minus_alpha_bar, t, x0) * x0


def x0_from_v(schedule: NoiseSchedule, x_t, v, t):
    """Predicted clean sample: sqrt(ab_t) x_t - sqrt(1 - ab_t) v."""
    _same_shape(x_t, v)
    return _coef(schedule.sqrt_alpha_bar, t, x_t) * x_t - _coef(schedule.sqrt_one_minus_alpha_bar, t, x_t) * v


def eps_from_v(schedule: NoiseSchedule, x_t, v, t):
    """Predicted noise: sqrt(1 - ab_t) x_t + sqrt(ab_t) v."""
    _same_shape(x_t, v)
    return _coef(schedule.sqrt_one_minus_alpha_bar, t, x_t) * x_t + _coef(schedule.sqrt_alpha_bar, t, x_t) * v


def v_loss(v_pred, v_tgt, norm: str = "l1"):
    _same_shape(v_pred, v_tgt)
    d = v_pred - v_tgt
    if norm == "l1":
        return abs(d).mean()
    if norm == "l2":
        return (d * d).mean()
    raise ValueError(f"unknown loss norm {norm!r}")


def total_loss(v_losses: Sequence, pbr, v_weights: Sequence[float] | None = None, pbr_weight: float = 1.0):
    """Weighted sum of the per-branch v-losses and the rendered-material loss (all weights 1 by default)."""
    if v_weights is None:
        v_weights = [1.0] * len(v_losses)
    if len(v_weights) != len(v_losses):
        raise ValueError("one weight per v-loss required")
    out = pbr_weight * pbr
    for w, lv in zip(v_weights, v_losses):
        out = out + w * lv
    return out


@dataclass(frozen=True)
class GuidanceSchedule:
    """Cosine-shaped guidance ramp from 1 at the first sampler step to ``base_scale`` at the last."""

    base_scale: float = 6.0
    power: float = 5.0
    steps: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("guidance steps must be >= 1")
        if self.base_scale < 1:
            raise ValueError("guidance base_scale must be >= 1")
        if self.power <= 0:
            raise ValueError("guidance power must be positive")

    def scale(self, k: int) -> float:
        return guidance_scale(k, self.steps, self.base_scale, self.power)


def guidance_scale(k: int, steps: int, base_scale: float = 6.0, power: float = 5.0) -> float:
    if not 0 <= k < steps:
        raise IndexError(f"step {k} outside [0, {steps})")
    if steps == 1:
        return float(base_scale)
    ramp = 0.5 * (1.0 - math.cos(math.pi * k / (steps - 1)))
    return 1.0 + (base_scale - 1.0) * ramp ** power


def cfg_combine(v_uncond, v_cond, scale: float):
    _same_shape(v_uncond, v_cond)
    return v_uncond + scale * (v_cond - v_uncond)


def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending, terminal-inclusive uniform sub-grid of [0, T-1]."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        return np.array([T - 1])
    grid = np.round(np.linspace(T - 1, 0, steps)).astype(np.int64)
    if len(np.unique(grid)) != steps:
        raise ValueError(f"cannot place {steps} distinct steps on {T} timesteps")
    return grid


Model = Callable[[np.ndarray, int, bool], np.ndarray]


def sample(model: Model, schedule: NoiseSchedule, shape, steps: int = 50,
           guidance: GuidanceSchedule | None = None, seed: int = 0, solver: str = "ddim",
           noise: np.ndarray | None = None) -> np.ndarray:
    """Deterministic sampling from unit Gaussian noise at the terminal timestep.

    ``model(x_t, t, cond)`` returns a v-prediction. With ``guidance`` set, the
    conditional and unconditional predictions are blended at every step. The
    default ``ddim`` solver re-noises the x0/eps estimates to the next grid
    timestep; ``dpmpp2m`` is the second-order multistep variant in data space.
    """
    if solver not in ("ddim", "dpmpp2m"):
        raise ValueError(f"unknown solver {solver!r}")
    if guidance is not None and guidance.steps != steps:
        guidance = GuidanceSchedule(guidance.base_scale, guidance.power, steps)
    x = np.random.default_rng(seed).standard_normal(shape) if noise is None else np.array(noise, dtype=np.float64)
    if tuple(x.shape) != tuple(shape):
        raise ValueError("noise shape does not match requested shape")
    ts = sampling_timesteps(schedule.steps, steps)
    prev_x0 = None
    prev_h = None
    for i, t in enumerate(ts):
        t = int(t)
        v = np.asarray(model(x, t, True))
        if v.shape != x.shape:
            raise ValueError(f"model output shape {v.shape} does not match sample shape {x.shape}")
        if guidance is not None:
            v_u = np.asarray(model(x, t, False))
            if v_u.shape != x.shape:
                raise ValueError(f"model output shape {v_u.shape} does not match sample shape {x.shape}")
            v = cfg_combine(v_u, v, guidance.scale(i))
        x0 = x0_from_v(schedule, x, v, t)
        if i == len(ts) - 1:
            return x0
        t_next = int(ts[i + 1])
        a_next = schedule.sqrt_alpha_bar[t_next]
        s_next = schedule.sqrt_one_minus_alpha_bar[t_next]
        if solver == "ddim":
            x = a_next * x0 + s_next * eps_from_v(schedule, x, v, t)
            continue
        a_cur = schedule.sqrt_alpha_bar[t]
        s_cur = schedule.sqrt_one_minus_alpha_bar[t]
        lam_cur = math.log(a_cur / s_cur) if a_cur > 0 else -math.inf
        h = math.log(a_next / s_next) - lam_cur
        d = x0
        if prev_x0 is not None and math.isfinite(prev_h) and math.isfinite(h):
            r = prev_h / h
            d = (1.0 + 0.5 / r) * x0 - (0.5 / r) * prev_x0
        decay = 0.0 if math.isinf(h) else math.exp(-h)
        x = (s_next / s_cur) * x - a_next * (decay - 1.0) * d
        prev_x0, prev_h = x0, h
    return x
