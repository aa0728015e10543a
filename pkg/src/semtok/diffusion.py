"""DDPM-style noising schedule plus the ancestral sampler.

Steps are 1-indexed: t in [1, T], with alpha_bar(0) = 1 denoting the clean
signal. The sampler walks an increasing sub-sequence of steps ending at T
(all of 1..T by default) using the stochastic ancestral update; on the full
step sequence it coincides with standard DDPM ancestral sampling, and the
final step injects no noise, so the output is the last clean-signal estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .engine import Tensor


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray  # (T,), betas[i] is the step t=i+1 noise rate
    alpha_bars: np.ndarray = field(init=False)  # (T,), cumulative products

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty vector")
        if (betas <= 0).any() or (betas >= 1).any():
            raise ValueError("betas must lie in (0,1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    @property
    def T(self) -> int:
        return self.betas.size

    def alpha_bar(self, t) -> np.ndarray:
        """alpha_bar at step t (scalar or array), with alpha_bar(0) = 1."""
        t = np.asarray(t)
        if (t < 0).any() or (t > self.T).any():
            raise ValueError(f"step out of range [0, {self.T}]")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.2) -> DiffusionSchedule:
    return DiffusionSchedule(betas=np.linspace(beta_start, beta_end, T))


def q_sample(x0, t, eps, sched: DiffusionSchedule):
    """Forward corruption x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps.

    x0/eps: arrays or Tensors of equal shape; t: scalar or (batch,) ints in
    [1, T]. Per-sample t broadcasts over trailing dims.
    """
    t = np.asarray(t)
    if (t < 1).any() or (t > sched.T).any():
        raise ValueError(f"step out of range [1, {sched.T}]")
    ab = sched.alpha_bar(t)
    x0_shape = x0.shape if hasattr(x0, "shape") else np.shape(x0)
    extra = len(x0_shape) - ab.ndim
    ab = ab.reshape(ab.shape + (1,) * extra)
    c0 = np.sqrt(ab)
    c1 = np.sqrt(1.0 - ab)
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
        eps = eps if isinstance(eps, Tensor) else Tensor(eps)
        return x0 * c0 + eps * c1
    return c0 * np.asarray(x0) + c1 * np.asarray(eps)


def predict_x0(x_t, t, eps_hat, sched: DiffusionSchedule):
    """Invert q_sample given a noise estimate: (x_t - sqrt(1-ab) e) / sqrt(ab)."""
    ab = sched.alpha_bar(np.asarray(t))
    x_shape = x_t.shape if hasattr(x_t, "shape") else np.shape(x_t)
    ab = ab.reshape(ab.shape + (1,) * (len(x_shape) - ab.ndim))
    inv = 1.0 / np.sqrt(ab)
    c1 = np.sqrt(1.0 - ab)
    if isinstance(x_t, Tensor) or isinstance(eps_hat, Tensor):
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        eps_hat = eps_hat if isinstance(eps_hat, Tensor) else Tensor(eps_hat)
        return (x_t - eps_hat * c1) * inv
    return (np.asarray(x_t) - c1 * np.asarray(eps_hat)) * inv


def step_sequence(T: int, steps: int) -> np.ndarray:
    """Increasing sub-sequence of [1..T] with `steps` entries, ending at T."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}]")
    if steps == 1:
        # linspace with one point would return the start, stranding the chain
        # at t=1 instead of denoising from T
        return np.array([T], dtype=np.int64)
    return np.unique(np.round(np.linspace(1, T, steps)).astype(np.int64))


def ancestral_sample(predict_fn: Callable[[np.ndarray, int], np.ndarray],
                     shape: tuple, sched: DiffusionSchedule,
                     rng: np.random.Generator, steps: int | None = None) -> np.ndarray:
    """Stochastic ancestral denoising from pure noise.

    predict_fn(x_t, t) -> eps_hat, pure numpy. The per-step posterior noise
    scale follows the schedule; the jump to step 0 is noiseless. Same seed,
    same output, bit for bit.
    """
    seq = step_sequence(sched.T, steps if steps is not None else sched.T)
    x = rng.standard_normal(shape)
    for i in range(len(seq) - 1, -1, -1):
        t = int(seq[i])
        t_prev = int(seq[i - 1]) if i > 0 else 0
        eps_hat = predict_fn(x, t)
        ab_t = float(sched.alpha_bar(t))
        ab_p = float(sched.alpha_bar(t_prev))
        x0_hat = (x - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
        var = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)
        var = max(var, 0.0)
        dir_coeff = np.sqrt(max(1.0 - ab_p - var, 0.0))
        x = np.sqrt(ab_p) * x0_hat + dir_coeff * eps_hat
        if t_prev > 0 and var > 0:
            x = x + np.sqrt(var) * rng.standard_normal(shape)
    return x
