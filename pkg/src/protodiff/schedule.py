"""Noise schedule and the closed-form forward (noising) process.

Timesteps are 1-indexed: t in {1..T} are diffusion steps, t = 0 denotes
clean data (alpha_bar(0) == 1). Schedule arrays are float64 regardless of
model tensor precision, so running products stay tight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed variance schedule: betas, alphas = 1 - betas, and their
    running product alpha_bars. Immutable; safe to share across threads."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t) -> float | np.ndarray:
        """alpha_bar at timestep t (scalar or array); alpha_bar(0) == 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]: {t}")
        out = np.where(t == 0, 1.0, self.alpha_bars[np.maximum(t, 1) - 1])
        return float(out) if out.ndim == 0 else out

    def beta(self, t) -> float | np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")
        out = self.betas[t - 1]
        return float(out) if out.ndim == 0 else out

    def posterior_variance(self, t) -> float | np.ndarray:
        """Variance of q(x_{t-1} | x_t, x_0): beta_t (1 - abar_{t-1}) / (1 - abar_t).

        Degenerates to 0 at t = 1 (abar_0 == 1), so the final reverse step
        is deterministic.
        """
        t = np.asarray(t)
        return self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))


def build_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly spaced betas from beta_start to beta_end inclusive."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (np.isfinite(beta_start) and np.isfinite(beta_end)):
        raise ValueError("beta bounds must be finite")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=int(T), betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _coeff(values, t, like):
    """Broadcastable coefficient for timestep(s) t against a tensor/array."""
    arr = np.asarray(values, dtype=np.float64)
    if np.ndim(t) == 0:
        return float(arr)
    shape = (len(t),) + (1,) * (like.ndim - 1)
    arr = arr.reshape(shape)
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(arr, dtype=like.dtype)
    return arr.astype(like.dtype)


def q_sample(x0, t, noise, sched: NoiseSchedule):
    """Draw x_t from the closed-form marginal given x_0 and the noise:

        x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise

    ``t`` is a single timestep or one per batch element; ``x0`` and
    ``noise`` may be torch tensors or numpy arrays of equal shape.
    """
    if tuple(noise.shape) != tuple(x0.shape):
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ValueError(f"timestep out of range [1, {sched.T}]: {t}")
    abar = sched.alpha_bar(t)
    a = _coeff(np.sqrt(abar), t, x0)
    b = _coeff(np.sqrt(1.0 - np.asarray(abar)), t, x0)
    return a * x0 + b * noise
