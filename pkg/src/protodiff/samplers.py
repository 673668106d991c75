"""Generative kernels: ancestral sampling, deterministic DDIM with
inversion, clean-image estimation, and the auxiliary latent sampler.

All stochastic kernels take an explicit numpy Generator; trajectories are
pure functions of (parameters, inputs, stream), so independent runs may
execute in parallel with independent streams. Images are clipped to
[-1, 1] once at the end of a trajectory, never mid-way (mid-trajectory
clipping would break invertibility).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .model import GenerativeModel
from .protonet import max_similarity
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "ddim"  # "ancestral" | "ddim"
    eta: float = 0.0
    n_steps: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ancestral", "ddim"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")


def uniform_steps(T: int, n_steps: int) -> list[int]:
    """Monotone subset {0, ..., T} with ~uniform stride, endpoints included."""
    if not (1 <= n_steps <= T):
        raise ValueError(f"need 1 <= n_steps <= {T}, got {n_steps}")
    return sorted(set(int(round(x)) for x in np.linspace(0, T, n_steps + 1)))


def estimate_x0(xt: torch.Tensor, t: int, eps_hat: torch.Tensor,
                sched: NoiseSchedule) -> torch.Tensor:
    """Denoiser-implied clean image: (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)."""
    if tuple(eps_hat.shape) != tuple(xt.shape):
        raise ValueError(f"shape mismatch: {tuple(eps_hat.shape)} vs {tuple(xt.shape)}")
    abar = sched.alpha_bar(t)
    return (xt - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)


def _cond(s: torch.Tensor, batch: int) -> torch.Tensor:
    if s.ndim == 1:
        s = s.unsqueeze(0)
    if s.shape[0] == 1 and batch > 1:
        s = s.expand(batch, -1)
    return s


def ddpm_step(xt: torch.Tensor, t: int, s: torch.Tensor, model: GenerativeModel,
              rng: np.random.Generator) -> torch.Tensor:
    """One ancestral reverse step: x_{t-1} ~ N(mu_theta, beta~_t I).

    The posterior mean comes from the predicted noise; the final step
    (t = 1) adds no noise since its posterior variance degenerates to 0.
    """
    sched = model.sched
    if not (1 <= t <= sched.T):
        raise ValueError(f"timestep out of range [1, {sched.T}]: {t}")
    eps_hat = model.predict_noise(xt, t, _cond(s, xt.shape[0]))
    beta = sched.beta(t)
    abar = sched.alpha_bar(t)
    mean = (xt - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(1.0 - beta)
    if t == 1:
        return mean
    var = sched.posterior_variance(t)
    noise = torch.as_tensor(rng.standard_normal(tuple(xt.shape)), dtype=xt.dtype)
    return mean + np.sqrt(var) * noise


def ddpm_sample(s: torch.Tensor, model: GenerativeModel, rng: np.random.Generator,
                n: int = 1, x_start: torch.Tensor | None = None,
                record_every: int | None = None):
    """Full ancestral trajectory from x_T ~ N(0, I) down to x_0.

    Returns the final images clipped to [-1, 1]; with ``record_every`` set,
    also returns [(t, x_t), ...] snapshots taken before each recorded step.
    """
    cfg = model.unet.cfg
    shape = (n, cfg.in_channels, cfg.image_size, cfg.image_size)
    if x_start is None:
        x = torch.as_tensor(rng.standard_normal(shape), dtype=model.bank.dtype)
    else:
        x = x_start
    records = []
    with torch.no_grad():
        for t in range(model.sched.T, 0, -1):
            if record_every and (t % record_every == 0 or t == model.sched.T):
                records.append((t, x.clone()))
            x = ddpm_step(x, t, s, model, rng)
    x = x.clamp(-1.0, 1.0)
    if record_every:
        return x, records
    return x


def ddim_sigma(t: int, t_prev: int, eta: float, sched: NoiseSchedule) -> float:
    """sigma^2 = eta^2 (1-abar_prev)/(1-abar_t) (1 - abar_t/abar_prev), as sigma."""
    abar_t = sched.alpha_bar(t)
    abar_p = sched.alpha_bar(t_prev)
    var = eta ** 2 * (1.0 - abar_p) / (1.0 - abar_t) * (1.0 - abar_t / abar_p)
    return float(np.sqrt(max(var, 0.0)))


def ddim_step(xt: torch.Tensor, t: int, t_prev: int, s: torch.Tensor,
              eta: float, model: GenerativeModel,
              rng: np.random.Generator | None = None) -> torch.Tensor:
    """One (possibly accelerated) DDIM step from t down to t_prev:

        x_prev = sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev - sigma^2) eps_hat
                 + sigma * noise

    eta = 0 makes the step deterministic (sigma = 0 exactly).
    """
    if not (0 <= t_prev < t <= model.sched.T):
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    sched = model.sched
    eps_hat = model.predict_noise(xt, t, _cond(s, xt.shape[0]))
    x0_hat = estimate_x0(xt, t, eps_hat, sched)
    abar_p = sched.alpha_bar(t_prev)
    sigma = ddim_sigma(t, t_prev, eta, sched) if eta > 0 else 0.0
    if sigma ** 2 > (1.0 - abar_p) + 1e-12:
        raise ValueError(f"sigma^2 {sigma**2:.3g} exceeds noise budget at t_prev={t_prev}")
    out = np.sqrt(abar_p) * x0_hat + np.sqrt(max(1.0 - abar_p - sigma ** 2, 0.0)) * eps_hat
    if sigma > 0.0:
        if rng is None:
            raise ValueError("eta > 0 requires an rng")
        out = out + sigma * torch.as_tensor(rng.standard_normal(tuple(xt.shape)),
                                            dtype=xt.dtype)
    return out


def ddim_generate(x_T: torch.Tensor, s: torch.Tensor, model: GenerativeModel,
                  steps: list[int], eta: float = 0.0,
                  rng: np.random.Generator | None = None,
                  record: bool = False, clip: bool = True):
    """Run DDIM down the decreasing view of ``steps`` (a subset of {0..T}
    including both endpoints). Deterministic and bit-reproducible at eta=0."""
    seq = sorted(steps, reverse=True)
    if seq[0] != model.sched.T or seq[-1] != 0:
        raise ValueError("step subset must span T down to 0")
    x = x_T
    records = []
    with torch.no_grad():
        for t, t_prev in zip(seq[:-1], seq[1:]):
            if record:
                records.append((t, x.clone()))
            x = ddim_step(x, t, t_prev, _cond(s, x.shape[0]), eta, model, rng)
    if clip:
        x = x.clamp(-1.0, 1.0)
    if record:
        return x, records
    return x


def ddim_invert(x0: torch.Tensor, s: torch.Tensor, model: GenerativeModel,
                steps: list[int]) -> torch.Tensor:
    """Deterministic encoding of a clean image to noise space:

        x_{t_next} = sqrt(abar_next) x0_hat + sqrt(1 - abar_next) eps_hat

    with eps_hat evaluated at the current point. The network has no t = 0
    input, so the first hop evaluates it at the first diffusion step.
    """
    seq = sorted(steps)
    if seq[0] != 0 or seq[-1] != model.sched.T:
        raise ValueError("step subset must span 0 up to T")
    sched = model.sched
    x = x0
    s = _cond(s, x0.shape[0])
    with torch.no_grad():
        for t, t_next in zip(seq[:-1], seq[1:]):
            eps_hat = model.predict_noise(x, max(t, 1), s)
            x0_hat = x if t == 0 else estimate_x0(x, t, eps_hat, sched)
            abar_n = sched.alpha_bar(t_next)
            x = np.sqrt(abar_n) * x0_hat + np.sqrt(1.0 - abar_n) * eps_hat
    return x


def latent_sample(model: GenerativeModel, rng: np.random.Generator,
                  n: int = 1) -> np.ndarray:
    """Draw activation vectors from the stage-2 latent diffusion model,
    un-normalize them, and clip into the valid similarity range."""
    if model.latent_mlp is None or model.latent_sched is None:
        raise RuntimeError("latent model not trained (run stage 2 first)")
    sched = model.latent_sched
    dim = model.m
    dtype = next(model.latent_mlp.parameters()).dtype
    v = torch.as_tensor(rng.standard_normal((n, dim)), dtype=dtype)
    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            eps_hat = model.latent_mlp(v, t)
            beta = sched.beta(t)
            abar = sched.alpha_bar(t)
            mean = (v - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(1.0 - beta)
            if t == 1:
                v = mean
            else:
                var = sched.posterior_variance(t)
                noise = torch.as_tensor(rng.standard_normal((n, dim)), dtype=dtype)
                v = mean + np.sqrt(var) * noise
    s = v.numpy() * model.latent_std + model.latent_mean
    return np.clip(s, 1e-8, max_similarity(model.eps_sim))
