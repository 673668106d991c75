"""Container bundling encoder, prototype bank, denoiser, and schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import protonet, denoiser as den
from .rng import stream
from .schedule import NoiseSchedule, build_linear_schedule


class LatentMLP(nn.Module):
    """3-layer noise predictor for diffusion over activation vectors."""

    def __init__(self, dim: int, hidden: int, emb_dim: int = 64):
        super().__init__()
        self.emb_dim = emb_dim
        self.fc1 = nn.Linear(dim + emb_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, dim)

    def forward(self, v: torch.Tensor, t) -> torch.Tensor:
        t_arr = torch.as_tensor(t, dtype=v.dtype)
        if t_arr.ndim == 0:
            t_arr = t_arr.repeat(v.shape[0])
        emb = den.sinusoidal_embedding(t_arr, self.emb_dim)
        h = torch.nn.functional.silu(self.fc1(torch.cat([v, emb], dim=1)))
        h = torch.nn.functional.silu(self.fc2(h))
        return self.fc3(h)


@dataclass
class GenerativeModel:
    """Trained (or training) state: all networks plus their schedules.

    The latent branch (``latent_*`` fields) stays None until stage-2
    training; normalization stats are per-dimension over the training
    activations.
    """

    encoder: protonet.Encoder
    bank: nn.Parameter
    unet: den.UNet
    sched: NoiseSchedule
    eps_sim: float
    latent_mlp: LatentMLP | None = None
    latent_sched: NoiseSchedule | None = None
    latent_mean: np.ndarray | None = None
    latent_std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.bank.shape[0]

    def activation(self, x0: torch.Tensor) -> torch.Tensor:
        s, _ = protonet.activation(x0, self.encoder, self.bank, self.eps_sim)
        return s

    def activation_with_locs(self, x0: torch.Tensor):
        return protonet.activation(x0, self.encoder, self.bank, self.eps_sim)

    def predict_noise(self, xt: torch.Tensor, t, s: torch.Tensor) -> torch.Tensor:
        return den.predict_noise(xt, t, s, self.unet)

    def parameters(self):
        yield from self.encoder.parameters()
        yield self.bank
        yield from self.unet.parameters()

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        out["bank"] = self.bank.data
        out.update({f"unet.{k}": v for k, v in self.unet.state_dict().items()})
        if self.latent_mlp is not None:
            out.update({f"latent.{k}": v for k, v in self.latent_mlp.state_dict().items()})
        return out


def build_model(enc_cfg: protonet.EncoderConfig, den_cfg: den.DenoiserConfig,
                m: int, eps_sim: float, sched: NoiseSchedule | None = None,
                seed: int = 0, dtype: torch.dtype = torch.float32,
                zero_init: bool = True) -> GenerativeModel:
    """Freshly initialized model; every parameter comes from streams derived
    from (seed, purpose)."""
    if den_cfg.cond_dim != m:
        raise ValueError(f"denoiser cond_dim {den_cfg.cond_dim} != m {m}")
    if sched is None:
        sched = build_linear_schedule(1000, 1e-4, 0.02)
    encoder = protonet.init_encoder(enc_cfg, stream(seed, "init.encoder"), dtype)
    bank = protonet.init_bank(m, enc_cfg.depth, stream(seed, "init.bank"), dtype)
    unet = den.init_denoiser(den_cfg, stream(seed, "init.denoiser"), dtype,
                             zero_init=zero_init)
    return GenerativeModel(encoder=encoder, bank=bank, unet=unet,
                           sched=sched, eps_sim=eps_sim)
