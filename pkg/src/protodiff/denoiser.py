"""Conditional noise predictor: a small U-Net over (x_t, t, s).

The timestep enters as a sinusoidal embedding; the activation vector s is
projected by a 2-layer MLP and added to it. Residual blocks consume the
combined embedding through per-channel scale-and-shift after group
normalization. No attention: two resolutions with a few residual blocks
suffice at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 3
    image_size: int = 32
    base: int = 64
    mults: tuple[int, ...] = (1, 2)
    n_blocks: int = 2
    emb_dim: int = 128
    cond_dim: int = 32  # length of the activation vector
    norm_groups: int = 8

    def __post_init__(self):
        down = 2 ** (len(self.mults) - 1)
        if self.image_size % down != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by {down} "
                f"for {len(self.mults)} resolutions"
            )


def _groups(channels: int, preferred: int) -> int:
    for g in range(min(preferred, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer-style embedding of (possibly fractional) timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype) / max(half - 1, 1)
    )
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2 == 1:
        emb = torch.cat([emb, emb.new_zeros(emb.shape[0], 1)], dim=1)
    return emb


class ConditionMLP(nn.Module):
    """2-layer projection of the activation vector into embedding space."""

    def __init__(self, cond_dim: int, emb_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(cond_dim, emb_dim)
        self.fc2 = nn.Linear(emb_dim, emb_dim)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.silu(self.fc1(s)))


def embed_condition(t, s: torch.Tensor, cond_mlp: ConditionMLP,
                    emb_dim: int) -> torch.Tensor:
    """Combined conditioning: sinusoidal(t) + MLP(s), shape (B, emb_dim).

    With all MLP parameters zero the result is the pure time embedding,
    independent of s.
    """
    if s.ndim == 1:
        s = s.unsqueeze(0)
    if s.shape[1] != cond_mlp.fc1.in_features:
        raise ValueError(
            f"activation vector length {s.shape[1]} != expected {cond_mlp.fc1.in_features}"
        )
    t_arr = torch.as_tensor(t, dtype=s.dtype)
    if t_arr.ndim == 0:
        t_arr = t_arr.repeat(s.shape[0])
    return sinusoidal_embedding(t_arr, emb_dim) + cond_mlp(s)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch, groups), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch, groups), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        scale, shift = self.emb_proj(torch.nn.functional.silu(emb)).chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(h))
        return h + self.skip(x)


class UNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.cond_mlp = ConditionMLP(cfg.cond_dim, cfg.emb_dim)
        widths = [cfg.base * m for m in cfg.mults]
        g = cfg.norm_groups

        self.conv_in = nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        skip_widths = [widths[0]]
        ch = widths[0]
        for i, w in enumerate(widths):
            blocks = nn.ModuleList()
            for _ in range(cfg.n_blocks):
                blocks.append(ResBlock(ch, w, cfg.emb_dim, g))
                ch = w
                skip_widths.append(ch)
            self.down_blocks.append(blocks)
            if i < len(widths) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skip_widths.append(ch)

        self.mid1 = ResBlock(ch, ch, cfg.emb_dim, g)
        self.mid2 = ResBlock(ch, ch, cfg.emb_dim, g)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i, w in reversed(list(enumerate(widths))):
            blocks = nn.ModuleList()
            for _ in range(cfg.n_blocks + 1):
                blocks.append(ResBlock(ch + skip_widths.pop(), w, cfg.emb_dim, g))
                ch = w
            self.up_blocks.append(blocks)
            if i > 0:
                self.upsamples.append(nn.Conv2d(ch, ch, 3, padding=1))

        self.norm_out = nn.GroupNorm(_groups(ch, g), ch)
        self.conv_out = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t, s: torch.Tensor) -> torch.Tensor:
        emb = embed_condition(t, s, self.cond_mlp, self.cfg.emb_dim)
        h = self.conv_in(x)
        skips = [h]
        for i, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block(h, emb)
                skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
                skips.append(h)
        h = self.mid1(h, emb)
        h = self.mid2(h, emb)
        for i, blocks in enumerate(self.up_blocks):
            for block in blocks:
                h = block(torch.cat([h, skips.pop()], dim=1), emb)
            if i < len(self.upsamples):
                h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[i](h)
        return self.conv_out(torch.nn.functional.silu(self.norm_out(h)))


def predict_noise(xt: torch.Tensor, t, s: torch.Tensor, model: UNet) -> torch.Tensor:
    """Evaluate the denoiser; output geometry equals input geometry."""
    cfg = model.cfg
    if xt.ndim != 4 or xt.shape[1] != cfg.in_channels or xt.shape[2] != cfg.image_size \
            or xt.shape[3] != cfg.image_size:
        raise ValueError(f"input geometry {tuple(xt.shape)} does not match config")
    if not torch.isfinite(xt).all():
        raise ValueError("non-finite values in denoiser input")
    if isinstance(s, torch.Tensor) and not torch.isfinite(s).all():
        raise ValueError("non-finite values in condition")
    return model(xt, t, s)


def init_denoiser(cfg: DenoiserConfig, gen: np.random.Generator,
                  dtype: torch.dtype = torch.float32, zero_init: bool = True) -> UNet:
    """U-Net with weights drawn from the given stream.

    By default residual-block output convs and the final conv start at zero
    (identity residual start, the usual diffusion recipe); the condition MLP
    starts nonzero so encoder gradients flow once those convs move. Pass
    ``zero_init=False`` for a fully live network (gradient checks).
    """
    net = UNet(cfg).to(dtype)
    zero_out = {id(b.conv2) for b in net.modules() if isinstance(b, ResBlock)}
    zero_out.add(id(net.conv_out))
    with torch.no_grad():
        for mod in net.modules():
            if isinstance(mod, nn.Conv2d):
                if zero_init and id(mod) in zero_out:
                    mod.weight.zero_()
                else:
                    fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                    w = gen.standard_normal(tuple(mod.weight.shape)) * np.sqrt(1.0 / fan_in)
                    mod.weight.copy_(torch.as_tensor(w, dtype=dtype))
                mod.bias.zero_()
            elif isinstance(mod, nn.Linear):
                fan_in = mod.in_features
                w = gen.standard_normal(tuple(mod.weight.shape)) * np.sqrt(1.0 / fan_in)
                mod.weight.copy_(torch.as_tensor(w, dtype=dtype))
                mod.bias.zero_()
    return net
