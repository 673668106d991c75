"""Prototype encoder: patch feature maps, prototype bank, activation vector.

The encoder is a fixed 4-stage Conv-ReLU stack. Each spatial position of
its output feature map summarizes one input patch (the stage geometry
determines the receptive field). A bank of m prototype vectors of depth D
is compared against every position by squared L2 distance; the minimum
distance per prototype is mapped through a log transform to a similarity
score, giving the m-dimensional activation vector s that conditions the
denoiser.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

N_STAGES = 4


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    in_size: tuple[int, int] = (32, 32)
    channels: tuple[int, int, int, int] = (32, 64, 128, 64)
    kernels: tuple[int, int, int, int] = (3, 3, 3, 3)
    strides: tuple[int, int, int, int] = (2, 2, 2, 2)
    paddings: tuple[int, int, int, int] = (1, 1, 1, 1)

    def __post_init__(self):
        for name in ("channels", "kernels", "strides", "paddings"):
            if len(getattr(self, name)) != N_STAGES:
                raise ValueError(f"{name} must have exactly {N_STAGES} entries")
        h, w = self.in_size
        for k, s, p in zip(self.kernels, self.strides, self.paddings):
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
        if h < 1 or w < 1:
            raise ValueError(f"encoder collapses input {self.in_size} to {h}x{w}")
        object.__setattr__(self, "_out_hw", (h, w))

    _out_hw: tuple[int, int] = field(init=False, repr=False, compare=False, default=(0, 0))

    @property
    def out_shape(self) -> tuple[int, int, int]:
        """(H, W, D) of the feature map this config produces."""
        h, w = self._out_hw
        return (h, w, self.channels[-1])

    @property
    def depth(self) -> int:
        return self.channels[-1]


class Encoder(nn.Module):
    """4-stage Conv-ReLU feature extractor."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        chans = (cfg.in_channels,) + cfg.channels
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], cfg.kernels[i],
                      stride=cfg.strides[i], padding=cfg.paddings[i])
            for i in range(N_STAGES)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = torch.relu(conv(x))
        return x


def encode(x0: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    """Map images (B, C, H_in, W_in) to feature maps (B, D, H, W).

    Deterministic given weights, differentiable w.r.t. weights and input.
    """
    cfg = encoder.cfg
    if x0.ndim != 4 or x0.shape[1] != cfg.in_channels or tuple(x0.shape[2:]) != cfg.in_size:
        raise ValueError(
            f"input geometry {tuple(x0.shape)} does not match config "
            f"(C={cfg.in_channels}, HW={cfg.in_size})"
        )
    if not torch.isfinite(x0).all():
        raise ValueError("non-finite values in encoder input")
    return encoder(x0)


def init_encoder(cfg: EncoderConfig, gen: np.random.Generator,
                 dtype: torch.dtype = torch.float32) -> Encoder:
    """Encoder with Kaiming-scaled weights drawn from the given stream."""
    enc = Encoder(cfg).to(dtype)
    with torch.no_grad():
        for conv in enc.convs:
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            w = gen.standard_normal(tuple(conv.weight.shape)) * np.sqrt(2.0 / fan_in)
            conv.weight.copy_(torch.as_tensor(w, dtype=dtype))
            conv.bias.zero_()
    return enc


def init_bank(m: int, depth: int, gen: np.random.Generator,
              dtype: torch.dtype = torch.float32) -> torch.nn.Parameter:
    """Prototype bank (m, D), components uniform on [0, 1)."""
    if m < 1:
        raise ValueError(f"need at least one prototype, got m={m}")
    vals = gen.random((m, depth))
    return nn.Parameter(torch.as_tensor(vals, dtype=dtype))


def init_bank_from_features(encoder: Encoder, images: torch.Tensor, m: int,
                            gen: np.random.Generator,
                            noise_scale: float = 0.05) -> torch.nn.Parameter:
    """Prototype bank seeded from actual patch features of sample images.

    Starting on the feature manifold keeps initial distances small, so the
    log-similarity scores span a useful range from the first step (a
    uniform bank tends to sit far away, leaving s compressed near 0).
    """
    if m < 1:
        raise ValueError(f"need at least one prototype, got m={m}")
    with torch.no_grad():
        fm = encode(images, encoder)
        cols = fm.permute(0, 2, 3, 1).reshape(-1, fm.shape[1])
    idx = gen.choice(cols.shape[0], size=m, replace=cols.shape[0] < m)
    jitter = torch.as_tensor(gen.standard_normal((m, cols.shape[1])) * noise_scale,
                             dtype=cols.dtype)
    return nn.Parameter(cols[torch.as_tensor(idx, dtype=torch.long)] + jitter)


def patch_distances(fm: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance between every feature-map position and prototype.

    fm: (B, D, H, W) or (D, H, W); bank: (m, D).
    Returns (B, m, H, W) or (m, H, W); entries >= 0.
    """
    squeeze = fm.ndim == 3
    if squeeze:
        fm = fm.unsqueeze(0)
    depth = fm.shape[1]
    if bank.shape[1] != depth:
        raise ValueError(f"depth mismatch: feature map D={depth}, bank D={bank.shape[1]}")
    b, _, h, w = fm.shape
    m = bank.shape[0]
    # accumulate over depth sequentially; keeps summation order identical to
    # a scalar reference loop, so results are bit-comparable
    acc = fm.new_zeros((b, m, h, w))
    for d in range(depth):
        diff = fm[:, d].unsqueeze(1) - bank[:, d].reshape(1, m, 1, 1)
        acc = acc + diff * diff
    return acc.squeeze(0) if squeeze else acc


def min_pool(dists: torch.Tensor) -> tuple[torch.Tensor, np.ndarray]:
    """Minimum distance over spatial positions, per prototype.

    dists: (B, m, H, W) or (m, H, W). Returns (values, locs) where values
    is (B, m) or (m,) and locs holds the (row, col) of each minimum. Ties
    break to the first position in row-major order. Gradients flow through
    the selected entries only.
    """
    squeeze = dists.ndim == 3
    if squeeze:
        dists = dists.unsqueeze(0)
    b, m, h, w = dists.shape
    if h < 1 or w < 1:
        raise ValueError("empty spatial extent")
    flat = dists.reshape(b, m, h * w)
    idx = flat.detach().cpu().numpy().argmin(axis=2)  # first occurrence
    idx_t = torch.as_tensor(idx, dtype=torch.long)
    values = flat.gather(2, idx_t.unsqueeze(2)).squeeze(2)
    locs = np.stack([idx // w, idx % w], axis=-1)
    if squeeze:
        return values.squeeze(0), locs[0]
    return values, locs


def max_similarity(eps_sim: float) -> float:
    """Upper end of the similarity range, attained at zero distance."""
    return float(np.log(1.0 / eps_sim))


def similarity(d2min: torch.Tensor, eps_sim: float) -> torch.Tensor:
    """Activation scores s = log((d^2 + 1) / (d^2 + eps)).

    Strictly decreasing in the distance, with range (0, log(1/eps)].
    """
    if not (0.0 < eps_sim < 1.0):
        raise ValueError(f"eps_sim must be in (0, 1), got {eps_sim}")
    if (d2min.detach() < 0).any():
        raise ValueError("negative squared distance")
    return torch.log((d2min + 1.0) / (d2min + eps_sim))


def activation(x0: torch.Tensor, encoder: Encoder, bank: torch.Tensor,
               eps_sim: float) -> tuple[torch.Tensor, np.ndarray]:
    """Full pipeline image -> (s, argmin locations): encode, patch distances,
    min-pool, log similarity."""
    fm = encode(x0, encoder)
    d2, locs = min_pool(patch_distances(fm, bank))
    return similarity(d2, eps_sim), locs


def receptive_field(loc: tuple[int, int], cfg: EncoderConfig) -> tuple[int, int, int, int]:
    """Input-pixel rectangle (top, left, height, width) feeding one output
    position, clipped to image bounds."""
    h_out, w_out, _ = cfg.out_shape
    r, c = int(loc[0]), int(loc[1])
    if not (0 <= r < h_out and 0 <= c < w_out):
        raise ValueError(f"location {loc} outside feature map {h_out}x{w_out}")
    top, left, size = r, c, 1
    for k, s, p in zip(reversed(cfg.kernels), reversed(cfg.strides), reversed(cfg.paddings)):
        top = top * s - p
        left = left * s - p
        size = (size - 1) * s + k
    h_in, w_in = cfg.in_size
    t = max(top, 0)
    l = max(left, 0)
    bottom = min(top + size, h_in)
    right = min(left + size, w_in)
    return (t, l, bottom - t, right - l)
