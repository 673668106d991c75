"""Attribute probe: a small conv net predicting dataset attributes.

Used as ground-truth reader for generated images (shortcut diagnosis,
prototype-consistency checks) and as the feature extractor for the
Frechet-distance proxy. One softmax head per attribute group.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint
from .data import Dataset
from .rng import stream


class Probe(nn.Module):
    def __init__(self, in_channels: int, image_size: int,
                 groups: dict[str, tuple[str, ...]], width: int = 32):
        super().__init__()
        self.groups = {g: tuple(v) for g, v in groups.items()}
        self.image_size = image_size
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(width * 2, width * 4, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.feature_dim = width * 4
        self.heads = nn.ModuleDict(
            {g: nn.Linear(self.feature_dim, len(v)) for g, v in self.groups.items()}
        )

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.body(x)
        return h.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        f = self.features(x)
        return {g: head(f) for g, head in self.heads.items()}

    @torch.no_grad()
    def predict_proba(self, images, group: str) -> np.ndarray:
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        probs = torch.softmax(self(x)[group], dim=1)
        return probs.numpy()

    @torch.no_grad()
    def predict(self, images, group: str) -> np.ndarray:
        return self.predict_proba(images, group).argmax(axis=1)


def train_probe(dataset: Dataset, epochs: int = 15, lr: float = 1e-3,
                batch_size: int = 64, seed: int = 0, quiet: bool = True) -> Probe:
    """Fit the probe on the train split; returns the trained network."""
    gen = stream(seed, "probe")
    groups = dataset.attrs.groups
    probe = Probe(dataset.images.shape[1], dataset.images.shape[2], groups)
    with torch.no_grad():
        for p in probe.parameters():
            if p.ndim > 1:
                fan_in = int(np.prod(p.shape[1:]))
                p.copy_(torch.as_tensor(
                    gen.standard_normal(tuple(p.shape)) * np.sqrt(2.0 / fan_in),
                    dtype=p.dtype))
            else:
                p.zero_()
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    images = torch.as_tensor(dataset.split_images("train"))
    attrs = dataset.split_attrs("train")
    labels = {g: torch.as_tensor(attrs.group_label(g), dtype=torch.long)
              for g in groups}
    ce = nn.CrossEntropyLoss()
    for epoch in range(epochs):
        perm = gen.permutation(images.shape[0])
        total = 0.0
        for i in range(0, len(perm), batch_size):
            idx = torch.as_tensor(perm[i:i + batch_size], dtype=torch.long)
            logits = probe(images[idx])
            loss = sum(ce(logits[g], labels[g][idx]) for g in groups)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
        if not quiet:
            print(f"[probe] epoch {epoch + 1}/{epochs} loss {total:.3f}")
    return probe


@torch.no_grad()
def probe_accuracy(probe: Probe, dataset: Dataset, split: str = "val") -> dict[str, float]:
    images = dataset.split_images(split)
    attrs = dataset.split_attrs(split)
    out = {}
    for g in probe.groups:
        pred = probe.predict(images, g)
        out[g] = float((pred == attrs.group_label(g)).mean())
    return out


@torch.no_grad()
def probe_auroc(probe: Probe, dataset: Dataset, split: str = "val") -> dict[str, float]:
    """One-vs-rest AUROC per group value, averaged within each group."""
    from .evaluation import auroc

    images = dataset.split_images(split)
    attrs = dataset.split_attrs(split)
    out = {}
    for g, values in probe.groups.items():
        probs = probe.predict_proba(images, g)
        label = attrs.group_label(g)
        scores = []
        for v in range(len(values)):
            y = (label == v).astype(np.uint8)
            if y.min() == y.max():
                continue
            scores.append(auroc(probs[:, v], y))
        out[g] = float(np.mean(scores)) if scores else float("nan")
    return out


def save_probe(probe: Probe, path, config_hash: str = "") -> None:
    tensors = {k: v.detach().cpu().numpy().astype("<f4")
               for k, v in probe.state_dict().items()}
    meta = {"kind": "probe", "groups": {g: list(v) for g, v in probe.groups.items()},
            "in_channels": probe.body[0].in_channels,
            "image_size": probe.image_size,
            "width": probe.body[0].out_channels}
    Checkpoint(config_hash=config_hash, tensors=tensors, meta=meta).save(path)


def load_probe(path) -> Probe:
    ckpt = Checkpoint.load(path)
    if ckpt.meta.get("kind") != "probe":
        raise ValueError(f"{path} is not a probe checkpoint")
    groups = {g: tuple(v) for g, v in ckpt.meta["groups"].items()}
    probe = Probe(ckpt.meta["in_channels"], ckpt.meta["image_size"], groups,
                  width=ckpt.meta["width"])
    probe.load_state_dict({k: torch.as_tensor(v) for k, v in ckpt.tensors.items()})
    return probe
