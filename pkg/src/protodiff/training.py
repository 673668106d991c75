"""Losses and the two-stage training procedure.

Stage 1 jointly optimizes encoder, prototype bank, and denoiser under the
noise-prediction loss (the conditioning path carries gradients into the
encoder). An optional fine-tune adds a hinge penalty pushing prototypes
apart. Stage 2 freezes the encoder and fits a small diffusion model over
normalized activation vectors for unconditional sampling.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .checkpoint import Checkpoint
from .model import GenerativeModel, LatentMLP
from .rng import stream
from .schedule import NoiseSchedule, build_linear_schedule, q_sample


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    distinct_margin: float = 0.5
    distinct_weight: float = 1.0
    ema_decay: float = 0.999
    latent_epochs: int = 200
    latent_lr: float = 1e-3
    latent_hidden: int = 256
    latent_T: int = 200
    latent_beta_start: float = 1e-3
    latent_beta_end: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.distinct_margin <= 1.0):
            raise ValueError("distinct margin must be in [0, 1]")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ValueError("ema decay must be in [0, 1)")


def ddpm_loss(x0: torch.Tensor, rng: np.random.Generator,
              model: GenerativeModel) -> torch.Tensor:
    """Mean squared error between drawn and predicted noise, at per-element
    uniform timesteps, conditioned on the activation vector of the clean
    batch. Differentiable w.r.t. encoder, bank, and denoiser jointly.

    The squared-norm objective is averaged per element, so an all-zero
    predictor scores ~1.0.
    """
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    b = x0.shape[0]
    t = rng.integers(1, model.sched.T + 1, size=b)
    eps = torch.as_tensor(rng.standard_normal(tuple(x0.shape)), dtype=x0.dtype)
    s = model.activation(x0)
    xt = q_sample(x0, t, eps, model.sched)
    eps_hat = model.predict_noise(xt, t, s)
    loss = torch.mean((eps - eps_hat) ** 2)
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss (t range {t.min()}..{t.max()}, "
            f"|x0| max {x0.abs().max().item():.3g})"
        )
    return loss


def distinct_loss(bank: torch.Tensor, delta: float) -> torch.Tensor:
    """Hinge on the minimum pairwise absolute-cosine distance:

        (1/m) sum_i max(0, delta - min_{j != i} (1 - |cos(p_i, p_j)|))

    Zero for a mutually orthogonal bank at delta <= 1; bounded by delta.
    """
    m = bank.shape[0]
    if m < 2:
        raise ValueError("need at least two prototypes")
    norms = torch.linalg.vector_norm(bank, dim=1)
    if (norms.detach() == 0).any():
        raise ValueError("zero-norm prototype has undefined cosine distance")
    unit = bank / norms[:, None]
    cos = unit @ unit.T
    dist = 1.0 - cos.abs()
    dist = dist + torch.eye(m, dtype=bank.dtype) * 2.0  # exclude self-pairs
    min_dist = dist.min(dim=1).values
    return torch.clamp(delta - min_dist, min=0.0).mean()


def prototype_cosine_histogram(bank: torch.Tensor, bins: int = 10) -> list[int]:
    """Histogram of off-diagonal |cosine| values, for collapse analysis."""
    unit = bank / torch.linalg.vector_norm(bank, dim=1, keepdim=True)
    cos = (unit @ unit.T).abs()
    m = bank.shape[0]
    vals = cos[~torch.eye(m, dtype=torch.bool)].detach().cpu().numpy()
    hist, _ = np.histogram(vals, bins=bins, range=(0.0, 1.0))
    return hist.tolist()


class Ema:
    """Exponential moving average over a named tensor set."""

    def __init__(self, tensors: dict[str, torch.Tensor], decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in tensors.items()}

    def update(self, tensors: dict[str, torch.Tensor]) -> None:
        for k, v in tensors.items():
            self.shadow[k].mul_(self.decay).add_(v.detach(), alpha=1.0 - self.decay)

    def tensors(self) -> dict[str, torch.Tensor]:
        return self.shadow


def stage1_tensors(model: GenerativeModel) -> dict[str, torch.Tensor]:
    out = {f"encoder.{k}": v for k, v in model.encoder.state_dict().items()}
    out["bank"] = model.bank.data
    out.update({f"unet.{k}": v for k, v in model.unet.state_dict().items()})
    return out


def _append_csv(path, row: dict) -> None:
    if path is None:
        return
    exists = os.path.exists(path)
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(row))
        if not exists:
            writer.writeheader()
        writer.writerow(row)


def _np_f4(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype("<f4")


def to_checkpoint(model: GenerativeModel, ema: Ema | None, config_hash: str,
                  stage: str, epoch: int, loss_history: list[float],
                  extra_meta: dict | None = None) -> Checkpoint:
    tensors = {k: _np_f4(v) for k, v in stage1_tensors(model).items()}
    if ema is not None:
        tensors.update({f"ema.{k}": _np_f4(v) for k, v in ema.tensors().items()})
    if model.latent_mlp is not None:
        tensors.update({f"latent.{k}": _np_f4(v)
                        for k, v in model.latent_mlp.state_dict().items()})
        tensors["latent_stats.mean"] = model.latent_mean.astype("<f8")
        tensors["latent_stats.std"] = model.latent_std.astype("<f8")
    meta = {
        "kind": "model",
        "stage": stage,
        "epoch": epoch,
        "loss_tail": [float(x) for x in loss_history[-50:]],
        "m": model.m,
        "eps_sim": model.eps_sim,
        "enc_cfg": asdict(model.encoder.cfg),
        "den_cfg": asdict(model.unet.cfg),
        "schedule": {"T": model.sched.T,
                     "beta_start": float(model.sched.betas[0]),
                     "beta_end": float(model.sched.betas[-1])},
        "latent_hidden": (None if model.latent_mlp is None
                          else model.latent_mlp.fc2.in_features),
        "latent_schedule": (None if model.latent_sched is None else
                            {"T": model.latent_sched.T,
                             "beta_start": float(model.latent_sched.betas[0]),
                             "beta_end": float(model.latent_sched.betas[-1])}),
    }
    meta.update(extra_meta or {})
    # drop derived fields that the dataclass recomputes
    meta["enc_cfg"].pop("_out_hw", None)
    return Checkpoint(config_hash=config_hash, tensors=tensors, meta=meta)


def from_checkpoint(ckpt: Checkpoint, which: str = "ema",
                    dtype: torch.dtype = torch.float32) -> GenerativeModel:
    """Rebuild a model from a checkpoint; ``which`` picks raw or EMA weights."""
    from .protonet import Encoder, EncoderConfig
    from .denoiser import UNet, DenoiserConfig

    meta = ckpt.meta
    enc_cfg = EncoderConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in meta["enc_cfg"].items()
                               if not k.startswith("_")})
    den_cfg = DenoiserConfig(**{k: tuple(v) if isinstance(v, list) else v
                                for k, v in meta["den_cfg"].items()})
    sd = meta["schedule"]
    sched = build_linear_schedule(sd["T"], sd["beta_start"], sd["beta_end"])
    encoder = Encoder(enc_cfg).to(dtype)
    unet = UNet(den_cfg).to(dtype)
    prefix = "ema." if (which == "ema" and any(k.startswith("ema.") for k in ckpt.tensors)) else ""

    def fetch(name: str) -> torch.Tensor:
        # copy: the rebuilt model must never alias checkpoint buffers
        return torch.as_tensor(ckpt.tensors[prefix + name], dtype=dtype).clone()

    encoder.load_state_dict({k: fetch(f"encoder.{k}")
                             for k in encoder.state_dict()})
    unet.load_state_dict({k: fetch(f"unet.{k}") for k in unet.state_dict()})
    bank = torch.nn.Parameter(fetch("bank"))
    model = GenerativeModel(encoder=encoder, bank=bank, unet=unet, sched=sched,
                            eps_sim=meta["eps_sim"], meta=dict(meta))
    if meta.get("latent_schedule"):
        ld = meta["latent_schedule"]
        model.latent_sched = build_linear_schedule(ld["T"], ld["beta_start"],
                                                   ld["beta_end"])
        mlp = LatentMLP(meta["m"], meta["latent_hidden"]).to(dtype)
        mlp.load_state_dict({k: torch.as_tensor(ckpt.tensors[f"latent.{k}"], dtype=dtype)
                             for k in mlp.state_dict()})
        model.latent_mlp = mlp
        model.latent_mean = ckpt.tensors["latent_stats.mean"].astype(np.float64)
        model.latent_std = ckpt.tensors["latent_stats.std"].astype(np.float64)
    return model


def _epoch_batches(n: int, batch_size: int, gen: np.random.Generator):
    perm = gen.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _run_stage1(images: np.ndarray, model: GenerativeModel, cfg: TrainConfig,
                distinct: bool, config_hash: str, log_csv, start_epoch: int,
                ema: Ema | None, quiet: bool, stage: str,
                save_path=None) -> Checkpoint:
    data = torch.as_tensor(images, dtype=model.bank.dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    if ema is None:
        ema = Ema(stage1_tensors(model), cfg.ema_decay)
    else:
        ema.decay = cfg.ema_decay
    history: list[float] = list(model.meta.get("loss_tail", []))
    initial = history[0] if history else None
    first_batch_loss = model.meta.get("initial_loss")
    bad_epochs = 0
    hist_before = prototype_cosine_histogram(model.bank) if distinct else None

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.time()
        losses, dlosses = [], []
        # per-epoch stream: a resumed run replays the same draws it would
        # have seen uninterrupted
        gen = stream(cfg.seed, f"train.{stage}.epoch{epoch}")
        for idx in _epoch_batches(data.shape[0], cfg.batch_size, gen):
            batch = data[torch.as_tensor(idx, dtype=torch.long)]
            loss = ddpm_loss(batch, gen, model)
            dl = torch.zeros((), dtype=loss.dtype)
            if distinct and cfg.distinct_weight > 0:
                dl = distinct_loss(model.bank, cfg.distinct_margin)
                loss = loss + cfg.distinct_weight * dl
            opt.zero_grad()
            loss.backward()
            opt.step()
            ema.update(stage1_tensors(model))
            if first_batch_loss is None:
                first_batch_loss = float(loss.detach())  # pre-update loss
            losses.append(float(loss.detach()))
            dlosses.append(float(dl.detach()))
        mean_loss = float(np.mean(losses))
        history.append(mean_loss)
        if initial is None:
            initial = mean_loss
        bad_epochs = bad_epochs + 1 if mean_loss > 10.0 * initial else 0
        if bad_epochs >= 3:
            raise RuntimeError(
                f"divergence: loss {mean_loss:.4g} > 10x initial {initial:.4g} "
                f"for 3 consecutive epochs"
            )
        row = {"epoch": epoch + 1, "loss": f"{mean_loss:.6f}",
               "distinct_loss": f"{float(np.mean(dlosses)):.6f}",
               "seconds": f"{time.time() - t0:.2f}"}
        _append_csv(log_csv, row)
        if save_path is not None:
            to_checkpoint(model, ema, config_hash, stage, epoch + 1, history,
                          extra_meta={"train_cfg": asdict(cfg),
                                      "initial_loss": first_batch_loss}).save(save_path)
        if not quiet:
            print(f"[{stage}] epoch {epoch + 1}/{cfg.epochs} "
                  f"loss {mean_loss:.4f} ({row['seconds']}s)")

    extra = {"train_cfg": asdict(cfg), "initial_loss": first_batch_loss}
    if distinct:
        extra["cosine_hist_before"] = hist_before
        extra["cosine_hist_after"] = prototype_cosine_histogram(model.bank)
    return to_checkpoint(model, ema, config_hash, stage, cfg.epochs, history,
                         extra_meta=extra)


def train_joint(images: np.ndarray, model: GenerativeModel, cfg: TrainConfig,
                config_hash: str = "", log_csv=None, start_epoch: int = 0,
                ema: Ema | None = None, quiet: bool = True,
                save_path=None) -> Checkpoint:
    """Stage 1: optimize encoder + bank + denoiser under the noise loss."""
    return _run_stage1(images, model, cfg, distinct=False, config_hash=config_hash,
                       log_csv=log_csv, start_epoch=start_epoch, ema=ema,
                       quiet=quiet, stage="joint", save_path=save_path)


def ema_from_checkpoint(ckpt: Checkpoint) -> Ema | None:
    """Rebuild EMA shadows stored in a stage-1 checkpoint."""
    shadow = {k[len("ema."):]: torch.as_tensor(v)
              for k, v in ckpt.tensors.items() if k.startswith("ema.")}
    if not shadow:
        return None
    ema = Ema({}, 0.999)
    ema.shadow = shadow
    return ema


def finetune_distinct(ckpt: Checkpoint, images: np.ndarray, cfg: TrainConfig,
                      config_hash: str = "", log_csv=None,
                      quiet: bool = True) -> Checkpoint:
    """Continue stage-1 training from a joint checkpoint with the added
    prototype-distinctness hinge. Margin values 0.5 and 1.0 are both
    supported; weight 0 reduces to plain joint training."""
    model = from_checkpoint(ckpt, which="raw")
    ema = ema_from_checkpoint(ckpt)
    return _run_stage1(images, model, cfg, distinct=True, config_hash=config_hash,
                       log_csv=log_csv, start_epoch=0, ema=ema,
                       quiet=quiet, stage="distinct", save_path=None)


def train_latent(ckpt: Checkpoint, images: np.ndarray, cfg: TrainConfig,
                 config_hash: str = "", log_csv=None, quiet: bool = True) -> Checkpoint:
    """Stage 2: fit the latent diffusion model over activation vectors.

    The encoder (loaded from the stage-1 checkpoint, EMA weights) is
    frozen: the input checkpoint's tensors are carried into the output
    verbatim and only latent tensors are added. Activations are
    standardized per dimension first; the normalization constants land in
    the checkpoint.
    """
    model = from_checkpoint(ckpt, which="ema")
    dtype = model.bank.dtype
    data = torch.as_tensor(images, dtype=dtype)
    with torch.no_grad():
        chunks = [model.activation(data[i:i + 256]) for i in range(0, len(data), 256)]
    s_all = torch.cat(chunks).numpy().astype(np.float64)
    mean = s_all.mean(axis=0)
    std = np.maximum(s_all.std(axis=0), 1e-6)
    normed = torch.as_tensor((s_all - mean) / std, dtype=dtype)

    sched = build_linear_schedule(cfg.latent_T, cfg.latent_beta_start,
                                  cfg.latent_beta_end)
    mlp = LatentMLP(model.m, cfg.latent_hidden).to(dtype)
    init_gen = stream(cfg.seed, "init.latent")
    with torch.no_grad():
        for p in mlp.parameters():
            if p.ndim == 2:
                w = init_gen.standard_normal(tuple(p.shape)) / np.sqrt(p.shape[1])
                p.copy_(torch.as_tensor(w, dtype=dtype))
            else:
                p.zero_()
    opt = torch.optim.Adam(mlp.parameters(), lr=cfg.latent_lr)

    history = []
    initial = None
    first_batch_loss = None
    bad = 0
    for epoch in range(cfg.latent_epochs):
        t0 = time.time()
        losses = []
        gen = stream(cfg.seed, f"train.latent.epoch{epoch}")
        for idx in _epoch_batches(normed.shape[0], cfg.batch_size, gen):
            v0 = normed[torch.as_tensor(idx, dtype=torch.long)]
            t = gen.integers(1, sched.T + 1, size=v0.shape[0])
            eps = torch.as_tensor(gen.standard_normal(tuple(v0.shape)), dtype=dtype)
            vt = q_sample(v0, t, eps, sched)
            loss = torch.mean((eps - mlp(vt, t)) ** 2)
            if not torch.isfinite(loss):
                raise RuntimeError("non-finite latent loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if first_batch_loss is None:
                first_batch_loss = float(loss.detach())
            losses.append(float(loss.detach()))
        mean_loss = float(np.mean(losses))
        history.append(mean_loss)
        if initial is None:
            initial = mean_loss
        bad = bad + 1 if mean_loss > 10.0 * initial else 0
        if bad >= 3:
            raise RuntimeError("divergence in latent training")
        _append_csv(log_csv, {"epoch": epoch + 1, "loss": f"{mean_loss:.6f}",
                              "seconds": f"{time.time() - t0:.2f}"})
        if not quiet and (epoch + 1) % 20 == 0:
            print(f"[latent] epoch {epoch + 1}/{cfg.latent_epochs} loss {mean_loss:.4f}")

    tensors = dict(ckpt.tensors)  # stage-1 weights pass through untouched
    tensors.update({f"latent.{k}": _np_f4(v) for k, v in mlp.state_dict().items()})
    tensors["latent_stats.mean"] = mean.astype("<f8")
    tensors["latent_stats.std"] = std.astype("<f8")
    meta = dict(ckpt.meta)
    meta.update({
        "stage": "latent",
        "latent_hidden": cfg.latent_hidden,
        "latent_schedule": {"T": sched.T, "beta_start": cfg.latent_beta_start,
                            "beta_end": cfg.latent_beta_end},
        "latent_loss_tail": [float(x) for x in history[-50:]],
        "latent_initial_loss": first_batch_loss,
        "latent_train_cfg": asdict(cfg),
    })
    return Checkpoint(config_hash=config_hash or ckpt.config_hash,
                      tensors=tensors, meta=meta)
