"""Command-line surface: training stages, sampling, interpretation tools,
evaluation, and the closed-form property sweep.

Every command takes a config file; outputs land in
``<out-root>/<name>-<confighash>/`` (out-root from --out or the
PROTODIFF_OUT environment variable, default ./runs). Exit codes:
0 success, 1 usage/config error, 2 runtime failure, 3 property
verification failure.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import evaluation, figures, interpret, samplers, training
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig, load_config
from .data import Dataset, ShapesSpec, gen_shapes, image_grid, load_idx, save_image
from .model import build_model
from .oracle import VerificationError, run_prop1_sweep
from .probe import load_probe, probe_auroc, save_probe, train_probe
from .rng import stream


@click.group()
def cli():
    """Prototype-conditioned diffusion: train, sample, interpret, evaluate."""


def _out_root(out: str | None) -> Path:
    return Path(out or os.environ.get("PROTODIFF_OUT", "runs"))


def _run_dir(cfg: RunConfig, out: str | None) -> Path:
    d = _out_root(out) / f"{cfg.get('run', 'name')}-{cfg.hash}"
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.ini").write_text(cfg.canonical_text())
    return d


def _load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.get("dataset", "source") == "idx":
        return load_idx(cfg.get("dataset", "idx_images"),
                        cfg.get("dataset", "idx_labels"),
                        seed=cfg.seed,
                        split_fractions=cfg.get("dataset", "split_fractions"))
    return gen_shapes(cfg.shapes_spec())


def _stage_ckpt(run_dir: Path, stage: str) -> Path:
    return run_dir / f"{stage}.ckpt"


def _latest_ckpt(run_dir: Path) -> Path:
    for stage in ("latent", "distinct", "joint"):
        p = _stage_ckpt(run_dir, stage)
        if p.exists():
            return p
    raise ConfigError(f"no checkpoint found under {run_dir}; run 'train' first")


def _load_model(ckpt_path: Path, which: str = "ema"):
    ckpt = Checkpoint.load(ckpt_path)
    return ckpt, training.from_checkpoint(ckpt, which=which)


def _config_arg(func):
    return click.option("-c", "--config", "config_path", required=True,
                        type=click.Path(exists=True, dir_okay=False),
                        help="Run configuration (INI).")(func)


def _out_arg(func):
    return click.option("--out", default=None,
                        help="Output root (default $PROTODIFF_OUT or ./runs).")(func)


@cli.command()
@_config_arg
@_out_arg
def train(config_path, out):
    """Stage 1: jointly train encoder, prototype bank, and denoiser."""
    cfg = load_config(config_path)
    run_dir = _run_dir(cfg, out)
    ds = _load_dataset(cfg)
    tc = cfg.train_config()
    ckpt_path = _stage_ckpt(run_dir, "joint")
    in_ch = ds.images.shape[1]
    if ckpt_path.exists():
        ckpt, model = _load_model(ckpt_path, which="raw")
        start = ckpt.meta.get("epoch", 0)
        if start >= tc.epochs:
            click.echo(f"joint stage already at epoch {start}; nothing to do")
            return
        ema = training.ema_from_checkpoint(ckpt)
        click.echo(f"resuming joint training at epoch {start}")
    else:
        model = build_model(cfg.encoder_config(in_ch), cfg.denoiser_config(in_ch),
                            cfg.get("model", "m"), cfg.get("model", "eps_sim"),
                            sched=cfg.schedule(), seed=cfg.seed)
        start, ema = 0, None
    out_ckpt = training.train_joint(
        ds.split_images("train"), model, tc, config_hash=cfg.hash,
        log_csv=run_dir / "train_joint.csv", start_epoch=start, ema=ema,
        quiet=False, save_path=ckpt_path)
    out_ckpt.save(ckpt_path)
    figures.plot_loss_curve(out_ckpt.meta["loss_tail"], run_dir / "train_joint.png",
                            title="joint loss (tail)")
    click.echo(f"saved {ckpt_path}")


@cli.command("finetune-distinct")
@_config_arg
@_out_arg
def finetune_distinct_cmd(config_path, out):
    """Optional stage 1b: fine-tune with the prototype-distinctness hinge."""
    cfg = load_config(config_path)
    run_dir = _run_dir(cfg, out)
    joint_path = _stage_ckpt(run_dir, "joint")
    if not joint_path.exists():
        raise ConfigError("finetune-distinct requires a joint checkpoint (run 'train')")
    ds = _load_dataset(cfg)
    tc = cfg.train_config()
    tc = training.TrainConfig(**{**tc.__dict__,
                                 "epochs": cfg.get("training", "distinct_epochs")})
    ckpt = Checkpoint.load(joint_path)
    ckpt.meta["loss_tail"] = []  # epoch counter restarts for this stage
    ckpt.meta["epoch"] = 0
    out_ckpt = training.finetune_distinct(
        ckpt, ds.split_images("train"), tc, config_hash=cfg.hash,
        log_csv=run_dir / "train_distinct.csv", quiet=False)
    out_ckpt.save(_stage_ckpt(run_dir, "distinct"))
    figures.plot_cosine_histograms(out_ckpt.meta["cosine_hist_before"],
                                   out_ckpt.meta["cosine_hist_after"],
                                   run_dir / "distinct_cosine.png")
    click.echo(f"saved {_stage_ckpt(run_dir, 'distinct')}")


@cli.command("train-latent")
@_config_arg
@_out_arg
def train_latent_cmd(config_path, out):
    """Stage 2: train the latent diffusion model over activation vectors."""
    cfg = load_config(config_path)
    run_dir = _run_dir(cfg, out)
    for stage in ("distinct", "joint"):
        base = _stage_ckpt(run_dir, stage)
        if base.exists():
            break
    else:
        raise ConfigError("train-latent requires a joint checkpoint first "
                          "(stage order: train -> [finetune-distinct] -> train-latent)")
    ds = _load_dataset(cfg)
    ckpt = Checkpoint.load(base)
    out_ckpt = training.train_latent(ckpt, ds.split_images("train"),
                                     cfg.train_config(), config_hash=cfg.hash,
                                     log_csv=run_dir / "train_latent.csv", quiet=False)
    out_ckpt.save(_stage_ckpt(run_dir, "latent"))
    figures.plot_loss_curve(out_ckpt.meta["latent_loss_tail"],
                            run_dir / "train_latent.png", title="latent loss (tail)")
    click.echo(f"saved {_stage_ckpt(run_dir, 'latent')}")


@cli.command()
@_config_arg
@_out_arg
@click.option("--count", default=16, show_default=True)
@click.option("--conditional", type=click.Choice(["from-image", "from-latent-model"]),
              default="from-image", show_default=True)
@click.option("--images", "image_paths", multiple=True,
              type=click.Path(exists=True), help="Pixmap files to condition on.")
@click.option("--seed", default=None, type=int, help="Override config seed.")
def sample(config_path, out, count, conditional, image_paths, seed):
    """Generate images; conditions come from given images or from the
    stage-2 latent model."""
    from .data import load_image

    cfg = load_config(config_path)
    run_dir = _run_dir(cfg, out)
    ckpt, model = _load_model(_latest_ckpt(run_dir))
    rng = stream(cfg.seed if seed is None else seed, "cli.sample")
    spec = cfg.sampler_spec()

    if conditional == "from-image":
        if image_paths:
            imgs = np.stack([load_image(p) for p in image_paths])
        else:
            ds = _load_dataset(cfg)
            imgs = ds.split_images("test")[:max(count, 1)]
        x = torch.as_tensor(imgs, dtype=model.bank.dtype)
        with torch.no_grad():
            s = model.activation(x)
        s = s[np.arange(count) % s.shape[0]]
    else:
        s = torch.as_tensor(samplers.latent_sample(model, rng, n=count),
                            dtype=model.bank.dtype)

    if spec.kind == "ancestral":
        out_imgs = samplers.ddpm_sample(s, model, rng, n=count)
    else:
        shape = (count, model.unet.cfg.in_channels, model.unet.cfg.image_size,
                 model.unet.cfg.image_size)
        x_T = torch.as_tensor(rng.standard_normal(shape), dtype=model.bank.dtype)
        steps = samplers.uniform_steps(model.sched.T, spec.n_steps)
        out_imgs = samplers.ddim_generate(x_T, s, model, steps, eta=spec.eta, rng=rng)

    sample_dir = run_dir / "samples"
    sample_dir.mkdir(exist_ok=True)
    for i in range(count):
        save_image(out_imgs[i].numpy(), sample_dir / f"sample_{i:03d}.ppm")
    n_cols = int(np.ceil(np.sqrt(count)))
    save_image(image_grid(out_imgs.numpy(), n_cols), sample_dir / "grid.ppm")
    click.echo(f"wrote {count} samples to {sample_dir}")


def _mark_rect(image: np.ndarray, rect) -> np.ndarray:
    """Copy with a 1-px highlight border around (top, left, h, w)."""
    out = image.copy()
    top, left, h, w = rect
    color = np.array([1.0, -1.0, -1.0]) if out.shape[0] == 3 else np.array([1.0])
    b, r = min(top + h, out.shape[1]) - 1, min(left + w, out.shape[2]) - 1
    out[:, top, left:r + 1] = color[:, None]
    out[:, b, left:r + 1] = color[:, None]
    out[:, top:b + 1, left] = color[:, None]
    out[:, top:b + 1, r] = color[:, None]
    return out


@cli.command()
@_config_arg
@_out_arg
@click.option("--prototype", "-j", required=True, type=int)
@click.option("--base-index", default=0, show_default=True,
              help="Training image used as the base sample.")
@click.option("--ref-size", default=1000, show_default=True,
              help="Reference subset size for the score cap.")
def visualize(config_path, out, prototype, base_index, ref_size):
    """Render one prototype's visual representation card."""
    cfg = load_config(config_path)
    run_dir = _run_dir(cfg, out)
    _, model = _load_model(_latest_ckpt(run_dir))
    if not (0 <= prototype < model.m):
        raise ConfigError(f"prototype index {prototype} out of range [0, {model.m})")
    ds = _load_dataset(cfg)
    train = ds.split_images("train")
    ref_idx = stream(cfg.seed, "cli.visualize.ref").choice(
        len(train), size=min(ref_size, len(train)), replace=False)
    base = torch.as_tensor(train[base_index % len(train)], dtype=model.bank.dtype)
    card = interpret.visualize_prototype(
        prototype, torch.as_tensor(train[ref_idx], dtype=model.bank.dtype),
        model, base, n_steps=cfg.sampler_spec().n_steps)
    vis_dir = run_dir / "interpret"
    vis_dir.mkdir(exist_ok=True)
    img = card.image.numpy()
    save_image(_mark_rect(img, card.patch_rect), vis_dir / f"proto_{prototype:03d}.ppm")
    top, left, h, w = card.patch_rect
    save_image(img[:, top:top + h, left:left + w],
               vis_dir / f"proto_{prototype:03d}_patch.ppm")
    (vis_dir / f"proto_{prototype:03d}.json").write_text(json.dumps({
        "prototype": card.index, "patch_rect": list(card.patch_rect),
        "achieved_similarity": card.achieved_similarity, "cap": card.cap,
        "base_similarity": card.base_similarity}, indent=2))
    click.echo(f"card for prototype {prototype}: rect {card.patch_rect}, "
               f"s {card.base_similarity:.3f} -> {card.achieved_similarity:.3f} "
               f"(cap {card.cap:.3f})")


@cli.command()
@_config_arg
@_out_arg
@click.option("--edits", required=True,
              help="Comma-separated J:value pairs, e.g. '3:2.5,7:0.1'.")
@click.option("--index", default=0, show_default=True, help="Test image index.")
@click.option("--mode", type=click.Choice(["ddim", "ancestral"]), default="ddim",
              show_default=True)
def manipulate(config_path, out, edits, index, mode):
    """Regenerate an image with edited activation entries."""
    cfg = load_config(config_path)
    run_dir = _run_dir(cfg, out)
    _, model = _load_model(_latest_ckpt(run_dir))
    try:
        parsed = [(int(p.split(":")[0]), float(p.split(":")[1]))
                  for p in edits.split(",") if p.strip()]
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"cannot parse --edits {edits!r}: {exc}") from exc
    ds = _load_dataset(cfg)
    x0 = torch.as_tensor(ds.split_images("test")[index], dtype=model.bank.dtype)
    try:
        result = interpret.manipulate(x0, parsed, model, mode=mode,
                                      rng=stream(cfg.seed, "cli.manipulate"),
                                      n_steps=cfg.sampler_spec().n_steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    vis_dir = run_dir / "interpret"
    vis_dir.mkdir(exist_ok=True)
    save_image(x0.numpy(), vis_dir / "manipulate_original.ppm")
    save_image(result[0].numpy(), vis_dir / "manipulate_edited.ppm")
    click.echo(f"wrote edit result to {vis_dir}")


@cli.command()
@_config_arg
@_out_arg
@click.option("--index-a", default=0, show_default=True)
@click.option("--index-b", default=1, show_default=True)
@click.option("--frames", default=8, show_default=True)
def interpolate(config_path, out, index_a, index_b, frames):
    """Interpolate two test images: linear in s, spherical in noise."""
    cfg = load_config(config_path)
    run_dir = _run_dir(cfg, out)
    _, model = _load_model(_latest_ckpt(run_dir))
    ds = _load_dataset(cfg)
    test = ds.split_images("test")
    seq = interpret.interpolate(
        torch.as_tensor(test[index_a], dtype=model.bank.dtype),
        torch.as_tensor(test[index_b], dtype=model.bank.dtype),
        frames, model, n_steps=cfg.sampler_spec().n_steps)
    vis_dir = run_dir / "interpret"
    vis_dir.mkdir(exist_ok=True)
    save_image(image_grid(seq.numpy(), n_cols=len(seq)),
               vis_dir / "interpolation.ppm")
    click.echo(f"wrote {frames}-frame interpolation to {vis_dir}")


@cli.command()
@_config_arg
@_out_arg
@click.option("--prototype", "-j", required=True, type=int)
@click.option("--values", default="0.0,0.5,1.0,1.5,2.0,2.5,3.0", show_default=True)
@click.option("--index", default=0, show_default=True)
@click.option("--allow-out-of-range", is_flag=True,
              help="Permit values outside [0, 3] with a warning.")
def extrapolate(config_path, out, prototype, values, index, allow_out_of_range):
    """Sweep one activation entry across extreme values."""
    cfg = load_config(config_path)
    run_dir = _run_dir(cfg, out)
    _, model = _load_model(_latest_ckpt(run_dir))
    vals = sorted(float(v) for v in values.split(","))
    ds = _load_dataset(cfg)
    x0 = torch.as_tensor(ds.split_images("test")[index], dtype=model.bank.dtype)
    try:
        frames = interpret.extrapolate_sweep(x0, prototype, vals, model,
                                             n_steps=cfg.sampler_spec().n_steps,
                                             allow_out_of_range=allow_out_of_range)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    vis_dir = run_dir / "interpret"
    vis_dir.mkdir(exist_ok=True)
    strip = np.stack([f[0].numpy() for f in frames])
    save_image(image_grid(strip, n_cols=len(frames)),
               vis_dir / f"extrapolate_p{prototype:03d}.ppm")
    click.echo(f"wrote sweep over {vals} to {vis_dir}")


@cli.command()
@_config_arg
@_out_arg
@click.option("--index", default=0, show_default=True,
              help="Test image whose activation vector seeds the trace.")
@click.option("--prototype", "-j", default=None, type=int,
              help="If set, also trace with this prototype enhanced to its cap.")
@click.option("--record-every", default=10, show_default=True)
@click.option("--dump-frames", is_flag=True, help="Write recorded x0 estimates as pixmaps.")
def trace(config_path, out, index, prototype, record_every, dump_frames):
    """Trace when prototypes emerge along a deterministic generation."""
    cfg = load_config(config_path)
    run_dir = _run_dir(cfg, out)
    _, model = _load_model(_latest_ckpt(run_dir))
    ds = _load_dataset(cfg)
    x0 = torch.as_tensor(ds.split_images("test")[index:index + 1],
                         dtype=model.bank.dtype)
    with torch.no_grad():
        s = model.activation(x0)
    s_enh = None
    if prototype is not None:
        if not (0 <= prototype < model.m):
            raise ConfigError(f"prototype index {prototype} out of range")
        train_s = evaluation.activations(model, ds.split_images("train"))
        s_enh = s.clone()
        s_enh[:, prototype] = float(train_s[:, prototype].max())
    shape = (1, model.unet.cfg.in_channels, model.unet.cfg.image_size,
             model.unet.cfg.image_size)
    x_T = torch.as_tensor(stream(cfg.seed, "cli.trace").standard_normal(shape),
                          dtype=model.bank.dtype)
    tr = interpret.trace_emergence(model, s, x_T, record_every=record_every,
                                   s_enhanced=s_enh,
                                   n_steps=cfg.sampler_spec().n_steps)
    trace_dir = run_dir / "trace"
    trace_dir.mkdir(exist_ok=True)
    tr.write_csv(trace_dir / "trace_scores.csv", which="scores")
    if s_enh is not None:
        tr.write_csv(trace_dir / "trace_delta.csv", which="delta")
    figures.plot_emergence(tr, trace_dir / "trace.png")
    (trace_dir / "summary.json").write_text(json.dumps(tr.summary, indent=2))
    click.echo(f"trace summary: {tr.summary}")


def _ensure_probe(run_dir: Path, control: Dataset, cfg: RunConfig):
    probe_path = run_dir / "probe.ckpt"
    if probe_path.exists():
        return load_probe(probe_path)
    probe = train_probe(control, epochs=cfg.get("eval", "probe_epochs"),
                        lr=cfg.get("eval", "probe_lr"), seed=cfg.seed)
    save_probe(probe, probe_path, config_hash=cfg.hash)
    return probe


def _control_dataset(cfg: RunConfig) -> Dataset:
    spec = cfg.shapes_spec()
    return gen_shapes(ShapesSpec(**{**spec.__dict__, "injections": ()}))


@cli.command("eval")
@_config_arg
@_out_arg
@click.option("--which", type=click.Choice(["auroc", "tad", "fd", "shortcut", "all"]),
              default="all", show_default=True)
def eval_cmd(config_path, out, which):
    """Quantitative evaluation; writes CSV + figure + text summary."""
    cfg = load_config(config_path)
    run_dir = _run_dir(cfg, out)
    ckpt, model = _load_model(_latest_ckpt(run_dir))
    ds = _load_dataset(cfg)
    eval_dir = run_dir / "eval"
    eval_dir.mkdir(exist_ok=True)
    reports = []
    wanted = ("auroc", "tad", "fd", "shortcut") if which == "all" else (which,)

    if "auroc" in wanted or "tad" in wanted:
        latents = evaluation.activations(model, ds.split_images("test"))
        attrs = ds.split_attrs("test")
        if "auroc" in wanted:
            reports.append(evaluation.latent_auroc(latents, attrs, seed=cfg.seed,
                                                   config_hash=cfg.hash))
        if "tad" in wanted:
            reports.append(evaluation.tad(
                latents, attrs,
                capture_threshold=cfg.get("eval", "capture_threshold"),
                corr_threshold=cfg.get("eval", "corr_threshold"),
                config_hash=cfg.hash))

    if "fd" in wanted:
        if cfg.get("dataset", "source") != "shapes":
            raise ConfigError("fd evaluation needs the synthetic dataset for its probe")
        probe = _ensure_probe(run_dir, _control_dataset(cfg), cfg)
        n_gen = max(500, min(1000, ds.n // 2))
        rng = stream(cfg.seed, "cli.eval.fd")
        train_imgs = ds.split_images("train")
        idx = rng.choice(len(train_imgs), size=n_gen, replace=len(train_imgs) < n_gen)
        with torch.no_grad():
            s = model.activation(torch.as_tensor(train_imgs[idx],
                                                 dtype=model.bank.dtype))
        steps = samplers.uniform_steps(model.sched.T, cfg.sampler_spec().n_steps)
        gen_list = []
        for i in range(0, n_gen, 64):
            batch_s = s[i:i + 64]
            shape = (batch_s.shape[0], model.unet.cfg.in_channels,
                     model.unet.cfg.image_size, model.unet.cfg.image_size)
            x_T = torch.as_tensor(rng.standard_normal(shape), dtype=model.bank.dtype)
            gen_list.append(samplers.ddim_generate(x_T, batch_s, model, steps).numpy())
        gen_imgs = np.concatenate(gen_list)
        real_idx = rng.choice(len(train_imgs), size=n_gen,
                              replace=len(train_imgs) < n_gen)
        reports.append(evaluation.fd_proxy(train_imgs[real_idx], gen_imgs, probe,
                                           config_hash=cfg.hash))

    shortcut_report = None
    if "shortcut" in wanted:
        injections = cfg.get("dataset", "injections")
        if not injections:
            raise ConfigError("shortcut evaluation needs dataset.injections in config")
        a, b, _rho = injections[0]
        control = _control_dataset(cfg)
        probe = _ensure_probe(run_dir, control, cfg)
        shortcut_report = evaluation.shortcut_harness(
            model, ds, probe, control, a, b,
            swing_threshold=cfg.get("eval", "shortcut_swing"),
            probe_min_auroc=cfg.get("eval", "probe_min_auroc"),
            ddim_steps=cfg.sampler_spec().n_steps,
            seed=cfg.seed, config_hash=cfg.hash)
        (eval_dir / "shortcut.json").write_text(json.dumps(shortcut_report, indent=2))
        if not shortcut_report.get("inconclusive", True):
            figures.plot_sweep_response(
                shortcut_report["sweep_values"], shortcut_report["probe_means"],
                eval_dir / "shortcut_sweep.png", source=a, target=b,
                threshold=shortcut_report["swing_threshold"])
        reports.append(evaluation.MetricReport(
            "shortcut_swing", shortcut_report.get("swing", 0.0),
            config_hash=cfg.hash,
            details={"flagged": shortcut_report.get("flagged", False)}))

    with open(eval_dir / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value", "dispersion", "config_hash"])
        for r in reports:
            writer.writerow([r.name, f"{r.value:.6f}", f"{r.dispersion:.6f}",
                             r.config_hash])
    if reports:
        figures.plot_metric_bars(reports, eval_dir / "metrics.png")
    lines = [r.summary() for r in reports]
    if shortcut_report is not None:
        lines.append(f"shortcut: {json.dumps(shortcut_report)}")
    (eval_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        click.echo(line)


@cli.command("verify-prop1")
@click.option("--trials", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
def verify_prop1_cmd(trials, seed):
    """Randomized sweep of the ELBO/likelihood/KL progress property."""
    report = run_prop1_sweep(trials, stream(seed, "cli.verify"))
    click.echo(f"PASS: {report['trials']} trials, "
               f"max identity error {report['max_identity_abs_err']:.3e}, "
               f"KL decreased in {report['n_kl_decreased']}, "
               f"likelihood increased in {report['n_loglik_increased']}")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except (ConfigError, click.UsageError) as exc:
        click.echo(f"config/usage error: {exc}", err=True)
        return 1
    except click.exceptions.Exit as exc:  # --help and friends
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    except VerificationError as exc:
        click.echo(f"FAIL: property verification: {exc}", err=True)
        return 3
    except (CheckpointError, OSError, RuntimeError, ValueError) as exc:
        click.echo(f"runtime failure: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
