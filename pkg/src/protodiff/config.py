"""Run configuration: strict INI schema, canonical hashing, model builders.

Every experiment is described by one INI file. Unknown sections or keys
are rejected; every value is type-checked before any compute. The config
hash is a SHA-256 over the canonicalized (defaults-filled, sorted)
content, so runs are identifiable by content, not by file path.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field

from .data import ShapesSpec, ATTRIBUTE_GROUPS
from .denoiser import DenoiserConfig
from .protonet import EncoderConfig
from .samplers import SamplerSpec
from .schedule import build_linear_schedule, NoiseSchedule
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _parse_int(v): return int(v)
def _parse_float(v): return float(v)
def _parse_str(v): return v.strip()
def _parse_bool(v):
    s = v.strip().lower()
    if s in ("1", "true", "yes"): return True
    if s in ("0", "false", "no"): return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_ints(v):
    return tuple(int(x) for x in v.split(",") if x.strip()) if v.strip() else ()


def _parse_floats(v):
    return tuple(float(x) for x in v.split(",") if x.strip()) if v.strip() else ()


def _parse_strs(v):
    return tuple(x.strip() for x in v.split(",") if x.strip()) if v.strip() else ()


def _parse_pinned(v):
    """'size:large,background:light' -> (("size", "large"), ...)."""
    out = []
    for part in v.split(","):
        part = part.strip()
        if not part:
            continue
        g, sep, val = part.partition(":")
        if not sep:
            raise ValueError(f"pinned entry must look like 'group:value', got {part!r}")
        out.append((g.strip(), val.strip()))
    return tuple(out)


def _parse_injections(v):
    """'color=>shape:1.0, size=>background:0.5' -> ((a, b, rho), ...)."""
    out = []
    for part in v.split(","):
        part = part.strip()
        if not part:
            continue
        lhs, _, rho = part.partition(":")
        a, arrow, b = lhs.partition("=>")
        if not arrow or not rho:
            raise ValueError(f"injection must look like 'a=>b:rho', got {part!r}")
        out.append((a.strip(), b.strip(), float(rho)))
    return tuple(out)


def _fmt(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            if len(value[0]) == 3:   # injections: (a, b, rho)
                return ",".join(f"{a}=>{b}:{_fmt(r)}" for a, b, r in value)
            return ",".join(f"{g}:{v}" for g, v in value)  # pinned pairs
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (_parse_int, 0),
        "name": (_parse_str, "run"),
    },
    "dataset": {
        "source": (_parse_str, "shapes"),
        "n": (_parse_int, 2048),
        "image_size": (_parse_int, 32),
        "varying": (_parse_strs, ("shape", "color", "quadrant", "size", "background")),
        "injections": (_parse_injections, ()),
        "pinned": (_parse_pinned, ()),
        "jitter": (_parse_int, 2),
        "idx_images": (_parse_str, ""),
        "idx_labels": (_parse_str, ""),
        "split_fractions": (_parse_floats, (0.8, 0.1, 0.1)),
    },
    "model": {
        "m": (_parse_int, 32),
        "depth": (_parse_int, 64),
        "enc_channels": (_parse_ints, (32, 64, 128)),
        "eps_sim": (_parse_float, 1e-4),
        "base": (_parse_int, 64),
        "mults": (_parse_ints, (1, 2)),
        "n_blocks": (_parse_int, 2),
        "emb_dim": (_parse_int, 128),
        "norm_groups": (_parse_int, 8),
    },
    "schedule": {
        "t": (_parse_int, 1000),
        "beta_start": (_parse_float, 1e-4),
        "beta_end": (_parse_float, 0.02),
    },
    "training": {
        "epochs": (_parse_int, 100),
        "batch_size": (_parse_int, 64),
        "lr": (_parse_float, 1e-4),
        "optimizer": (_parse_str, "adam"),
        "ema_decay": (_parse_float, 0.999),
        "distinct_margin": (_parse_float, 0.5),
        "distinct_weight": (_parse_float, 1.0),
        "distinct_epochs": (_parse_int, 20),
    },
    "latent": {
        "epochs": (_parse_int, 300),
        "lr": (_parse_float, 1e-3),
        "hidden": (_parse_int, 256),
        "t": (_parse_int, 200),
        "beta_start": (_parse_float, 1e-3),
        "beta_end": (_parse_float, 0.1),
    },
    "sampler": {
        "kind": (_parse_str, "ddim"),
        "eta": (_parse_float, 0.0),
        "steps": (_parse_int, 100),
    },
    "eval": {
        "capture_threshold": (_parse_float, 0.75),
        "corr_threshold": (_parse_float, 0.9),
        "shortcut_swing": (_parse_float, 0.3),
        "probe_min_auroc": (_parse_float, 0.95),
        "probe_epochs": (_parse_int, 15),
        "probe_lr": (_parse_float, 1e-3),
    },
}


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: tuple[str, str]):
        return self.values[key]

    def get(self, section: str, key: str):
        return self.values[(section, key)]

    @property
    def seed(self) -> int:
        return self.get("run", "seed")

    @property
    def hash(self) -> str:
        lines = [f"{s}.{k}={_fmt(self.values[(s, k)])}"
                 for s in sorted(SCHEMA) for k in sorted(SCHEMA[s])]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:12]

    def canonical_text(self) -> str:
        out = []
        for s in sorted(SCHEMA):
            out.append(f"[{s}]")
            for k in sorted(SCHEMA[s]):
                out.append(f"{k} = {_fmt(self.values[(s, k)])}")
            out.append("")
        return "\n".join(out)

    # -- derived objects ---------------------------------------------------
    def shapes_spec(self) -> ShapesSpec:
        return ShapesSpec(
            n=self.get("dataset", "n"),
            image_size=self.get("dataset", "image_size"),
            varying=self.get("dataset", "varying"),
            injections=self.get("dataset", "injections"),
            pinned=self.get("dataset", "pinned"),
            jitter=self.get("dataset", "jitter"),
            seed=self.seed,
            split_fractions=self.get("dataset", "split_fractions"),
        )

    def encoder_config(self, in_channels: int | None = None) -> EncoderConfig:
        size = self.get("dataset", "image_size")
        chans = self.get("model", "enc_channels") + (self.get("model", "depth"),)
        if in_channels is None:
            in_channels = 1 if self.get("dataset", "source") == "idx" else 3
        return EncoderConfig(in_channels=in_channels, in_size=(size, size),
                             channels=chans)

    def denoiser_config(self, in_channels: int | None = None) -> DenoiserConfig:
        if in_channels is None:
            in_channels = 1 if self.get("dataset", "source") == "idx" else 3
        return DenoiserConfig(
            in_channels=in_channels,
            image_size=self.get("dataset", "image_size"),
            base=self.get("model", "base"),
            mults=self.get("model", "mults"),
            n_blocks=self.get("model", "n_blocks"),
            emb_dim=self.get("model", "emb_dim"),
            cond_dim=self.get("model", "m"),
            norm_groups=self.get("model", "norm_groups"),
        )

    def schedule(self) -> NoiseSchedule:
        return build_linear_schedule(self.get("schedule", "t"),
                                     self.get("schedule", "beta_start"),
                                     self.get("schedule", "beta_end"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.get("training", "epochs"),
            batch_size=self.get("training", "batch_size"),
            lr=self.get("training", "lr"),
            optimizer=self.get("training", "optimizer"),
            seed=self.seed,
            distinct_margin=self.get("training", "distinct_margin"),
            distinct_weight=self.get("training", "distinct_weight"),
            ema_decay=self.get("training", "ema_decay"),
            latent_epochs=self.get("latent", "epochs"),
            latent_lr=self.get("latent", "lr"),
            latent_hidden=self.get("latent", "hidden"),
            latent_T=self.get("latent", "t"),
            latent_beta_start=self.get("latent", "beta_start"),
            latent_beta_end=self.get("latent", "beta_end"),
        )

    def sampler_spec(self) -> SamplerSpec:
        return SamplerSpec(kind=self.get("sampler", "kind"),
                           eta=self.get("sampler", "eta"),
                           n_steps=self.get("sampler", "steps"),
                           seed=self.seed)


def _validate(values: dict) -> None:
    src = values[("dataset", "source")]
    if src not in ("shapes", "idx"):
        raise ConfigError(f"dataset.source must be 'shapes' or 'idx', got {src!r}")
    if src == "idx":
        if not values[("dataset", "idx_images")] or not values[("dataset", "idx_labels")]:
            raise ConfigError("dataset.source=idx requires idx_images and idx_labels")
    for g in values[("dataset", "varying")]:
        if g not in ATTRIBUTE_GROUPS:
            raise ConfigError(f"unknown attribute group {g!r}")
    if values[("sampler", "kind")] not in ("ddim", "ancestral"):
        raise ConfigError("sampler.kind must be 'ddim' or 'ancestral'")
    if values[("sampler", "steps")] < 1:
        raise ConfigError("sampler.steps must be >= 1")
    # constructing derived objects performs their own invariant checks
    cfg = RunConfig(values)
    try:
        if src == "shapes":
            cfg.shapes_spec()
        cfg.encoder_config()
        cfg.denoiser_config()
        cfg.schedule()
        cfg.train_config()
        cfg.sampler_spec()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            parse, _ = SCHEMA[section][key]
            try:
                values[(section, key)] = parse(parser[section][key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}") from exc
    for section, keys in SCHEMA.items():
        for key, (_, default) in keys.items():
            values.setdefault((section, key), default)
    _validate(values)
    return RunConfig(values)


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
