"""Interpretation tools: reconstruction, prototype cards, semantic edits,
interpolation, extrapolation sweeps, and emergence tracing.

Every operation treats the model as read-only. Identity-preserving edits
go through deterministic inversion: encode the image's activation vector,
invert to noise space under it, then regenerate under the edited vector.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import GenerativeModel
from .protonet import max_similarity, receptive_field
from .samplers import ddim_generate, ddim_invert, ddpm_sample, estimate_x0, uniform_steps

EXTRAPOLATION_MAX = 3.0


@dataclass(frozen=True)
class PrototypeCard:
    index: int
    image: torch.Tensor          # rendered x' (C, H, W)
    patch_rect: tuple[int, int, int, int]
    achieved_similarity: float   # s_J of x' re-encoded
    cap: float                   # max(s_X) used for the edit
    base_similarity: float


@dataclass
class EmergenceTrace:
    timesteps: list[int]
    scores: np.ndarray                      # (m, K) s of x0_hat at each recorded t
    enhanced_scores: np.ndarray | None = None
    summary: dict = field(default_factory=dict)

    @property
    def deltas(self) -> np.ndarray | None:
        if self.enhanced_scores is None:
            return None
        return self.enhanced_scores - self.scores

    def interval_deltas(self) -> np.ndarray:
        """Consecutive differences along time; telescopes to final - first."""
        return np.diff(self.scores, axis=1)

    def write_csv(self, path, which: str = "scores") -> None:
        mat = {"scores": self.scores, "enhanced": self.enhanced_scores,
               "delta": self.deltas}[which]
        if mat is None:
            raise ValueError(f"trace has no {which!r} data")
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["prototype_index"] + [f"t{t}" for t in self.timesteps])
            for j in range(mat.shape[0]):
                writer.writerow([j] + [f"{v:.6g}" for v in mat[j]])


def lerp(a, b, lam: float):
    return (1.0 - lam) * a + lam * b


def slerp(a: torch.Tensor, b: torch.Tensor, lam: float) -> torch.Tensor:
    """Spherical linear interpolation between flattened vectors.

    Nearly parallel vectors fall back to lerp; antipodal vectors are
    rejected (the great-circle path is ambiguous).
    """
    flat_a = a.reshape(-1).to(torch.float64)
    flat_b = b.reshape(-1).to(torch.float64)
    na, nb = torch.linalg.vector_norm(flat_a), torch.linalg.vector_norm(flat_b)
    if na == 0 or nb == 0:
        raise ValueError("slerp undefined for zero vectors")
    cos = torch.clamp(flat_a @ flat_b / (na * nb), -1.0, 1.0)
    omega = torch.arccos(cos)
    if float(omega) < 1e-6:
        return lerp(a, b, lam)
    if float(np.pi - omega) < 1e-6:
        raise ValueError("slerp undefined for antipodal vectors")
    so = torch.sin(omega)
    out = (torch.sin((1.0 - lam) * omega) * flat_a + torch.sin(lam * omega) * flat_b) / so
    return out.reshape(a.shape).to(a.dtype)


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.ndim == 3 else x


def reconstruct(x0: torch.Tensor, model: GenerativeModel, n_variations: int,
                rng: np.random.Generator, n_steps: int = 100):
    """Semantics + identity: one sample regenerated from the image's own
    inverted noise, plus ``n_variations`` ancestral samples sharing only the
    activation vector. Returns (reconstruction, variations)."""
    x0 = _as_batch(x0)
    steps = uniform_steps(model.sched.T, n_steps)
    with torch.no_grad():
        s = model.activation(x0)
    x_T = ddim_invert(x0, s, model, steps)
    recon = ddim_generate(x_T, s, model, steps)
    variations = [ddpm_sample(s, model, rng, n=x0.shape[0]) for _ in range(n_variations)]
    return recon, variations


def manipulate(x0: torch.Tensor, edits: list[tuple[int, float]],
               model: GenerativeModel, mode: str = "ddim",
               rng: np.random.Generator | None = None,
               n_steps: int = 100) -> torch.Tensor:
    """Regenerate with selected activation entries overridden.

    ddim mode inverts under the original vector and regenerates under the
    edited one (identity-preserving); ancestral mode draws fresh noise.
    """
    x0 = _as_batch(x0)
    s_cap = max(max_similarity(model.eps_sim), EXTRAPOLATION_MAX)
    with torch.no_grad():
        s = model.activation(x0)
    s_new = s.clone()
    for j, value in edits:
        if not (0 <= j < model.m):
            raise ValueError(f"prototype index {j} out of range [0, {model.m})")
        if not (0.0 <= value <= s_cap):
            raise ValueError(f"edited score {value} outside [0, {s_cap:.3f}]")
        s_new[:, j] = value
    if mode == "ddim":
        steps = uniform_steps(model.sched.T, n_steps)
        x_T = ddim_invert(x0, s, model, steps)
        return ddim_generate(x_T, s_new, model, steps)
    if mode == "ancestral":
        if rng is None:
            raise ValueError("ancestral mode requires an rng")
        return ddpm_sample(s_new, model, rng, n=x0.shape[0])
    raise ValueError(f"unknown mode {mode!r}")


def visualize_prototype(index: int, reference_images: torch.Tensor,
                        model: GenerativeModel, base_image: torch.Tensor,
                        n_steps: int = 100) -> PrototypeCard:
    """Render the visual representation of one prototype.

    The base image's activation vector is kept except that the target
    entry is raised to the maximum observed over the reference set; the
    edited vector conditions a deterministic regeneration, and the most
    activated patch of the result is located via the receptive field.
    """
    if not (0 <= index < model.m):
        raise ValueError(f"prototype index {index} out of range [0, {model.m})")
    if reference_images.shape[0] == 0:
        raise ValueError("reference set is empty")
    base = _as_batch(base_image)
    with torch.no_grad():
        ref_s = []
        for i in range(0, reference_images.shape[0], 256):
            ref_s.append(model.activation(reference_images[i:i + 256]))
        cap = float(torch.cat(ref_s)[:, index].max())
        s = model.activation(base)
    base_sim = float(s[0, index])
    s_new = s.clone()
    s_new[:, index] = cap
    steps = uniform_steps(model.sched.T, n_steps)
    x_T = ddim_invert(base, s, model, steps)
    rendered = ddim_generate(x_T, s_new, model, steps)
    with torch.no_grad():
        s_out, locs = model.activation_with_locs(rendered)
    rect = receptive_field(tuple(locs[0, index]), model.encoder.cfg)
    return PrototypeCard(index=index, image=rendered[0], patch_rect=rect,
                         achieved_similarity=float(s_out[0, index]),
                         cap=cap, base_similarity=base_sim)


def interpolate(x0_a: torch.Tensor, x0_b: torch.Tensor, n_frames: int,
                model: GenerativeModel, n_steps: int = 100) -> torch.Tensor:
    """Frames along (Lerp(s_a, s_b), Slerp(xT_a, xT_b)); endpoints are the
    two images' own reconstructions."""
    if n_frames < 2:
        raise ValueError("need at least 2 frames")
    a, b = _as_batch(x0_a), _as_batch(x0_b)
    steps = uniform_steps(model.sched.T, n_steps)
    with torch.no_grad():
        s_a, s_b = model.activation(a), model.activation(b)
    xT_a = ddim_invert(a, s_a, model, steps)
    xT_b = ddim_invert(b, s_b, model, steps)
    frames = []
    for lam in np.linspace(0.0, 1.0, n_frames):
        s_lam = lerp(s_a, s_b, float(lam))
        xT_lam = slerp(xT_a, xT_b, float(lam))
        frames.append(ddim_generate(xT_lam, s_lam, model, steps)[0])
    return torch.stack(frames)


def extrapolate_sweep(x0: torch.Tensor, index: int, values: list[float],
                      model: GenerativeModel, n_steps: int = 100,
                      allow_out_of_range: bool = False) -> list[torch.Tensor]:
    """One regenerated batch per override value, sharing the inverted noise
    so frames differ only through the condition. Values must be sorted and,
    unless overridden, lie within [0, 3]."""
    if list(values) != sorted(values):
        raise ValueError("sweep values must be sorted")
    out_of_range = [v for v in values if not (0.0 <= v <= EXTRAPOLATION_MAX)]
    if out_of_range and not allow_out_of_range:
        raise ValueError(
            f"sweep values {out_of_range} outside [0, {EXTRAPOLATION_MAX}]; "
            f"pass allow_out_of_range=True to proceed"
        )
    if not (0 <= index < model.m):
        raise ValueError(f"prototype index {index} out of range [0, {model.m})")
    x0 = _as_batch(x0)
    steps = uniform_steps(model.sched.T, n_steps)
    with torch.no_grad():
        s = model.activation(x0)
    x_T = ddim_invert(x0, s, model, steps)
    frames = []
    for v in values:
        s_new = s.clone()
        s_new[:, index] = v
        frames.append(ddim_generate(x_T, s_new, model, steps))
    return frames


def trace_emergence(model: GenerativeModel, s: torch.Tensor, x_T: torch.Tensor,
                    record_every: int = 10, s_enhanced: torch.Tensor | None = None,
                    n_steps: int | None = None) -> EmergenceTrace:
    """Record the activation vector of the running clean-image estimate at
    regular timesteps along a deterministic generation; with an enhanced
    condition, run both trajectories from the same noise and record the
    per-timestep difference too."""
    T = model.sched.T
    steps = uniform_steps(T, n_steps or T)
    if s.ndim == 1:
        s = s.unsqueeze(0)
    conds = [s]
    if s_enhanced is not None:
        if s_enhanced.ndim == 1:
            s_enhanced = s_enhanced.unsqueeze(0)
        conds.append(s_enhanced)
    x = torch.cat([_as_batch(x_T)] * len(conds))
    s_all = torch.cat(conds)
    seq = sorted(steps, reverse=True)
    avg_dt = T / (len(seq) - 1)
    stride = max(1, int(round(record_every / avg_dt)))
    timesteps, recorded = [], []
    with torch.no_grad():
        for i, (t, t_prev) in enumerate(zip(seq[:-1], seq[1:])):
            eps_hat = model.predict_noise(x, t, s_all)
            x0_hat = estimate_x0(x, t, eps_hat, model.sched)
            if i % stride == 0 or t_prev == 0:
                timesteps.append(t)
                recorded.append(model.activation(x0_hat.clamp(-1.0, 1.0)))
            abar_p = model.sched.alpha_bar(t_prev)
            x = np.sqrt(abar_p) * x0_hat + np.sqrt(1.0 - abar_p) * eps_hat

    stacked = torch.stack(recorded)  # (K, n_traj, m)
    scores = stacked[:, 0].numpy().T.astype(np.float64)
    enhanced = stacked[:, 1].numpy().T.astype(np.float64) if len(conds) == 2 else None
    trace = EmergenceTrace(timesteps=timesteps, scores=scores,
                           enhanced_scores=enhanced)
    trace.summary = _emergence_summary(trace, T)
    return trace


def _emergence_summary(trace: EmergenceTrace, T: int) -> dict:
    """Earliest recorded step where any prototype's trajectory moves past
    10% of its final change; reported relative to the generation span."""
    if trace.deltas is not None:
        ref = trace.deltas  # enhanced-vs-original gap at each timestep
    else:
        ref = trace.scores - trace.scores[:, :1]  # change since the start
    final = ref[:, -1]
    emerge_t = None
    for k, t in enumerate(trace.timesteps):
        moved = np.abs(ref[:, k]) > 0.1 * np.maximum(np.abs(final), 1e-12)
        if moved.any():
            emerge_t = t
            break
    if emerge_t is None:
        return {"emerged": False}
    frac = (T - emerge_t) / T  # fraction of generation elapsed at emergence
    return {
        "emerged": True,
        "first_emergence_timestep": int(emerge_t),
        "fraction_of_generation_elapsed": float(frac),
        "after_first_20pct": bool(frac > 0.2),
    }
