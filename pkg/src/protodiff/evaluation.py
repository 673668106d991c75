"""Quantitative evaluation: latent quality, disentanglement, generation
quality, and the shortcut-learning diagnosis harness.

AUROC is computed as a rank statistic (midranks for ties), identical to
pairwise counting. TAD follows the capture-then-gap recipe: an attribute
counts as captured when some latent dimension's folded AUROC clears the
capture threshold, and contributes the gap between its two most
predictive dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats

from .data import AttributeTable, Dataset
from .model import GenerativeModel
from .probe import Probe, probe_auroc


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    dispersion: float = 0.0
    config_hash: str = ""
    details: dict = field(default_factory=dict)

    def summary(self) -> str:
        return (f"{self.name}: {self.value:.4f} +- {self.dispersion:.4f}"
                f" (config {self.config_hash or 'n/a'})")


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve of ``scores`` against binary ``labels``,
    via the Mann-Whitney rank statistic. Orientation preserved: scores
    aligned with label 0 give values below 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = stats.rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_per_dimension(latents: np.ndarray, attrs: AttributeTable) -> np.ndarray:
    """(attributes x dimensions) matrix of single-dimension AUROCs."""
    latents = np.asarray(latents)
    out = np.full((len(attrs.names), latents.shape[1]), np.nan)
    for a, name in enumerate(attrs.names):
        y = attrs.column(name)
        if y.min() == y.max():
            continue
        for j in range(latents.shape[1]):
            out[a, j] = auroc(latents[:, j], y)
    return out


def latent_auroc(latents: np.ndarray, attrs: AttributeTable, n_folds: int = 5,
                 seed: int = 0, config_hash: str = "") -> MetricReport:
    """Macro AUROC of per-attribute logistic regressions on the activation
    vectors, cross-validated; single-class attributes are skipped with a
    notice in the details."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import StratifiedKFold
    from sklearn.preprocessing import StandardScaler

    latents = np.asarray(latents, dtype=np.float64)
    fold_scores: dict[str, list[float]] = {}
    skipped = []
    for name in attrs.names:
        y = attrs.column(name).astype(np.int64)
        if y.min() == y.max() or min((y == 1).sum(), (y == 0).sum()) < n_folds:
            skipped.append(name)
            continue
        folds = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed)
        scores = []
        for train_idx, test_idx in folds.split(latents, y):
            scaler = StandardScaler().fit(latents[train_idx])
            clf = LogisticRegression(max_iter=500)
            clf.fit(scaler.transform(latents[train_idx]), y[train_idx])
            prob = clf.predict_proba(scaler.transform(latents[test_idx]))[:, 1]
            scores.append(auroc(prob, y[test_idx]))
        fold_scores[name] = scores
    if not fold_scores:
        raise ValueError("no attribute had both classes present")
    matrix = np.array([fold_scores[k] for k in fold_scores])  # (A, folds)
    per_fold_macro = matrix.mean(axis=0)
    return MetricReport(
        name="latent_auroc",
        value=float(per_fold_macro.mean()),
        dispersion=float(per_fold_macro.std()),
        config_hash=config_hash,
        details={"per_attribute": {k: float(np.mean(v)) for k, v in fold_scores.items()},
                 "skipped": skipped, "folds": n_folds},
    )


def _correlation_filter(attrs: AttributeTable, corr_threshold: float) -> list[int]:
    """Indices of attribute columns kept after dropping those highly
    correlated with an earlier kept column."""
    kept: list[int] = []
    vals = attrs.values.astype(np.float64)
    for a in range(vals.shape[1]):
        col = vals[:, a]
        if col.std() == 0:
            continue
        ok = True
        for b in kept:
            r = np.corrcoef(col, vals[:, b])[0, 1]
            if abs(r) > corr_threshold:
                ok = False
                break
        if ok:
            kept.append(a)
    return kept


def tad(latents: np.ndarray, attrs: AttributeTable, capture_threshold: float = 0.75,
        corr_threshold: float = 0.9, config_hash: str = "") -> MetricReport:
    """Total attribute disentanglement: per captured attribute, the gap
    between its two most predictive dimensions (folded AUROC, so
    anti-predictive dimensions count as predictive)."""
    kept = _correlation_filter(attrs, corr_threshold)
    if not kept:
        return MetricReport("tad", 0.0, config_hash=config_hash,
                            details={"captured": 0, "note": "all attributes filtered"})
    sub = AttributeTable(tuple(attrs.names[a] for a in kept),
                         attrs.values[:, kept], dict(attrs.groups))
    per_dim = auroc_per_dimension(latents, sub)
    folded = np.maximum(per_dim, 1.0 - per_dim)
    total = 0.0
    captured = 0
    detail = {}
    for a, name in enumerate(sub.names):
        row = folded[a]
        order = np.argsort(row)[::-1]
        best, second = row[order[0]], row[order[1]]
        is_captured = bool(best > capture_threshold)
        detail[name] = {"best_dim": int(order[0]), "best": float(best),
                        "second": float(second), "captured": is_captured}
        if is_captured:
            captured += 1
            total += float(best - second)
    return MetricReport("tad", total, config_hash=config_hash,
                        details={"captured": captured, "per_attribute": detail,
                                 "kept_columns": [attrs.names[a] for a in kept]})


def _psd_sqrt(mat: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() < -tol * max(abs(vals.max()), 1.0):
        raise ValueError(f"covariance not PSD beyond tolerance (min eig {vals.min():.3g})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mu1: np.ndarray, cov1: np.ndarray,
                     mu2: np.ndarray, cov2: np.ndarray) -> float:
    """||mu1 - mu2||^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2)), with the
    matrix square root taken by eigendecomposition (negative eigenvalues
    of the symmetrized product clipped to 0). The true distance is
    nonnegative; eigensolver noise below that floor is clamped away."""
    root1 = _psd_sqrt(cov1)
    inner = root1 @ cov2 @ root1
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = np.asarray(mu1) - np.asarray(mu2)
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt)
    scale = 1.0 + abs(np.trace(cov1)) + abs(np.trace(cov2))
    if value < -1e-6 * scale:
        raise ValueError(f"Frechet distance came out negative ({value:.3g}); "
                         f"covariance inputs are inconsistent")
    return max(value, 0.0)


def fd_proxy(real_images, generated_images, probe: Probe, min_count: int = 500,
             config_hash: str = "") -> MetricReport:
    """Frechet distance between probe penultimate features of the two sets."""
    real = np.asarray(real_images)
    gen = np.asarray(generated_images)
    if len(real) < min_count or len(gen) < min_count:
        raise ValueError(f"need at least {min_count} images per side, "
                         f"got {len(real)} and {len(gen)}")

    def feats(images: np.ndarray) -> np.ndarray:
        out = []
        with torch.no_grad():
            for i in range(0, len(images), 256):
                x = torch.as_tensor(images[i:i + 256], dtype=torch.float32)
                out.append(probe.features(x).numpy())
        return np.concatenate(out).astype(np.float64)

    fr, fg = feats(real), feats(gen)
    value = frechet_distance(fr.mean(axis=0), np.cov(fr, rowvar=False),
                             fg.mean(axis=0), np.cov(fg, rowvar=False))
    return MetricReport("fd_proxy", value, config_hash=config_hash,
                        details={"n_real": len(real), "n_generated": len(gen),
                                 "feature_dim": fr.shape[1]})


def activations(model: GenerativeModel, images: np.ndarray,
                batch: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = torch.as_tensor(images[i:i + batch], dtype=model.bank.dtype)
            out.append(model.activation(x).numpy())
    return np.concatenate(out)


def shortcut_harness(model: GenerativeModel, confounded: Dataset, probe: Probe,
                     control: Dataset, source_group: str, target_group: str,
                     swing_threshold: float = 0.3, probe_min_auroc: float = 0.95,
                     predictive_threshold: float = 0.75, n_images: int = 16,
                     sweep_points: int = 7, ddim_steps: int = 100,
                     seed: int = 0, config_hash: str = "") -> dict:
    """Diagnose whether editing the prototype most predictive of the source
    attribute drags the (supposedly unrelated) target attribute along.

    The probe must have been trained on unconfounded data; its AUROC on the
    control validation split gates the run. Returns a report dict with the
    identified prototype, the probe response along the sweep, the
    probability swing, and the flag decision.
    """
    from . import interpret

    gate = probe_auroc(probe, control, split="val")
    gate_ok = all(v >= probe_min_auroc for v in gate.values())
    if not gate_ok:
        raise ValueError(f"probe AUROC below {probe_min_auroc} on control data: {gate}")

    train_s = activations(model, confounded.split_images("train"))
    attrs = confounded.split_attrs("train")
    src_cols = attrs.group_columns(source_group)
    per_dim = auroc_per_dimension(
        train_s,
        AttributeTable(tuple(src_cols),
                       np.stack([attrs.column(c) for c in src_cols], axis=1),
                       {source_group: attrs.groups[source_group]}),
    )
    folded = np.maximum(per_dim, 1.0 - per_dim)
    a_star, j_star = np.unravel_index(np.nanargmax(folded), folded.shape)
    best_auroc = float(folded[a_star, j_star])
    report = {
        "source_group": source_group,
        "target_group": target_group,
        "source_column": src_cols[a_star],
        "prototype": int(j_star),
        "prototype_auroc": best_auroc,
        "gate_auroc": gate,
        "config_hash": config_hash,
    }
    if best_auroc <= predictive_threshold:
        report.update({"inconclusive": True, "flagged": False,
                       "note": "no prototype clears the predictive threshold"})
        return report

    # aligned value mapping: i-th source value pairs with i-th target value
    src_values = attrs.groups[source_group]
    tgt_values = attrs.groups[target_group]
    # a 2-valued group has a single indicator column, marking its second value
    value_idx = 1 if len(src_values) == 2 else int(a_star)
    target_value = value_idx % len(tgt_values)
    report["target_value"] = tgt_values[target_value]

    lo, hi = np.quantile(train_s[:, j_star], [0.02, 0.98])
    values = np.linspace(lo, hi, sweep_points)
    test_images = confounded.split_images("test")[:n_images]
    frames = interpret.extrapolate_sweep(
        torch.as_tensor(test_images, dtype=model.bank.dtype), int(j_star),
        list(values), model, n_steps=ddim_steps, allow_out_of_range=True)
    probe_means = []
    for frame in frames:
        p = probe.predict_proba(frame.numpy(), target_group)[:, target_value]
        probe_means.append(float(p.mean()))
    swing = abs(probe_means[-1] - probe_means[0])
    tau, pval = stats.kendalltau(values, probe_means)
    report.update({
        "inconclusive": False,
        "sweep_values": [float(v) for v in values],
        "probe_means": probe_means,
        "swing": float(swing),
        "kendall_tau": float(tau) if np.isfinite(tau) else 0.0,
        "kendall_p": float(pval) if np.isfinite(pval) else 1.0,
        "swing_threshold": swing_threshold,
        "flagged": bool(swing >= swing_threshold),
    })
    return report
