"""Datasets: synthetic labeled shapes, IDX ingestion, and pixmap I/O.

The shapes generator renders colored geometric figures with exact
ground-truth attribute labels and supports injecting a controlled
correlation between two attributes (for shortcut-learning experiments).
Images are float32 in [-1, 1], layout (N, C, H, W).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .rng import stream

ATTRIBUTE_GROUPS = {
    "shape": ("square", "circle", "triangle"),
    "color": ("red", "green", "blue"),
    "quadrant": ("tl", "tr", "bl", "br"),
    "size": ("small", "large"),
    "background": ("dark", "light"),
}

_COLORS = {
    "red": (0.9, -0.7, -0.7),
    "green": (-0.7, 0.9, -0.7),
    "blue": (-0.7, -0.7, 0.9),
}
_BG = {"dark": -0.9, "light": -0.1}


class IdxError(ValueError):
    pass


class IdxBadMagic(IdxError):
    pass


class IdxTruncated(IdxError):
    pass


class IdxCountMismatch(IdxError):
    pass


@dataclass(frozen=True)
class AttributeTable:
    """Binary labels aligned with dataset indices.

    ``groups`` records which columns one-hot a multi-valued attribute
    (2-valued groups get a single indicator column).
    """

    names: tuple[str, ...]
    values: np.ndarray  # (N, A) uint8
    groups: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise ValueError("label matrix shape does not match column names")
        if not np.isin(self.values, (0, 1)).all():
            raise ValueError("labels must be binary")

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def group_columns(self, group: str) -> list[str]:
        values = self.groups[group]
        if len(values) == 2:
            return [f"{group}={values[1]}"]
        return [f"{group}={v}" for v in values]

    def group_label(self, group: str) -> np.ndarray:
        """Integer value index per sample for a group."""
        values = self.groups[group]
        if len(values) == 2:
            return self.column(f"{group}={values[1]}").astype(np.int64)
        cols = np.stack([self.column(f"{group}={v}") for v in values], axis=1)
        return cols.argmax(axis=1)

    def subset(self, idx: np.ndarray) -> "AttributeTable":
        return AttributeTable(self.names, self.values[idx], dict(self.groups))


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [-1, 1]
    attrs: AttributeTable
    splits: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.images.shape[0]
        used = np.concatenate([v for v in self.splits.values()]) if self.splits else []
        if self.splits and (len(used) != n or len(np.unique(used)) != n):
            raise ValueError("splits must be disjoint and exhaustive")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def split_images(self, name: str) -> np.ndarray:
        return self.images[self.splits[name]]

    def split_attrs(self, name: str) -> AttributeTable:
        return self.attrs.subset(self.splits[name])


@dataclass(frozen=True)
class ShapesSpec:
    n: int = 2048
    image_size: int = 32
    varying: tuple[str, ...] = ("shape", "color", "quadrant", "size", "background")
    injections: tuple[tuple[str, str, float], ...] = ()
    pinned: tuple[tuple[str, str], ...] = ()  # value for non-varying groups
    jitter: int = 2
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        for g in self.varying:
            if g not in ATTRIBUTE_GROUPS:
                raise ValueError(f"unknown attribute group {g!r}")
        for g, v in self.pinned:
            if g in self.varying:
                raise ValueError(f"cannot pin varying group {g!r}")
            if v not in ATTRIBUTE_GROUPS.get(g, ()):
                raise ValueError(f"unknown value {v!r} for group {g!r}")
        for a, b, rho in self.injections:
            if a not in self.varying or b not in self.varying:
                raise ValueError(f"injection on non-varying attribute ({a}, {b})")
            if not (0.0 <= rho <= 1.0):
                raise ValueError(f"injection strength must be in [0, 1], got {rho}")
            if len(ATTRIBUTE_GROUPS[a]) != len(ATTRIBUTE_GROUPS[b]):
                raise ValueError(
                    f"injection {a}=>{b} unsatisfiable: domains have different sizes"
                )
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def _make_splits(n: int, fractions, seed: int) -> dict[str, np.ndarray]:
    perm = stream(seed, "dataset.split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


def _render_shape(size: int, shape: str, color: str, center, radius: int,
                  bg: str) -> np.ndarray:
    img = np.full((3, size, size), _BG[bg], dtype=np.float32)
    cy, cx = center
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    if shape == "square":
        mask = (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    elif shape == "circle":
        mask = dx ** 2 + dy ** 2 <= radius ** 2
    elif shape == "triangle":
        mask = (dy >= -radius) & (dy <= radius) & (np.abs(dx) <= (dy + radius) / 2.0)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    for ch, val in enumerate(_COLORS[color]):
        img[ch][mask] = val
    return img


def _pair_correlation(a_idx: np.ndarray, b_idx: np.ndarray, mapping: np.ndarray) -> float:
    """Mean Pearson correlation of 1{A=a} with 1{B=mapping[a]} over values a."""
    corrs = []
    for a in range(len(mapping)):
        ia = (a_idx == a).astype(np.float64)
        ib = (b_idx == mapping[a]).astype(np.float64)
        if ia.std() == 0 or ib.std() == 0:
            return 1.0 if np.array_equal(ia, ib) else 0.0
        corrs.append(np.corrcoef(ia, ib)[0, 1])
    return float(np.mean(corrs))


def gen_shapes(spec: ShapesSpec) -> Dataset:
    """Render the dataset; deterministic given the spec (including seed)."""
    gen = stream(spec.seed, "shapes")
    size = spec.image_size
    pinned = dict(spec.pinned)
    value_idx: dict[str, np.ndarray] = {}
    for g, values in ATTRIBUTE_GROUPS.items():
        if g in spec.varying:
            value_idx[g] = gen.integers(0, len(values), spec.n)
        else:
            fixed = values.index(pinned[g]) if g in pinned else 0
            value_idx[g] = np.full(spec.n, fixed, dtype=np.int64)

    recorded_corr = {}
    for a, b, rho in spec.injections:
        k = len(ATTRIBUTE_GROUPS[a])
        mapping = np.arange(k)  # aligned by position: i-th value of A -> i-th of B
        forced = gen.random(spec.n) < rho
        value_idx[b] = np.where(forced, mapping[value_idx[a]], value_idx[b])
        # rewrite until the empirical pair correlation lands near rho
        tol = 0.04
        for _ in range(spec.n * 10):
            corr = _pair_correlation(value_idx[a], value_idx[b], mapping)
            if abs(corr - rho) <= tol:
                break
            i = int(gen.integers(0, spec.n))
            want = mapping[value_idx[a][i]]
            if corr < rho:
                value_idx[b][i] = want
            else:
                others = [v for v in range(k) if v != want]
                value_idx[b][i] = others[int(gen.integers(0, len(others)))]
        else:
            raise ValueError(f"injection {a}=>{b} with rho={rho} not achievable at n={spec.n}")
        recorded_corr[f"{a}=>{b}"] = _pair_correlation(value_idx[a], value_idx[b], mapping)

    quad_centers = {0: (size // 4, size // 4), 1: (size // 4, 3 * size // 4),
                    2: (3 * size // 4, size // 4), 3: (3 * size // 4, 3 * size // 4)}
    radii = {0: int(size * 0.16), 1: int(size * 0.28)}

    images = np.empty((spec.n, 3, size, size), dtype=np.float32)
    for i in range(spec.n):
        cy, cx = quad_centers[int(value_idx["quadrant"][i])]
        if spec.jitter:
            cy += int(gen.integers(-spec.jitter, spec.jitter + 1))
            cx += int(gen.integers(-spec.jitter, spec.jitter + 1))
        images[i] = _render_shape(
            size,
            ATTRIBUTE_GROUPS["shape"][value_idx["shape"][i]],
            ATTRIBUTE_GROUPS["color"][value_idx["color"][i]],
            (cy, cx),
            radii[int(value_idx["size"][i])],
            ATTRIBUTE_GROUPS["background"][value_idx["background"][i]],
        )

    names: list[str] = []
    cols: list[np.ndarray] = []
    groups: dict[str, tuple[str, ...]] = {}
    for g in spec.varying:
        values = ATTRIBUTE_GROUPS[g]
        groups[g] = values
        if len(values) == 2:
            names.append(f"{g}={values[1]}")
            cols.append((value_idx[g] == 1).astype(np.uint8))
        else:
            for v, vname in enumerate(values):
                names.append(f"{g}={vname}")
                cols.append((value_idx[g] == v).astype(np.uint8))

    attrs = AttributeTable(tuple(names), np.stack(cols, axis=1), groups)
    return Dataset(
        images=images,
        attrs=attrs,
        splits=_make_splits(spec.n, spec.split_fractions, spec.seed),
        provenance={"source": "shapes", "spec": repr(spec),
                    "empirical_correlations": recorded_corr},
    )


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IdxTruncated(f"file ended while reading {what} ({len(buf)}/{n} bytes)")
    return buf


def load_idx(images_path, labels_path, seed: int = 0,
             split_fractions=(0.8, 0.1, 0.1)) -> Dataset:
    """Parse big-endian IDX image/label files into a Dataset.

    Pixels map to [-1, 1] via v / 127.5 - 1; labels become one-hot
    ``class=k`` columns.
    """
    with open(images_path, "rb") as f:
        magic, = struct.unpack(">I", _read_exact(f, 4, "image magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxBadMagic(f"bad image magic 0x{magic:08x}")
        n, h, w = struct.unpack(">III", _read_exact(f, 12, "image dims"))
        raw = _read_exact(f, n * h * w, "image payload")
        if f.read(1):
            raise IdxError("trailing bytes after image payload")
    with open(labels_path, "rb") as f:
        magic, = struct.unpack(">I", _read_exact(f, 4, "label magic"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxBadMagic(f"bad label magic 0x{magic:08x}")
        n_lab, = struct.unpack(">I", _read_exact(f, 4, "label count"))
        labels = np.frombuffer(_read_exact(f, n_lab, "label payload"), dtype=np.uint8)
    if n_lab != n:
        raise IdxCountMismatch(f"{n} images but {n_lab} labels")

    images = (np.frombuffer(raw, dtype=np.uint8).astype(np.float32) / 127.5 - 1.0)
    images = images.reshape(n, 1, h, w)
    classes = tuple(str(k) for k in np.unique(labels))
    names = tuple(f"class={c}" for c in classes)
    cols = np.stack([(labels == int(c)).astype(np.uint8) for c in classes], axis=1)
    attrs = AttributeTable(names, cols, {"class": classes})
    return Dataset(images=images, attrs=attrs,
                   splits=_make_splits(n, split_fractions, seed),
                   provenance={"source": "idx", "images": str(images_path),
                               "labels": str(labels_path)})


def _to_bytes(tensor) -> tuple[np.ndarray, int, int, int]:
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected (C, H, W) with C in {{1, 3}}, got {arr.shape}")
    if arr.min() < -1.0 - 1e-6 or arr.max() > 1.0 + 1e-6:
        warnings.warn("pixel values outside [-1, 1] clipped on save", stacklevel=3)
    arr = np.clip(arr, -1.0, 1.0)
    scaled = (arr + 1.0) * 127.5
    b = np.floor(scaled + 0.5).clip(0, 255).astype(np.uint8)  # round half away from zero
    c, h, w = b.shape
    return b, c, h, w


def save_image(tensor, path) -> None:
    """Write a binary pixmap: P6 for 3 channels, P5 for 1, maxval 255."""
    b, c, h, w = _to_bytes(tensor)
    header = (b"P6" if c == 3 else b"P5") + f"\n{w} {h}\n255\n".encode()
    payload = b.transpose(1, 2, 0).tobytes() if c == 3 else b[0].tobytes()
    with open(path, "wb") as f:
        f.write(header + payload)


def load_image(path) -> np.ndarray:
    """Inverse of save_image up to quantization; returns float32 (C, H, W)."""
    with open(path, "rb") as f:
        data = f.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise ValueError("malformed pixmap header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise ValueError("malformed pixmap comment")
            continue
        if ch.isspace():
            pos += 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace after maxval
    magic, w_s, h_s, maxval = tokens
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported pixmap magic {magic!r}")
    if maxval != b"255":
        raise ValueError(f"unsupported maxval {maxval!r}")
    w, h = int(w_s), int(h_s)
    c = 3 if magic == b"P6" else 1
    payload = data[pos:]
    if len(payload) != c * h * w:
        raise ValueError(f"payload size {len(payload)} != expected {c * h * w}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float32)
    if c == 3:
        arr = arr.reshape(h, w, 3).transpose(2, 0, 1)
    else:
        arr = arr.reshape(1, h, w)
    return arr / 127.5 - 1.0


def image_grid(images, n_cols: int, sep: int = 2, sep_value: float = 1.0) -> np.ndarray:
    """Tile (N, C, H, W) into one (C, gH, gW) image with 2-pixel separators."""
    arr = np.asarray(images)
    n, c, h, w = arr.shape
    n_rows = (n + n_cols - 1) // n_cols
    gh = n_rows * h + (n_rows - 1) * sep
    gw = n_cols * w + (n_cols - 1) * sep
    grid = np.full((c, gh, gw), sep_value, dtype=arr.dtype)
    for i in range(n):
        r, col = divmod(i, n_cols)
        y, x = r * (h + sep), col * (w + sep)
        grid[:, y:y + h, x:x + w] = arr[i]
    return grid
