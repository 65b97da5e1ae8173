"""Synthetic echogram sequences, preprocessing, windowing and on-disk datasets.

Row coordinates are 1-based: pixel row ``i`` (0-based array index) sits at
coordinate ``i + 1``, so every boundary label lies in ``[1, H]``.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SEQUENCE_SCHEMA = "tomoseg-sequence"
SEQUENCE_SCHEMA_VERSION = 1
SLICES_FILE = "slices.f32"
LABELS_FILE = "labels.csv"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class GenParams:
    depth: int = 64
    height: int = 64
    width: int = 64
    seed: int = 0
    # base rows as fractions of H, drawn uniformly from each range
    air_range: tuple[float, float] = (0.2, 0.35)
    bed_range: tuple[float, float] = (0.55, 0.8)
    # peak-to-base deviation of each surface, as a fraction of H
    amplitude: float = 0.08
    waves: int = 3
    # sinusoid wavelengths in slices/columns; larger means smoother
    wavelength_range: tuple[float, float] = (40.0, 160.0)
    min_gap: float = 6.0
    air_brightness: float = 1.0
    bed_brightness: float = 0.6
    band_width: float = 1.2
    tail_level: float = 0.35
    tail_length: float = 6.0
    background: float = 0.05
    noise_sigma: float = 0.08
    speckle: float = 0.15
    max_retries: int = 50

    def __post_init__(self):
        for name in ("air_range", "bed_range", "wavelength_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if min(self.depth, self.height, self.width) < 1:
            raise ValueError(f"extents must be positive, got D={self.depth} H={self.height} W={self.width}")
        if self.noise_sigma < 0 or self.speckle < 0:
            raise ValueError("noise levels must be non-negative")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "GenParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TomoSequence:
    """Slices [D, H, W] with boundary rows [K, D, W] (k=0 air, k=1 bed)."""

    slices: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.slices.ndim != 3:
            raise ValueError(f"slices must be [D, H, W], got {self.slices.shape}")
        if self.labels.ndim != 3 or self.labels.shape[1:] != (self.slices.shape[0], self.slices.shape[2]):
            raise ValueError(f"labels {self.labels.shape} do not match slices {self.slices.shape}")

    @property
    def depth(self) -> int:
        return self.slices.shape[0]

    @property
    def height(self) -> int:
        return self.slices.shape[1]

    @property
    def width(self) -> int:
        return self.slices.shape[2]

    @property
    def id(self) -> str:
        return str(self.meta.get("id", "seq"))

    def ordering_valid(self) -> bool:
        return bool(np.all(self.labels[:-1] < self.labels[1:]))


# generation ---------------------------------------------------------------------

def _random_surface(rng: np.random.Generator, p: GenParams, base_range) -> np.ndarray:
    d = np.arange(p.depth)[:, None]
    w = np.arange(p.width)[None, :]
    base = rng.uniform(*base_range) * p.height
    surf = np.zeros((p.depth, p.width))
    weights = rng.dirichlet(np.ones(p.waves)) if p.waves > 0 else []
    for weight in weights:
        lam_d, lam_w = rng.uniform(*p.wavelength_range, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        surf += weight * np.sin(2 * np.pi * (d / lam_d + w / lam_w) + phase)
    return base + p.amplitude * p.height * surf


def _band(rows: np.ndarray, surface: np.ndarray, p: GenParams) -> np.ndarray:
    # rows [H,1,1] against surface [1,D,W]; bright peak at the boundary, decaying tail below
    x = rows - surface[None]
    peak = np.exp(-0.5 * (x / p.band_width) ** 2)
    tail = np.where(x > 0, p.tail_level * np.exp(-np.maximum(x, 0) / p.tail_length), 0.0)
    return np.maximum(peak, tail)


def render(labels: np.ndarray, p: GenParams, rng: np.random.Generator | None = None) -> np.ndarray:
    """Echogram slices [D, H, W] (float32) for boundary rows [2, D, W]."""
    rows = np.arange(1, p.height + 1, dtype=np.float64)[:, None, None]
    img = p.background + p.air_brightness * _band(rows, labels[0], p) + p.bed_brightness * _band(rows, labels[1], p)
    img = img.transpose(1, 0, 2)
    if rng is not None and p.speckle > 0:
        shape = 1.0 / p.speckle ** 2
        img = img * rng.gamma(shape, 1.0 / shape, size=img.shape)
    if rng is not None and p.noise_sigma > 0:
        img = img + rng.normal(0.0, p.noise_sigma, size=img.shape)
    return img.astype(np.float32)


def generate_sequence(params: GenParams, seq_id: str | None = None) -> TomoSequence:
    """Two smooth random surfaces rendered as bright bands plus noise.

    Surfaces that cross (or come closer than ``min_gap`` rows) are redrawn up
    to ``max_retries`` times before giving up.
    """
    rng = np.random.default_rng(params.seed)
    for _ in range(params.max_retries):
        air = _random_surface(rng, params, params.air_range)
        bed = _random_surface(rng, params, params.bed_range)
        labels = np.clip(np.stack([air, bed]), 1.0, float(params.height))
        if np.all(labels[1] - labels[0] >= params.min_gap):
            break
    else:
        raise ValueError(f"could not draw ordered surfaces in {params.max_retries} attempts (seed {params.seed})")
    slices = render(labels, params, rng)
    meta = {"id": seq_id or f"seq{params.seed:05d}", "seed": params.seed, "params": params.to_dict()}
    return TomoSequence(slices, labels, meta)


def flat_sequence(rows: Sequence[float], params: GenParams) -> TomoSequence:
    """Noise-free sequence whose K surfaces are constant rows (fixtures and checks)."""
    labels = np.stack([np.full((params.depth, params.width), float(r)) for r in rows])
    quiet = dataclasses.replace(params, noise_sigma=0.0, speckle=0.0)
    return TomoSequence(render(labels, quiet), labels, {"id": "flat", "seed": params.seed})


# resizing -----------------------------------------------------------------------

def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def bicubic_matrix(n_in: int, n_out: int, a: float = -0.5) -> np.ndarray:
    """[n_out, n_in] resampling weights (pixel-centre alignment, edge clamping)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for j in range(n_out):
        src = (j + 0.5) * scale - 0.5
        base = int(np.floor(src))
        for tap in range(base - 1, base + 3):
            m[j, min(max(tap, 0), n_in - 1)] += _cubic(np.array(src - tap), a)
    return m


def resize_bicubic(image: np.ndarray, height: int = 64, width: int = 64) -> np.ndarray:
    """Catmull-Rom (a = -0.5) bicubic resampling of a 2-D image or a stack [..., H, W]."""
    image = np.asarray(image, dtype=np.float64)
    h0, w0 = image.shape[-2:]
    if min(h0, w0) < 4 or min(height, width) < 1:
        raise ValueError(f"cannot resize {h0}x{w0} to {height}x{width}")
    if (h0, w0) == (height, width):
        return image.copy()
    rows = bicubic_matrix(h0, height)
    cols = bicubic_matrix(w0, width)
    return rows @ image @ cols.T


def rescale_labels(labels: np.ndarray, h_in: int, h_out: int) -> np.ndarray:
    return np.clip(np.asarray(labels, dtype=np.float64) * (h_out / h_in), 1.0, float(h_out))


def resize_sequence(seq: TomoSequence, height: int = 64, width: int = 64) -> TomoSequence:
    """Resize every slice; labels follow the height ratio.

    Width is resampled as well, so labels are also resampled along columns when
    the width changes.
    """
    if (seq.height, seq.width) == (height, width):
        return seq
    slices = resize_bicubic(seq.slices, height, width).astype(np.float32)
    labels = rescale_labels(seq.labels, seq.height, height)
    if seq.width != width:
        cols = bicubic_matrix(seq.width, width)
        labels = np.clip(labels @ cols.T, 1.0, float(height))
    meta = dict(seq.meta, original_height=seq.height, original_width=seq.width)
    return TomoSequence(slices, labels, meta)


# normalization ------------------------------------------------------------------

def normalize_label(g, height: float):
    """Map a row coordinate in [1, H] to [-1, 1] via 2 (g - H/2) / H."""
    g = np.asarray(g, dtype=np.float64)
    if np.any(g < 1) or np.any(g > height):
        raise ValueError(f"label rows must lie in [1, {height}]")
    out = 2.0 * (g - height / 2.0) / height
    return float(out) if out.ndim == 0 else out


def denormalize_label(n, height: float):
    """Inverse of :func:`normalize_label`, clamped to [1, H]."""
    rows = np.clip(np.asarray(n, dtype=np.float64) * height / 2.0 + height / 2.0, 1.0, float(height))
    return float(rows) if rows.ndim == 0 else rows


def scale_pixels(image: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Affine map of [lo, hi] onto [-1, 1]."""
    span = hi - lo if hi > lo else 1.0
    return 2.0 * (np.asarray(image, dtype=np.float64) - lo) / span - 1.0


class PixelNormalizer:
    """Per-sequence min/max scaling to [-1, 1] followed by subtraction of the training mean."""

    def __init__(self, mean: float | None = None):
        self.mean = mean

    def fit(self, sequences: Sequence[TomoSequence]) -> "PixelNormalizer":
        if not sequences:
            raise ValueError("cannot fit pixel statistics on an empty training set")
        total, count = 0.0, 0
        for seq in sequences:
            lo, hi = pixel_range(seq)
            scaled = scale_pixels(seq.slices, lo, hi)
            total += float(scaled.sum())
            count += scaled.size
        self.mean = total / count
        return self

    def normalize(self, image: np.ndarray, lo: float, hi: float) -> np.ndarray:
        if self.mean is None:
            raise RuntimeError("pixel normalizer used before the training mean was computed")
        return scale_pixels(image, lo, hi) - self.mean

    def denormalize(self, image: np.ndarray, lo: float, hi: float) -> np.ndarray:
        if self.mean is None:
            raise RuntimeError("pixel normalizer used before the training mean was computed")
        span = hi - lo if hi > lo else 1.0
        return (np.asarray(image, dtype=np.float64) + self.mean + 1.0) * span / 2.0 + lo

    def normalize_sequence(self, seq: TomoSequence) -> np.ndarray:
        lo, hi = pixel_range(seq)
        return self.normalize(seq.slices, lo, hi)


def pixel_range(seq: TomoSequence) -> tuple[float, float]:
    return float(seq.slices.min()), float(seq.slices.max())


# windows, splits ------------------------------------------------------------------

def window(seq: TomoSequence, length: int = 5) -> list[tuple[np.ndarray, np.ndarray]]:
    """One (window [L, H, W], centre labels [K, W]) pair per slice; edges replicate."""
    if length < 1 or length % 2 == 0:
        raise ValueError(f"window length must be odd, got {length}")
    half = length // 2
    out = []
    for d in range(seq.depth):
        idx = np.clip(np.arange(d - half, d + half + 1), 0, seq.depth - 1)
        out.append((seq.slices[idx], seq.labels[:, d]))
    return out


@dataclass
class WindowSet:
    """Training/eval samples: normalized windows, normalized targets and chain links.

    ``prev[i]`` is the sample index of the preceding slice in the same
    sequence, or -1 for a sequence's first slice.
    """

    windows: np.ndarray  # [M, L, H, W]
    targets: np.ndarray  # [M, K, W], normalized
    sequence: np.ndarray  # [M]
    position: np.ndarray  # [M]
    prev: np.ndarray  # [M]

    def __len__(self) -> int:
        return len(self.windows)

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        remap = np.full(len(self), -1)
        remap[idx] = np.arange(len(idx))
        prev = np.where(self.prev[idx] >= 0, remap[np.maximum(self.prev[idx], 0)], -1)
        return WindowSet(self.windows[idx], self.targets[idx], self.sequence[idx], self.position[idx], prev)

    def crop(self, length: int) -> np.ndarray:
        """Centre sub-windows of an odd ``length`` (edge replication is preserved)."""
        full = self.windows.shape[1]
        if length > full or length % 2 == 0:
            raise ValueError(f"cannot crop windows of length {full} to {length}")
        lo = full // 2 - length // 2
        return self.windows[:, lo:lo + length]


def build_windows(sequences: Sequence[TomoSequence], normalizer: PixelNormalizer,
                  length: int = 5, dtype=np.float32) -> WindowSet:
    wins, targets, seq_ids, pos, prev = [], [], [], [], []
    for s, seq in enumerate(sequences):
        pixels = normalizer.normalize_sequence(seq)
        half = length // 2
        idx = np.clip(np.arange(seq.depth)[:, None] + np.arange(-half, half + 1)[None, :], 0, seq.depth - 1)
        start = sum(len(w) for w in wins)
        wins.append(pixels[idx].astype(dtype))
        targets.append(normalize_label(seq.labels, seq.height).transpose(1, 0, 2))
        seq_ids.append(np.full(seq.depth, s))
        pos.append(np.arange(seq.depth))
        prev.append(np.where(np.arange(seq.depth) > 0, start + np.arange(seq.depth) - 1, -1))
    if not wins:
        raise ValueError("no sequences to window")
    return WindowSet(
        np.concatenate(wins),
        np.concatenate(targets).astype(dtype),
        np.concatenate(seq_ids),
        np.concatenate(pos),
        np.concatenate(prev),
    )


def subdivide(seq: TomoSequence, parts: int) -> list[TomoSequence]:
    """Cut a sequence into ``parts`` contiguous sub-sequences of near-equal depth."""
    parts = max(1, min(parts, seq.depth))
    out = []
    for i, idx in enumerate(np.array_split(np.arange(seq.depth), parts)):
        meta = dict(seq.meta, id=f"{seq.id}-{i:02d}", parent=seq.id, start=int(idx[0]))
        out.append(TomoSequence(seq.slices[idx], seq.labels[:, idx], meta))
    return out


def split_dataset(sequences: Sequence, ratio: float = 0.6, seed: int = 0) -> tuple[list, list]:
    """Random disjoint train/test partition over whole (sub-)sequences."""
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    if len(sequences) < 2:
        raise ValueError("need at least two sub-sequences to split")
    order = np.random.default_rng(seed).permutation(len(sequences))
    n_train = min(max(int(round(ratio * len(sequences))), 1), len(sequences) - 1)
    train = [sequences[i] for i in sorted(order[:n_train])]
    test = [sequences[i] for i in sorted(order[n_train:])]
    return train, test


# dataset IO -----------------------------------------------------------------------

def write_sequence(seq: TomoSequence, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    d, h, w = seq.slices.shape
    seq.slices.astype("<f4").tofile(directory / SLICES_FILE)
    with open(directory / LABELS_FILE, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "d", "w", "row"])
        for k in range(seq.labels.shape[0]):
            for di in range(d):
                for wi in range(w):
                    writer.writerow([k, di, wi, repr(float(seq.labels[k, di, wi]))])
    manifest = {
        "schema": SEQUENCE_SCHEMA,
        "version": SEQUENCE_SCHEMA_VERSION,
        "id": seq.id,
        "depth": d,
        "height": h,
        "width": w,
        "layers": int(seq.labels.shape[0]),
        "slices_file": SLICES_FILE,
        "slices_dtype": "<f4",
        "labels_file": LABELS_FILE,
        "meta": seq.meta,
    }
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2))
    return directory


def read_sequence(directory) -> TomoSequence:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_FILE).read_text())
    if manifest.get("schema") != SEQUENCE_SCHEMA:
        raise ValueError(f"{directory}: not a sequence manifest")
    if manifest.get("version") != SEQUENCE_SCHEMA_VERSION:
        raise ValueError(f"{directory}: unsupported manifest version {manifest.get('version')}")
    d, h, w, k = (int(manifest[key]) for key in ("depth", "height", "width", "layers"))
    raw = np.fromfile(directory / manifest["slices_file"], dtype="<f4")
    if raw.size != d * h * w:
        raise ValueError(f"{directory}: slice file holds {raw.size} values, expected {d * h * w}")
    slices = raw.reshape(d, h, w).astype(np.float32)
    labels = np.full((k, d, w), np.nan)
    with open(directory / manifest["labels_file"], newline="") as fh:
        for rec in csv.DictReader(fh):
            labels[int(rec["k"]), int(rec["d"]), int(rec["w"])] = float(rec["row"])
    if np.isnan(labels).any():
        raise ValueError(f"{directory}: label grid is incomplete")
    return TomoSequence(slices, labels, manifest.get("meta", {"id": manifest["id"]}))


def write_dataset(sequences: Sequence[TomoSequence], root) -> list[Path]:
    root = Path(root)
    return [write_sequence(seq, root / seq.id) for seq in sequences]


def read_dataset(root) -> list[TomoSequence]:
    root = Path(root)
    dirs = sorted(p.parent for p in root.glob(f"*/{MANIFEST_FILE}"))
    if not dirs:
        raise FileNotFoundError(f"no sequences found under {root}")
    return [read_sequence(d) for d in dirs]
