"""Multi-task C3D, multi-task GRU and the combined surface regressor."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import denormalize_label
from .layers import DEFAULT_HIDDEN, DEFAULT_KERNEL, Conv3d, GruCell, Linear, MaxPool3d, Module, fuse, gru_step, input_gate_terms

MODES = ("rnn", "c2d", "c3d", "c2d+rnn", "c3d+rnn")
_MODE_ALIASES = {"rnn_only": "rnn", "c2d_only": "c2d", "c3d_only": "c3d"}


def canonical_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    return mode


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    num_layers: int = 2
    window: int = 5
    kernel: tuple[int, int, int] = DEFAULT_KERNEL
    shared_channels: tuple[int, ...] = (16, 32)
    branch_channels: tuple[int, ...] = (32, 32, 64, 64, 64, 64)
    hidden_size: int = DEFAULT_HIDDEN
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        for name in ("kernel", "shared_channels", "branch_channels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window length must be a positive odd number, got {self.window}")
        if len(self.shared_channels) != 2 or len(self.branch_channels) != 6:
            raise ValueError("the C3D trunk has exactly 2 shared and 6 branch convolutions")
        if self.height < 4:
            raise ValueError(f"height {self.height} too small for the two shared poolings")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def c2d_variant(config: ModelConfig) -> ModelConfig:
    """Same topology with single-slice input and depth-1 kernels."""
    return dataclasses.replace(config, kernel=(1, *config.kernel[1:]), window=1)


def _branch_pool_plan(height: int) -> tuple[list[bool], int]:
    """Pools after branch convs 2, 4 and 6, skipping any that would drop height below 2."""
    h = height // 4
    plan = []
    for i in range(6):
        pool = i % 2 == 1 and h // 2 >= 2
        plan.append(pool)
        if pool:
            h //= 2
    return plan, h


class _Branch(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        dtype = config.np_dtype
        chans = (config.shared_channels[-1], *config.branch_channels)
        self.convs = [Conv3d(chans[i], chans[i + 1], config.kernel, rng, dtype) for i in range(6)]
        self.pool_after, final_h = _branch_pool_plan(config.height)
        self.flat_features = config.branch_channels[-1] * config.window * final_h * config.width
        self.fc1 = Linear(self.flat_features, config.hidden_size, rng, dtype)
        self.fc2 = Linear(config.hidden_size, config.width, rng, dtype)


class C3dModel(Module):
    """Two shared conv layers feeding K branches of six convs and two dense layers.

    Input windows are [N, L, H, W]; ``forward`` returns normalized row
    predictions [N, K, W] and the penultimate dense activations [N, K, hidden].
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        dtype = config.np_dtype
        self.config = config
        c0, c1 = config.shared_channels
        self.shared = [Conv3d(1, c0, config.kernel, rng, dtype), Conv3d(c0, c1, config.kernel, rng, dtype)]
        self.pool = MaxPool3d()
        self.branches = [_Branch(config, rng) for _ in range(config.num_layers)]

    def forward(self, windows: Tensor) -> tuple[Tensor, Tensor]:
        cfg = self.config
        if windows.ndim != 4 or windows.shape[1:] != (cfg.window, cfg.height, cfg.width):
            raise ValueError(
                f"expected windows [N, {cfg.window}, {cfg.height}, {cfg.width}], got {windows.shape}"
            )
        n = windows.shape[0]
        x = windows.reshape(n, 1, *windows.shape[1:])
        for conv in self.shared:
            x = self.pool(ad.relu(conv(x)))
        preds, feats = [], []
        for branch in self.branches:
            y = x
            for conv, pool in zip(branch.convs, branch.pool_after):
                y = ad.relu(conv(y))
                if pool:
                    y = self.pool(y)
            f = ad.relu(branch.fc1(y.reshape(n, -1)))
            feats.append(f)
            preds.append(branch.fc2(f))
        return ad.stack(preds, axis=1), ad.stack(feats, axis=1)

    __call__ = forward


class RnnModel(Module):
    """K GRU cells iterated over image columns.

    Cell k at column w reads the projected column summed with cell k-1's state
    at the same column, and its own state from column w-1.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(config.seed + 1)
        dtype = config.np_dtype
        self.config = config
        self.column_proj = Linear(config.height, config.hidden_size, rng, dtype)
        self.cells = [GruCell(config.hidden_size, 1, rng, dtype) for _ in range(config.num_layers)]

    def forward(self, slices: Tensor, init_hidden: Tensor) -> tuple[Tensor, Tensor]:
        """slices [N, H, W], init_hidden [N, K, hidden] -> (preds [N, K, W], final hidden [N, K, hidden])."""
        cfg = self.config
        n = slices.shape[0]
        k_count, hid = cfg.num_layers, cfg.hidden_size
        if slices.ndim != 3 or slices.shape[1:] != (cfg.height, cfg.width):
            raise ValueError(f"expected slices [N, {cfg.height}, {cfg.width}], got {slices.shape}")
        if init_hidden.shape != (n, k_count, hid):
            raise ValueError(f"expected initial hidden [{n}, {k_count}, {hid}], got {init_hidden.shape}")
        columns = self.column_proj(slices.transpose(0, 2, 1))
        hidden = [init_hidden[:, k] for k in range(k_count)]
        outputs: list[list[Tensor]] = [[] for _ in range(k_count)]
        if not ad.is_grad_enabled():
            # Without a tape, run one layer at a time so each cell's input-side
            # gate terms for all columns come from a single matrix product.
            above = None
            for k, cell in enumerate(self.cells):
                gates = [g.data for g in input_gate_terms(cell, fuse(columns, above))]
                states = []
                for w in range(slices.shape[2]):
                    step_gates = tuple(Tensor(g[:, w]) for g in gates)
                    hidden[k], s = gru_step(cell, None, hidden[k], input_gates=step_gates)
                    outputs[k].append(s)
                    states.append(hidden[k])
                above = ad.stack(states, axis=1)
        else:
            for w in range(slices.shape[2]):
                col = columns[:, w]
                above = None
                for k, cell in enumerate(self.cells):
                    hidden[k], s = gru_step(cell, fuse(col, above), hidden[k])
                    outputs[k].append(s)
                    above = hidden[k]
        preds = ad.stack([ad.concat(outs, axis=1) for outs in outputs], axis=1)
        return preds, ad.stack(hidden, axis=1)

    __call__ = forward


class CombinedModel(Module):
    """One of the five ablation modes: rnn, c2d, c3d, c2d+rnn, c3d+rnn."""

    def __init__(self, config: ModelConfig, mode: str = "c3d+rnn"):
        self.config = config
        self.mode = canonical_mode(mode)
        self.cnn: C3dModel | None = None
        self.rnn: RnnModel | None = None
        if self.mode.startswith("c3d"):
            self.cnn = C3dModel(config)
        elif self.mode.startswith("c2d"):
            self.cnn = C3dModel(c2d_variant(config))
        if self.mode.endswith("rnn"):
            self.rnn = RnnModel(config)

    @property
    def combined(self) -> bool:
        return self.cnn is not None and self.rnn is not None

    @property
    def window_length(self) -> int:
        return self.cnn.config.window if self.cnn is not None else 1

    def forward(self, windows: Tensor, handoff: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
        """windows [N, L, H, W] -> (preds [N, K, W], final GRU hidden or None).

        ``handoff`` is the previous slice's final GRU state, only meaningful in
        the combined modes.
        """
        if windows.ndim != 4 or windows.shape[1] != self.window_length:
            raise ValueError(
                f"mode {self.mode} expects windows of length {self.window_length}, got shape {windows.shape}"
            )
        if handoff is not None and not self.combined:
            raise ValueError(f"mode {self.mode} takes no cross-slice hidden state")
        if self.rnn is None:
            preds, _ = self.cnn(windows)
            return preds, None
        n = windows.shape[0]
        center = windows[:, self.window_length // 2]
        if self.cnn is None:
            init = Tensor(np.zeros((n, self.config.num_layers, self.config.hidden_size), dtype=windows.dtype))
        else:
            _, init = self.cnn(windows)
            if handoff is not None:
                init = init + handoff
        return self.rnn(center, init)

    __call__ = forward


# single-sample wrappers ----------------------------------------------------------

def c3d_forward(model: C3dModel, window: Tensor) -> tuple[Tensor, Tensor]:
    """One window [1, L, H, W] (or [L, H, W]) -> (predictions [K, W], features [K, hidden])."""
    cfg = model.config
    if window.ndim == 4 and window.shape[0] == 1:
        window = window[0]
    if window.shape != (cfg.window, cfg.height, cfg.width):
        raise ValueError(f"expected a window of {cfg.window} slices of {cfg.height}x{cfg.width}, got {window.shape}")
    preds, feats = model(window.reshape(1, *window.shape))
    return preds[0], feats[0]


def rnn_forward(model: RnnModel, slice_: Tensor, init_hidden: Tensor) -> Tensor:
    """One slice [H, W] with init_hidden [K, hidden] -> predictions [K, W]."""
    preds, _ = model(slice_.reshape(1, *slice_.shape), init_hidden.reshape(1, *init_hidden.shape))
    return preds[0]


def combined_forward(model: CombinedModel, window: Tensor, handoff: Tensor | None = None) -> Tensor:
    """One window [L, H, W] -> predictions [K, W]."""
    if handoff is not None:
        handoff = handoff.reshape(1, *handoff.shape)
    preds, _ = model(window.reshape(1, *window.shape), handoff)
    return preds[0]


def sequence_windows(slices: np.ndarray, length: int) -> np.ndarray:
    """Edge-replicated windows, one per slice: [D, H, W] -> [D, L, H, W]."""
    if length < 1 or length % 2 == 0:
        raise ValueError(f"window length must be odd, got {length}")
    d = slices.shape[0]
    half = length // 2
    idx = np.clip(np.arange(d)[:, None] + np.arange(-half, half + 1)[None, :], 0, d - 1)
    return slices[idx]


def predict_sequence(model: CombinedModel, slices: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Normalized predictions [K, D, W] for every slice of a preprocessed sequence.

    Combined modes run the GRUs slice by slice so each slice starts from the
    previous slice's final state; other modes batch over slices.
    """
    slices = np.asarray(slices, dtype=model.config.np_dtype)
    windows = sequence_windows(slices, model.window_length)
    d = slices.shape[0]
    out = np.empty((d, model.config.num_layers, model.config.width), dtype=np.float64)
    with ad.no_grad():
        if not model.combined:
            for lo in range(0, d, chunk):
                preds, _ = model(Tensor(windows[lo:lo + chunk]))
                out[lo:lo + chunk] = preds.data
        else:
            feats = np.concatenate(
                [model.cnn(Tensor(windows[lo:lo + chunk]))[1].data for lo in range(0, d, chunk)]
            )
            state = np.zeros_like(feats[:1])
            for i in range(d):
                preds, hidden = model.rnn(Tensor(slices[i:i + 1]), Tensor(feats[i:i + 1] + state))
                out[i] = preds.data[0]
                state = hidden.data
    return out.transpose(1, 0, 2)


# surfaces -------------------------------------------------------------------------

def denormalize_rows(values, height: float) -> np.ndarray:
    """Map normalized positions back to row coordinates, clamped to [1, H]."""
    return np.asarray(denormalize_label(values, height), dtype=np.float64)


@dataclass
class SurfaceGrid:
    """K surfaces over (slice, column) holding row coordinates in [1, H]."""

    values: np.ndarray
    height: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"surface values must be [K, D, W], got {self.values.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def ordering_violations(self) -> int:
        """Count of (d, w) where an upper surface lies below the next one."""
        if self.values.shape[0] < 2:
            return 0
        return int(np.sum(self.values[:-1] > self.values[1:]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "d", "w", "row"])
            k_, d_, w_ = self.values.shape
            for k in range(k_):
                for d in range(d_):
                    for w in range(w_):
                        writer.writerow([k, d, w, repr(float(self.values[k, d, w]))])

    @classmethod
    def from_csv(cls, path, height: float, shape: tuple[int, int, int] | None = None) -> "SurfaceGrid":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["k", "d", "w", "row"]:
                raise ValueError(f"{path}: expected header k,d,w,row, got {reader.fieldnames}")
            for rec in reader:
                rows.append((int(rec["k"]), int(rec["d"]), int(rec["w"]), float(rec["row"])))
        if not rows:
            raise ValueError(f"{path}: no surface rows")
        arr = np.array(rows, dtype=np.float64)
        if shape is None:
            shape = tuple(int(arr[:, i].max()) + 1 for i in range(3))
        values = np.full(shape, np.nan)
        values[arr[:, 0].astype(int), arr[:, 1].astype(int), arr[:, 2].astype(int)] = arr[:, 3]
        if np.isnan(values).any():
            raise ValueError(f"{path}: surface grid has missing entries")
        return cls(values, height)


def reconstruct_surfaces(predictions, height: float) -> SurfaceGrid:
    """Assemble per-slice normalized predictions into denormalized surfaces.

    ``predictions`` is either an array [K, D, W], a sequence of D arrays [K, W],
    or a mapping slice index -> [K, W] that must cover 0..D-1.
    """
    if isinstance(predictions, Mapping):
        if not predictions:
            raise ValueError("no slice predictions given")
        d = max(predictions) + 1
        missing = sorted(set(range(d)) - set(predictions))
        if missing:
            raise ValueError(f"missing predictions for slices {missing}")
        predictions = [predictions[i] for i in range(d)]
    if isinstance(predictions, np.ndarray) and predictions.ndim == 3:
        stacked = predictions
    else:
        predictions = list(predictions)
        if not predictions:
            raise ValueError("no slice predictions given")
        missing = [i for i, p in enumerate(predictions) if p is None]
        if missing:
            raise ValueError(f"missing predictions for slices {missing}")
        stacked = np.stack([np.asarray(p.data if isinstance(p, Tensor) else p) for p in predictions], axis=1)
    return SurfaceGrid(denormalize_rows(stacked, height), height)
