"""End-to-end glue shared by the command line and the acceptance checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .data import PixelNormalizer, TomoSequence, WindowSet, build_windows, resize_sequence, split_dataset, subdivide
from .models import CombinedModel, ModelConfig
from .training import Schedule, fit


@dataclass
class Prepared:
    train: list[TomoSequence]
    test: list[TomoSequence]
    normalizer: PixelNormalizer
    windows: WindowSet


def load_subsequences(sequences: Sequence[TomoSequence], config: ModelConfig,
                      subsequences: int = 10) -> list[TomoSequence]:
    """Resize every sequence to the model's extents and cut it into sub-sequences."""
    resized = [resize_sequence(s, config.height, config.width) for s in sequences]
    return [p for s in resized for p in subdivide(s, subsequences)]


def prepare(sequences: Sequence[TomoSequence], config: ModelConfig, subsequences: int = 10,
            ratio: float = 0.6, seed: int = 0, window: int | None = None) -> Prepared:
    """Resize, cut into sub-sequences, split, fit pixel statistics and window the training part."""
    parts = load_subsequences(sequences, config, subsequences)
    train, test = split_dataset(parts, ratio, seed)
    normalizer = PixelNormalizer().fit(train)
    windows = build_windows(train, normalizer, window or config.window, config.np_dtype)
    return Prepared(train, test, normalizer, windows)


def train_mode(prepared: Prepared, config: ModelConfig, mode: str, schedules: dict[str, Schedule] | None = None,
               batch_size: int = 128, micro_batch: int = 16, seed: int = 0, log_path=None):
    model = CombinedModel(config, mode)
    log = fit(model, prepared.windows, schedules, batch_size, micro_batch, seed, log_path)
    return model, log
