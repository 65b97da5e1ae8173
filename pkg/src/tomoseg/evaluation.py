"""Column-wise error metric and evaluation reports."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import PixelNormalizer, TomoSequence
from .models import CombinedModel, SurfaceGrid, predict_sequence, reconstruct_surfaces

REPORT_SCHEMA = "tomoseg-eval-report"
REPORT_VERSION = 1


def mean_column_error(pred: SurfaceGrid | np.ndarray, truth: SurfaceGrid | np.ndarray) -> np.ndarray:
    """Mean absolute row difference over all (slice, column) cells, one value per surface."""
    p = pred.values if isinstance(pred, SurfaceGrid) else np.asarray(pred, dtype=np.float64)
    t = truth.values if isinstance(truth, SurfaceGrid) else np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"surface shapes differ: {p.shape} vs {t.shape}")
    return np.abs(p - t).mean(axis=(1, 2))


@dataclass
class EvalReport:
    per_layer: list[float]
    # None when scoring stored predictions, where nothing was timed
    seconds_per_sequence: float | None
    sequences: int
    config: dict = field(default_factory=dict)

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.per_layer))

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "per_layer_error": [float(v) for v in self.per_layer],
            "mean_error": self.mean_error,
            "seconds_per_sequence": self.seconds_per_sequence,
            "sequences": self.sequences,
            "config": self.config,
        }

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def read(cls, path) -> "EvalReport":
        with open(path) as fh:
            d = json.load(fh)
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"{path}: not an evaluation report")
        return cls(d["per_layer_error"], d["seconds_per_sequence"], d["sequences"], d.get("config", {}))


def pooled_error(preds: Sequence[SurfaceGrid], truths: Sequence[SurfaceGrid]) -> np.ndarray:
    """Per-layer error pooled over every cell of every sequence."""
    if len(preds) != len(truths) or not preds:
        raise ValueError("need matching, non-empty lists of predicted and true surfaces")
    sums = sum(mean_column_error(p, t) * p.values[0].size for p, t in zip(preds, truths))
    cells = sum(p.values[0].size for p in preds)
    return sums / cells


def predict_surfaces(model: CombinedModel, normalizer: PixelNormalizer,
                     seq: TomoSequence) -> SurfaceGrid:
    grid = reconstruct_surfaces(predict_sequence(model, normalizer.normalize_sequence(seq)), seq.height)
    grid.meta["id"] = seq.id
    return grid


def truth_surfaces(seq: TomoSequence) -> SurfaceGrid:
    return SurfaceGrid(seq.labels, seq.height, {"id": seq.id})


def evaluate(model: CombinedModel, normalizer: PixelNormalizer, sequences: Sequence[TomoSequence],
             config: dict | None = None) -> tuple[EvalReport, list[SurfaceGrid]]:
    """Predict every sequence, timing each full pass, and score against its labels."""
    preds, elapsed = [], []
    for seq in sequences:
        start = time.perf_counter()
        preds.append(predict_surfaces(model, normalizer, seq))
        elapsed.append(time.perf_counter() - start)
    per_layer = pooled_error(preds, [truth_surfaces(s) for s in sequences])
    report = EvalReport([float(v) for v in per_layer], float(np.mean(elapsed)), len(sequences), config or {})
    return report, preds


def midline_error(sequences: Sequence[TomoSequence]) -> np.ndarray:
    """Error of the constant predictor at row H/2."""
    preds = [SurfaceGrid(np.full(s.labels.shape, s.height / 2.0), s.height) for s in sequences]
    return pooled_error(preds, [truth_surfaces(s) for s in sequences])
