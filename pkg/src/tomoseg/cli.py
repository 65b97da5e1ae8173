"""Command-line entry points: generate, train, predict, eval and ablate.

Every command reads one JSON run configuration::

    {
      "seed": 0,
      "mode": "c3d+rnn",
      "data": {"num_sequences": 4, "subsequences": 10, "split_ratio": 0.6,
               "generator": {...}},
      "model": {...},
      "train": {"batch_size": 128, "micro_batch": 16,
                "schedules": {"c3d": {...}, "rnn": {...}}},
      "paths": {"out": "run", "data": null, "checkpoint": null, "predictions": null}
    }

All sections are optional.  ``--seed``, ``--mode`` and ``--out`` override the
matching fields.  Unset paths default to locations under the output
directory (``data/``, ``model.ckpt``, ``predictions/``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .data import GenParams, PixelNormalizer, TomoSequence, generate_sequence, read_dataset, write_dataset
from .evaluation import EvalReport, evaluate, pooled_error, truth_surfaces
from .models import MODES, CombinedModel, ModelConfig, SurfaceGrid, canonical_mode
from .pipeline import load_subsequences, prepare
from .training import Schedule, fit, read_loss_log

logger = logging.getLogger("tomoseg")

CONFIG_SECTIONS = {"seed", "mode", "data", "model", "train", "paths"}
DATA_KEYS = {"num_sequences", "subsequences", "split_ratio", "generator"}
TRAIN_KEYS = {"batch_size", "micro_batch", "schedules"}
PATH_KEYS = {"out", "data", "checkpoint", "predictions"}


class ConfigError(ValueError):
    """Raised for missing, malformed or inconsistent run configurations."""


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "c3d+rnn"
    num_sequences: int = 4
    subsequences: int = 10
    split_ratio: float = 0.6
    generator: GenParams = field(default_factory=GenParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 128
    micro_batch: int = 16
    schedules: dict = field(default_factory=lambda: {"c3d": Schedule.c3d_default(), "rnn": Schedule.rnn_default()})
    out: Path = Path("run")
    data_dir: Path | None = None
    checkpoint: Path | None = None
    predictions: Path | None = None

    @property
    def data_path(self) -> Path:
        return self.data_dir or self.out / "data"

    @property
    def checkpoint_path(self) -> Path:
        return self.checkpoint or self.out / "model.ckpt"

    @property
    def predictions_path(self) -> Path:
        return self.predictions or self.out / "predictions"

    def echo(self) -> dict:
        return {
            "seed": self.seed,
            "mode": self.mode,
            "data": {"num_sequences": self.num_sequences, "subsequences": self.subsequences,
                     "split_ratio": self.split_ratio, "generator": self.generator.to_dict()},
            "model": self.model.to_dict(),
            "train": {"batch_size": self.batch_size, "micro_batch": self.micro_batch,
                      "schedules": {k: s.to_dict() for k, s in self.schedules.items()}},
        }


def _section(raw: dict, name: str, allowed: set[str]) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(value) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return value


def _schedule(phase: str, overrides: dict | None) -> Schedule:
    default = Schedule.c3d_default() if phase == "c3d" else Schedule.rnn_default()
    if overrides is None:
        return default
    if not isinstance(overrides, dict):
        raise ConfigError(f"schedule {phase!r} must be an object")
    merged = {**default.to_dict(), **overrides, "phase": phase}
    return Schedule(**merged)


def load_config(path, seed: int | None = None, mode: str | None = None, out=None) -> RunConfig:
    """Parse and validate a run configuration; flags override file values."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - CONFIG_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    data = _section(raw, "data", DATA_KEYS)
    train = _section(raw, "train", TRAIN_KEYS)
    paths = _section(raw, "paths", PATH_KEYS)
    model = _section(raw, "model", {f.name for f in dataclasses.fields(ModelConfig)})
    try:
        run_seed = int(raw.get("seed", 0) if seed is None else seed)
        schedules = train.get("schedules", {}) or {}
        if not isinstance(schedules, dict) or set(schedules) - {"c3d", "rnn"}:
            raise ConfigError("train.schedules may only hold 'c3d' and 'rnn' entries")
        cfg = RunConfig(
            seed=run_seed,
            mode=canonical_mode(mode or raw.get("mode", "c3d+rnn")),
            num_sequences=int(data.get("num_sequences", 4)),
            subsequences=int(data.get("subsequences", 10)),
            split_ratio=float(data.get("split_ratio", 0.6)),
            generator=GenParams.from_dict(data.get("generator", {})),
            model=ModelConfig.from_dict({"seed": run_seed, **model}),
            batch_size=int(train.get("batch_size", 128)),
            micro_batch=int(train.get("micro_batch", 16)),
            schedules={p: _schedule(p, schedules.get(p)) for p in ("c3d", "rnn")},
            out=Path(out or paths.get("out") or "run"),
            data_dir=Path(paths["data"]) if paths.get("data") else None,
            checkpoint=Path(paths["checkpoint"]) if paths.get("checkpoint") else None,
            predictions=Path(paths["predictions"]) if paths.get("predictions") else None,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    if cfg.num_sequences < 1 or cfg.subsequences < 1:
        raise ConfigError("num_sequences and subsequences must be positive")
    if cfg.batch_size < 1 or cfg.micro_batch < 1:
        raise ConfigError("batch_size and micro_batch must be positive")
    return cfg


# commands -------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> Path:
    """Sequence ``i`` is drawn with generator seed ``seed * 1000 + i``."""
    seqs = [
        generate_sequence(dataclasses.replace(cfg.generator, seed=cfg.seed * 1000 + i), f"seq{i:03d}")
        for i in range(cfg.num_sequences)
    ]
    root = cfg.data_path
    write_dataset(seqs, root)
    back = read_dataset(root)
    if len(back) != len(seqs):
        raise RuntimeError(f"wrote {len(seqs)} sequences but read back {len(back)}")
    print(f"wrote {len(seqs)} sequences to {root}")
    return root


def _train_one(cfg: RunConfig, mode: str, out: Path) -> tuple[CombinedModel, dict]:
    prepared = prepare(read_dataset(cfg.data_path), cfg.model, cfg.subsequences, cfg.split_ratio, cfg.seed)
    model = CombinedModel(cfg.model, mode)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.jsonl"
    log_path.write_text("")
    log = fit(model, prepared.windows, cfg.schedules, cfg.batch_size, cfg.micro_batch, cfg.seed, log_path)
    extra = {
        "pixel_mean": prepared.normalizer.mean,
        "train_ids": [s.id for s in prepared.train],
        "test_ids": [s.id for s in prepared.test],
        "run": cfg.echo() | {"mode": mode},
    }
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, model, extra)
    if len(read_loss_log(log_path)) != len(log):
        raise RuntimeError(f"loss log {log_path} does not parse back")
    load_checkpoint(ckpt)
    return model, extra


def cmd_train(cfg: RunConfig) -> Path:
    _train_one(cfg, cfg.mode, cfg.out)
    ckpt = cfg.out / "model.ckpt"
    print(f"wrote {ckpt} and {cfg.out / 'loss_log.jsonl'}")
    return ckpt


def _load_model(cfg: RunConfig) -> tuple[CombinedModel, dict]:
    path = cfg.checkpoint_path
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model = CombinedModel(cfg.model, cfg.mode)
    extra = load_into(model, path)
    return model, extra


def _test_sequences(cfg: RunConfig, extra: dict) -> list[TomoSequence]:
    parts = {s.id: s for s in load_subsequences(read_dataset(cfg.data_path), cfg.model, cfg.subsequences)}
    missing = [i for i in extra["test_ids"] if i not in parts]
    if missing:
        raise ValueError(f"test sub-sequences {missing} are not in {cfg.data_path}")
    return [parts[i] for i in extra["test_ids"]]


def cmd_predict(cfg: RunConfig) -> Path:
    model, extra = _load_model(cfg)
    normalizer = PixelNormalizer(extra["pixel_mean"])
    out = cfg.predictions_path
    out.mkdir(parents=True, exist_ok=True)
    for seq in _test_sequences(cfg, extra):
        report, (grid,) = evaluate(model, normalizer, [seq])
        path = out / f"{seq.id}.csv"
        grid.to_csv(path)
        if not np.array_equal(SurfaceGrid.from_csv(path, seq.height, grid.shape).values, grid.values):
            raise RuntimeError(f"{path} does not parse back")
    print(f"wrote predictions to {out}")
    return out


def _eval_from_predictions(cfg: RunConfig, pred_dir: Path) -> EvalReport:
    files = sorted(pred_dir.glob("*.csv"))
    if not files:
        raise FileNotFoundError(f"no prediction CSVs in {pred_dir}")
    parts = {s.id: s for s in load_subsequences(read_dataset(cfg.data_path), cfg.model, cfg.subsequences)}
    preds, truths = [], []
    for f in files:
        if f.stem not in parts:
            raise ValueError(f"{f}: no sub-sequence {f.stem!r} in {cfg.data_path}")
        seq = parts[f.stem]
        preds.append(SurfaceGrid.from_csv(f, seq.height, seq.labels.shape))
        truths.append(truth_surfaces(seq))
    per_layer = pooled_error(preds, truths)
    return EvalReport([float(v) for v in per_layer], None, len(files), cfg.echo())


def cmd_eval(cfg: RunConfig) -> Path:
    """Score a predictions directory if ``paths.predictions`` is set, else run the checkpoint."""
    if cfg.predictions is not None:
        report = _eval_from_predictions(cfg, cfg.predictions)
    else:
        model, extra = _load_model(cfg)
        report, _ = evaluate(model, PixelNormalizer(extra["pixel_mean"]), _test_sequences(cfg, extra), cfg.echo())
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / "eval_report.json"
    report.write(path)
    EvalReport.read(path)
    print(json.dumps({"per_layer_error": report.per_layer, "mean_error": report.mean_error}))
    return path


def format_table(rows: list[dict]) -> str:
    lines = [f"{'mode':<10}{'ice-air':>10}{'ice-bed':>10}{'mean':>10}"]
    for r in rows:
        lines.append(f"{r['mode']:<10}{r['per_layer_error'][0]:>10.3f}{r['per_layer_error'][-1]:>10.3f}"
                     f"{r['mean_error']:>10.3f}")
    return "\n".join(lines)


def cmd_ablate(cfg: RunConfig) -> Path:
    """Train and evaluate all five modes on the same split."""
    rows = []
    for mode in MODES:
        run_dir = cfg.out / mode.replace("+", "_")
        model, extra = _train_one(cfg, mode, run_dir)
        report, _ = evaluate(model, PixelNormalizer(extra["pixel_mean"]), _test_sequences(cfg, extra))
        report.write(run_dir / "eval_report.json")
        rows.append({"mode": mode, "per_layer_error": report.per_layer, "mean_error": report.mean_error})
    path = cfg.out / "ablation.json"
    path.write_text(json.dumps({"rows": rows, "config": cfg.echo()}, indent=2))
    if len(json.loads(path.read_text())["rows"]) != len(MODES):
        raise RuntimeError(f"{path} does not parse back")
    table = format_table(rows)
    (cfg.out / "ablation.txt").write_text(table + "\n")
    print(table)
    return path


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tomoseg", description="Layer-surface regression on tomographic sequences.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--mode", default=None, help=f"override the ablation mode ({', '.join(MODES)})")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.mode, args.out)
    except ConfigError as exc:
        print(f"tomoseg: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](cfg)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"tomoseg {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
