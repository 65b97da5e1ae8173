"""Euclidean loss, Adam, step schedules and the two-phase training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import WindowSet
from .models import CombinedModel

logger = logging.getLogger(__name__)


def l2_loss(predictions: Tensor, targets) -> Tensor:
    """Half the summed squared difference over every entry."""
    targets = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets, dtype=predictions.dtype))
    if predictions.shape != targets.shape:
        raise ValueError(f"l2_loss: prediction shape {predictions.shape} != target shape {targets.shape}")
    return 0.5 * ad.sum(ad.square(predictions - targets))


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        if lr is not None:
            self.lr = lr
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            names = [self.params[i].name or f"#{i}" for i in missing]
            raise ValueError(f"Adam step with missing gradients for parameters {names}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass(frozen=True)
class Schedule:
    """Step decay: ``base_lr * factor ** ((epoch - 1) // every)`` for 1-based epochs."""

    phase: str
    base_lr: float
    factor: float
    every: int
    epochs: int

    def __post_init__(self):
        # the convolutional phase is labelled "c3d" for both the 3D and 2D trunks
        if self.phase not in ("c3d", "rnn"):
            raise ValueError(f"schedule phase must be 'c3d' or 'rnn', got {self.phase!r}")
        if self.epochs < 1 or self.every < 1:
            raise ValueError("epochs and decay interval must be positive")

    def lr(self, epoch: int) -> float:
        return self.base_lr * self.factor ** ((epoch - 1) // self.every)

    def rates(self) -> list[float]:
        return [self.lr(e) for e in range(1, self.epochs + 1)]

    @classmethod
    def c3d_default(cls, epochs: int = 20) -> "Schedule":
        return cls("c3d", 1e-4, 0.5, 5, epochs)

    @classmethod
    def rnn_default(cls, epochs: int = 20) -> "Schedule":
        return cls("rnn", 1e-3, 0.1, 10, epochs)

    @classmethod
    def constant(cls, phase: str, lr: float, epochs: int) -> "Schedule":
        return cls(phase, lr, 1.0, epochs, epochs)

    def to_dict(self) -> dict:
        return {"phase": self.phase, "base_lr": self.base_lr, "factor": self.factor,
                "every": self.every, "epochs": self.epochs}


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _cnn_features(model: CombinedModel, data: WindowSet, chunk: int = 32) -> np.ndarray:
    windows = data.crop(model.window_length)
    with ad.no_grad():
        return np.concatenate(
            [model.cnn(Tensor(windows[lo:lo + chunk]))[1].data for lo in range(0, len(data), chunk)]
        )


def chain_states(model: CombinedModel, data: WindowSet, feats: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Final GRU states of every sample, running each sequence slice by slice.

    Samples at the same position in different sequences are batched.  The
    returned array feeds each sample's successor as its cross-slice handoff.
    """
    cfg = model.config
    states = np.zeros((len(data), cfg.num_layers, cfg.hidden_size), dtype=cfg.np_dtype)
    center = data.windows[:, data.windows.shape[1] // 2]
    with ad.no_grad():
        for pos in range(int(data.position.max()) + 1):
            idx = np.flatnonzero(data.position == pos)
            for lo in range(0, len(idx), chunk):
                part = idx[lo:lo + chunk]
                init = feats[part] + _handoff(states, data.prev[part])
                _, hidden = model.rnn(Tensor(center[part]), Tensor(init))
                states[part] = hidden.data
    return states


def _handoff(states: np.ndarray, prev: np.ndarray) -> np.ndarray:
    out = states[np.maximum(prev, 0)].copy()
    out[prev < 0] = 0
    return out


def train(model: CombinedModel, data: WindowSet, schedule: Schedule, batch_size: int = 128,
          micro_batch: int = 16, seed: int = 0, log_path=None,
          on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Run one training phase and return the per-epoch loss log.

    The ``c3d`` phase fits the convolutional model (3D or 2D) on its own predictions.
    The ``rnn`` phase fits the GRUs with the convolutional model frozen; its
    features (and, in combined modes, the previous slice's final GRU state,
    refreshed once per epoch) seed each cell's hidden state.  Each batch loss
    is the mean of per-sample losses, accumulated over micro-batches.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if schedule.phase == "c3d" and model.cnn is None:
        raise ValueError(f"mode {model.mode} has no convolutional model to train")
    if schedule.phase == "rnn" and model.rnn is None:
        raise ValueError(f"mode {model.mode} has no recurrent model to train")

    dtype = model.config.np_dtype
    rng = np.random.default_rng(seed)
    module = model.cnn if schedule.phase == "c3d" else model.rnn
    params = module.parameters()
    for name, p in module.named_parameters():
        p.name = name
    opt = Adam(params, lr=schedule.base_lr)
    targets = data.targets.astype(dtype)

    if schedule.phase == "c3d":
        windows = data.crop(model.window_length).astype(dtype)
    else:
        center = data.windows[:, data.windows.shape[1] // 2].astype(dtype)
        if model.cnn is not None:
            feats = _cnn_features(model, data).astype(dtype)
        else:
            feats = np.zeros((len(data), model.config.num_layers, model.config.hidden_size), dtype=dtype)

    log: list[dict] = []
    sink = open(log_path, "a") if log_path is not None else None
    try:
        for epoch in range(1, schedule.epochs + 1):
            start = time.perf_counter()
            lr = schedule.lr(epoch)
            if schedule.phase == "rnn":
                init_all = feats
                if model.combined:
                    init_all = feats + _handoff(chain_states(model, data, feats), data.prev)
            total = 0.0
            for batch in _minibatches(len(data), batch_size, rng):
                opt.zero_grad()
                for lo in range(0, len(batch), micro_batch):
                    idx = batch[lo:lo + micro_batch]
                    if schedule.phase == "c3d":
                        preds, _ = model.cnn(Tensor(windows[idx]))
                    else:
                        preds, _ = model.rnn(Tensor(center[idx]), Tensor(init_all[idx]))
                    loss = l2_loss(preds, targets[idx]) * (1.0 / len(batch))
                    loss.backward()
                    total += loss.item() * len(batch)
                opt.step(lr)
            entry = {
                "epoch": epoch,
                "phase": schedule.phase,
                "lr": lr,
                "mean_loss": total / len(data),
                "wall_ms": (time.perf_counter() - start) * 1000.0,
            }
            log.append(entry)
            logger.info("%s epoch %d lr %.3g loss %.5f", schedule.phase, epoch, lr, entry["mean_loss"])
            if sink is not None:
                sink.write(json.dumps(entry) + "\n")
                sink.flush()
            if on_epoch is not None:
                on_epoch(entry)
    finally:
        if sink is not None:
            sink.close()
    return log


def phases_for(mode: str) -> tuple[str, ...]:
    if mode in ("c3d", "c2d"):
        return ("c3d",)
    if mode == "rnn":
        return ("rnn",)
    return ("c3d", "rnn")


def fit(model: CombinedModel, data: WindowSet, schedules: dict[str, Schedule] | None = None,
        batch_size: int = 128, micro_batch: int = 16, seed: int = 0, log_path=None) -> list[dict]:
    """Train every phase the model's mode needs, convolutional phase first."""
    schedules = schedules or {"c3d": Schedule.c3d_default(), "rnn": Schedule.rnn_default()}
    log: list[dict] = []
    for i, phase in enumerate(phases_for(model.mode)):
        log += train(model, data, schedules[phase], batch_size, micro_batch, seed + i, log_path)
    return log


def read_loss_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
