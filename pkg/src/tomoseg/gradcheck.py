"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class GradSample:
    name: str
    kind: str  # "direction" or "element"
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        if scale < 1e-12:
            return 0.0
        return abs(self.analytic - self.numeric) / scale


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def _evaluate(loss_fn: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    with ad.no_grad(), ad.record_branches() as log:
        value = loss_fn().item()
    return value, list(log)


def _central_difference(loss_fn, p: Tensor, v: np.ndarray, step: float, base) -> float | None:
    saved = p.data.copy()
    try:
        p.data = saved + step * v
        plus, b_plus = _evaluate(loss_fn)
        p.data = saved - step * v
        minus, b_minus = _evaluate(loss_fn)
    finally:
        p.data = saved
    if not (_same_branches(base, b_plus) and _same_branches(base, b_minus)):
        return None
    return (plus - minus) / (2 * step)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]],
    rng: np.random.Generator,
    eps: float = 1e-5,
    directions: int = 2,
    elements: int = 3,
    max_tries: int = 20,
) -> list[GradSample]:
    """Compare analytic gradients of ``loss_fn`` with central differences.

    For each parameter, random directions and single elements are probed.
    Probes whose +/- evaluations land on a different ReLU/pooling branch than
    the base point are redrawn, so kinks never masquerade as gradient errors.
    Parameters the loss does not reach must have zero numeric derivative.
    """
    params = list(params)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    _, base = _evaluate(loss_fn)

    samples: list[GradSample] = []
    for name, p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        probes: list[tuple[str, np.ndarray]] = []
        for _ in range(directions):
            probes.append(("direction", None))
        if elements:
            flat = np.abs(grad).ravel()
            # single-entry probes target the largest entries; tiny ones drown in round-off
            pool = np.argsort(flat)[::-1][: max(2 * elements, 1)]
            pool = pool[flat[pool] >= 0.1 * flat.max()]
            picks = rng.choice(pool, size=min(elements, pool.size), replace=False)
            for i in picks:
                probes.append(("element", int(i)))
        for kind, index in probes:
            found = None
            for attempt in range(max_tries):
                if kind == "direction":
                    v = rng.standard_normal(p.shape)
                    v /= np.linalg.norm(v)
                    gmax = float(np.abs(grad).max())
                    if gmax > 0:
                        # keep the projection on the gradient well above round-off
                        unit = grad / gmax
                        v = v + unit / np.linalg.norm(unit)
                        if np.linalg.norm(v) < 1e-3:
                            continue
                        v /= np.linalg.norm(v)
                else:
                    v = np.zeros(p.size)
                    v[index] = 1.0
                    v = v.reshape(p.shape)
                v = v.astype(p.dtype)
                # a kink just beside the base point is usually cleared by a shorter step
                for step in eps * 4.0 ** -np.arange(5):
                    numeric = _central_difference(loss_fn, p, v, step, base)
                    if numeric is not None:
                        found = numeric
                        break
                if found is not None:
                    break
                if kind == "element":
                    index = int(rng.choice(pool))
            if found is None:
                raise RuntimeError(f"{name}: every probe crossed a non-smooth point")
            samples.append(GradSample(name, kind, float(np.sum(grad * v)), found))
    return samples
