"""Network building blocks: 3D convolution, height pooling, dense layers, GRU cell."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_KERNEL = (3, 5, 3)
DEFAULT_HIDDEN = 512


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Module:
    """Minimal parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv3d(Module):
    """Stride-1 3D convolution with same padding.

    Height and width are zero padded.  Depth is padded by replicating the edge
    slices, which keeps depth-constant inputs depth-constant.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel=DEFAULT_KERNEL,
                 rng: np.random.Generator | None = None, dtype=np.float64, padding="same"):
        rng = rng if rng is not None else np.random.default_rng(0)
        kernel = tuple(int(k) for k in kernel)
        if any(k % 2 == 0 for k in kernel) and padding == "same":
            raise ValueError(f"same padding needs odd kernel extents, got {kernel}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.padding = tuple(k // 2 for k in kernel) if padding == "same" else tuple(padding)
        fan_in = in_channels * int(np.prod(kernel))
        self.weight = uniform_init(rng, (out_channels, in_channels, *kernel), fan_in, dtype)
        self.bias = uniform_init(rng, (out_channels,), fan_in, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv3d(x, self.weight, self.bias, self.padding, depth_mode="edge")

    def output_shape(self, in_shape):
        return tuple(s + 2 * p - k + 1 for s, p, k in zip(in_shape, self.padding, self.kernel))


class MaxPool3d(Module):
    """1x2x1 max pooling with stride 2 along height."""

    kernel = (1, 2, 1)
    stride = (1, 2, 1)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.maxpool_height(x)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = uniform_init(rng, (out_features, in_features), in_features, dtype)
        self.bias = uniform_init(rng, (out_features,), in_features, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class GruCell(Module):
    """GRU cell whose input is already projected to the hidden width.

    Gate weights follow the naming U_{input|hidden}{z|r|n}; ``U_y``/``b_y`` form
    the per-step output head that maps a hidden state to one row position.
    """

    def __init__(self, hidden_size: int = DEFAULT_HIDDEN, out_size: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        h = hidden_size
        self.hidden_size = h
        self.out_size = out_size
        self.U_iz = uniform_init(rng, (h, h), h, dtype)
        self.U_hz = uniform_init(rng, (h, h), h, dtype)
        self.U_ir = uniform_init(rng, (h, h), h, dtype)
        self.U_hr = uniform_init(rng, (h, h), h, dtype)
        self.U_in = uniform_init(rng, (h, h), h, dtype)
        self.U_hn = uniform_init(rng, (h, h), h, dtype)
        self.b_z = uniform_init(rng, (h,), h, dtype)
        self.b_r = uniform_init(rng, (h,), h, dtype)
        self.b_n = uniform_init(rng, (h,), h, dtype)
        self.U_y = uniform_init(rng, (out_size, h), h, dtype)
        self.b_y = uniform_init(rng, (out_size,), h, dtype)


def gru_step(cell: GruCell, fused_input: Tensor, h_prev: Tensor,
             input_gates: tuple[Tensor, Tensor, Tensor] | None = None) -> tuple[Tensor, Tensor]:
    """Advance ``cell`` by one column.

    Both inputs are [hidden] or [batch, hidden].  Returns the new hidden state
    and the output ``s = U_y h + b_y`` ([out] or [batch, out]).

    ``input_gates`` optionally supplies the already computed input-side terms
    ``(U_iz x + b_z, U_ir x + b_r, U_in x + b_n)``, as produced by
    :func:`input_gate_terms`; ``fused_input`` is then ignored.
    """
    h = cell.hidden_size
    if h_prev.shape[-1] != h:
        raise ValueError(f"gru_step: hidden {h_prev.shape} must end in {h}")
    if input_gates is None:
        if fused_input.shape != h_prev.shape:
            raise ValueError(
                f"gru_step: input {fused_input.shape} and hidden {h_prev.shape} must both end in {h}"
            )
        input_gates = input_gate_terms(cell, fused_input)
    gz, gr, gn = input_gates
    z = ad.sigmoid(gz + ad.linear(h_prev, cell.U_hz))
    r = ad.sigmoid(gr + ad.linear(h_prev, cell.U_hr))
    n = ad.tanh(gn + ad.linear(ad.hadamard(r, h_prev), cell.U_hn))
    h_new = ad.hadamard(z, h_prev) + ad.hadamard(1.0 - z, n)
    s = ad.linear(h_new, cell.U_y, cell.b_y)
    return h_new, s


def input_gate_terms(cell: GruCell, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Input-side gate terms of ``cell`` for x of shape [..., hidden]."""
    return (ad.linear(x, cell.U_iz, cell.b_z), ad.linear(x, cell.U_ir, cell.b_r),
            ad.linear(x, cell.U_in, cell.b_n))


def fuse(column_features: Tensor, cross_layer_hidden: Tensor | None) -> Tensor:
    """Sum fusion of a projected column with the hidden state of the layer above."""
    if cross_layer_hidden is None:
        return column_features
    if column_features.shape != cross_layer_hidden.shape:
        raise ValueError(
            f"fuse: shapes differ, {column_features.shape} vs {cross_layer_hidden.shape}"
        )
    return column_features + cross_layer_hidden
