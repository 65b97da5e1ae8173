"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation records its parents and a closure mapping the
output gradient to parent gradients.  ``Tensor.backward`` walks the recorded
graph in reverse topological order.  Operands carry an optional leading batch
dimension; broadcasting is limited to bias-style trailing matches.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "hadamard",
    "matmul",
    "linear",
    "sigmoid",
    "tanh",
    "relu",
    "square",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "conv3d",
    "maxpool_height",
    "record_branches",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer updates)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def record_branches():
    """Collect the branch decisions of piecewise ops (ReLU masks, pooling picks).

    Two evaluations with equal records lie on the same smooth piece of the
    function; gradient checks use this to discard kink-crossing samples.
    """
    prev = getattr(_state, "branches", None)
    _state.branches = []
    try:
        yield _state.branches
    finally:
        _state.branches = prev


def _note_branch(decision: np.ndarray) -> None:
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(decision)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # backward ------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every ``requires_grad`` ancestor of this scalar.

        Leaf gradients accumulate (so several micro-batches can contribute to
        one optimizer step); interior gradients are overwritten.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that is not attached to a graph")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise AssertionError(
                        f"gradient shape {pg.shape} does not match tensor shape {parent.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; recurrent graphs are far deeper than the recursion limit
    order: list[Tensor] = []
    visited: set[int] = {id(root)}
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if parent.requires_grad and id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, 0))
        else:
            order.append(node)
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


# elementwise -----------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if small.ndim < big.ndim and big.shape[big.ndim - small.ndim:] == small.shape:
        return
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"hadamard: shapes differ, {a.shape} vs {b.shape}")
    return mul(a, b)


def square(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (2.0 * xd * g,)

    return _result(xd * xd, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _result(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_branch(mask)
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return _result(out, (x,), backward)


# linear algebra ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 1-D or 2-D operands (numpy ``@`` semantics)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError(f"matmul: expected 1-D or 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        a2 = ad if ad.ndim == 2 else ad[None, :]
        b2 = bd if bd.ndim == 2 else bd[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(ad.shape)
        gb = (a2.T @ g2).reshape(bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape [..., in] and weight [out, in]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


# reductions and shape ops ------------------------------------------------------

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _result(out, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _result(x.data.transpose(axes), (x,), backward)


def _getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype
    out = x.data[index]
    if isinstance(out, np.ndarray) and np.shares_memory(out, x.data):
        out = out.copy()

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g) if _is_fancy(index) else full.__setitem__(index, g)
        return (full,)

    return _result(np.asarray(out), (x,), backward)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        ref, other = list(tensors[0].shape), list(t.shape)
        if len(ref) != len(other) or ref[:axis] + ref[axis + 1:] != other[:axis] + other[axis + 1:]:
            raise ValueError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ValueError(f"stack: shapes {tensors[0].shape} and {t.shape} differ")

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# convolution and pooling ---------------------------------------------------------

def _pad_sample(x: np.ndarray, padding, depth_mode: str) -> np.ndarray:
    """One sample [C, D, H, W] -> padded channels-last [Dp, Hp, Wp, C]."""
    pd, ph, pw = padding
    c, d, h, w = x.shape
    out = np.zeros((d + 2 * pd, h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
    out[pd:pd + d, ph:ph + h, pw:pw + w] = x.transpose(1, 2, 3, 0)
    if depth_mode == "edge" and pd:
        out[:pd] = out[pd]
        out[pd + d:] = out[pd + d - 1]
    return out


def _unpad_sample(g: np.ndarray, shape, padding, depth_mode: str) -> np.ndarray:
    """Adjoint of :func:`_pad_sample`: [Dp, Hp, Wp, C] -> [C, D, H, W]."""
    pd, ph, pw = padding
    _, d, h, w = shape
    core = g[:, ph:ph + h, pw:pw + w]
    inner = core[pd:pd + d]
    if depth_mode == "edge" and pd:
        inner = inner.copy()
        inner[0] += core[:pd].sum(axis=0)
        inner[-1] += core[pd + d:].sum(axis=0)
    return inner.transpose(3, 0, 1, 2)


def _unfold_height(last: np.ndarray, kh: int) -> np.ndarray:
    """Padded sample [Dp, Hp, Wp, C] -> [Dp * oh * Wp, kh * C].

    Row ``(d * oh + y) * Wp + x`` holds the kh-tall column of channel vectors
    starting at (d, y, x), ordered (j, c).  Depth tap i and width tap k of an
    output position then live ``i * oh * Wp + k`` rows further on, so each
    (i, k) tap is one matrix product over a contiguous row range.
    """
    dp, hp, wp, c = last.shape
    oh = hp - kh + 1
    out = np.empty((dp, oh, wp, kh, c), dtype=last.dtype)
    for j in range(kh):
        out[:, :, :, j] = last[:, j:j + oh]
    return out.reshape(dp * oh * wp, kh * c)


def _fold_height(rows: np.ndarray, shape, kh: int) -> np.ndarray:
    """Adjoint of :func:`_unfold_height`."""
    dp, hp, wp, c = shape
    oh = hp - kh + 1
    rows = rows.reshape(dp, oh, wp, kh, c)
    last = np.zeros(shape, dtype=rows.dtype)
    for j in range(kh):
        last[:, j:j + oh] += rows[:, :, :, j]
    return last


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           padding=(0, 0, 0), depth_mode: str = "zero") -> Tensor:
    """Stride-1 3D cross-correlation.

    x: [N, C, D, H, W]; weight: [O, C, kD, kH, kW]; bias: [O].
    ``depth_mode`` selects zero or edge-replicating padding along depth; height
    and width are always zero padded.

    Each padded sample is laid out channels-last with its height taps gathered
    once; products are then formed over every padded column, and the
    ``kW - 1`` columns per row that fall off the right edge are discarded.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d: expected 5-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv3d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if depth_mode not in ("zero", "edge"):
        raise ValueError(f"conv3d: unknown depth padding mode {depth_mode!r}")
    padding = tuple(int(p) for p in padding)
    kd, kh, kw = kernel = weight.shape[2:]
    padded = tuple(s + 2 * p for s, p in zip(x.shape[2:], padding))
    if any(p < k for p, k in zip(padded, kernel)):
        raise ValueError(f"conv3d: padded input extents {padded} smaller than kernel {kernel}")

    n = x.shape[0]
    o = weight.shape[0]
    dp, hp, wp = padded
    od, oh, ow = (p - k + 1 for p, k in zip(padded, kernel))
    plane = oh * wp                      # rows per padded depth plane
    rows_out = od * plane - (kw - 1)     # rows that can hold a valid output
    offsets = [(i, k, i * plane + k) for i in range(kd) for k in range(kw)]
    # taps[i, k] is the [O, kh * C] weight slice of depth tap i and width tap k
    taps = np.ascontiguousarray(weight.data.transpose(2, 4, 0, 3, 1)).reshape(kd, kw, o, -1)
    dtype = np.result_type(x.dtype, weight.dtype)
    out = np.empty((n, o, od, oh, ow), dtype=dtype)
    acc = np.empty((od * plane, o), dtype=dtype)
    for s in range(n):
        rows = _unfold_height(_pad_sample(x.data[s], padding, depth_mode), kh)
        acc[rows_out:] = 0
        for t, (i, k, start) in enumerate(offsets):
            prod = rows[start:start + rows_out] @ taps[i, k].T
            if t == 0:
                acc[:rows_out] = prod
            else:
                acc[:rows_out] += prod
        if bias is not None:
            acc += bias.data
        out[s] = acc.reshape(od, oh, wp, o)[:, :, :ow].transpose(3, 0, 1, 2)
    xdata = x.data

    def backward(g):
        gtaps = np.zeros_like(taps)
        gx = np.empty(xdata.shape, dtype=g.dtype) if x.requires_grad else None
        gacc = np.zeros((od, oh, wp, o), dtype=g.dtype)
        for s in range(n):
            gacc[:, :, :ow] = g[s].transpose(1, 2, 3, 0)
            gflat = gacc.reshape(od * plane, o)[:rows_out]
            # the unfolded buffer is rebuilt rather than kept alive between passes
            last = _pad_sample(xdata[s], padding, depth_mode)
            rows = _unfold_height(last, kh)
            for i, k, start in offsets:
                gtaps[i, k] += gflat.T @ rows[start:start + rows_out]
            if gx is None:
                continue
            grows = np.zeros_like(rows)
            for i, k, start in offsets:
                grows[start:start + rows_out] += gflat @ taps[i, k]
            glast = _fold_height(grows, last.shape, kh)
            gx[s] = _unpad_sample(glast, xdata.shape[1:], padding, depth_mode)
        gw = np.ascontiguousarray(gtaps.reshape(kd, kw, o, kh, -1).transpose(2, 4, 0, 3, 1))
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def maxpool_height(x: Tensor) -> Tensor:
    """Max pool with window and stride 2 along height only: [N,C,D,H,W] -> [N,C,D,H//2,W].

    Ties route the gradient to the first (lowest-row) maximum.
    """
    if x.ndim != 5:
        raise ValueError(f"maxpool: expected 5-D input, got {x.shape}")
    n, c, d, h, w = x.shape
    if h < 2:
        raise ValueError(f"maxpool: height {h} is too small to pool")
    h2 = h // 2
    pairs = x.data[:, :, :, :2 * h2].reshape(n, c, d, h2, 2, w)
    second = pairs[:, :, :, :, 1] > pairs[:, :, :, :, 0]
    _note_branch(second)
    out = np.where(second, pairs[:, :, :, :, 1], pairs[:, :, :, :, 0])

    def backward(g):
        full = np.zeros((n, c, d, h2, 2, w), dtype=g.dtype)
        full[:, :, :, :, 0] = np.where(second, 0, g)
        full[:, :, :, :, 1] = np.where(second, g, 0)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :, :2 * h2] = full.reshape(n, c, d, 2 * h2, w)
        return (gx,)

    return _result(out, (x,), backward)
