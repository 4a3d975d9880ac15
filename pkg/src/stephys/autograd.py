"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable quantity in the package (model logits, rendered patches,
the straight-through composition) is a :class:`Tensor`. Operations record a
:class:`Node` on the output tensor; :func:`backward` orders those nodes into a
:class:`Tape` and runs their backward rules once, in reverse.

Broadcasting is deliberately narrow: scalar-with-tensor, and a trailing-axis
bias vector added to a matrix or a channel bias added to an NCHW map.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


class AutogradError(RuntimeError):
    """Raised on misuse of the tape (non-scalar loss, double backward)."""


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""

    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class TensorFormatError(ValueError):
    """Raised when a tensor file is malformed or truncated."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (tape-free evaluation)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None
    released: bool = False


class Tensor:
    """An n-dimensional array with an optional gradient and producing node."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.require(np.asarray(data, dtype=dtype), requirements="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.node.op}" if self.node else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -------------------------------------------------------------- operators
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

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def record(
    op: str,
    out: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
) -> Tensor:
    """Wrap ``out`` in a Tensor and attach a graph node when any parent needs grad.

    ``backward_fn`` maps the upstream gradient to one gradient (or None) per
    parent. This is the extension point used by the renderer.
    """
    result = Tensor(out, dtype=out.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        result.requires_grad = True
        result.node = Node(op, tuple(parents), backward_fn)
    return result


# --------------------------------------------------------------------- tape
@dataclass
class Tape:
    """Recorded operations reachable from a root, in topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise AutogradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutogradError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_root(loss)
    for t in tape.nodes:
        if t.node is not None and t.node.released:
            raise AutogradError("backward called twice on the same tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if t.node is None:
            if g is not None:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        node = t.node
        if g is not None:
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"{node.op}.backward", pg.shape, p.shape)
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
        node.backward_fn = None
        node.released = True


# ---------------------------------------------------------------- helpers
def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _broadcast_kind(op: str, a: Tensor, b: Tensor) -> str:
    """Classify the permitted broadcast between ``a`` and ``b``."""
    if a.shape == b.shape:
        return "same"
    if b.data.size == 1 and b.ndim <= a.ndim:
        return "b_scalar"
    if a.data.size == 1 and a.ndim <= b.ndim:
        return "a_scalar"
    if b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]:
        return "b_bias"
    if b.ndim == 1 and a.ndim == 4 and a.shape[1] == b.shape[0]:
        return "b_channel"
    raise ShapeError(op, a.shape, b.shape)


def _reduce_to(g: np.ndarray, kind: str, side: str, shape) -> np.ndarray:
    if kind == "same":
        return g
    if (kind == "b_scalar" and side == "b") or (kind == "a_scalar" and side == "a"):
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    if kind == "b_bias" and side == "b":
        return g.sum(axis=0)
    if kind == "b_channel" and side == "b":
        return g.sum(axis=(0, 2, 3))
    return g


def _expand(b: np.ndarray, kind: str) -> np.ndarray:
    if kind == "b_channel":
        return b.reshape(1, -1, 1, 1)
    return b


# ------------------------------------------------------------- core ops
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    kind = _broadcast_kind("add", a, b)
    out = a.data + _expand(b.data, kind)

    def bw(g):
        return _reduce_to(g, kind, "a", a.shape), _reduce_to(g, kind, "b", b.shape)

    return record("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    kind = _broadcast_kind("sub", a, b)
    out = a.data - _expand(b.data, kind)

    def bw(g):
        return _reduce_to(g, kind, "a", a.shape), _reduce_to(-g, kind, "b", b.shape)

    return record("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    kind = _broadcast_kind("mul", a, b)
    bd = _expand(b.data, kind)
    out = a.data * bd

    def bw(g):
        ga = _reduce_to(g * bd, kind, "a", a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, kind, "b", b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return record("matmul", out, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, np.zeros((), dtype=x.dtype))
    return record("relu", out, (x,), lambda g: (g * mask,))


def clamp(x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clip to ``[lo, hi]``; gradient 1 on the closed interval, 0 outside."""
    out = np.clip(x.data, lo, hi).astype(x.dtype, copy=False)
    mask = (x.data >= lo) & (x.data <= hi)
    return record("clamp", out, (x,), lambda g: (g * mask,))


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return record("sum", out, (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[i] for i in np.atleast_1d(axis)]))
    out = np.asarray(x.data.mean(axis=axis), dtype=x.dtype)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / count).astype(x.dtype),)

    return record("mean", out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return record("transpose", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity (bit-exact), zero gradient to ``x``."""
    x = as_tensor(x)
    return Tensor(x.data.copy(), dtype=x.dtype)


def straight_through(x: Tensor, target) -> Tensor:
    """``x + sg[target - x]`` evaluated exactly.

    The forward value is ``target`` itself, bit for bit; the composed form
    ``add(x, stop_gradient(sub(target, x)))`` can differ in the last ulp
    because float addition does not cancel exactly. Backward is the identity
    into ``x``; ``target`` is constant.
    """
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if target.shape != x.shape:
        raise ShapeError("straight_through", x.shape, target.shape)
    out = np.array(target, dtype=x.dtype, copy=True)
    return record("straight_through", out, (x,), lambda g: (g,))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with OIHW kernels and zero padding."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if b is not None and (b.ndim != 1 or b.shape[0] != w.shape[0]):
        raise ShapeError("conv2d", w.shape, b.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError("conv2d", x.shape, w.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, kh, kw, stride)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gflat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gflat.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return record("conv2d", out, parents, bw)


def max_pool2(x: Tensor) -> Tensor:
    """2×2 max pooling with stride 2; ties route the gradient to the first max."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("max_pool2", x.shape, (2, 2))
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        return (gx,)

    return record("max_pool2", np.ascontiguousarray(out), (x,), bw)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of ``(N, K)`` logits against integer labels.

    ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"`` (per-sample vector).
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {logits.shape[1]})")
    logp = log_softmax(logits.data)
    rows = np.arange(labels.shape[0])
    per = -logp[rows, labels]
    n = labels.shape[0]
    if reduction == "none":
        out = per.astype(logits.dtype)
    elif reduction == "sum":
        out = np.asarray(per.sum(), dtype=logits.dtype)
    elif reduction == "mean":
        out = np.asarray(per.mean(), dtype=logits.dtype)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        probs = np.exp(logp)
        probs[rows, labels] -= 1.0
        if reduction == "none":
            scale = g.reshape(-1, 1)
        elif reduction == "sum":
            scale = g
        else:
            scale = g / n
        return ((probs * scale).astype(logits.dtype),)

    return record("softmax_cross_entropy", out, (logits,), bw)


# ------------------------------------------------------------ file format
TENSOR_MAGIC = b"STT1"


def write_tensor(fh, array: np.ndarray) -> None:
    array = np.asarray(array)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TensorFormatError(f"truncated tensor data: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return data.reshape(dims).astype(np.float32)


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


@contextlib.contextmanager
def frozen(tensors: Sequence[Tensor]) -> Iterator[None]:
    """Temporarily mark ``tensors`` as constants (e.g. model weights during an attack)."""
    flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, f in zip(tensors, flags):
            t.requires_grad = f
