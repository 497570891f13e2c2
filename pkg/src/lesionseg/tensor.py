"""Dense float tensors, a gradient tape, and the differentiable primitives.

Every primitive computes its forward result eagerly with numpy. When a
:class:`GradTape` is active and at least one input requires a gradient, the
primitive appends a node holding the closure that maps the upstream gradient
to input gradients. ``GradTape.backward`` replays those nodes in reverse.

Tensors default to float32. Primitives preserve float64 inputs, which the
finite-difference checker relies on.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DEFAULT_DTYPE = np.float32
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1
SIGMOID_FLOOR = 1e-7


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class ParameterError(ValueError):
    """A primitive received an invalid hyperparameter (stride, dilation, ...)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _tape_stack() -> list["GradTape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class GradTape:
    """Ordered record of executed primitives.

    Use as a context manager around the forward computation, then call
    :meth:`backward` or :meth:`gradient` on the scalar result.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op, inputs, output, backward) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Propagate from ``loss`` and return gradients keyed by ``id(tensor)``."""
        if seed is None:
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
        for node in reversed(self.nodes):
            g_out = grads.get(id(node.output))
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        return grads

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` w.r.t. ``sources``; unreached sources get zeros."""
        grads = self.backward(loss)
        return [
            np.asarray(grads[id(s)], dtype=s.dtype) if id(s) in grads else np.zeros_like(s.data)
            for s in sources
        ]


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(op, inputs, out, backward)
    return out


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, dilation: int, padding) -> tuple[int, int, int]:
    """Return ``(out, pad_before, pad_after)`` for one spatial axis."""
    eff = dilation * (k - 1) + 1
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + eff - size, 0)
        # extra row/column goes bottom/right
        return out, total // 2, total - total // 2
    p = int(padding)
    if p < 0:
        raise ParameterError(f"padding must be non-negative, got {p}")
    out = (size + 2 * p - eff) // stride + 1
    if out < 1:
        raise ShapeError(f"input size {size} too small for effective kernel {eff}")
    return out, p, p


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding="same") -> Tensor:
    """2-D cross-correlation of an NCHW batch with an (Cout, Cin, kh, kw) kernel."""
    if stride < 1 or dilation < 1:
        raise ParameterError(f"stride and dilation must be positive (got {stride}, {dilation})")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")

    ho, pt, pb = conv_output_size(h, kh, stride, dilation, padding)
    wo, pl, pr = conv_output_size(w, kw, stride, dilation, padding)
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else xd
    cols = _windows(xp, kh, kw, stride, dilation, ho, wo).reshape(n, cin * kh * kw, ho * wo)
    w2d = kernel.data.reshape(cout, -1).astype(xd.dtype, copy=False)
    out = np.matmul(w2d, cols)
    if bias is not None:
        out += bias.data.astype(xd.dtype, copy=False)[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        gb = g2.sum(axis=(0, 2)) if bias is not None else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w2d.T, g2).reshape(n, cin, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            span_h = stride * (ho - 1) + 1
            span_w = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i * dilation:i * dilation + span_h:stride,
                        j * dilation:j * dilation + span_w:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, pt:pt + h, pl:pl + w]
        return gx, gw.astype(kernel.dtype, copy=False), gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", inputs, out, backward)


# ---------------------------------------------------------------------------
# normalization and activations


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, dtype=np.float32), np.ones(channels, dtype=np.float32))


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, stats: RunningStats | None = None,
               mode: str = "train", epsilon: float = BN_EPSILON, momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Train mode normalizes with the biased batch variance and folds the batch
    statistics into ``stats`` (``new = (1 - momentum) * old + momentum * batch``).
    Eval mode reads ``stats`` only.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"batch_norm parameters {scale.shape}/{shift.shape} do not match {c} channels")
    xd = x.data
    dtype = xd.dtype
    if mode == "train":
        x64 = xd.astype(np.float64)
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        if stats is not None:
            stats.mean[...] = (1 - momentum) * stats.mean + momentum * mean
            stats.var[...] = (1 - momentum) * stats.var + momentum * var
    elif mode == "eval":
        if stats is None:
            raise ValueError("eval-mode batch_norm needs running statistics")
        mean = stats.mean.astype(np.float64)
        var = stats.var.astype(np.float64)
    else:
        raise ParameterError(f"unknown batch_norm mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = ((xd - mean[None, :, None, None].astype(dtype)) * inv_std[None, :, None, None].astype(dtype))
    out = xhat * scale.data.astype(dtype)[None, :, None, None] + shift.data.astype(dtype)[None, :, None, None]

    def backward(g):
        g64 = g.astype(np.float64)
        xh64 = xhat.astype(np.float64)
        gscale = (g64 * xh64).sum(axis=(0, 2, 3))
        gshift = g64.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            s = scale.data.astype(np.float64)[None, :, None, None]
            istd = inv_std[None, :, None, None]
            if mode == "train":
                m = xd.shape[0] * xd.shape[2] * xd.shape[3]
                gx = (s * istd / m) * (
                    m * g64 - gshift[None, :, None, None] - xh64 * gscale[None, :, None, None]
                )
            else:
                gx = g64 * s * istd
            gx = gx.astype(dtype)
        return gx, gscale.astype(scale.dtype), gshift.astype(shift.dtype)

    return _emit("batch_norm", (x, scale, shift), out.astype(dtype, copy=False), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep probabilities strictly inside (0, 1) even where float32 saturates
    out = np.clip(out, SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR).astype(x.dtype)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling: each pixel becomes a 2x2 block."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2x expects NCHW input, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _emit("upsample2x", (x,), out, backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects NCHW operands")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)
    return _emit("concat_channels", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    return _emit("scale", (x,), x.data * x.dtype.type(factor), lambda g: (g * factor,))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` accumulated in float64; ``weights`` is constant."""
    if weights.shape != x.shape:
        raise ShapeError(f"weights {weights.shape} do not match {x.shape}")
    total = np.sum(x.data.astype(np.float64) * weights)
    return _emit("weighted_sum", (x,), np.asarray(total, dtype=x.dtype),
                 lambda g: ((g * weights).astype(x.dtype),))


def sum_all(x: Tensor) -> Tensor:
    total = np.sum(x.data, dtype=np.float64)
    return _emit("sum_all", (x,), np.asarray(total, dtype=x.dtype),
                 lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def sum_of_squares(tensors: Sequence[Tensor], coefficient: float) -> Tensor:
    """``coefficient * sum(t**2)`` over all tensors, as one scalar node."""
    if not tensors:
        return Tensor(np.zeros((), dtype=DEFAULT_DTYPE))
    dtype = tensors[0].dtype
    total = coefficient * sum(np.sum(t.data.astype(np.float64) ** 2) for t in tensors)
    return _emit("sum_of_squares", tuple(tensors), np.asarray(total, dtype=dtype),
                 lambda g: tuple((2.0 * coefficient * g * t.data).astype(t.dtype) for t in tensors))
