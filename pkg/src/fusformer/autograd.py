"""Dense tensor engine with tape-based reverse-mode differentiation.

Values are float32 by default; float64 is supported so gradient checks can
run at tight tolerance. A forward pass records primitive applications onto
the innermost active `Tape`; `backward` replays the tape in exact reverse
order, accumulating gradients additively into each participating tensor.
Everything is deterministic: two forward passes over identical inputs
produce bit-identical outputs and tapes.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

DEFAULT_DTYPE = np.float32
_SUPPORTED_DTYPES = (np.float32, np.float64)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class Tensor:
    """Dense n-d array with an optional same-shape gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        # float64 is opt-in: only an explicit dtype, or an ndarray that is
        # already float32/float64, escapes the float32 default.
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in _SUPPORTED_DTYPES:
            arr = data
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap arrays/values as a constant Tensor; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def grad_array(t: Tensor) -> np.ndarray:
    """Gradient of `t`, as zeros when no gradient has flowed into it."""
    if t.grad is None:
        return np.zeros_like(t.data)
    return t.grad


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


class Node:
    """One recorded primitive: op id, operands, output, and its pullback."""

    __slots__ = ("op", "seq", "inputs", "output", "backward_fn")

    def __init__(self, op, seq, inputs, output, backward_fn):
        self.op = op
        self.seq = seq
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of one forward pass; node order is topological."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


_tape_stack: list[Tape] = []


def _record(op: str, inputs: tuple, out_data: np.ndarray, backward_fn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if requires and _tape_stack:
        tape = _tape_stack[-1]
        tape.nodes.append(Node(op, len(tape.nodes), inputs, out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) for every tensor touched by the tape.

    The loss must be a scalar produced by this tape. Gradients add into
    `.grad`; tensors the loss does not depend on end up with zero gradient.
    Calling backward twice on the same tape accumulates twice.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not any(node.output is loss for node in tape.nodes):
        raise ValueError("loss was not produced by this tape")
    for node in tape.nodes:
        for t in (*node.inputs, node.output):
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        grads = node.backward_fn(node.output.grad)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            t.grad += g


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} x {bd.shape}")

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _record("matmul", (a, b), ad @ bd, bwd)


def transpose(x: Tensor) -> Tensor:
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {xd.shape}")

    def bwd(g):
        return (g.T.copy(),)

    return _record("transpose", (x,), xd.T.copy(), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        return g, g

    return _record("add", (a, b), a.data + b.data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shape mismatch {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        return g, -g

    return _record("sub", (a, b), a.data - b.data, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _record("scale", (x,), x.data * c, bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Broadcast a 1-d bias along the last axis of x."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_bias: {x.data.shape} + bias {b.data.shape}")

    def bwd(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _record("add_bias", (x, b), x.data + b.data, bwd)


def absolute(x: Tensor) -> Tensor:
    xd = x.data

    def bwd(g):
        # subgradient 0 at ties
        return (g * np.sign(xd),)

    return _record("absolute", (x,), np.abs(xd), bwd)


def mean_all(x: Tensor) -> Tensor:
    xd = x.data
    n = xd.size

    def bwd(g):
        return (np.broadcast_to(g / n, xd.shape),)

    return _record("mean_all", (x,), np.asarray(xd.mean()), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction (overflow-safe)."""
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {xd.shape}")
    shifted = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax_rows", (x,), out, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization (population variance, eps-guarded), then affine."""
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError(f"layer_norm expects a matrix, got shape {xd.shape}")
    d = xd.shape[1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.data.shape} / beta {beta.data.shape} vs width {d}"
        )
    if eps < 0:
        raise ValueError("layer_norm eps must be non-negative")
    mu = xd.mean(axis=1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=1, keepdims=True)
        m2 = (gg * xhat).mean(axis=1, keepdims=True)
        dx = (gg - m1 - xhat * m2) * inv
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record("layer_norm", (x, gamma, beta), out, bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w with b broadcast-added per row."""
    return add_bias(matmul(x, w), b)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return _record("gelu", (x,), out, bwd)


def conv2d_same(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """Same-size 2-d cross-correlation, zero padding of width (k-1)/2.

    x is (H, W, C_in), k is (k, k, C_in, C_out) with odd k, b is (C_out,).
    Implemented as an im2col matrix product; the column matrix is retained
    for the backward pass.
    """
    xd, kd, bd = x.data, k.data, b.data
    if xd.ndim != 3 or kd.ndim != 4:
        raise ShapeError(f"conv2d_same: input {xd.shape}, kernel {kd.shape}")
    kk = kd.shape[0]
    if kd.shape[1] != kk:
        raise ShapeError(f"conv2d_same: kernel must be square, got {kd.shape}")
    if kk % 2 == 0:
        raise ShapeError(f"conv2d_same: kernel size must be odd, got {kk}")
    if kd.shape[2] != xd.shape[2]:
        raise ShapeError(
            f"conv2d_same: input channels {xd.shape[2]} vs kernel {kd.shape[2]}"
        )
    c_out = kd.shape[3]
    if bd.shape != (c_out,):
        raise ShapeError(f"conv2d_same: bias {bd.shape} vs {c_out} output channels")
    h, w = xd.shape[:2]
    pad = (kk - 1) // 2
    if pad:
        xp = np.pad(xd, ((pad, pad), (pad, pad), (0, 0)))
    else:
        xp = xd
    win = sliding_window_view(xp, (kk, kk), axis=(0, 1))  # (H, W, C_in, kk, kk)
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, -1)
    kmat = kd.reshape(-1, c_out)
    out = (cols @ kmat + bd).reshape(h, w, c_out)

    def bwd(g):
        gmat = g.reshape(h * w, c_out)
        dk = (cols.T @ gmat).reshape(kd.shape)
        db = gmat.sum(axis=0)
        dwin = (gmat @ kmat.T).reshape(h, w, kk, kk, xd.shape[2])
        dxp = np.zeros_like(xp)
        for di in range(kk):
            for dj in range(kk):
                dxp[di : di + h, dj : dj + w, :] += dwin[:, :, di, dj, :]
        dx = dxp[pad : pad + h, pad : pad + w, :] if pad else dxp
        return np.ascontiguousarray(dx), dk, db

    return _record("conv2d_same", (x, k, b), out, bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    xd = x.data
    if xd.ndim != 2 or not (0 <= start < stop <= xd.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] of shape {xd.shape}")

    def bwd(g):
        full = np.zeros_like(xd)
        full[:, start:stop] = g
        return (full,)

    return _record("slice_cols", (x,), xd[:, start:stop].copy(), bwd)


def concat_cols(parts) -> Tensor:
    parts = tuple(parts)
    n = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != n:
            raise ShapeError("concat_cols: all parts must be matrices with equal rows")
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def bwd(g):
        outs = []
        o = 0
        for wdt in widths:
            outs.append(g[:, o : o + wdt])
            o += wdt
        return tuple(outs)

    return _record("concat_cols", parts, out, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    xd = x.data
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != xd.size:
        raise ShapeError(f"reshape {xd.shape} -> {shape}: size mismatch")

    def bwd(g):
        return (g.reshape(xd.shape),)

    return _record("reshape", (x,), xd.reshape(shape).copy(), bwd)
