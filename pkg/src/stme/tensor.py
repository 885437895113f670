"""Dense tensors on numpy buffers with reverse-mode autodiff.

Covers exactly what the motion models need: elementwise arithmetic, matmul
(optionally batched), conv2d, reductions, shape ops, embedding lookup,
softmax, cross-entropy and layer norm. float32 is the working precision;
float64 exists for gradient-check headroom. Execution is serial and
bit-deterministic for a fixed seed and build.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class NonFiniteError(ArithmeticError):
    """An op produced NaN/Inf from finite inputs (overflow or divergence)."""


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph building inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _quiet():
    """Overflow and zero-division surface as NonFiniteError, not warnings."""
    return np.errstate(over="ignore", divide="ignore", invalid="ignore")


class Tensor:
    """A contiguous scalar buffer plus optional gradient tracking.

    `grad` accumulates across backward() calls until zero_grad(). Nodes built
    while grad mode is on keep op records (op id, parents, backward closure);
    the implied graph is acyclic by construction since parents predate children.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES else np.float32
        if np.dtype(dtype) not in FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {dtype}")
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        """Populate grads of all requires_grad ancestors of this scalar node."""
        if self.data.size != 1:
            raise ShapeError("backward requires a scalar loss node")
        order = trace_graph(self)
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def trace_graph(root: Tensor) -> list[Tensor]:
    """Topological order of the op records reachable from root (parents first)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        # first contribution: own a contiguous copy (g may be a view)
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _node(data: np.ndarray, parents: tuple, op: str, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._op = op
    return out


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != like.dtype:
            raise TypeError(f"mixed dtypes {x.dtype} vs {like.dtype}")
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape` (numpy trailing alignment)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.dtype))
    b = _coerce(b, a)
    data = _check_finite(a.data + b.data, "add")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.dtype))
    b = _coerce(b, a)
    data = _check_finite(a.data - b.data, "sub")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    b = _coerce(b, a)
    data = _check_finite(a.data * b.data, "mul")

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    b = _coerce(b, a)
    with _quiet():
        data = _check_finite(a.data / b.data, "div")

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), "div", backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), "neg", backward)


def power(a: Tensor, p: float) -> Tensor:
    with _quiet():
        data = _check_finite(a.data**p, "power")

    def backward(g):
        _accumulate(a, g * p * a.data ** (p - 1))

    return _node(data, (a,), "power", backward)


def sqrt(a: Tensor) -> Tensor:
    with _quiet():
        data = _check_finite(np.sqrt(a.data), "sqrt")

    def backward(g):
        _accumulate(a, g * 0.5 / data)

    return _node(data, (a,), "sqrt", backward)


def exp(a: Tensor) -> Tensor:
    with _quiet():
        data = _check_finite(np.exp(a.data), "exp")

    def backward(g):
        _accumulate(a, g * data)

    return _node(data, (a,), "exp", backward)


def log(a: Tensor) -> Tensor:
    with _quiet():
        data = _check_finite(np.log(a.data), "log")

    def backward(g):
        _accumulate(a, g / a.data)

    return _node(data, (a,), "log", backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - data * data))

    return _node(data, (a,), "tanh", backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _node(data, (a,), "relu", backward)


def absolute(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def backward(g):
        _accumulate(a, g * np.sign(a.data))

    return _node(data, (a,), "abs", backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; mask drawn from the caller's rng stream."""
    if p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)

    def backward(g):
        _accumulate(a, g * keep)

    return _node(a.data * keep, (a,), "dropout", backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product; >2-D operands contract over the last two axes
    with numpy batch broadcasting on the leading ones."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    with _quiet():
        data = _check_finite(np.matmul(a.data, b.data), "matmul")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    return _node(data, (a, b), "matmul", backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w (+ b) applied over the last axis of x (fused single node)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear dims disagree: {x.shape} @ {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    with _quiet():
        out = x2 @ w.data
        if b is not None:
            out += b.data
        data = _check_finite(out.reshape(lead + (w.shape[-1],)), "linear")

    def backward(g):
        g2 = g.reshape(-1, w.shape[-1])
        if x.requires_grad:
            _accumulate(x, (g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            _accumulate(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(data, parents, "linear", backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=(1, 1), pad=(0, 0)) -> Tensor:
    """2-D convolution (cross-correlation) via im2col.

    x: (B, Cin, H, W) or (Cin, H, W); w: (Cout, Cin, kH, kW). Output extents
    must divide exactly: H' = (H + 2*pH - kH)/sH + 1, likewise W'.
    """
    squeeze = x.ndim == 3
    x4 = reshape(x, (1,) + x.shape) if squeeze else x
    B, Cin, H, W = x4.shape
    Cout, Cin_w, kH, kW = w.shape
    sH, sW = stride
    pH, pW = pad
    if Cin_w != Cin:
        raise ShapeError(f"conv2d channel mismatch: input {Cin}, kernel {Cin_w}")
    if H + 2 * pH < kH or W + 2 * pW < kW:
        raise ShapeError("conv2d kernel larger than padded input")
    if (H + 2 * pH - kH) % sH or (W + 2 * pW - kW) % sW:
        raise ShapeError("conv2d non-integral output extent")
    Ho = (H + 2 * pH - kH) // sH + 1
    Wo = (W + 2 * pW - kW) // sW + 1

    xp = np.pad(x4.data, ((0, 0), (0, 0), (pH, pH), (pW, pW)))
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(Cin, kH, kW, B, Ho, Wo),
        strides=(s1, s2, s3, s0, s2 * sH, s3 * sW),
        writeable=False,
    )
    K = Cin * kH * kW
    cols = np.ascontiguousarray(view).reshape(K, B * Ho * Wo)
    w_mat = w.data.reshape(Cout, K)
    with _quiet():
        out_flat = w_mat @ cols
        if b is not None:
            out_flat += b.data[:, None]
        out = np.ascontiguousarray(out_flat.reshape(Cout, B, Ho, Wo).transpose(1, 0, 2, 3))
        _check_finite(out, "conv2d")

    def backward(g):
        g_flat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(Cout, -1)
        if w.requires_grad:
            _accumulate(w, (g_flat @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accumulate(b, g_flat.sum(axis=1))
        if x4.requires_grad:
            gcols = (w_mat.T @ g_flat).reshape(Cin, kH, kW, B, Ho, Wo)
            gxp = np.zeros_like(xp)
            for ki in range(kH):
                for kj in range(kW):
                    gxp[:, :, ki : ki + sH * Ho : sH, kj : kj + sW * Wo : sW] += \
                        gcols[:, ki, kj].transpose(1, 0, 2, 3)
            _accumulate(x4, gxp[:, :, pH : pH + H, pW : pW + W])

    parents = (x4, w) if b is None else (x4, w, b)
    out_t = _node(out, parents, "conv2d", backward)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    data = np.ascontiguousarray(a.data.reshape(shape))

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(data, (a,), "reshape", backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _node(data, (a,), "transpose", backward)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, np.ascontiguousarray(g[tuple(sl)]))

    return _node(data, tuple(tensors), "concat", backward)


def split(a: Tensor, axis: int, sizes: list[int]) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover axis extent {a.shape[axis]}")
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(lo, hi)
        piece = np.ascontiguousarray(a.data[tuple(sl)])

        def backward(g, lo=lo, hi=hi):
            gz = np.zeros_like(a.data)
            slz = [slice(None)] * a.ndim
            slz[axis] = slice(lo, hi)
            gz[tuple(slz)] = g
            _accumulate(a, gz)

        outs.append(_node(piece, (a,), "split", backward))
    return outs


def repeat_axis(a: Tensor, factor: int, axis: int) -> Tensor:
    """Nearest-neighbor upsampling: each slice along `axis` repeated `factor` times."""
    data = np.repeat(a.data, factor, axis=axis)

    def backward(g):
        shape = a.shape[:axis] + (a.shape[axis], factor) + a.shape[axis + 1 :]
        _accumulate(a, g.reshape(shape).sum(axis=axis + 1))

    return _node(data, (a,), "repeat_axis", backward)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup: returns idx.shape + (d,); scatter-adds grads back in index order."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range [0, {table.shape[0]})")
    data = np.ascontiguousarray(table.data[idx])

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx.reshape(-1), g.reshape(-1, table.shape[1]))

    return _node(data, (table,), "embedding", backward)


# ---------------------------------------------------------------------------
# reductions and normalized ops


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = _check_finite(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum")

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gk, a.shape).copy())

    return _node(data, (a,), "sum", backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(count))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically-stable softmax along `axis` (max subtraction)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        gx = data * (g - (g * data).sum(axis=axis, keepdims=True))
        _accumulate(x, gx)

    return _node(data, (x,), "softmax", backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax of a 2-D tensor; each output row sums to 1."""
    if x.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D tensor")
    return softmax(x, axis=-1)


def cross_entropy(logits: Tensor, targets: np.ndarray, select: np.ndarray | None = None) -> Tensor:
    """Mean over rows of -log softmax(logits)[target].

    `select` restricts the mean to the flagged rows; unselected rows get zero
    gradient and do not influence the value.
    """
    if logits.ndim != 2:
        raise ShapeError("cross_entropy expects logits of shape (n, C)")
    n, C = logits.shape
    if n == 0:
        raise ShapeError("cross_entropy on empty batch")
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    if targets.min() < 0 or targets.max() >= C:
        raise ShapeError(f"target index out of range [0, {C})")
    if select is None:
        rows = np.arange(n)
    else:
        rows = np.flatnonzero(np.asarray(select).reshape(-1))
        if rows.size == 0:
            raise ShapeError("no selected rows for cross_entropy")
    count = rows.size
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1, keepdims=True)
    log_probs = (logits.data - m) - np.log(z)
    data = np.asarray(-log_probs[rows, targets[rows]].mean(), dtype=logits.dtype)
    _check_finite(data, "cross_entropy")

    def backward(g):
        gx = np.zeros_like(logits.data)
        gx[rows] = (e / z)[rows]
        gx[rows, targets[rows]] -= 1.0
        _accumulate(logits, gx * (g / count))

    return _node(data, (logits,), "cross_entropy", backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift (fused single node)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    data = _check_finite(y * gain.data + bias.data, "layer_norm")

    def backward(g):
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * y).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (gy - m1 - y * m2))
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _accumulate(gain, (g * y).sum(axis=lead))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=lead))

    return _node(data, (x, gain, bias), "layer_norm", backward)


# ---------------------------------------------------------------------------
# parameter containers


class Module:
    """Minimal parameter registry; submodules are discovered by attribute scan."""

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend((f"{name}.{sub}", p) for sub, p in value.parameters())
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend((f"{name}.{i}.{sub}", p) for sub, p in item.parameters())
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{name}.{i}", item))
        return out

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()


def init_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
