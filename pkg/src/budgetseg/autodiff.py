"""Dense-tensor reverse-mode differentiation on float64 numpy arrays.

Each op computes its value eagerly and, while gradients are enabled,
records a closure that routes upstream gradients to its inputs.  Calling
``backward`` on a scalar walks the recorded graph once in reverse
topological order.  Every op output is checked finite; NaN/Inf anywhere is
an error state, not a value.
"""

from __future__ import annotations

import contextlib
import csv
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference mode); values are unchanged."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus an optional gradient and graph linkage."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        # single-pass finite check: any inf/nan makes the sum non-finite
        if not np.isfinite(self.value.sum()):
            raise FloatingPointError("tensor holds non-finite values")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: float = 1.0) -> None:
        """Reverse-mode sweep from this scalar; accumulates into ``grad``."""
        if self.value.size != 1:
            raise ValueError("backward requires a scalar loss node")
        order = _toposort(self)
        self.grad = np.full_like(self.value, float(seed))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
        for node in order:
            if node.requires_grad and node.grad is not None and not np.isfinite(node.grad.sum()):
                raise FloatingPointError("non-finite gradient encountered")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._backward_fn is not None


def _make(value: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(value)
    if _grad_enabled and any(_tracked(p) for p in parents):
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        # copy: g may alias an upstream gradient buffer
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value + b.value

    def backward(g):
        if _tracked(a):
            _accum(a, _unbroadcast(g, a.value.shape))
        if _tracked(b):
            _accum(b, _unbroadcast(g, b.value.shape))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value - b.value

    def backward(g):
        if _tracked(a):
            _accum(a, _unbroadcast(g, a.value.shape))
        if _tracked(b):
            _accum(b, _unbroadcast(-g, b.value.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value * b.value

    def backward(g):
        if _tracked(a):
            _accum(a, _unbroadcast(g * b.value, a.value.shape))
        if _tracked(b):
            _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def backward(g):
        if _tracked(a):
            _accum(a, _unbroadcast(g / b.value, a.value.shape))
        if _tracked(b):
            _accum(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return _make(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = a.value @ b.value

    def backward(g):
        if _tracked(a):
            _accum(a, g @ b.value.T)
        if _tracked(b):
            _accum(b, a.value.T @ g)

    return _make(out, (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.value, 0.0)

    def backward(g):
        if _tracked(a):
            _accum(a, g * (a.value > 0.0))

    return _make(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        if _tracked(a):
            _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)

    def backward(g):
        if _tracked(a):
            _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.value)

    def backward(g):
        if _tracked(a):
            _accum(a, g / a.value)

    return _make(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if _tracked(a):
            inner = (g * out).sum(axis=axis, keepdims=True)
            _accum(a, out * (g - inner))

    return _make(out, (a,), backward)


def _axis_tuple(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    axes = _axis_tuple(axis, a.value.ndim)

    def backward(g):
        if _tracked(a):
            gg = g
            if not keepdims:
                for ax in sorted(axes):
                    gg = np.expand_dims(gg, ax)
            _accum(a, np.broadcast_to(gg, a.value.shape).copy())

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.value.ndim)
    count = float(np.prod([a.value.shape[ax] for ax in axes])) if axes else 1.0
    out = a.value.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if _tracked(a):
            gg = g
            if not keepdims:
                for ax in sorted(axes):
                    gg = np.expand_dims(gg, ax)
            _accum(a, np.broadcast_to(gg, a.value.shape) / count)

    return _make(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.value.reshape(shape)

    def backward(g):
        if _tracked(a):
            _accum(a, g.reshape(a.value.shape))

    return _make(out, (a,), backward)


def getitem(a, key) -> Tensor:
    """Basic slicing (ints, slices, ellipsis); backward scatters into zeros."""
    a = as_tensor(a)
    out = a.value[key]

    def backward(g):
        if _tracked(a):
            scatter = np.zeros_like(a.value)
            scatter[key] += g
            _accum(a, scatter)

    return _make(out, (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in ts], axis=axis)
    sizes = [t.value.shape[axis] for t in ts]

    def backward(g):
        offset = 0
        for t, size in zip(ts, sizes):
            if _tracked(t):
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + size)
                _accum(t, g[tuple(index)])
            offset += size

    return _make(out, tuple(ts), backward)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.value.shape[:axis] + (1,) + t.value.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B,H,W,C) -> (B*H*W, kh*kw*C) patch matrix under same padding."""
    b, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    # windows: (B, H, W, C, kh, kw) -> (B*H*W, kh*kw*C)
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, kh * kw * c)


def conv2d(x, w) -> Tensor:
    """Stride-1, same-padding 2-D convolution.

    x: (B, H, W, Cin); w: (kh, kw, Cin, Cout) with odd kh, kw.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ValueError("conv2d expects x (B,H,W,Cin) and w (kh,kw,Cin,Cout)")
    kh, kw, cin, cout = w.value.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel dims must be odd (same padding)")
    if x.value.shape[3] != cin:
        raise ValueError("channel mismatch between input and kernel")
    b, h, ww_, _ = x.value.shape
    cols = _im2col(x.value, kh, kw)
    out = (cols @ w.value.reshape(kh * kw * cin, cout)).reshape(b, h, ww_, cout)

    def backward(g):
        gmat = g.reshape(b * h * ww_, cout)
        if _tracked(w):
            _accum(w, (cols.T @ gmat).reshape(kh, kw, cin, cout))
        if _tracked(x):
            # gradient wrt input = correlation of g with the flipped kernel,
            # in/out channels swapped
            wflip = w.value[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
            gcols = _im2col(g, kh, kw)
            _accum(x, (gcols @ wflip).reshape(x.value.shape))

    return _make(out, (x, w), backward)


def upsample2x(a) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of (B, H, W, C)."""
    a = as_tensor(a)
    if a.value.ndim != 4:
        raise ValueError("upsample2x expects (B,H,W,C)")
    out = np.repeat(np.repeat(a.value, 2, axis=1), 2, axis=2)

    def backward(g):
        if _tracked(a):
            b, h2, w2, c = g.shape
            _accum(a, g.reshape(b, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4)))

    return _make(out, (a,), backward)


def embedding_lookup(onehot, table) -> Tensor:
    """Rows of ``table`` selected by one-hot rows: (B,C) x (C,D) -> (B,D)."""
    return matmul(as_tensor(onehot), table)


def cross_entropy_logits(logits, onehot_targets) -> Tensor:
    """Per-row cross-entropy over the last axis, from raw logits.

    Targets are plain (non-differentiable) one-hot arrays.  Numerically
    stable log-sum-exp formulation; gradient is softmax(logits) - onehot.
    """
    a = as_tensor(logits)
    t = np.asarray(onehot_targets, dtype=np.float64)
    if t.shape != a.value.shape:
        raise ValueError("one-hot targets must match logits shape")
    z = a.value
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[..., 0]
    out = lse - (z * t).sum(axis=-1)

    def backward(g):
        if _tracked(a):
            e = np.exp(z - zmax)
            sm = e / e.sum(axis=-1, keepdims=True)
            _accum(a, g[..., None] * (sm - t))

    return _make(out, (a,), backward)


def binary_cross_entropy_logits(logits, targets) -> Tensor:
    """Elementwise BCE from raw logits: softplus(z) - t*z; grad sigmoid(z)-t."""
    a = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    z = a.value
    out = np.logaddexp(0.0, z) - t * z

    def backward(g):
        if _tracked(a):
            s = np.empty_like(z)
            pos = z >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
            ez = np.exp(z[~pos])
            s[~pos] = ez / (1.0 + ez)
            _accum(a, g * (s - t))

    return _make(out, (a,), backward)


# ----------------------------------------------------------------- training


class SGD:
    """Gradient descent with classic momentum; updates parameters in place.

    v <- momentum * v + grad;  p <- p - lr * v
    """

    def __init__(self, params, lr: float, momentum: float = 0.0):
        self.params = list(params.values()) if isinstance(params, dict) else list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            if p.grad.shape != p.value.shape:
                raise ValueError("gradient shape does not match parameter")
            v *= self.momentum
            v += p.grad
            p.value -= self.lr * v
            if not np.isfinite(p.value).all():
                raise FloatingPointError("parameter became non-finite during update")


def glorot_uniform(shape: tuple[int, ...], rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path_base: str, params: dict[str, Tensor]) -> None:
    """Write ``<base>.csv`` (name, shape) and ``<base>.bin`` (LE doubles)."""
    with open(path_base + ".csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "shape"])
        for name, p in params.items():
            writer.writerow([name, " ".join(str(d) for d in p.value.shape)])
    with open(path_base + ".bin", "wb") as fh:
        for p in params.values():
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path_base: str) -> dict[str, np.ndarray]:
    """Read arrays back; bit-exact round trip of ``save_checkpoint``."""
    entries: list[tuple[str, tuple[int, ...]]] = []
    with open(path_base + ".csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["name", "shape"]:
            raise ValueError(f"unexpected checkpoint header: {header}")
        for name, shape_text in reader:
            shape = tuple(int(d) for d in shape_text.split()) if shape_text else ()
            entries.append((name, shape))
    raw = np.fromfile(path_base + ".bin", dtype="<f8")
    out: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in entries:
        size = int(np.prod(shape)) if shape else 1
        out[name] = raw[offset : offset + size].reshape(shape).astype(np.float64)
        offset += size
    if offset != raw.size:
        raise ValueError("checkpoint payload size does not match header")
    return out


def load_params_into(path_base: str, params: dict[str, Tensor]) -> None:
    arrays = load_checkpoint(path_base)
    if set(arrays) != set(params):
        raise ValueError("checkpoint parameter names do not match model")
    for name, arr in arrays.items():
        if arr.shape != params[name].value.shape:
            raise ValueError(f"shape mismatch for {name}")
        params[name].value = arr
