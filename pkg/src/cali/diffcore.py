"""Small reverse-mode autodiff engine on top of numpy.

Only the operators the segmentation networks and losses need are provided.
Tensors default to float32; building them from float64 arrays gives a 64-bit
graph, which the gradient checks rely on.
"""
from __future__ import annotations

import contextlib
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Tensor shapes do not line up."""


class ConfigError(ValueError):
    """Invalid operator or optimizer configuration."""


class UsageError(RuntimeError):
    pass


LOG_EPS = 1e-7

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference and evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_ufunc__ = None          # make ndarray (op) Tensor defer to the reflected Tensor operator

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float64:
            arr = arr.astype(np.float32, copy=False)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], back) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = back
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` slot of every leaf that requires it."""
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor with requires_grad=True")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    b = _lift(b, a)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


# ---------------------------------------------------------------- reductions / shape

def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype, copy=True),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (-1,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    """Repeat each pixel of a (C, H, W) tensor into a factor x factor block."""
    if factor == 1:
        return a
    c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, factor, axis=1), factor, axis=2)

    def back(g):
        return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    return _make(out, (a,), back)


# ---------------------------------------------------------------- activations

def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data >= 0
    scale = np.where(pos, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def sigmoid(a: Tensor) -> Tensor:
    eps = np.finfo(a.dtype).epsneg
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    # keep the range open: tanh saturates to +-1 in float32 for |x| > ~9
    out = np.clip(out, eps, 1.0 - eps).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a: Tensor, axis: int = 0) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back)


def log_clamped(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    if eps <= 0:
        raise ConfigError("log clamp eps must be positive")
    mask = a.data > eps
    safe = np.where(mask, a.data, eps)
    return _make(np.log(safe), (a,), lambda g: (np.where(mask, g / safe, 0.0).astype(a.dtype),))


# ---------------------------------------------------------------- convolution

def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a (C_in, H, W) input with a (C_out, C_in, k, k) kernel."""
    if x.data.ndim != 3:
        raise DimensionError(f"conv2d input must be (C, H, W), got {x.shape}")
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d kernel must be (C_out, C_in, k, k), got {w.shape}")
    c_in, h, wd = x.shape
    c_out, kc, k, _ = w.shape
    if kc != c_in:
        raise DimensionError(f"channel axis mismatch: input has {c_in}, kernel expects {kc}")
    if b is not None and b.shape != (c_out,):
        raise DimensionError(f"bias axis 0 must be {c_out}, got {b.shape}")
    if k < 1 or stride < 1 or pad < 0:
        raise ConfigError(f"bad conv config k={k} stride={stride} pad={pad}")
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv output size {ho}x{wo} for input {h}x{wd}, k={k}, stride={stride}, pad={pad}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (C_in, ho, wo, k, k) -> (ho*wo, C_in*k*k)
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c_in * k * k)
    wmat = w.data.reshape(c_out, -1)
    out = (cols @ wmat.T).T.reshape(c_out, ho, wo)
    if b is not None:
        out = out + b.data[:, None, None]
    out = out.astype(x.dtype, copy=False)

    def back(g):
        gm = g.reshape(c_out, ho * wo)
        gw = (gm @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(1, 2)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(c_in, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = gxp[:, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back)


# ---------------------------------------------------------------- init

def init_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int, name: str, dtype=np.float32):
    """Fan-in scaled uniform kernel, zero bias."""
    bound = math.sqrt(6.0 / (c_in * k * k))
    w = Tensor(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype),
               requires_grad=True, name=f"{name}.weight", dtype=dtype)
    b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True, name=f"{name}.bias", dtype=dtype)
    return w, b


# ---------------------------------------------------------------- optimizers

def _check_finite(p: Tensor) -> None:
    if p.grad is not None and not np.all(np.isfinite(p.grad)):
        raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay added to the gradient."""

    kind = "sgd_momentum"

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        if lr < 0:
            raise ConfigError("learning rate must be >= 0")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if lr < 0:
            raise ConfigError("learning rate must be >= 0")
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            _check_finite(p)
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data = (p.data - lr * v).astype(p.dtype, copy=False)
        self.steps += 1


class Adam:
    kind = "adam"

    def __init__(self, params: Iterable[Tensor], lr: float, betas: tuple[float, float] = (0.9, 0.99),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr < 0:
            raise ConfigError("learning rate must be >= 0")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if lr < 0:
            raise ConfigError("learning rate must be >= 0")
        self.steps += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            _check_finite(p)
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - upd).astype(p.dtype, copy=False)


@dataclass(frozen=True)
class PolySchedule:
    base_lr: float
    max_iters: int
    power: float = 0.9

    def __call__(self, it: int) -> float:
        return poly_lr(self, it)


def poly_lr(schedule: PolySchedule, it: int) -> float:
    """``base_lr * (1 - it / max_iters) ** power``, clamped to 0 past the end."""
    if it < 0:
        raise ConfigError("iteration must be >= 0")
    if it > schedule.max_iters:
        warnings.warn(f"iteration {it} beyond max_iters={schedule.max_iters}; lr clamped to 0")
        return 0.0
    return schedule.base_lr * (1.0 - it / schedule.max_iters) ** schedule.power
