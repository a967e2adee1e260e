"""Dense float64 tensors with reverse-mode differentiation.

Every op builds a node holding its inputs and a closure mapping the output
gradient to one gradient per input.  ``Tensor.backward`` walks the graph in
reverse topological order and accumulates into leaves.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "no_grad", "is_grad_enabled", "as_tensor",
    "matmul", "scaled_softmax", "log_softmax", "reshape_v", "reshape_v_inv",
    "concat", "stack", "relu", "sigmoid", "softplus", "smooth_l1",
    "conv2d", "bilinear_gather", "pad_edge_even", "downsample_fixed",
    "avg_pool", "grad_check", "DOWNSAMPLE_OPS",
]

DOWNSAMPLE_OPS = ("naive_subsample", "max_pool2", "linear_proj2", "gap")

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """A float64 array that can record the ops applied to it."""

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- construction -------------------------------------------------
    @classmethod
    def _from_op(cls, data, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- introspection ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autograd -----------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic ---------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._from_op(
            a.data + b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._from_op(
            a.data * b.data, (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._from_op(
            a.data / b.data, (a, b),
            lambda g: (_unbroadcast(g / b.data, a.shape),
                       _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        x = self
        out = x.data[idx]
        fancy = _has_fancy(idx)

        def backward(g):
            full = np.zeros_like(x.data)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            return (full,)

        return Tensor._from_op(out, (x,), backward)

    # -- reductions and shape -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        x = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return Tensor._from_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def amax(self, axis: int):
        """Max along one axis; ties send the gradient to the first maximum."""
        x = self
        arg = np.argmax(x.data, axis=axis)
        out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

        def backward(g):
            full = np.zeros_like(x.data)
            np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
            return (full,)

        return Tensor._from_op(out, (x,), backward)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        x = self
        return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    # -- elementwise --------------------------------------------------
    def relu(self):
        return relu(self)

    def exp(self):
        x = self
        out = np.exp(x.data)
        return Tensor._from_op(out, (x,), lambda g: (g * out,))

    def log(self):
        x = self
        return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))

    def abs(self):
        x = self
        return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def _has_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# linear algebra and normalisation

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of the last two axes, batched over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(np.matmul(a.data, b.data), (a, b), backward)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def scaled_softmax(logits: Tensor, tau: float) -> Tensor:
    """softmax(logits / tau) over the last axis."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x = as_tensor(logits)
    y = _softmax_np(x.data / tau)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)) / tau,)

    return Tensor._from_op(y, (x,), backward)


def log_softmax(logits: Tensor) -> Tensor:
    x = as_tensor(logits)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._from_op(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = as_tensor(x)
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return Tensor._from_op(out, (x,), lambda g: (g * sig,))


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style smooth L1."""
    x = as_tensor(x)
    d = x.data
    ad = np.abs(d)
    small = ad < beta
    out = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    return Tensor._from_op(out, (x,), lambda g: (g * np.where(small, d / beta, np.sign(d)),))


# ---------------------------------------------------------------------------
# reshaping

def reshape_v(t: Tensor) -> Tensor:
    """Flatten a4-last tensor a1 x a2 x a3 x a4 to a (a1*a2*a3) x a4 matrix."""
    t = as_tensor(t)
    if t.ndim != 4:
        raise ShapeError(f"reshape_v expects a 4-d tensor, got shape {t.shape}")
    a1, a2, a3, a4 = t.shape
    return t.reshape(a1 * a2 * a3, a4)


def reshape_v_inv(m: Tensor, shape: Sequence[int]) -> Tensor:
    m = as_tensor(m)
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or m.ndim != 2 or shape[0] * shape[1] * shape[2] != m.shape[0] or shape[3] != m.shape[1]:
        raise ShapeError(f"reshape_v_inv: cannot view {m.shape} as {shape}")
    return m.reshape(shape)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([as_tensor(t).reshape(*_insert(t.shape, axis)) for t in tensors], axis=axis)


def _insert(shape, axis):
    s = list(shape)
    s.insert(axis if axis >= 0 else len(s) + 1 + axis, 1)
    return tuple(s)


# ---------------------------------------------------------------------------
# convolution, pooling, sampling

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """NHWC convolution with an (kh, kw, C_in, C_out) kernel, via im2col."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    B, H, W, C = x.shape
    kh, kw, _, co = weight.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    Hp, Wp = xp.shape[1], xp.shape[2]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")
    sb, sh, sw, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(B, Ho, Wo, kh, kw, C), strides=(sb, sh * stride, sw * stride, sh, sw, sc), writeable=False)
    cols = view.reshape(B * Ho * Wo, kh * kw * C)
    wmat = weight.data.reshape(kh * kw * C, co)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, co)
    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))

    def backward(g):
        g2 = g.reshape(B * Ho * Wo, co)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, C)
            gxp = np.zeros((B, Hp, Wp, C))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:Hp - padding, padding:Wp - padding, :] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._from_op(out, parents, backward)


def pad_edge_even(t: Tensor) -> Tensor:
    """Replicate the last row/column of the two spatial axes (-3, -2) up to even size."""
    t = as_tensor(t)
    h, w = t.shape[-3], t.shape[-2]
    if h % 2 == 0 and w % 2 == 0:
        return t
    ri = np.minimum(np.arange(2 * math.ceil(h / 2)), h - 1)
    ci = np.minimum(np.arange(2 * math.ceil(w / 2)), w - 1)
    lead = (slice(None),) * (t.ndim - 3)
    return t[lead + (ri,)][lead + (slice(None), ci)]


def _windows2(t: Tensor) -> Tensor:
    """(..., 2a, 2b, C) -> (..., a, b, 4*C) with window offsets ordered (di, dj, c)."""
    *lead, h, w, c = t.shape
    nl = len(lead)
    t = t.reshape(*lead, h // 2, 2, w // 2, 2, c)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return t.transpose(perm).reshape(*lead, h // 2, w // 2, 4 * c)


def downsample_fixed(t: Tensor, op: str) -> Tensor:
    """Parameter-free spatial downsampling over axes (-3, -2).

    ``linear_proj2`` needs a learned kernel and lives in
    :class:`cellctx.nn.StridedProjection`.
    """
    t = as_tensor(t)
    lead = (slice(None),) * (t.ndim - 3)
    if op == "naive_subsample":
        return t[lead + (slice(None, None, 2), slice(None, None, 2))]
    if op == "max_pool2":
        p = pad_edge_even(t)
        *ld, h, w, c = p.shape
        win = p.reshape(*ld, h // 2, 2, w // 2, 2, c)
        nl = len(ld)
        win = win.transpose(tuple(range(nl)) + (nl, nl + 2, nl + 4, nl + 1, nl + 3))
        return win.reshape(*ld, h // 2, w // 2, c, 4).amax(axis=-1)
    if op == "gap":
        return t.mean(axis=(-3, -2), keepdims=True)
    raise ValueError(f"unknown downsample op {op!r}; expected one of {DOWNSAMPLE_OPS}")


def avg_pool(t: Tensor, ratio: int) -> Tensor:
    """Non-overlapping ratio x ratio mean pooling of axes (-3, -2); edges replicate-padded."""
    t = as_tensor(t)
    if ratio == 1:
        return t
    *lead, h, w, c = t.shape
    hp, wp = -(-h // ratio) * ratio, -(-w // ratio) * ratio
    if (hp, wp) != (h, w):
        ld = (slice(None),) * len(lead)
        t = t[ld + (np.minimum(np.arange(hp), h - 1),)][ld + (slice(None), np.minimum(np.arange(wp), w - 1))]
    nl = len(lead)
    t = t.reshape(*lead, hp // ratio, ratio, wp // ratio, ratio, c)
    return t.mean(axis=(nl + 1, nl + 3))


def upsample2(t: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of axes (-3, -2)."""
    t = as_tensor(t)
    *lead, h, w, c = t.shape
    out = np.repeat(np.repeat(t.data, 2, axis=-3), 2, axis=-2)

    def backward(g):
        return (g.reshape(*lead, h, 2, w, 2, c).sum(axis=(-4, -2)),)
    return Tensor._from_op(out, (t,), backward)


def bilinear_gather(fmap: Tensor, batch_idx: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> Tensor:
    """Bilinearly sample ``fmap`` (B, H, W, C) at continuous cell coordinates.

    Coordinates are clamped to the map; ``batch_idx``, ``ys`` and ``xs`` share
    a shape S and the result has shape S + (C,).
    """
    fmap = as_tensor(fmap)
    B, H, W, C = fmap.shape
    y = np.clip(np.asarray(ys, dtype=np.float64), 0.0, H - 1)
    x = np.clip(np.asarray(xs, dtype=np.float64), 0.0, W - 1)
    b = np.asarray(batch_idx, dtype=np.int64)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy, wx = y - y0, x - x0
    flat = fmap.data.reshape(B * H * W, C)
    idx = [(b * H + yy) * W + xx for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))]
    wts = [(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx]
    out = sum(w[..., None] * flat[i] for i, w in zip(idx, wts))

    def backward(g):
        gflat = np.zeros_like(flat)
        g2 = g.reshape(-1, C)
        for i, w in zip(idx, wts):
            np.add.at(gflat, i.ravel(), w.reshape(-1, 1) * g2)
        return (gflat.reshape(fmap.shape),)

    return Tensor._from_op(out, (fmap,), backward)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
               max_coords_per_param: int | None = 16, seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` recomputes a scalar loss from the current values of ``params``.
    The error per coordinate is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("grad_check: loss is not finite")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        g_ad = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        n = p.data.size
        if max_coords_per_param is None or n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=max_coords_per_param, replace=False))
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError("grad_check: parameter data must be contiguous")
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError("grad_check: loss is not finite under perturbation")
            g_fd = (fp - fm) / (2 * eps)
            ga = float(g_ad.reshape(-1)[i])
            err = abs(ga - g_fd) / max(1.0, abs(ga), abs(g_fd))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
