"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor with ``requires_grad`` records its
parents and a backward rule on the result.  ``backward`` walks the recorded
graph in reverse topological order (the tape) and accumulates gradients into
the leaves.  Recording is per-thread, so independent replicas can run on
separate threads.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateLossError(ValueError):
    """A loss has no contributing positions."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    # make numpy defer to Tensor's reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # operators
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
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
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _result(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), bw)


# reductions and shape


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # shared weight: fold every leading axis into one gemm
        lead = a.shape[:-1]
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(lead + (b.shape[1],))

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), bw2)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                # shared weight: fold every leading axis into one matmul
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw)


# fused layers


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; ``mask`` (broadcastable bool) marks allowed entries.

    Disallowed entries get probability exactly 0.  A row with no allowed
    entry yields all zeros.
    """
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _result(out, (x, gamma, beta), bw)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of ``table`` at integer ``idx`` (any shape)."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _result(table.data[idx], (table,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def straight_through(z_e: Tensor, z_q: np.ndarray) -> Tensor:
    """Forward value ``z_q``; gradient passes unchanged to ``z_e``."""
    return _result(np.array(z_q, dtype=DTYPE), (z_e,), lambda g: (g,))


def softmax_cross_entropy(logits: Tensor, targets, ignore=None) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows not marked in ``ignore``."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {targets.shape[0]} targets")
    ignore = np.zeros(n, dtype=bool) if ignore is None else np.asarray(ignore, dtype=bool).reshape(-1)
    keep = ~ignore
    count = int(keep.sum())
    if count == 0:
        raise DegenerateLossError("every position is ignored")
    safe_t = np.where(keep, targets, 0)
    if np.any((safe_t < 0) | (safe_t >= v)):
        raise IndexError(f"target outside [0, {v})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    nll = lse - z[np.arange(n), safe_t]
    loss = math.fsum(nll[keep]) / count  # exactly rounded, so independent of row order

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), safe_t] -= 1.0
        return (p * (keep[:, None] * (float(g) / count)),)

    return _result(np.asarray(loss), (logits,), bw)


def mse(a: Tensor, b) -> Tensor:
    d = sub(a, b)
    return mean(d * d)


# convolution


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if k < 1 or stride < 1 or span < 0 or span % stride:
        raise DimensionError(f"conv size {n} with kernel {k}, stride {stride}, pad {pad} is not integral")
    return span // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """[B,C,Hp,Wp] -> strided view [B,C,Ho,Wo,k,k]."""
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : stride * Ho : stride, : stride * Wo : stride]


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, stride: int) -> np.ndarray:
    """Adjoint of ``_windows``: cols [B,C,Ho,Wo,k,k] summed into an array of ``shape``."""
    out = np.zeros(shape, dtype=DTYPE)
    Ho, Wo = cols.shape[2:4]
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += cols[..., i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x [B,C,H,W] with w [O,C,k,k] -> [B,O,H',W']."""
    B, C, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if Cw != C or k != k2:
        raise DimensionError(f"conv weight {w.shape} does not match input {x.shape}")
    Ho = conv_output_size(H, k, stride, pad)
    Wo = conv_output_size(W, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = _windows(xp, k, stride, Ho, Wo)
    # [B,Ho,Wo,O] -> [B,O,Ho,Wo]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            # [B,Ho,Wo,C,k,k] -> [B,C,Ho,Wo,k,k]
            cols = np.tensordot(g, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            gxp = _col2im(cols, xp.shape, k, stride)
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(np.ascontiguousarray(out), parents, bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution of x [B,C,H,W] with w [C,O,k,k] -> [B,O,(H-1)s-2p+k,...]."""
    B, C, H, W = x.shape
    Cw, O, k, k2 = w.shape
    if Cw != C or k != k2:
        raise DimensionError(f"transposed conv weight {w.shape} does not match input {x.shape}")
    Hf = (H - 1) * stride + k
    Wf = (W - 1) * stride + k
    Ho, Wo = Hf - 2 * pad, Wf - 2 * pad
    if Ho < 1 or Wo < 1:
        raise DimensionError("transposed conv output is empty")
    # [B,H,W,O,k,k] -> [B,O,H,W,k,k]
    cols = np.tensordot(x.data, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    full = _col2im(cols, (B, O, Hf, Wf), k, stride)
    out = full[:, :, pad : pad + Ho, pad : pad + Wo]
    if b is not None:
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gf = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        win = _windows(gf, k, stride, H, W)  # [B,O,H,W,k,k]
        gx = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(np.ascontiguousarray(out), parents, bw)


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))


class Adam:
    """Adam with optional linear warmup, cosine decay, and global-norm clipping.

    ``m``/``v`` hold first and second moments keyed by parameter name.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        warmup: int = 0,
        clip_norm: float | None = None,
        decay_steps: int | None = None,
    ):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.warmup = warmup
        self.clip_norm = clip_norm
        self.decay_steps = decay_steps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def current_lr(self) -> float:
        if self.warmup and self.step_count < self.warmup:
            return self.lr * (self.step_count + 1) / self.warmup
        if self.decay_steps:
            # cosine from lr down to zero over the steps after warmup
            span = max(self.decay_steps - self.warmup, 1)
            frac = min(max(self.step_count - self.warmup, 0) / span, 1.0)
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
        return self.lr

    def step(self) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        norm = global_norm(grads.values())
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        lr = self.current_lr()
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, g in grads.items():
            g = g * scale
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            self.params[k].data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm


def finite_difference_grads(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-5) -> list[np.ndarray]:
    """Central differences of scalar ``fn(*tensors)`` with respect to each input."""
    arrays = [np.array(x, dtype=DTYPE) for x in inputs]
    out = []
    with no_grad():
        for a in arrays:
            g = np.zeros_like(a)
            flat, gflat = a.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = fn(*[Tensor(x) for x in arrays]).item()
                flat[i] = orig - step
                lo = fn(*[Tensor(x) for x in arrays]).item()
                flat[i] = orig
                gflat[i] = (hi - lo) / (2 * step)
            out.append(g)
    return out


def gradient_errors(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-5) -> list[float]:
    """Normwise relative error between autodiff and central-difference gradients."""
    leaves = [Tensor(np.array(x, dtype=DTYPE), requires_grad=True) for x in inputs]
    backward(fn(*leaves))
    numeric = finite_difference_grads(fn, inputs, step)
    errs = []
    for leaf, num in zip(leaves, numeric):
        ana = np.zeros_like(num) if leaf.grad is None else leaf.grad
        denom = max(np.linalg.norm(ana), np.linalg.norm(num))
        errs.append(0.0 if denom < 1e-12 else float(np.linalg.norm(ana - num) / denom))
    return errs
