"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` whenever at least one
input requires a gradient.  Outside a tape nothing is recorded, so inference
is a pure function of its inputs.

Broadcasting is intentionally narrow: binary ops accept equal shapes, a scalar
operand, or an operand whose shape is a trailing suffix of the other's (bias
add, positional embeddings).  Anything else is a shape error.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_ACTIVE: list["Tape"] = []


class TapeError(RuntimeError):
    """Raised on misuse of the tape (non-scalar loss, repeated backward)."""


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

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
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    recorded in execution order, which is already a topological order.
    """

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._ids: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def reset(self) -> None:
        for out, _, _ in self.ops:
            out._tape = None
        self.ops.clear()
        self._ids.clear()
        self.consumed = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        out._tape = self
        self.ops.append((out, inputs, rule))
        self._ids.add(id(out))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or id(loss) not in self._ids:
            raise TapeError("loss was not recorded on this tape")
        if self.consumed:
            raise TapeError("backward already ran on this tape; call reset() first")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, rule in reversed(self.ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, rule(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if id(inp) not in self._ids:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            leaf.grad = grads[key]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``."""
    if loss._tape is None:
        raise TapeError("loss is not on an active tape")
    loss._tape.backward(loss)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out.requires_grad = needs and bool(_ACTIVE)
    if out.requires_grad:
        _ACTIVE[-1].record(out, inputs, rule)
    return out


def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ValueError(f"shape mismatch: {a} vs {b}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# -- elementwise -------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def rule(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), rule)


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.abs(x), (a,), lambda g: (g * np.sign(x),))


# -- reductions --------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (a shared weight) or has the same leading batch axes as
    ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif bd.ndim == 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), rule)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (biased variance), then apply the affine pair."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm affine shape mismatch: {gamma.shape}, {beta.shape} for D={d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def rule(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), rule)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, channels-last.

    Args:
        x: input of shape (B, H, W, C).
        w: kernel of shape (kh, kw, C, O).
    Returns:
        Tensor of shape (B, Ho, Wo, O).
    """
    B, H, W, C = x.shape
    kh, kw, cin, O = w.shape
    if cin != C:
        raise ValueError(f"conv2d channel mismatch: input {C}, kernel {cin}")
    p = padding
    if p:
        xp = np.zeros((B, H + 2 * p, W + 2 * p, C))
        xp[:, p : p + H, p : p + W, :] = x.data
    else:
        xp = x.data
    Ho = (H + 2 * p - kh) // stride + 1
    Wo = (W + 2 * p - kw) // stride + 1
    cols = np.empty((B, Ho, Wo, kh, kw, C))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[
                :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride, :
            ]
    cols2 = cols.reshape(B * Ho * Wo, kh * kw * C)
    w2 = w.data.reshape(kh * kw * C, O)
    out = (cols2 @ w2).reshape(B, Ho, Wo, O)

    def rule(g):
        g2 = g.reshape(B * Ho * Wo, O)
        gw = (cols2.T @ g2).reshape(w.shape)
        if not x.requires_grad:
            return None, gw
        gcols = (g2 @ w2.T).reshape(B, Ho, Wo, kh, kw, C)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[
                    :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride, :
                ] += gcols[:, :, :, i, j, :]
        gx = gxp[:, p : p + H, p : p + W, :] if p else gxp
        return gx, gw

    return _make(out, (x, w), rule)


# -- shape ops ---------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for d, (s, r) in enumerate(zip(t.shape, ref)) if d != ax
        ):
            raise ValueError(f"concat shape mismatch: {ref} vs {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=ax),
        tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


def index(a: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(np.array(a.data[idx]), (a,), rule)


def expand(a: Tensor, shape) -> Tensor:
    """Repeat ``a`` along new leading axes so it has ``shape``."""
    shape = tuple(shape)
    if shape[len(shape) - a.ndim:] != a.shape:
        raise ValueError(f"cannot expand {a.shape} to {shape}")
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_reduce_to(g, old),))
