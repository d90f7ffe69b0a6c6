"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: every operation produces a Tensor holding its value and a
list of (parent, vjp) pairs; `backward()` walks the tape in reverse
topological order and accumulates gradients into leaf tensors. Everything
is float64. The op set is exactly what the encoders, fusion block, and
losses need; softmax-family ops use max-subtraction stabilization with the
max treated as a constant, which is exact for the gradient.

Broadcasting follows numpy semantics; vjps reduce gradients back to the
parent's shape with `_unbroadcast`.
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips tape construction (forward values only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Array node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False, _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents) if (requires_grad and _GRAD_ENABLED) else ()

    # ---- construction helpers -------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _make(data, parents) -> "Tensor":
        live = [(p, vjp) for p, vjp in parents if p.requires_grad]
        return Tensor(data, requires_grad=bool(live) and _GRAD_ENABLED, _parents=live)

    # ---- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # ---- arithmetic --------------------------------------------------------

    def __add__(self, other):
        a, b = self, self._lift(other)
        out = self._make(a.data + b.data, [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ])
        return out

    __radd__ = __add__

    def __neg__(self):
        a = self
        return self._make(-a.data, [(a, lambda g: -g)])

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        a, b = self, self._lift(other)
        out = self._make(a.data * b.data, [
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ])
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, self._lift(other)
        out = self._make(a.data / b.data, [
            (a, lambda g: _unbroadcast(g / b.data, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        ])
        return out

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are differentiable here")
        a = self
        return self._make(a.data ** p, [(a, lambda g: g * p * (a.data ** (p - 1)))])

    def __matmul__(self, other):
        a, b = self, self._lift(other)
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul operands must have ndim >= 2")
        out = self._make(a.data @ b.data, [
            (a, lambda g: _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)),
            (b, lambda g: _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)),
        ])
        return out

    def __getitem__(self, key):
        a = self

        def vjp(g):
            out = np.zeros_like(a.data)
            out[key] = g
            return out

        return self._make(a.data[key], [(a, vjp)])

    # ---- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return self._make(a.data.reshape(shape), [(a, lambda g: g.reshape(a.shape))])

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = tuple(np.argsort(axes))
        return self._make(a.data.transpose(axes), [(a, lambda g: g.transpose(inv))])

    # ---- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, a.shape).copy() if np.ndim(g) == 0 else np.full(a.shape, g)
            gg = g
            if not keepdims:
                ax = axis if isinstance(axis, tuple) else (axis,)
                for ax_i in sorted(a_ % a.ndim for a_ in ax):
                    gg = np.expand_dims(gg, ax_i)
            return np.broadcast_to(gg, a.shape).copy()

        return self._make(data, [(a, vjp)])

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a_] for a_ in ax]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ---- elementwise functions -------------------------------------------

    def exp(self):
        a = self
        y = np.exp(a.data)
        return self._make(y, [(a, lambda g: g * y)])

    def log(self):
        a = self
        return self._make(np.log(a.data), [(a, lambda g: g / a.data)])

    def sqrt(self):
        a = self
        y = np.sqrt(a.data)
        return self._make(y, [(a, lambda g: g * 0.5 / y)])

    def tanh(self):
        a = self
        y = np.tanh(a.data)
        return self._make(y, [(a, lambda g: g * (1.0 - y * y))])

    # ---- backward ----------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._parents:
                contribution = vjp(g)
                if parent.grad is None:
                    parent.grad = contribution
                else:
                    parent.grad = parent.grad + contribution


# ---- stabilized softmax family ---------------------------------------------


def logsumexp(t: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max-subtracted log-sum-exp; the subtracted max is a constant for grads."""
    m = np.max(t.data, axis=axis, keepdims=True)
    y = np.log(np.sum(np.exp(t.data - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        y = np.squeeze(y, axis=axis)
    soft = np.exp(t.data - m)
    soft = soft / soft.sum(axis=axis, keepdims=True)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return gg * soft

    return Tensor._make(y, [(t, vjp)])


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    m = np.max(t.data, axis=axis, keepdims=True)
    shifted = t.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    soft = np.exp(y)

    def vjp(g):
        return g - soft * g.sum(axis=axis, keepdims=True)

    return Tensor._make(y, [(t, vjp)])


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    m = np.max(t.data, axis=axis, keepdims=True)
    e = np.exp(t.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return Tensor._make(y, [(t, vjp)])


def softplus(t: Tensor) -> Tensor:
    """Numerically stable log(1 + exp(x)); gradient is the logistic sigmoid."""
    x = t.data
    y = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, 0, None))),
                   np.exp(np.clip(x, None, 0)) / (1.0 + np.exp(np.clip(x, None, 0))))

    def vjp(g):
        return g * sig

    return Tensor._make(y, [(t, vjp)])


def gelu(t: Tensor) -> Tensor:
    """tanh-form GELU; smooth everywhere, which keeps finite differences clean."""
    c = np.sqrt(2.0 / np.pi)
    inner = (t + 0.044715 * (t * t * t)) * c
    return 0.5 * (t * (1.0 + inner.tanh()))


# ---- lookup and convolution --------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather with scatter-add backward: output[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids, dtype=np.int64)
    d = table.shape[-1]

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, d))
        return out

    return Tensor._make(table.data[ids], [(table, vjp)])


def conv3d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """3-D cross-correlation, same stride/padding on every axis.

    x: (B, Cin, X, Y, Z); w: (Cout, Cin, kx, ky, kz). Implemented as one
    accumulation per kernel offset over strided slices, which keeps both
    the forward and the two backward passes fully vectorized.
    """
    B, Cin, X, Y, Z = x.shape
    Cout, Cin_w, kx, ky, kz = w.shape
    if Cin != Cin_w:
        raise ValueError(f"conv3d channel mismatch: input {Cin}, weight {Cin_w}")
    s, p = int(stride), int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
    Xp, Yp, Zp = X + 2 * p, Y + 2 * p, Z + 2 * p
    Ox, Oy, Oz = (Xp - kx) // s + 1, (Yp - ky) // s + 1, (Zp - kz) // s + 1
    if min(Ox, Oy, Oz) < 1:
        raise ValueError(f"conv3d output would be empty for input {x.shape}")

    def slices(dx, dy, dz):
        return (slice(None), slice(None),
                slice(dx, dx + s * (Ox - 1) + 1, s),
                slice(dy, dy + s * (Oy - 1) + 1, s),
                slice(dz, dz + s * (Oz - 1) + 1, s))

    out = np.zeros((B, Ox, Oy, Oz, Cout))
    for dx in range(kx):
        for dy in range(ky):
            for dz in range(kz):
                patch = xp[slices(dx, dy, dz)]  # (B, Cin, Ox, Oy, Oz)
                flat = np.ascontiguousarray(patch.transpose(0, 2, 3, 4, 1)).reshape(-1, Cin)
                out += (flat @ w.data[:, :, dx, dy, dz].T).reshape(B, Ox, Oy, Oz, Cout)
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))

    def vjp_x(g):
        gp = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, Cout)
        gxp = np.zeros((B, Cin, Xp, Yp, Zp))
        for dx in range(kx):
            for dy in range(ky):
                for dz in range(kz):
                    contrib = (gp @ w.data[:, :, dx, dy, dz]).reshape(B, Ox, Oy, Oz, Cin)
                    gxp[slices(dx, dy, dz)] += contrib.transpose(0, 4, 1, 2, 3)
        return gxp[:, :, p:p + X, p:p + Y, p:p + Z] if p else gxp

    def vjp_w(g):
        gp = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, Cout)
        gw = np.zeros_like(w.data)
        for dx in range(kx):
            for dy in range(ky):
                for dz in range(kz):
                    patch = xp[slices(dx, dy, dz)]
                    flat = np.ascontiguousarray(patch.transpose(0, 2, 3, 4, 1)).reshape(-1, Cin)
                    gw[:, :, dx, dy, dz] = gp.T @ flat
        return gw

    return Tensor._make(out, [(x, vjp_x), (w, vjp_w)])
