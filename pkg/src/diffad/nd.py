"""Reverse-mode autodiff over dense numpy arrays.

The graph is recorded implicitly: every primitive returns a ``Tensor``
that keeps references to its parents and the vector-Jacobian closures
needed to push a gradient back through it.  Arrays are immutable values
from the caller's perspective; primitives always allocate fresh outputs.

A tape belongs to one logical training step and must not be shared
across concurrent steps.  The pure array helpers at the bottom
(``fft_causal_convolve`` on plain ndarrays) are safe to call from
parallel workers.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import NumericError

DEFAULT_DTYPE = np.float64


class Tensor:
    """One node of the recorded computation graph."""

    __slots__ = ("data", "parents", "vjps")

    def __init__(self, data, parents=(), vjps=()):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        kind = "leaf" if not self.parents else "node"
        return f"Tensor({kind}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        # only small positive integer powers are recorded (x*x*... chain)
        if not isinstance(p, int) or p < 1:
            raise ValueError("only positive integer powers are supported")
        out = self
        for _ in range(p - 1):
            out = mul(out, self)
        return out

    def __getitem__(self, idx):
        return take(self, idx)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = _lift(a), _lift(b)
    return Tensor(
        a.data + b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
    )


def neg(a):
    a = _lift(a)
    return Tensor(-a.data, (a,), (lambda g: -g,))


def sub(a, b):
    a, b = _lift(a), _lift(b)
    return Tensor(
        a.data - b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(-g, b.data.shape),
        ),
    )


def mul(a, b):
    a, b = _lift(a), _lift(b)
    return Tensor(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    a, b = _lift(a), _lift(b)
    return Tensor(
        a.data / b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def exp(a):
    a = _lift(a)
    out = np.exp(a.data)
    return Tensor(out, (a,), (lambda g: g * out,))


def log(a):
    a = _lift(a)
    return Tensor(np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a):
    a = _lift(a)
    out = np.sqrt(a.data)
    return Tensor(out, (a,), (lambda g: g * (0.5 / out),))


def sin(a):
    a = _lift(a)
    return Tensor(np.sin(a.data), (a,), (lambda g: g * np.cos(a.data),))


def cos(a):
    a = _lift(a)
    return Tensor(np.cos(a.data), (a,), (lambda g: -g * np.sin(a.data),))


def tanh(a):
    a = _lift(a)
    out = np.tanh(a.data)
    return Tensor(out, (a,), (lambda g: g * (1.0 - out * out),))


def relu(a):
    a = _lift(a)
    keep = a.data > 0
    return Tensor(np.where(keep, a.data, 0.0), (a,), (lambda g: g * keep,))


def sigmoid(a):
    a = _lift(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor(out, (a,), (lambda g: g * out * (1.0 - out),))


def silu(a):
    """x * sigmoid(x), composed from recorded primitives."""
    a = _lift(a)
    return mul(a, sigmoid(a))


# --------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return np.broadcast_to(g, a.data.shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape)

    return Tensor(out, (a,), (vjp,))


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size // out.size

    def vjp(g):
        g = np.asarray(g) / count
        if axis is None:
            return np.broadcast_to(g, a.data.shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape)

    return Tensor(out, (a,), (vjp,))


def reshape(a, shape):
    a = _lift(a)
    return Tensor(a.data.reshape(shape), (a,), (lambda g: g.reshape(a.data.shape),))


def transpose(a, axes):
    a = _lift(a)
    inv = np.argsort(axes)
    return Tensor(
        np.transpose(a.data, axes), (a,), (lambda g: np.transpose(g, inv),)
    )


def broadcast_to(a, shape):
    a = _lift(a)
    return Tensor(
        np.broadcast_to(a.data, shape), (a,), (lambda g: _unbroadcast(g, a.data.shape),)
    )


def take(a, idx):
    a = _lift(a)
    out = a.data[idx]

    def vjp(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return acc

    return Tensor(out, (a,), (vjp,))


def concat(parts, axis=0):
    parts = [_lift(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    return Tensor(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


# --------------------------------------------------------------------------
# linear-algebra primitives


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    out = np.matmul(a.data, b.data)

    def vjp_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)

    def vjp_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)

    return Tensor(out, (a, b), (vjp_a, vjp_b))


def conv1d(x, w, dilation=1):
    """Causal 1-D convolution: out[b,o,l] = sum_{c,k} w[o,c,k] x[b,c,l-k*d].

    x: (B, Cin, L), w: (Cout, Cin, K); output (B, Cout, L), left-padded
    implicitly with zeros so the length is preserved.
    """
    x, w = _lift(x), _lift(w)
    xd, wd = x.data, w.data
    if xd.ndim != 3 or wd.ndim != 3:
        raise ValueError("conv1d expects x (B,Cin,L) and w (Cout,Cin,K)")
    B, cin, L = xd.shape
    cout, cin2, K = wd.shape
    if cin2 != cin:
        raise ValueError(f"channel mismatch: x has {cin}, w has {cin2}")

    if K == 1 and dilation == 1:
        out = np.einsum("oc,bcl->bol", wd[:, :, 0], xd)

        def vjp_x1(g):
            return np.einsum("oc,bol->bcl", wd[:, :, 0], g)

        def vjp_w1(g):
            return np.einsum("bol,bcl->oc", g, xd)[:, :, None]

        return Tensor(out, (x, w), (vjp_x1, vjp_w1))

    out = np.zeros((B, cout, L), dtype=xd.dtype)
    for k in range(K):
        s = k * dilation
        if s >= L:
            break
        out[:, :, s:] += np.einsum("oc,bcl->bol", wd[:, :, k], xd[:, :, : L - s])

    def vjp_x(g):
        dx = np.zeros_like(xd)
        for k in range(K):
            s = k * dilation
            if s >= L:
                break
            dx[:, :, : L - s] += np.einsum("oc,bol->bcl", wd[:, :, k], g[:, :, s:])
        return dx

    def vjp_w(g):
        dw = np.zeros_like(wd)
        for k in range(K):
            s = k * dilation
            if s >= L:
                break
            dw[:, :, k] = np.einsum("bol,bcl->oc", g[:, :, s:], xd[:, :, : L - s])
        return dw

    return Tensor(out, (x, w), (vjp_x, vjp_w))


# --------------------------------------------------------------------------
# FFT causal convolution


def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


def _fft_causal(sig: np.ndarray, ker: np.ndarray) -> np.ndarray:
    L = sig.shape[-1]
    n = _next_pow2(2 * L - 1)
    fs = np.fft.rfft(sig, n=n)
    fk = np.fft.rfft(ker, n=n)
    return np.fft.irfft(fs * fk, n=n)[..., :L]


def _causal_corr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # corr[m] = sum_{i>=m} a[i] * b[i-m]; adjoint of causal convolution
    L = a.shape[-1]
    n = _next_pow2(2 * L - 1)
    fa = np.fft.rfft(a, n=n)
    fb = np.fft.rfft(b[..., ::-1], n=n)
    full = np.fft.irfft(fa * fb, n=n)
    return full[..., L - 1 : 2 * L - 1]


def _check_conv_args(sig: np.ndarray, ker: np.ndarray) -> None:
    if sig.ndim < 1 or ker.ndim < 1:
        raise ValueError("signal and kernel must have at least one axis")
    if sig.shape[-1] != ker.shape[-1]:
        raise ValueError(
            f"length mismatch: signal L={sig.shape[-1]}, kernel L={ker.shape[-1]}"
        )
    if sig.shape[-1] < 1:
        raise ValueError("sequences must have length >= 1")


def fft_causal_convolve(signal, kernel):
    """out[i] = sum_{j<=i} kernel[j] * signal[i-j] along the last axis.

    Plain ndarrays give a plain ndarray; Tensor inputs record the op so
    gradients flow through both arguments.  Leading axes broadcast.
    """
    if isinstance(signal, Tensor) or isinstance(kernel, Tensor):
        s, k = _lift(signal), _lift(kernel)
        _check_conv_args(s.data, k.data)
        out = _fft_causal(s.data, k.data)

        def vjp_s(g):
            return _unbroadcast(_causal_corr(g, k.data), s.data.shape)

        def vjp_k(g):
            return _unbroadcast(_causal_corr(g, s.data), k.data.shape)

        return Tensor(out, (s, k), (vjp_s, vjp_k))

    s = np.asarray(signal, dtype=np.result_type(signal, np.float64))
    k = np.asarray(kernel, dtype=s.dtype)
    _check_conv_args(s, k)
    out = _fft_causal(s, k)
    if not np.all(np.isfinite(out)):
        raise NumericError("fft_causal_convolve produced non-finite values")
    return out


# --------------------------------------------------------------------------
# backward pass


def gradient_of_scalar(loss: Tensor, params: Mapping[str, Tensor]) -> dict:
    """Gradients of a scalar node with respect to named leaf tensors.

    Parameters the loss does not depend on get a zero array of the same
    shape.  Raises if the loss is not a scalar or any gradient comes out
    non-finite.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            pg = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg

    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        else:
            g = np.asarray(g, dtype=p.data.dtype).reshape(p.data.shape)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        out[name] = g
    return out
