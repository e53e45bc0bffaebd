"""A small reverse-mode autodiff tape over numpy arrays.

Every differentiable primitive computes its output eagerly and, when any
input requires a gradient, appends a node to the inputs' :class:`Tape`
holding a vector-Jacobian closure. Node ids come from one global counter,
so descending id order is a reverse topological order; branches started
from separate leaves record on separate tapes that merge where they meet.
:func:`backward` walks the merged record in descending id order.

Complex-valued nodes (spectra) store their cotangent as a single complex
array ``dL/dre + i * dL/dim``. Under that convention a complex-linear map
``y = A x`` backpropagates as ``gx = A^H gy`` and a real input receives the
real part of its cotangent.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple
    output: "Variable"
    vjp: Callable


_node_ids = itertools.count()


@dataclass
class Tape:
    """Record of primitive applications keyed by node id. Append-only, so acyclic."""

    nodes: dict = field(default_factory=dict)
    merged_into: Optional["Tape"] = None

    def root(self) -> "Tape":
        t = self
        while t.merged_into is not None:
            t = t.merged_into
        return t

    def absorb(self, other: "Tape") -> None:
        self.nodes.update(other.nodes)
        other.nodes = {}
        other.merged_into = self

    def record(self, op, inputs, value, vjp) -> "Variable":
        out = Variable(value, requires_grad=True)
        out.tape = self
        out.node = next(_node_ids)
        self.nodes[out.node] = Node(op, tuple(inputs), out, vjp)
        return out


class Variable:
    __slots__ = ("value", "requires_grad", "grad", "_tape", "node", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.grad = None
        self._tape: Optional[Tape] = None
        self.node: Optional[int] = None
        self.name = name

    @property
    def tape(self) -> Optional[Tape]:
        return None if self._tape is None else self._tape.root()

    @tape.setter
    def tape(self, t: Optional[Tape]) -> None:
        self._tape = t

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def __repr__(self):
        return f"Variable(shape={self.shape}, dtype={self.value.dtype}, requires_grad={self.requires_grad})"


def _v(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def _apply(op: str, inputs: Sequence[Variable], value, vjp) -> Variable:
    if not any(v.requires_grad for v in inputs):
        return Variable(value)
    tapes = list({id(v.tape): v.tape for v in inputs if v.tape is not None}.values())
    if not tapes:
        return Tape().record(op, inputs, value, vjp)
    tape = max(tapes, key=lambda t: len(t.nodes))
    for other in tapes:
        if other is not tape:
            tape.absorb(other)
    return tape.record(op, inputs, value, vjp)


def _real_grad(var: Variable, g):
    # real inputs keep only the real channel of a complex cotangent
    if np.iscomplexobj(g) and not np.iscomplexobj(var.value):
        return g.real
    return g


def backward(loss: Variable) -> dict:
    """Reverse sweep from a scalar ``loss``.

    Sets ``.grad`` on every leaf with ``requires_grad`` that the loss depends
    on and returns ``{leaf: grad}``.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise ContractError("loss was not recorded on a tape (no input requires grad)")
    tape = loss.tape
    cot = {loss.node: np.ones_like(loss.value)}
    leaves: dict = {}
    for idx in sorted((k for k in tape.nodes if k <= loss.node), reverse=True):
        g = cot.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        grads = node.vjp(g)
        for var, gi in zip(node.inputs, grads):
            if gi is None or not var.requires_grad:
                continue
            gi = _real_grad(var, gi)
            if var.is_leaf:
                key = id(var)
                if key in leaves:
                    leaves[key] = (var, leaves[key][1] + gi)
                else:
                    leaves[key] = (var, gi)
            else:
                cot[var.node] = cot[var.node] + gi if var.node in cot else gi
    store = {}
    for var, g in leaves.values():
        g = np.asarray(g, dtype=var.value.dtype).reshape(var.shape)
        var.grad = g
        store[var] = g
    return store


# -- elementwise / reductions -----------------------------------------------------

def add(x, y) -> Variable:
    x, y = _v(x), _v(y)
    if x.shape != y.shape:
        raise ShapeError(f"add: shape mismatch {x.shape} vs {y.shape}")
    return _apply("add", (x, y), x.value + y.value, lambda g: (g, g))


def mul(x, y) -> Variable:
    x, y = _v(x), _v(y)
    if x.shape != y.shape:
        raise ShapeError(f"mul: shape mismatch {x.shape} vs {y.shape}")
    xv, yv = x.value, y.value
    return _apply("mul", (x, y), xv * yv, lambda g: (g * np.conj(yv), g * np.conj(xv)))


def scale(x, c: float) -> Variable:
    x = _v(x)
    return _apply("scale", (x,), x.value * c, lambda g: (g * c,))


def square(x) -> Variable:
    x = _v(x)
    xv = x.value
    return _apply("square", (x,), xv * xv, lambda g: (2.0 * g * xv,))


def relu(x) -> Variable:
    x = _v(x)
    on = x.value > 0  # subgradient 0 at the kink
    return _apply("relu", (x,), np.where(on, x.value, 0).astype(x.value.dtype), lambda g: (g * on,))


def sum_all(x) -> Variable:
    x = _v(x)
    shape = x.shape
    return _apply("sum", (x,), np.asarray(x.value.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def global_avg_pool(x) -> Variable:
    """N×C×H×W -> N×C spatial mean."""
    x = _v(x)
    if x.value.ndim != 4:
        raise ShapeError(f"global_avg_pool expects N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _apply("gap", (x,), x.value.mean(axis=(2, 3)), vjp)


def linear(x, w, b) -> Variable:
    """``x @ w.T + b`` with ``w`` of shape out×in."""
    x, w, b = _v(x), _v(w), _v(b)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"linear: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    xv, wv = x.value, w.value
    return _apply("linear", (x, w, b), xv @ wv.T + b.value,
                  lambda g: (g @ wv, g.T @ xv, g.sum(axis=0)))


def softmax_cross_entropy(logits, labels) -> Variable:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _v(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.value
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {z.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError(f"labels must lie in [0, {z.shape[1]})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _apply("xent", (logits,), np.asarray(loss, dtype=z.dtype), vjp)


# -- convolution and normalization -------------------------------------------------

def _window(a: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return a[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def conv2d(x, w, b, stride: int = 1, pad: int = 0) -> Variable:
    """Cross-correlation of N×Cin×H×W with Cout×Cin×kh×kw plus bias, zero padding."""
    x, w, b = _v(x), _v(w), _v(b)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {xv.shape}, {wv.shape}")
    n, cin, h, wd = xv.shape
    cout, cin_w, kh, kw = wv.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape}, expected ({cout},)")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be positive and pad non-negative")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent {ho}×{wo}")

    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
    # cols[n] is a (Cin*kh*kw) × (Ho*Wo) matrix, so a batched matmul lands in NCHW
    if kh == kw == 1:
        cols = np.ascontiguousarray(_window(xp, 0, 0, stride, ho, wo)).reshape(n, cin, ho * wo)
    else:
        cols = np.empty((n, cin, kh, kw, ho, wo), dtype=xv.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = _window(xp, i, j, stride, ho, wo)
        cols = cols.reshape(n, cin * kh * kw, ho * wo)
    wmat = wv.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    out += b.value[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def vjp(g):
        gm = g.reshape(n, cout, ho * wo)
        gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(wv.shape)
        gb = gm.sum(axis=(0, 2))
        gcols = np.matmul(wmat.T, gm).reshape(n, cin, kh, kw, ho, wo)
        gxp = np.zeros(xp.shape, dtype=np.result_type(g, xv))
        for i in range(kh):
            for j in range(kw):
                _window(gxp, i, j, stride, ho, wo)[...] += gcols[:, :, i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb

    return _apply("conv2d", (x, w, b), out, vjp)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x, gamma, beta, stats: RunningStats, training: bool,
                update_stats: bool = True) -> Variable:
    """Per-channel batch normalization, eps 1e-5, running-stat momentum 0.1."""
    x, gamma, beta = _v(x), _v(gamma), _v(beta)
    xv = x.value
    c = xv.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine params must have shape ({c},)")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if training:
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        if update_stats:
            m = xv.size // c
            unbiased = var * m / (m - 1) if m > 1 else var
            stats.mean[...] = (1 - BN_MOMENTUM) * stats.mean + BN_MOMENTUM * mean
            stats.var[...] = (1 - BN_MOMENTUM) * stats.var + BN_MOMENTUM * unbiased
    else:
        mean, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xv - mean.reshape(bshape)) * inv.reshape(bshape)
    gv = gamma.value.reshape(bshape)
    out = (xhat * gv + beta.value.reshape(bshape)).astype(xv.dtype, copy=False)

    def vjp(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gv
        if training:
            gx = inv.reshape(bshape) * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return _apply("batchnorm2d", (x, gamma, beta), out, vjp)


# -- spectral primitives ------------------------------------------------------------

def _axes(dims, ndim):
    return tuple(d % ndim for d in dims)


def fftc(x, dims=(-2, -1)) -> Variable:
    """Centered unnormalized DFT along ``dims`` (real or complex input)."""
    x = _v(x)
    axes = _axes(dims, x.value.ndim)
    return _apply("fftc", (x,), T.fftc(x.value, axes), lambda g: (T.fftc_adjoint(g, axes),))


def ifftc_real(z, dims=(-2, -1)) -> Variable:
    """Inverse of :func:`fftc` keeping only the real part."""
    z = _v(z)
    axes = _axes(dims, z.value.ndim)
    out = np.ascontiguousarray(T.ifftc(z.value, axes).real)
    # the discarded imaginary part gets no cotangent
    return _apply("ifftc_real", (z,), out, lambda g: (T.ifftc_adjoint(g.astype(z.value.dtype), axes),))


def mask(z, m: np.ndarray) -> Variable:
    """Multiply by a fixed real mask (broadcast over leading dims)."""
    z = _v(z)
    m = np.asarray(m)
    out = z.value * m
    return _apply("mask", (z,), out.astype(z.value.dtype, copy=False), lambda g: (g * m,))


def real(z) -> Variable:
    z = _v(z)
    return _apply("real", (z,), np.ascontiguousarray(z.value.real), lambda g: (g + 0j,))


def imag(z) -> Variable:
    z = _v(z)
    return _apply("imag", (z,), np.ascontiguousarray(z.value.imag), lambda g: (1j * g,))


def to_complex(re, im) -> Variable:
    re, im = _v(re), _v(im)
    if re.shape != im.shape:
        raise ShapeError(f"to_complex: shape mismatch {re.shape} vs {im.shape}")
    out = re.value + 1j * im.value
    return _apply("complex", (re, im), out, lambda g: (g.real, g.imag))


def absolute(z) -> Variable:
    """``|z|``; the gradient at ``z = 0`` is taken as 0."""
    z = _v(z)
    zv = z.value
    r = np.abs(zv)
    safe = np.where(r > 0, r, 1)
    unit = np.where(r > 0, zv / safe, 0)
    return _apply("abs", (z,), r, lambda g: (g * unit,))


def angle(z) -> Variable:
    """``arg z``; the gradient at ``z = 0`` is taken as 0."""
    z = _v(z)
    zv = z.value
    r2 = (zv * np.conj(zv)).real
    safe = np.where(r2 > 0, r2, 1)
    dirn = np.where(r2 > 0, 1j * zv / safe, 0)
    return _apply("angle", (z,), np.angle(zv), lambda g: (g * dirn,))


def polar(amp, phase) -> Variable:
    """``amp * exp(i * phase)``."""
    amp, phase = _v(amp), _v(phase)
    rot = np.exp(1j * phase.value)
    out = amp.value * rot

    def vjp(g):
        ga = (g * np.conj(rot)).real
        gp = (g * np.conj(1j * out)).real
        return ga, gp

    return _apply("polar", (amp, phase), out, vjp)
