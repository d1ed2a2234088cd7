"""Reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tape`` records every op applied to ``Tensor`` inputs while active;
``backward`` replays it once in reverse. Plain ndarrays passed to ops are
constants and never receive gradients. With no tape active (or no Tensor
inputs), every op degrades to a plain numpy computation, so the same
model code serves training and evaluation.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ShapeMismatch, StaleTape

_TAPE: "Tape | None" = None


class Tensor:
    """A float64 array plus its accumulated gradient and local backward rule."""

    __slots__ = ("data", "grad", "_vjp", "_recorded")

    def __init__(self, data, vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._vjp = vjp
        self._recorded = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Tape:
    """Operation record for one forward pass; single use."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._ids: set[int] = set()
        self._consumed = False

    def _record(self, node: Tensor):
        self.nodes.append(node)
        self._ids.add(id(node))
        node._recorded = True

    @contextmanager
    def recording(self):
        global _TAPE
        if _TAPE is not None:
            raise RuntimeError("nested tapes are not supported")
        _TAPE = self
        try:
            yield self
        finally:
            _TAPE = None


def data_of(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _accum(t, g):
    if isinstance(t, Tensor):
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _make(out_data, vjp, inputs):
    """Wrap an op result; records only when a tape is active and an input tracks."""
    if _TAPE is not None and any(isinstance(x, Tensor) for x in inputs):
        node = Tensor(out_data, vjp=vjp)
        _TAPE._record(node)
        return node
    return out_data


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into every leaf Tensor the tape touched."""
    if tape._consumed:
        raise StaleTape("tape already consumed by a previous backward")
    if not isinstance(loss, Tensor) or id(loss) not in tape._ids:
        raise StaleTape("loss was not produced under this tape")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._vjp is not None:
            node._vjp(node.grad)
        node.grad = None  # free intermediates; leaves are never recorded


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def add(a, b):
    ad, bd = data_of(a), data_of(b)
    out = ad + bd

    def vjp(g):
        _accum(a, _unbroadcast(g, ad.shape))
        _accum(b, _unbroadcast(g, bd.shape))

    return _make(out, vjp, (a, b))


def add3(a, b, c):
    """Fused three-way broadcast add (attention scores + bias + mask)."""
    ad, bd, cd = data_of(a), data_of(b), data_of(c)
    out = ad + bd + cd

    def vjp(g):
        _accum(a, _unbroadcast(g, ad.shape))
        _accum(b, _unbroadcast(g, bd.shape))
        _accum(c, _unbroadcast(g, cd.shape))

    return _make(out, vjp, (a, b, c))


def sub(a, b):
    ad, bd = data_of(a), data_of(b)
    out = ad - bd

    def vjp(g):
        _accum(a, _unbroadcast(g, ad.shape))
        _accum(b, _unbroadcast(-g, bd.shape))

    return _make(out, vjp, (a, b))


def mul(a, b):
    ad, bd = data_of(a), data_of(b)
    out = ad * bd

    def vjp(g):
        _accum(a, _unbroadcast(g * bd, ad.shape))
        _accum(b, _unbroadcast(g * ad, bd.shape))

    return _make(out, vjp, (a, b))


def scale(a, s: float):
    ad = data_of(a)
    out = ad * s

    def vjp(g):
        _accum(a, g * s)

    return _make(out, vjp, (a,))


def matmul(a, b):
    ad, bd = data_of(a), data_of(b)
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"matmul {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def vjp(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape))
        _accum(b, _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape))

    return _make(out, vjp, (a, b))


def reshape(a, shape):
    ad = data_of(a)
    out = ad.reshape(shape)

    def vjp(g):
        _accum(a, g.reshape(ad.shape))

    return _make(out, vjp, (a,))


def swapaxes(a, ax1, ax2):
    ad = data_of(a)
    out = np.swapaxes(ad, ax1, ax2)

    def vjp(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    return _make(np.ascontiguousarray(out), vjp, (a,))


def transpose_last(a):
    return swapaxes(a, -1, -2)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    ad = data_of(a)
    inner = _GELU_C * (ad + 0.044715 * ad ** 3)
    t = np.tanh(inner)
    out = 0.5 * ad * (1.0 + t)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * ad ** 2)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * ad * (1.0 - t ** 2) * d_inner))

    return _make(out, vjp, (a,))


def softmax(a):
    """Softmax over the last axis (numerically stable)."""
    ad = data_of(a)
    m = ad.max(axis=-1, keepdims=True)
    e = np.exp(ad - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        _accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, vjp, (a,))


def layer_norm(x, gain, bias, eps: float = 1e-6):
    xd, gd, bd = data_of(x), data_of(gain), data_of(bias)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + bd

    def vjp(g):
        dxhat = g * gd
        _accum(gain, (g * xhat).reshape(-1, gd.shape[-1]).sum(axis=0))
        _accum(bias, g.reshape(-1, bd.shape[-1]).sum(axis=0))
        mean_d = dxhat.mean(axis=-1, keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - mean_d - xhat * mean_dx))

    return _make(out, vjp, (x, gain, bias))


def embedding(table, ids: np.ndarray):
    """Row gather; gradient scatter-adds back into the table."""
    td = data_of(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = td[ids]

    def vjp(g):
        gt = np.zeros_like(td)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, td.shape[-1]))
        _accum(table, gt)

    return _make(out, vjp, (table,))


def rel_gather(table, idx: np.ndarray):
    """Relative-position bias lookup: (H, R) table, (Tq, Tk) idx -> (H, Tq, Tk)."""
    td = data_of(table)
    idx = np.asarray(idx, dtype=np.int64)
    out = td[:, idx]
    flat = idx.reshape(-1)

    def vjp(g):
        h, r = td.shape
        gt = np.empty_like(td)
        for i in range(h):
            gt[i] = np.bincount(flat, weights=g[i].reshape(-1), minlength=r)
        _accum(table, gt)

    return _make(out, vjp, (table,))


def scatter_rows(src, rows: np.ndarray, length: int):
    """Place (B, P, d) rows at per-sample positions into a zero (B, length, d) block."""
    sd = data_of(src)
    b, p, d = sd.shape
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((b, length, d))
    bidx = np.arange(b)[:, None]
    out[bidx, rows] = sd

    def vjp(g):
        _accum(src, g[bidx, rows])

    return _make(out, vjp, (src,))


def cross_entropy_smoothed(logits, targets: np.ndarray, mask: np.ndarray,
                           smoothing: float, vocab_size: int):
    """Label-smoothed cross entropy, mean over mask-true positions.

    Smoothed target distribution: (1 - eps) + eps/V on the gold id and
    eps/V elsewhere. Uniform logits therefore give exactly log(V).
    """
    from .errors import EmptyTarget

    ld = data_of(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise EmptyTarget("no non-PAD target positions")
    m = ld.max(axis=-1, keepdims=True)
    z = ld - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True)) + m
    logp = ld - lse
    rows = np.arange(ld.shape[0])
    per_pos = -((1.0 - smoothing) * logp[rows, targets]
                + (smoothing / vocab_size) * logp.sum(axis=-1))
    loss = float((per_pos * mask).sum() / n)

    def vjp(g):
        p = np.exp(logp)
        q = np.full_like(p, smoothing / vocab_size)
        q[rows, targets] += 1.0 - smoothing
        _accum(logits, (p - q) * (mask / n)[:, None] * g)

    return _make(np.float64(loss), vjp, (logits,))
