"""Minimal reverse-mode tape over numpy arrays.

Each op below carries its own hand-written vector-Jacobian product.  Only
the handful of ops the InBox losses need are implemented; the kink
conventions match :mod:`inboxrec.geometry`.

Usage::

    tape = Tape(params)
    v = tape.gather("items", idx)
    loss = ...ops on v...
    tape.backward(loss)
    tape.grads["items"]
"""

from __future__ import annotations

import numpy as np

from .geometry import abs_grad, relu_grad


class Node:
    __slots__ = ("value", "grad", "vjp")

    def __init__(self, value, vjp=None):
        self.value = value
        self.grad = None
        self.vjp = vjp  # callable(g) -> iterable of (Node, grad)

    @property
    def shape(self):
        return self.value.shape


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    """Records ops for one forward pass and replays their VJPs backwards.

    ``params`` maps table names to arrays.  With ``record=False`` nothing is
    kept and ops just compute values (used for inference).  With
    ``track_kinks=True`` every non-smooth op reports how far its argument is
    from the nearest kink; ``kink_margin`` holds the minimum seen.
    """

    def __init__(self, params, record=True, track_kinks=False):
        self.params = params
        self.record = record
        self.track_kinks = track_kinks
        self.kink_margin = np.inf
        self.nodes: list[Node] = []
        self.grads: dict[str, np.ndarray] = {}

    # -- bookkeeping -------------------------------------------------------
    def _node(self, value, vjp):
        n = Node(value, vjp if self.record else None)
        if self.record:
            self.nodes.append(n)
        return n

    def _kink(self, arr):
        if self.track_kinks and arr.size:
            self.kink_margin = min(self.kink_margin, float(np.min(np.abs(arr))))

    def param_grad(self, name):
        if name not in self.grads:
            self.grads[name] = np.zeros_like(self.params[name])
        return self.grads[name]

    def const(self, value):
        return Node(np.asarray(value))

    def backward(self, out: Node, seed=None):
        out.grad = np.ones_like(out.value) if seed is None else seed
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            for parent, g in node.vjp(node.grad):
                parent.grad = g if parent.grad is None else parent.grad + g
        self.nodes.clear()

    # -- leaves -------------------------------------------------------------
    def gather(self, name, idx, cols=None):
        table = self.params[name]
        idx = np.asarray(idx)
        value = table[idx] if cols is None else table[idx][..., cols]

        def vjp(g):
            buf = self.param_grad(name)
            view = buf if cols is None else buf[:, cols]
            _scatter_add(view, idx, g)
            return ()

        return self._node(value, vjp)

    def param(self, name):
        table = self.params[name]

        def vjp(g):
            self.param_grad(name)[...] += g
            return ()

        return self._node(table, vjp)

    # -- elementwise ----------------------------------------------------------
    def add(self, a, b):
        def vjp(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))
        return self._node(a.value + b.value, vjp)

    def sub(self, a, b):
        def vjp(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))
        return self._node(a.value - b.value, vjp)

    def mul(self, a, b):
        def vjp(g):
            return ((a, _unbroadcast(g * b.value, a.shape)),
                    (b, _unbroadcast(g * a.value, b.shape)))
        return self._node(a.value * b.value, vjp)

    def scale(self, a, s):
        return self._node(a.value * s, lambda g: ((a, g * s),))

    def relu(self, a):
        self._kink(a.value)
        return self._node(np.maximum(a.value, 0), lambda g: ((a, g * relu_grad(a.value)),))

    def abs(self, a):
        self._kink(a.value)
        return self._node(np.abs(a.value), lambda g: ((a, g * abs_grad(a.value)),))

    def sigmoid(self, a):
        s = _sigmoid(a.value)
        return self._node(s, lambda g: ((a, g * s * (1 - s)),))

    def clip(self, p, lo, hi):
        """Clamp ``p`` into the closed interval [lo, hi] (lo <= hi assumed)."""
        above = p.value > hi.value
        below = p.value < lo.value
        inside = ~(above | below)
        self._kink(np.minimum(p.value - lo.value, hi.value - p.value))
        out = np.where(above, hi.value, np.where(below, lo.value, p.value))

        def vjp(g):
            return ((p, _unbroadcast(g * inside, p.shape)),
                    (lo, _unbroadcast(g * below, lo.shape)),
                    (hi, _unbroadcast(g * above, hi.shape)))
        return self._node(out, vjp)

    # -- reductions / shape -------------------------------------------------
    def sum(self, a, axis=-1, keepdims=False):
        shape = a.shape

        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return ((a, np.broadcast_to(g, shape)),)
        return self._node(a.value.sum(axis=axis, keepdims=keepdims), vjp)

    def masked_mean(self, a, mask, axis):
        """Mean of ``a`` over ``axis`` counting only entries where ``mask`` is set.

        ``mask`` has the shape of ``a`` without the trailing feature axis.
        """
        m = mask.astype(a.value.dtype)
        while m.ndim < a.value.ndim:
            m = m[..., None]
        cnt = np.maximum(m.sum(axis=axis, keepdims=True), 1)
        w = m / cnt

        def vjp(g):
            return ((a, np.expand_dims(g, axis) * w),)
        return self._node((a.value * w).sum(axis=axis), vjp)

    def stack_members(self, a, b):
        """Concatenate two member sets along axis -2 (all other dims equal)."""
        k = a.shape[-2]

        def vjp(g):
            return ((a, g[..., :k, :]), (b, g[..., k:, :]))
        return self._node(np.concatenate([a.value, b.value], axis=-2), vjp)

    def concat(self, a, b):
        """Concatenate along the last axis, broadcasting leading dims."""
        lead = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
        av = np.broadcast_to(a.value, lead + a.shape[-1:])
        bv = np.broadcast_to(b.value, lead + b.shape[-1:])
        k = a.shape[-1]

        def vjp(g):
            return ((a, _unbroadcast(g[..., :k], a.shape)),
                    (b, _unbroadcast(g[..., k:], b.shape)))
        return self._node(np.concatenate([av, bv], axis=-1), vjp)

    def expand(self, a, axis):
        return self._node(np.expand_dims(a.value, axis),
                          lambda g: ((a, np.squeeze(g, axis)),))

    # -- set operators ------------------------------------------------------
    def masked_softmax(self, z, mask, axis):
        """Softmax over ``axis`` with masked-out members receiving weight 0."""
        m = _feature_mask(mask, z.value.ndim)
        zz = np.where(m, z.value, -np.inf)
        zmax = np.max(zz, axis=axis, keepdims=True)
        zmax = np.where(np.isfinite(zmax), zmax, 0)
        e = np.where(m, np.exp(zz - zmax), 0)
        s = e / np.maximum(e.sum(axis=axis, keepdims=True), np.finfo(e.dtype).tiny)

        def vjp(g):
            return ((z, s * (g - (g * s).sum(axis=axis, keepdims=True))),)
        return self._node(s, vjp)

    def masked_extreme(self, a, mask, axis, kind):
        """Elementwise min ("min") or max ("max") over ``axis``; ties -> lowest index."""
        m = _feature_mask(mask, a.value.ndim)
        fill = np.inf if kind == "min" else -np.inf
        aa = np.where(m, a.value, fill)
        idx = np.argmin(aa, axis=axis) if kind == "min" else np.argmax(aa, axis=axis)
        idx = np.expand_dims(idx, axis)
        val = np.take_along_axis(aa, idx, axis=axis)
        if self.track_kinks and aa.shape[axis] > 1:
            rest = aa.copy()
            np.put_along_axis(rest, idx, fill, axis=axis)
            nxt = np.min(rest, axis=axis, keepdims=True) if kind == "min" else \
                np.max(rest, axis=axis, keepdims=True)
            gap = np.abs(nxt - val)
            self._kink(gap[np.isfinite(gap)])
        out = np.squeeze(val, axis)

        def vjp(g):
            ga = np.zeros_like(a.value)
            np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
            return ((a, ga),)
        return self._node(out, vjp)

    # -- dense layers ---------------------------------------------------------
    def linear(self, x, w, b):
        """``x @ w + b`` over the last axis; ``w`` is (in, out)."""
        xv = x.value
        flat = xv.reshape(-1, xv.shape[-1])
        out = (flat @ w.value + b.value).reshape(xv.shape[:-1] + (w.shape[1],))

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            return ((x, (g2 @ w.value.T).reshape(xv.shape)),
                    (w, flat.T @ g2),
                    (b, g2.sum(axis=0)))
        return self._node(out, vjp)

    # -- losses ---------------------------------------------------------------
    def log_sigmoid(self, a):
        v = -np.logaddexp(0, -a.value)
        return self._node(v, lambda g: ((a, g * _sigmoid(-a.value)),))


def _scatter_add(buf, idx, g):
    """``buf[idx] += g`` with repeated indices accumulated (like ``np.add.at``)."""
    flat = idx.reshape(-1)
    if flat.size == 0:
        return
    rows = g.reshape(flat.size, -1)
    order = np.argsort(flat, kind="stable")
    sidx = flat[order]
    starts = np.concatenate([[0], np.nonzero(np.diff(sidx))[0] + 1])
    sums = np.add.reduceat(rows[order], starts, axis=0)
    buf[sidx[starts]] += sums.reshape((len(starts),) + buf.shape[1:])


def _sigmoid(x):
    return np.exp(-np.logaddexp(0, -x))


def _feature_mask(mask, ndim):
    m = np.asarray(mask, dtype=bool)
    while m.ndim < ndim:
        m = m[..., None]
    return m
