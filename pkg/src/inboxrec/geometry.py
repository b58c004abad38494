"""Axis-aligned box algebra for point/box embeddings.

Every function works on the last axis, so leading batch dimensions broadcast.
A box is stored as a center and a *raw* offset; the half-width is
``act(offset_raw)`` where ``act`` is the module-level activation (ReLU).
Boxes are closed: boundary points are inside.

Subgradient conventions at kinks (used by the training tape):

* ``d|x|/dx`` at 0 is 0,
* ``d max(x, 0)/dx`` at 0 is 0,
* for an elementwise min/max over a set, ties go to the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InvalidValueError


def relu(x):
    return np.maximum(x, 0)


def relu_grad(x):
    return (x > 0).astype(np.result_type(x, np.float32))


def abs_grad(x):
    # np.sign(0) == 0, which is the convention we want
    return np.sign(x)


ACTIVATION = relu
ACTIVATION_GRAD = relu_grad


def act(x):
    return ACTIVATION(x)


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    offset_raw: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        o = np.asarray(self.offset_raw, dtype=float)
        if c.shape != o.shape:
            raise ContractError(f"center shape {c.shape} != offset shape {o.shape}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "offset_raw", o)

    @property
    def dim(self) -> int:
        return self.center.shape[-1]

    @property
    def half_width(self) -> np.ndarray:
        return act(self.offset_raw)

    @classmethod
    def from_corners(cls, lo, hi) -> "Box":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        return cls((lo + hi) / 2, act(hi - lo) / 2)


@dataclass(frozen=True)
class Corners:
    lo: np.ndarray
    hi: np.ndarray


def _point(p) -> np.ndarray:
    return np.asarray(p, dtype=float)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidValueError("non-finite value in geometry input")


def _check_dims(*arrays):
    dims = {np.shape(a)[-1] if np.ndim(a) else None for a in arrays}
    if len(dims) != 1 or None in dims:
        raise ContractError(f"dimension mismatch: {[np.shape(a) for a in arrays]}")


def box_corners(b: Box) -> Corners:
    _check_finite(b.center, b.offset_raw)
    h = b.half_width
    return Corners(lo=b.center - h, hi=b.center + h)


def contains(b: Box, p):
    p = _point(p)
    _check_dims(b.center, p)
    c = box_corners(b)
    return np.all((c.lo <= p) & (p <= c.hi), axis=-1)


def dist_pp(a, c):
    """L1 distance between two points."""
    a, c = _point(a), _point(c)
    _check_dims(a, c)
    return np.abs(a - c).sum(axis=-1)


def project_point(t, r: Box):
    """Translate a point by a relation's center; the relation offset is ignored."""
    t = _point(t)
    _check_dims(t, r.center)
    return t + r.center


def project_box(t: Box, r: Box) -> Box:
    """Translate and resize a box by a relation box.

    The resulting raw offset may be negative in some dimensions: relation
    offsets are allowed to shrink the (activated) tag width.
    """
    _check_dims(t.center, r.center)
    return Box(t.center + r.center, act(t.offset_raw) + r.offset_raw)


def dist_bb(a: Box, c: Box):
    _check_dims(a.center, c.center)
    return (np.abs(a.center - c.center).sum(axis=-1)
            + np.abs(a.half_width - c.half_width).sum(axis=-1))


def dist_out(p, b: Box, literal_min: bool = False):
    """Per-dimension distance from ``p`` to the nearest boundary point (0 inside).

    ``literal_min`` evaluates ``|max(p - hi, 0) + min(lo - p, 0)|`` instead,
    the variant with a clamped-from-above lower term, kept for comparison.
    """
    p = _point(p)
    _check_dims(p, b.center)
    c = box_corners(b)
    if literal_min:
        return np.abs(relu(p - c.hi) + np.minimum(c.lo - p, 0)).sum(axis=-1)
    return (relu(p - c.hi) + relu(c.lo - p)).sum(axis=-1)


def dist_in(p, b: Box):
    p = _point(p)
    _check_dims(p, b.center)
    c = box_corners(b)
    return np.abs(b.center - np.clip(p, c.lo, c.hi)).sum(axis=-1)


def dist_pb(p, b: Box, inside_weight: float = 1.0):
    """Outside distance plus (weighted) inside distance.

    With ``inside_weight=1`` this equals the L1 distance from ``p`` to the
    box center in every dimension, whatever the width.
    """
    return dist_out(p, b) + inside_weight * dist_in(p, b)


def point_box_distance(p, center, half_width, inside_weight: float = 1.0):
    """Array form of :func:`dist_pb` taking an already activated half-width."""
    hi, lo = center + half_width, center - half_width
    out = np.maximum(p - hi, 0) + np.maximum(lo - p, 0)
    inside = np.abs(center - np.clip(p, lo, hi))
    return out.sum(axis=-1) + inside_weight * inside.sum(axis=-1)


def maxmin_intersect(boxes) -> Box:
    """Intersect boxes through their corner extrema.

    Disjoint inputs give a zero-width box at the midpoint of the crossed
    corners rather than an "empty" marker.
    """
    boxes = list(boxes)
    if not boxes:
        raise ContractError("maxmin_intersect needs at least one box")
    _check_dims(*[b.center for b in boxes])
    corners = [box_corners(b) for b in boxes]
    hi = np.min(np.stack([c.hi for c in corners]), axis=0)
    lo = np.max(np.stack([c.lo for c in corners]), axis=0)
    return Box((hi + lo) / 2, act(hi - lo) / 2)
