import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from inboxrec.errors import ContractError, InvalidValueError
from inboxrec.geometry import (Box, box_corners, contains, dist_bb, dist_in, dist_out, dist_pb,
                               dist_pp, maxmin_intersect, point_box_distance, project_box,
                               project_point)


def box1(lo, hi):
    return Box.from_corners([lo], [hi])


# -- examples -----------------------------------------------------------------

def test_box_corners_examples():
    c = box_corners(Box([1, -2], [0.5, -1]))
    assert np.allclose(c.lo, [0.5, -2]) and np.allclose(c.hi, [1.5, -2])
    c = box_corners(Box([3, 4, 5], [-1, 0, -0.5]))
    assert np.array_equal(c.lo, [3, 4, 5]) and np.array_equal(c.hi, [3, 4, 5])
    c = box_corners(Box([0], [3]))
    assert c.lo[0] == -3 and c.hi[0] == 3


def test_box_corners_rejects_non_finite():
    with pytest.raises(InvalidValueError):
        box_corners(Box([np.nan], [1]))
    with pytest.raises(InvalidValueError):
        box_corners(Box([0], [np.inf]))


def test_box_shape_mismatch():
    with pytest.raises(ContractError):
        Box([0, 1], [1])


def test_contains_examples():
    b = Box([0.3, -1], [0.2, 0.7])
    assert contains(b, b.center)
    assert contains(box1(0, 2), [2])
    assert not contains(box1(0, 2), [2.1])
    with pytest.raises(ContractError):
        contains(box1(0, 2), [1, 1])


def test_dist_pp_examples():
    assert dist_pp([1.5, 2], [1.5, 2]) == 0
    assert dist_pp([0, 0], [1, -2]) == 3
    assert dist_pp([1], [4]) == 3
    with pytest.raises(ContractError):
        dist_pp([0], [0, 0])


def test_project_point_examples():
    assert np.array_equal(project_point([1, 1], Box([0, 0], [5, 5])), [1, 1])
    assert np.array_equal(project_point([1, 2], Box([-1, 3], [0, 0])), [0, 5])
    assert np.array_equal(project_point([0], Box([12], [-3])), [12])
    with pytest.raises(ContractError):
        project_point([0, 0], Box([1], [1]))


def test_project_box_examples():
    t = Box([1, 2], [0.5, 3])
    out = project_box(t, Box([0, 0], [0, 0]))
    assert np.array_equal(out.center, t.center) and np.array_equal(out.half_width, t.half_width)
    out = project_box(Box([1], [2]), Box([1], [-1]))
    assert out.center[0] == 2 and out.offset_raw[0] == 1
    out = project_box(Box([0], [-5]), Box([0], [0.5]))
    assert out.offset_raw[0] == 0.5
    # relation offsets may shrink a box below zero raw width
    assert project_box(Box([0], [1]), Box([0], [-3])).offset_raw[0] == -2


def test_dist_bb_examples():
    b = Box([1, 2], [0.3, 0.4])
    assert dist_bb(b, b) == 0
    assert dist_bb(Box([0], [1]), Box([1], [2])) == 2
    assert dist_bb(Box([0], [-1]), Box([0], [-2])) == 0


def test_dist_out_examples():
    assert dist_out([1.2], box1(0, 2)) == 0
    assert dist_out([2], box1(0, 2)) == 0
    assert dist_out([3], box1(0, 2)) == 1
    assert dist_out([3, -1], Box.from_corners([0, 0], [2, 2])) == 2


def test_dist_out_literal_variant_measures_wrong_side():
    b = box1(0, 2)
    assert dist_out([-1], b) == 1
    # below the box the clamped-from-above term vanishes ...
    assert dist_out([-1], b, literal_min=True) == 0
    # ... and inside it is non-zero: min(lo - p, 0) = -1 at p = 1
    assert dist_out([1], b, literal_min=True) == 1
    assert dist_out([1], b) == 0


def test_dist_in_examples():
    b = Box([1], [1])
    assert dist_in([1], b) == 0
    assert dist_in([1.5], b) == 0.5
    assert dist_in([3], b) == 1


def test_dist_pb_examples():
    b = box1(0, 2)
    assert dist_pb([1], b) == 0
    assert dist_pb([3], b) == 2
    assert dist_pb([1.5], b) == 0.5


def test_dist_pb_inside_weight():
    b = box1(0, 2)
    assert dist_pb([3], b, inside_weight=0.0) == 1
    assert dist_pb([3], b, inside_weight=0.5) == 1.5
    assert point_box_distance(np.array([3.0]), b.center, b.half_width, 0.5) == 1.5


def test_maxmin_examples():
    b = Box([0.5, -1], [1, 0.25])
    out = maxmin_intersect([b])
    assert np.allclose(out.center, b.center) and np.allclose(out.half_width, b.half_width)
    out = maxmin_intersect([box1(0, 2), box1(1, 3)])
    assert out.center[0] == 1.5 and out.half_width[0] == 0.5
    out = maxmin_intersect([box1(0, 1), box1(2, 3)])
    assert out.center[0] == 1.5 and out.half_width[0] == 0
    with pytest.raises(ContractError):
        maxmin_intersect([])


def test_maxmin_uses_raw_corners_for_negative_centers():
    out = maxmin_intersect([box1(-5, -1), box1(-3, 2)])
    assert out.center[0] == -2 and out.half_width[0] == 1


# -- properties ---------------------------------------------------------------

finite = st.floats(-10, 10, allow_nan=False, width=64)


@st.composite
def box_and_point(draw, d=None):
    d = d or draw(st.integers(1, 5))
    c = draw(arrays(np.float64, d, elements=finite))
    o = draw(arrays(np.float64, d, elements=finite))
    p = draw(arrays(np.float64, d, elements=finite))
    return Box(c, o), p


@settings(max_examples=300, deadline=None)
@given(box_and_point())
def test_outside_zero_iff_contained(bp):
    b, p = bp
    assert (dist_out(p, b) == 0) == bool(contains(b, p))


@settings(max_examples=300, deadline=None)
@given(box_and_point())
def test_dist_in_bounded_by_total_half_width(bp):
    b, p = bp
    di = dist_in(p, b)
    assert 0 <= di <= b.half_width.sum() + 1e-12
    # beyond the far corner in every dimension the bound is attained
    far = b.center + np.where(p >= b.center, 1, -1) * (b.half_width + 1)
    assert np.isclose(dist_in(far, b), b.half_width.sum())


@settings(max_examples=300, deadline=None)
@given(box_and_point())
def test_dist_pb_zero_iff_center(bp):
    b, p = bp
    assert dist_pb(b.center, b) == 0
    assert (dist_pb(p, b) == 0) == bool(np.array_equal(p, b.center))


@settings(max_examples=300, deadline=None)
@given(box_and_point())
def test_dist_pb_is_l1_to_center(bp):
    b, p = bp
    assert np.isclose(dist_pb(p, b), np.abs(p - b.center).sum())


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_maxmin_membership_matches_monte_carlo(d, n, seed):
    rng = np.random.default_rng(seed)
    boxes = [Box(rng.uniform(-1, 1, d), rng.uniform(0.2, 1.5, d)) for _ in range(n)]
    inter = maxmin_intersect(boxes)
    pts = rng.uniform(-3, 3, (1000, d))
    inside_all = np.all([contains(b, pts) for b in boxes], axis=0)
    if np.all(inter.half_width > 0):
        assert np.array_equal(contains(inter, pts), inside_all)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_maxmin_permutation_and_idempotence(d, n, seed):
    rng = np.random.default_rng(seed)
    boxes = [Box(rng.normal(size=d), rng.normal(size=d)) for _ in range(n)]
    a = maxmin_intersect(boxes)
    b = maxmin_intersect([boxes[i] for i in rng.permutation(n)])
    c = maxmin_intersect(boxes + boxes)
    for other in (b, c):
        assert np.array_equal(a.center, other.center)
        assert np.array_equal(a.half_width, other.half_width)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 5).flatmap(lambda d: st.tuples(*[arrays(np.float64, d, elements=finite)] * 6)))
def test_l1_distances_symmetric_and_triangle(arrs):
    a, b, c, oa, ob, oc = arrs
    assert dist_pp(a, b) == dist_pp(b, a) >= 0
    assert dist_pp(a, c) <= dist_pp(a, b) + dist_pp(b, c) + 1e-9
    A, B, C = Box(a, oa), Box(b, ob), Box(c, oc)
    assert dist_bb(A, B) == dist_bb(B, A) >= 0
    assert dist_bb(A, C) <= dist_bb(A, B) + dist_bb(B, C) + 1e-9
