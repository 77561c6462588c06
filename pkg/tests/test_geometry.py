import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mapfuse.geometry import (
    IDENTITY_POSE,
    ObjectState,
    Pose,
    angle_diff,
    footprint_corners,
    iou_3d,
    iou_bev,
    transform_to_global,
    transform_to_local,
    wrap_angle,
)

finite = st.floats(-100.0, 100.0, allow_nan=False)
angles = st.floats(-10.0, 10.0, allow_nan=False)
sizes = st.floats(0.2, 8.0, allow_nan=False)


def make_state(x, y, z, l, w, h, yaw, category=0):
    return ObjectState(category, (x, y, z), (l, w, h), yaw)


boxes = st.builds(make_state, finite, finite, finite, sizes, sizes, sizes,
                  angles)
poses = st.builds(lambda x, y, z, h: Pose((x, y, z), h), finite, finite,
                  finite, angles)


def test_wrap_angle_range_and_fixed_points():
    assert wrap_angle(0.0) == 0.0
    assert wrap_angle(math.pi) == pytest.approx(-math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(-math.pi)
    assert wrap_angle(3 * math.pi) == pytest.approx(-math.pi)
    for a in np.linspace(-50, 50, 1001):
        w = wrap_angle(a)
        assert -math.pi <= w < math.pi
        assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


def test_angle_diff_shortest_arc():
    assert angle_diff(0.1, -0.1) == pytest.approx(0.2)
    assert abs(angle_diff(math.radians(350), math.radians(10))) == (
        pytest.approx(math.radians(20))
    )


def test_object_state_validation():
    with pytest.raises(ValueError):
        make_state(0, 0, 0, -1.0, 1, 1, 0)
    s = make_state(0, 0, 0, 1, 1, 1, 4 * math.pi + 0.3)
    assert s.yaw == pytest.approx(0.3)


def test_vector_round_trip():
    s = make_state(1, 2, 3, 4, 2, 1.5, 0.7, category=1)
    assert ObjectState.from_vector(s.to_vector()) == s


@given(boxes, poses)
@settings(max_examples=200, deadline=None)
def test_transform_round_trip(state, pose):
    back = transform_to_local(transform_to_global(state, pose), pose)
    assert np.allclose(back.center, state.center, atol=1e-9)
    assert np.allclose(back.extents, state.extents, atol=1e-9)
    assert abs(angle_diff(back.yaw, state.yaw)) < 1e-9


def test_identity_pose_is_identity():
    s = make_state(3, -2, 0.5, 4, 2, 1.5, 1.1)
    assert transform_to_global(s, IDENTITY_POSE) == s


@given(boxes, boxes, poses)
@settings(max_examples=100, deadline=None)
def test_iou_invariant_under_joint_rigid_motion(a, b, pose):
    before = iou_bev(a, b)
    after = iou_bev(transform_to_global(a, pose),
                    transform_to_global(b, pose))
    assert abs(before - after) < 1e-7


@given(boxes, boxes)
@settings(max_examples=200, deadline=None)
def test_iou_symmetric_and_bounded(a, b):
    ab = iou_bev(a, b)
    ba = iou_bev(b, a)
    assert abs(ab - ba) < 1e-9
    assert 0.0 <= ab <= 1.0 + 1e-12


def test_iou_known_values():
    a = make_state(0, 0, 0, 1, 1, 1, 0)
    assert iou_bev(a, a) == pytest.approx(1.0)
    b = make_state(0.5, 0, 0, 1, 1, 1, 0)
    # Intersection 0.5, union 1.5.
    assert iou_bev(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)
    far = make_state(10, 0, 0, 1, 1, 1, 0)
    assert iou_bev(a, far) == 0.0
    rot = make_state(0, 0, 0, 1, 1, 1, math.pi / 2)
    assert iou_bev(a, rot) == pytest.approx(1.0, abs=1e-9)


def test_iou_rotated_diamond():
    # A unit square vs the same square rotated 45 degrees: intersection
    # is a regular octagon with area 8*(sqrt(2)-1)/2... known closed
    # form: 2*(sqrt(2)-1) for unit squares.
    a = make_state(0, 0, 0, 1, 1, 1, 0)
    b = make_state(0, 0, 0, 1, 1, 1, math.pi / 4)
    inter = 2 * (math.sqrt(2) - 1)
    expected = inter / (2 - inter)
    assert iou_bev(a, b) == pytest.approx(expected, abs=1e-12)


def test_iou_3d_vertical_overlap():
    a = make_state(0, 0, 0.0, 2, 2, 2, 0)
    b = make_state(0, 0, 1.0, 2, 2, 2, 0)
    # Full footprint overlap, half the height in common.
    assert iou_3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)
    c = make_state(0, 0, 5.0, 2, 2, 2, 0)
    assert iou_3d(a, c) == 0.0


def test_monte_carlo_iou_agreement():
    rng = np.random.default_rng(11)
    for _ in range(3):
        a = make_state(*rng.uniform(-1, 1, 2), 0.0,
                       *rng.uniform(1.0, 4.0, 2), 1.0,
                       rng.uniform(-math.pi, math.pi))
        b = make_state(*rng.uniform(-1, 1, 2), 0.0,
                       *rng.uniform(1.0, 4.0, 2), 1.0,
                       rng.uniform(-math.pi, math.pi))
        exact = iou_bev(a, b)

        pa = footprint_corners(a)
        pb = footprint_corners(b)
        lo = np.minimum(pa.min(axis=0), pb.min(axis=0))
        hi = np.maximum(pa.max(axis=0), pb.max(axis=0))
        pts = rng.uniform(lo, hi, size=(1_000_000, 2))

        def inside(corners, p):
            res = np.ones(len(p), dtype=bool)
            for i in range(4):
                e = corners[(i + 1) % 4] - corners[i]
                v = p - corners[i]
                res &= e[0] * v[:, 1] - e[1] * v[:, 0] >= 0
            return res

        in_a = inside(pa, pts)
        in_b = inside(pb, pts)
        area = np.prod(hi - lo)
        inter = in_a.mean() * area if (in_a & in_b).any() else 0.0
        inter = (in_a & in_b).mean() * area
        union = (in_a | in_b).mean() * area
        mc = inter / union if union > 0 else 0.0
        assert abs(mc - exact) < 2e-3


def test_footprint_corners_ccw():
    s = make_state(1, 2, 0, 4, 2, 1.5, 0.3)
    c = footprint_corners(s)
    area2 = 0.0
    for i in range(4):
        x0, y0 = c[i]
        x1, y1 = c[(i + 1) % 4]
        area2 += x0 * y1 - x1 * y0
    assert area2 > 0  # counter-clockwise
    assert area2 / 2 == pytest.approx(8.0, abs=1e-9)
