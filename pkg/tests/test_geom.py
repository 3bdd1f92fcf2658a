import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from scopetrack.geom import Pose2, from_frame, rot_diff, to_frame, wrap_angle

finite_angles = st.floats(-50.0, 50.0, allow_nan=False, allow_infinity=False)


def test_wrap_angle_examples():
    assert wrap_angle(2 * math.pi) == pytest.approx(0.0, abs=1e-15)
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-3 * math.pi / 2) == pytest.approx(math.pi / 2, abs=1e-12)


def test_wrap_angle_rejects_nonfinite():
    for bad in (math.nan, math.inf, -math.inf):
        with pytest.raises(ValueError):
            wrap_angle(bad)


@given(finite_angles)
def test_wrap_angle_idempotent_and_in_range(theta):
    w = wrap_angle(theta)
    assert -math.pi < w <= math.pi
    assert wrap_angle(w) == w
    # congruent mod 2pi
    assert abs((w - theta) / (2 * math.pi) - round((w - theta) / (2 * math.pi))) < 1e-9


def test_rot_diff_examples():
    assert rot_diff(0.1, 0.1) == 0.0
    assert rot_diff(math.pi / 2, -math.pi / 2) == pytest.approx(math.pi)
    assert rot_diff(-3.0, 3.0) == pytest.approx(-6.0 + 2 * math.pi, abs=1e-12)


@given(finite_angles, finite_angles)
def test_rot_diff_bounded_and_antisymmetric(a, b):
    d = rot_diff(a, b)
    assert abs(d) <= math.pi
    assert wrap_angle(d + rot_diff(b, a)) == pytest.approx(0.0, abs=1e-9)


def test_to_frame_examples():
    assert np.allclose(to_frame(Pose2(0, 0, 0), [1.0, 1.0]), [1.0, 1.0])
    assert np.allclose(to_frame(Pose2(1, 0, 0), [1.0, 1.0]), [0.0, 1.0])
    assert np.allclose(to_frame(Pose2(0, 0, math.pi / 2), [1.0, 0.0]), [0.0, -1.0], atol=1e-15)


def test_frame_round_trip_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        frame = Pose2(*rng.uniform(-5, 5, size=2), rng.uniform(-math.pi, math.pi))
        pts = rng.uniform(-5, 5, size=(100, 2))
        back = to_frame(frame, from_frame(frame, pts))
        assert np.max(np.abs(back - pts)) < 1e-12


def test_pose_compose_inverse():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = Pose2(*rng.uniform(-2, 2, size=2), rng.uniform(-3, 3))
        q = p.compose(p.inverse())
        assert q.x == pytest.approx(0.0, abs=1e-12)
        assert q.y == pytest.approx(0.0, abs=1e-12)
        assert q.theta == pytest.approx(0.0, abs=1e-12)
