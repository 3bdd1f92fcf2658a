"""Planar geometry primitives: wrapped angles, rotation differences, frame transforms.

All angles live on (-pi, pi]. Functions accept scalars or numpy arrays and
broadcast elementwise; array inputs return arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Reduce an angle (rad) to the interval (-pi, pi].

    Raises ValueError on non-finite input.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("wrap_angle: non-finite angle")
    # map to [-pi, pi) via floored modulo, then move -pi to +pi
    wrapped = np.mod(theta + math.pi, TWO_PI) - math.pi
    wrapped = np.where(wrapped == -math.pi, math.pi, wrapped)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


def rot_diff(a, b):
    """Wrapped rotation difference a - b, the planar specialization of
    the rotation-difference operator between two orientations."""
    return wrap_angle(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))


@dataclass(frozen=True)
class Pose2:
    """Rigid planar pose: position (m, m) and a wrapped rotation (rad)."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)

    def compose(self, other: "Pose2") -> "Pose2":
        """this * other: apply `other` in this pose's frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            wrap_angle(self.theta + other.theta),
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), wrap_angle(-self.theta))


def to_frame(frame: Pose2, point) -> np.ndarray:
    """Express world point(s) in `frame` coordinates (rigid inverse transform).

    `point` may be shape (2,) or (..., 2).
    """
    p = np.asarray(point, dtype=np.float64)
    c, s = math.cos(frame.theta), math.sin(frame.theta)
    dx = p[..., 0] - frame.x
    dy = p[..., 1] - frame.y
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def from_frame(frame: Pose2, point) -> np.ndarray:
    """Map point(s) expressed in `frame` back to world coordinates."""
    p = np.asarray(point, dtype=np.float64)
    c, s = math.cos(frame.theta), math.sin(frame.theta)
    return np.stack(
        [frame.x + c * p[..., 0] - s * p[..., 1], frame.y + s * p[..., 0] + c * p[..., 1]],
        axis=-1,
    )


def rotate(theta, vec) -> np.ndarray:
    """Rotate vector(s) (..., 2) by angle(s) theta (broadcast over leading dims)."""
    v = np.asarray(vec, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], axis=-1)


def rotate_inv(theta, vec) -> np.ndarray:
    """Rotate vector(s) by -theta."""
    v = np.asarray(vec, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([c * v[..., 0] + s * v[..., 1], -s * v[..., 0] + c * v[..., 1]], axis=-1)


def perp(vec) -> np.ndarray:
    """90-degree CCW rotation, (..., 2) -> (..., 2)."""
    v = np.asarray(vec, dtype=np.float64)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)
