"""Planar rigid-body geometry: pose composition, frame-relative displacements,
and body-frame trajectory integration.

Conventions: radians, counterclockwise positive, headings wrapped to (-pi, pi].
All math is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return math.pi - (math.pi - theta) % TWO_PI


def wrap_angle_array(theta: np.ndarray) -> np.ndarray:
    return np.pi - np.mod(np.pi - np.asarray(theta, dtype=np.float64), TWO_PI)


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    theta: float

    def normalized(self) -> "Pose2":
        return Pose2(self.x, self.y, wrap_angle(self.theta))

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class MotionDelta:
    dx: float
    dy: float
    dtheta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta], dtype=np.float64)


IDENTITY = Pose2(0.0, 0.0, 0.0)


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Return a (+) b: b expressed in a's frame, result in the world frame."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        wrap_angle(a.theta + b.theta),
    )


def inverse(a: Pose2) -> Pose2:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(-(c * a.x + s * a.y), -(-s * a.x + c * a.y), wrap_angle(-a.theta))


def displacement_in_frame(ref: Pose2, cur: Pose2) -> MotionDelta:
    """Translation of cur relative to ref, rotated into ref's frame, plus the
    wrapped heading difference.  Equals inverse(ref) (+) cur read as a delta."""
    d = compose(inverse(ref), cur)
    return MotionDelta(d.x, d.y, d.theta)


def lift(delta: MotionDelta) -> Pose2:
    """Read a MotionDelta as a relative pose."""
    return Pose2(delta.dx, delta.dy, wrap_angle(delta.dtheta))


def integrate_chunks(
    chunks: Sequence[MotionDelta] | np.ndarray,
    anchor: Pose2 = IDENTITY,
    mode: str = "prefix_sum",
) -> list[Pose2]:
    """Integrate relative motion increments into poses.

    "prefix_sum" accumulates raw (dx, dy, dtheta) component-wise in the
    anchor's body frame and then maps each partial sum into the world frame.
    "chained" composes increments frame-by-frame instead.
    """
    arr = chunks_as_array(chunks)
    if mode == "prefix_sum":
        cum = np.cumsum(arr, axis=0)
        return [compose(anchor, Pose2(cx, cy, ct)) for cx, cy, ct in cum]
    if mode == "chained":
        poses = []
        cur = anchor
        for dx, dy, dt in arr:
            cur = compose(cur, Pose2(dx, dy, dt))
            poses.append(cur)
        return poses
    raise ValueError(f"unknown integration mode: {mode!r}")


def chunks_as_array(chunks: Sequence[MotionDelta] | np.ndarray) -> np.ndarray:
    if isinstance(chunks, np.ndarray):
        return np.asarray(chunks, dtype=np.float64)
    return np.array([[c.dx, c.dy, c.dtheta] for c in chunks], dtype=np.float64)


def transform_points(
    frame: Pose2,
    points: Iterable[tuple[float, float]] | np.ndarray,
    to_local: bool = False,
) -> np.ndarray:
    """Map points between frame-local and world coordinates.

    By default points are given in `frame`'s local coordinates and returned in
    world coordinates; with to_local=True the inverse map is applied.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    f = inverse(frame) if to_local else frame
    c, s = math.cos(f.theta), math.sin(f.theta)
    rot = np.array([[c, -s], [s, c]])
    return pts @ rot.T + np.array([f.x, f.y])
