"""Planar ego poses and SE(2) algebra.

Ego frame convention: x forward, y left, yaw counter-clockwise about z.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from exceptions import ConfigurationError
from tensor.core import Tensor

logger = logging.getLogger(__name__)


def normalize_angle(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return math.pi - (math.pi - float(yaw)) % (2.0 * math.pi)


@dataclass(frozen=True)
class EgoPose:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @classmethod
    def identity(cls) -> "EgoPose":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "EgoPose":
        return cls(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]])

    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def matrix(self) -> np.ndarray:
        m = np.eye(3)
        m[:2, :2] = self.rotation()
        m[:2, 2] = self.translation()
        return m

    def inverse(self) -> "EgoPose":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return EgoPose(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)

    def compose(self, other: "EgoPose") -> "EgoPose":
        """``self * other``: apply ``other`` first, then ``self``."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return EgoPose(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    def between(self, other: "EgoPose") -> "EgoPose":
        """``self^-1 * other``: ``other`` expressed in this pose's frame."""
        dx, dy = other.x - self.x, other.y - self.y
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return EgoPose(c * dx + s * dy, -s * dx + c * dy, other.yaw - self.yaw)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map ``[..., 2]`` points from this pose's local frame to the parent frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation().T + self.translation()

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])


Trajectory = List[EgoPose]


def relative_displacements(trajectory: Sequence[EgoPose]) -> Tensor:
    """Per-step ``(dx, dy, dyaw)`` with the translation in the earlier pose's frame."""
    if len(trajectory) < 2:
        raise ConfigurationError(f"relative displacements need at least 2 poses, got {len(trajectory)}")
    rows = [a.between(b).as_array() for a, b in zip(trajectory[:-1], trajectory[1:])]
    return Tensor(np.stack(rows))


def ego_motions(current: EgoPose, futures: Sequence[EgoPose]) -> List[EgoPose]:
    """Each future ego pose expressed in the current ego frame."""
    return [current.between(f) for f in futures]


def poses_from_waypoints(current: EgoPose, waypoints: np.ndarray) -> Trajectory:
    """Turn ``[N, 2]`` waypoints in the current ego frame into global poses.

    Heading at waypoint k follows the chord from waypoint k-1; a zero-length step
    keeps the previous heading.
    """
    poses, prev, yaw = [], np.zeros(2), 0.0
    for point in np.asarray(waypoints, dtype=np.float64):
        step = point - prev
        if np.hypot(*step) > 1e-6:
            yaw = math.atan2(step[1], step[0])
        poses.append(current.compose(EgoPose(point[0], point[1], yaw)))
        prev = point
    return poses


def poses_to_array(poses: Sequence[EgoPose]) -> np.ndarray:
    return np.stack([p.as_array() for p in poses]) if poses else np.zeros((0, 3))


def poses_from_array(rows: np.ndarray) -> Trajectory:
    return [EgoPose(*row) for row in np.asarray(rows, dtype=np.float64).reshape(-1, 3)]
