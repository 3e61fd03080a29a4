"""Rigid poses, the Kabsch solver and pose-error metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation


class DegenerateInput(ValueError):
    """Raised when a point set cannot determine a rigid transform."""


@dataclass(frozen=True)
class Pose:
    """Object-to-camera rigid transform: x_cam = rotation @ x_obj + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """Return the pose equivalent to applying ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def orthonormalized(self) -> "Pose":
        """Project the rotation back onto SO(3)."""
        u, _, vt = np.linalg.svd(self.rotation)
        d = np.sign(np.linalg.det(u @ vt))
        return Pose(u @ np.diag([1.0, 1.0, d]) @ vt, self.translation)

    def to_list(self) -> list[float]:
        # 12 numbers: row-major rotation, then translation
        return [float(v) for v in self.rotation.ravel()] + [float(v) for v in self.translation]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Pose":
        values = np.asarray(values, dtype=float)
        if values.shape != (12,):
            raise ValueError(f"pose needs 12 numbers, got {values.shape}")
        return cls(values[:9].reshape(3, 3), values[9:])


@dataclass(frozen=True)
class Correspondence:
    object_point: np.ndarray
    camera_point: np.ndarray


@dataclass(frozen=True)
class ObjectModel:
    vertices: np.ndarray
    diameter: float

    @classmethod
    def from_vertices(cls, vertices) -> "ObjectModel":
        v = np.asarray(vertices, dtype=float).reshape(-1, 3)
        if len(v) < 4:
            raise ValueError("object model needs at least 4 vertices")
        centered = v - v.mean(axis=0)
        s = np.linalg.svd(centered, compute_uv=False)
        if s[2] <= 1e-9 * s[0]:
            raise ValueError("object model vertices are coplanar")
        diff = v[:, None, :] - v[None, :, :]
        diameter = float(np.sqrt((diff**2).sum(-1)).max())
        return cls(v, diameter)


def apply_pose(pose: Pose, point) -> np.ndarray:
    """Map object-frame point(s) into the camera frame. Accepts (3,) or (n, 3)."""
    p = np.asarray(point, dtype=float)
    return p @ pose.rotation.T + pose.translation


def kabsch_arrays(object_points: np.ndarray, camera_points: np.ndarray) -> Pose:
    """Least-squares rigid transform taking ``object_points`` onto ``camera_points``."""
    x = np.asarray(object_points, dtype=float)
    y = np.asarray(camera_points, dtype=float)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise DegenerateInput(f"mismatched point arrays {x.shape} vs {y.shape}")
    if len(x) < 3:
        raise DegenerateInput(f"need at least 3 correspondences, got {len(x)}")
    cx = x.mean(axis=0)
    cy = y.mean(axis=0)
    xc = x - cx
    s = np.linalg.svd(xc, compute_uv=False)
    if s[0] == 0.0 or s[1] < 1e-9 * s[0]:
        raise DegenerateInput("object points are collinear")
    h = xc.T @ (y - cy)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0.0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(r, cy - r @ cx)


def kabsch(correspondences: Sequence[Correspondence]) -> Pose:
    if len(correspondences) < 3:
        raise DegenerateInput(f"need at least 3 correspondences, got {len(correspondences)}")
    x = np.array([c.object_point for c in correspondences], dtype=float)
    y = np.array([c.camera_point for c in correspondences], dtype=float)
    return kabsch_arrays(x, y)


def vertex_distance_error(estimate: Pose, truth: Pose, model: ObjectModel) -> float:
    """Mean distance between model vertices placed by the two poses."""
    a = apply_pose(estimate, model.vertices)
    b = apply_pose(truth, model.vertices)
    return float(np.linalg.norm(a - b, axis=1).mean())


def is_pose_correct(estimate: Pose, truth: Pose, model: ObjectModel, threshold_fraction: float = 0.1) -> bool:
    if threshold_fraction <= 0:
        raise ValueError("threshold_fraction must be positive")
    return vertex_distance_error(estimate, truth, model) < threshold_fraction * model.diameter


def pairwise_vertex_distances(poses: Sequence[Pose], model: ObjectModel) -> np.ndarray:
    """(n, n) matrix of vertex_distance_error between every pair of poses."""
    placed = np.stack([apply_pose(p, model.vertices) for p in poses])  # (n, v, 3)
    n = len(poses)
    out = np.zeros((n, n))
    for i in range(n):
        out[i] = np.linalg.norm(placed - placed[i], axis=2).mean(axis=1)
    return out


def rotation_error(r1: np.ndarray, r2: np.ndarray) -> float:
    """Geodesic angle between two rotations, in radians.

    Uses the chord form ||r1 - r2||_F = 2*sqrt(2)*sin(angle/2), which stays
    accurate for tiny angles where the trace/arccos form does not.
    """
    chord = np.linalg.norm(np.asarray(r1) - np.asarray(r2))
    return float(2.0 * np.arcsin(min(1.0, chord / (2.0 * np.sqrt(2.0)))))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed proper rotation."""
    return Rotation.random(random_state=rng).as_matrix()
