"""Inlier-driven pose refinement with a per-call step cap."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import DegenerateInput, Pose, apply_pose, kabsch_arrays, vertex_distance_error
from .scene import SyntheticScene


@dataclass
class RefinementResult:
    refined_pose: Pose
    steps_used: int
    inlier_counts: list = field(default_factory=list)
    moved_distance: float = 0.0


def default_inlier_threshold(scene: SyntheticScene, factor: float = 2.5) -> float:
    """``factor`` times the scene noise, or 1% of the diameter for noiseless scenes."""
    if scene.noise_sigma > 0:
        return factor * scene.noise_sigma
    return 0.01 * scene.model.diameter


def residuals(scene: SyntheticScene, pose: Pose) -> np.ndarray:
    return np.linalg.norm(apply_pose(pose, scene.object_coords) - scene.camera_coords, axis=1)


def find_inliers(scene: SyntheticScene, pose: Pose, inlier_threshold: float) -> np.ndarray:
    if not inlier_threshold > 0:
        raise ValueError("inlier_threshold must be positive")
    return np.flatnonzero(residuals(scene, pose) < inlier_threshold)


def refine(scene: SyntheticScene, pose: Pose, m_max: int, inlier_threshold: Optional[float] = None) -> RefinementResult:
    """Alternate inlier detection and Kabsch re-fits.

    Each re-fit is one step. The loop ends when the inlier count fails to grow
    or after ``m_max`` steps. A call that cannot re-fit at all still costs one
    step.
    """
    if m_max < 1:
        raise ValueError("m_max must be >= 1")
    if inlier_threshold is None:
        inlier_threshold = default_inlier_threshold(scene)
    current = pose
    counts: list[int] = []
    steps = 0
    while steps < m_max:
        idx = find_inliers(scene, current, inlier_threshold)
        if counts and len(idx) <= counts[-1]:
            counts.append(len(idx))
            break
        counts.append(len(idx))
        steps += 1
        if len(idx) < 3:
            break
        try:
            current = kabsch_arrays(scene.object_coords[idx], scene.camera_coords[idx])
        except DegenerateInput:
            break
    steps = max(steps, 1)
    return RefinementResult(current, steps, counts, vertex_distance_error(pose, current, scene.model))
