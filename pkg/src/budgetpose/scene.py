"""Synthetic scenes standing in for dense object-coordinate predictions.

Each pixel carries an object probability, a predicted object coordinate and an
observed camera coordinate. Pixels come in three kinds:

* inliers: the camera coordinate is the true pose applied to the object
  coordinate, plus Gaussian noise;
* uniform outliers: object and camera coordinates drawn independently;
* decoys: outliers that agree with a second, wrong pose (a flipped copy of the
  truth). They imitate the confusions a real predictor makes on symmetric parts
  and clutter, and are what makes committing early to one hypothesis risky.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import DegenerateInput, ObjectModel, Pose, apply_pose, kabsch_arrays, random_rotation

INLIER, UNIFORM_OUTLIER, DECOY = 0, 1, 2


class ConfigError(ValueError):
    pass


class SamplingExhausted(RuntimeError):
    pass


@dataclass
class SceneConfig:
    pixel_count: int = 1000
    noise_sigma: float = 0.05  # in model-diameter units
    outlier_rate: float = 0.85
    decoy_fraction: float = 0.15  # share of outliers that follow the decoy pose
    inlier_prob_beta: tuple = (8.0, 2.0)
    outlier_prob_beta: tuple = (2.0, 8.0)
    decoy_prob_beta: tuple = (8.0, 2.0)
    decoy_min_angle_deg: float = 60.0
    translation_range: tuple = (-0.2, 0.2, -0.2, 0.2, 0.8, 1.2)  # x/y/z min-max pairs
    model_vertices: int = 64
    model_seed: int = 0
    model_path: Optional[str] = None

    def validate(self):
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.outlier_rate < 1.0:
            raise ConfigError("outlier_rate must be in [0, 1)")
        if not 0.0 <= self.decoy_fraction <= 1.0:
            raise ConfigError("decoy_fraction must be in [0, 1]")
        if self.pixel_count < 50:
            raise ConfigError("pixel_count must be >= 50")
        if self.model_vertices < 4:
            raise ConfigError("model_vertices must be >= 4")


@dataclass(frozen=True)
class PixelPrediction:
    object_prob: float
    object_coord: np.ndarray
    camera_coord: np.ndarray
    is_outlier: bool


@dataclass(frozen=True)
class SyntheticScene:
    """Immutable scene. Pixel data is held column-wise for vectorised access."""

    scene_id: int
    truth: Pose
    model: ObjectModel
    object_probs: np.ndarray
    object_coords: np.ndarray
    camera_coords: np.ndarray
    kinds: np.ndarray
    noise_sigma: float
    outlier_rate: float
    decoy_pose: Optional[Pose] = None

    def __post_init__(self):
        for name in ("object_probs", "object_coords", "camera_coords", "kinds"):
            getattr(self, name).setflags(write=False)

    @property
    def pixel_count(self) -> int:
        return len(self.object_probs)

    @property
    def is_outlier(self) -> np.ndarray:
        return self.kinds != INLIER

    def pixel(self, i: int) -> PixelPrediction:
        return PixelPrediction(
            float(self.object_probs[i]),
            self.object_coords[i].copy(),
            self.camera_coords[i].copy(),
            bool(self.kinds[i] != INLIER),
        )

    @property
    def pixels(self) -> list[PixelPrediction]:
        return [self.pixel(i) for i in range(self.pixel_count)]


@dataclass
class HypothesisPool:
    hypotheses: list[Pose] = field(default_factory=list)

    @property
    def pool_size(self) -> int:
        return len(self.hypotheses)

    def __len__(self):
        return len(self.hypotheses)

    def __getitem__(self, i) -> Pose:
        return self.hypotheses[i]


def default_model(n_vertices: int = 64, seed: int = 0) -> ObjectModel:
    """Seeded random point cloud on an ellipsoid surface (diameter about 0.2)."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n_vertices, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    v = d * np.array([0.10, 0.07, 0.045])
    return ObjectModel.from_vertices(v - v.mean(axis=0))


def load_model(config: SceneConfig) -> ObjectModel:
    if config.model_path:
        v = np.loadtxt(config.model_path, dtype=float).reshape(-1, 3)
        return ObjectModel.from_vertices(v)
    return default_model(config.model_vertices, config.model_seed)


def _surface_points(model: ObjectModel, rng: np.random.Generator, n: int) -> np.ndarray:
    idx = rng.integers(0, len(model.vertices), size=n)
    jitter = rng.normal(scale=0.01 * model.diameter, size=(n, 3))
    return model.vertices[idx] + jitter


def generate_scene(config: SceneConfig, seed: int, scene_id: Optional[int] = None,
                   model: Optional[ObjectModel] = None) -> SyntheticScene:
    config.validate()
    model = model if model is not None else load_model(config)
    rng = np.random.default_rng(seed)
    n = config.pixel_count
    diam = model.diameter
    sigma = config.noise_sigma * diam

    tr = np.asarray(config.translation_range, dtype=float).reshape(3, 2)
    truth = Pose(random_rotation(rng), rng.uniform(tr[:, 0], tr[:, 1]))

    # decoy: the truth composed with a large rotation about the model centre
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(config.decoy_min_angle_deg, 180.0))
    flip = Rotation.from_rotvec(axis * angle).as_matrix()
    decoy = truth.compose(Pose(flip, np.zeros(3)))

    is_out = rng.random(n) < config.outlier_rate
    is_decoy = is_out & (rng.random(n) < config.decoy_fraction)
    kinds = np.where(is_decoy, DECOY, np.where(is_out, UNIFORM_OUTLIER, INLIER)).astype(np.int8)

    obj = _surface_points(model, rng, n)
    cam = np.empty((n, 3))
    m = kinds == INLIER
    cam[m] = apply_pose(truth, obj[m]) + rng.normal(scale=sigma, size=(m.sum(), 3))
    m = kinds == DECOY
    cam[m] = apply_pose(decoy, obj[m]) + rng.normal(scale=sigma, size=(m.sum(), 3))
    m = kinds == UNIFORM_OUTLIER
    lo, hi = model.vertices.min(axis=0), model.vertices.max(axis=0)
    obj[m] = rng.uniform(lo, hi, size=(m.sum(), 3))
    cam[m] = truth.translation + rng.uniform(-diam, diam, size=(m.sum(), 3))

    probs = np.empty(n)
    for kind, (a, b) in ((INLIER, config.inlier_prob_beta), (UNIFORM_OUTLIER, config.outlier_prob_beta),
                         (DECOY, config.decoy_prob_beta)):
        m = kinds == kind
        probs[m] = rng.beta(a, b, size=m.sum())

    return SyntheticScene(
        scene_id=int(seed if scene_id is None else scene_id),
        truth=truth,
        model=model,
        object_probs=probs,
        object_coords=obj,
        camera_coords=cam,
        kinds=kinds,
        noise_sigma=float(sigma),
        outlier_rate=float(config.outlier_rate),
        decoy_pose=decoy,
    )


def draw_pixels(rng: np.random.Generator, probs: np.ndarray, k: int = 3) -> np.ndarray:
    """Draw ``k`` distinct pixel indices, each with probability proportional to ``probs``."""
    p = probs / probs.sum()
    return rng.choice(len(p), size=k, replace=False, p=p)


def sample_hypothesis_pool(scene: SyntheticScene, n: int, seed: int, max_retries: int = 100) -> HypothesisPool:
    if n < 1:
        raise ValueError("pool size must be >= 1")
    if np.count_nonzero(scene.object_probs > 0) < 3:
        raise SamplingExhausted("fewer than 3 pixels with positive object probability")
    rng = np.random.default_rng(seed)
    hyps = []
    for _ in range(n):
        for _attempt in range(max_retries):
            idx = draw_pixels(rng, scene.object_probs)
            try:
                hyps.append(kabsch_arrays(scene.object_coords[idx], scene.camera_coords[idx]))
                break
            except DegenerateInput:
                continue
        else:
            raise SamplingExhausted(f"{max_retries} consecutive degenerate draws in scene {scene.scene_id}")
    return HypothesisPool(hyps)
