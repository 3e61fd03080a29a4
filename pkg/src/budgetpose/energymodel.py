"""Feature extraction and the two-headed energy network.

The network maps a 5-dim hypothesis feature vector to two energies: column 0
drives refinement choices, column 1 the final choice. Gradients are written
out by hand; there is no autodiff dependency.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import Pose, apply_pose, pairwise_vertex_distances
from .refine import RefinementResult, default_inlier_threshold, residuals
from .scene import HypothesisPool, SyntheticScene

FEATURE_NAMES = (
    "times_refined",
    "last_move_distance",
    "mean_pool_distance",
    "inlier_fraction",
    "mean_inlier_residual",
)
N_FEATURES = len(FEATURE_NAMES)
ORDERING_VERSION = 1
MODEL_FORMAT = "budgetpose-energynet"


@dataclass(frozen=True)
class FeatureVector:
    times_refined: float
    last_move_distance: float
    mean_pool_distance: float
    inlier_fraction: float
    mean_inlier_residual: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=float)

    @classmethod
    def from_array(cls, x) -> "FeatureVector":
        return cls(*(float(v) for v in x))


def mean_pool_distances(pool: HypothesisPool, model) -> np.ndarray:
    """Average distance of each original hypothesis to the other pool members."""
    n = len(pool)
    if n < 2:
        return np.zeros(n)
    d = pairwise_vertex_distances(pool.hypotheses, model)
    return d.sum(axis=1) / (n - 1)


def feature_array(scene: SyntheticScene, pose: Pose, tau: int, tau_max: int, moved: float,
                  pool_distance: float, inlier_threshold: float) -> np.ndarray:
    diam = scene.model.diameter
    res = residuals(scene, pose)
    inl = res < inlier_threshold
    n_in = int(inl.sum())
    mean_res = float(res[inl].mean()) / inlier_threshold if n_in else 1.0
    return np.array([
        tau / tau_max if tau_max > 0 else 0.0,
        moved / diam if tau > 0 else 0.0,
        pool_distance / diam,
        n_in / scene.pixel_count,
        mean_res,
    ])


def featurize(scene: SyntheticScene, pool: HypothesisPool, pose: Pose,
              refinement_history: Optional[RefinementResult], tau: int, *,
              origin: Optional[Pose] = None, tau_max: int = 3,
              inlier_threshold: Optional[float] = None) -> FeatureVector:
    """Features of ``pose`` after ``tau`` refinements.

    ``origin`` is the unrefined pool hypothesis the pose descends from; the
    pool-distance feature is measured from it. Defaults to ``pose``.
    """
    if tau < 0:
        raise ValueError("tau must be >= 0")
    if inlier_threshold is None:
        inlier_threshold = default_inlier_threshold(scene)
    origin = pose if origin is None else origin
    n = len(pool)
    if n > 1:
        ref = apply_pose(origin, scene.model.vertices)
        total = sum(float(np.linalg.norm(apply_pose(h, scene.model.vertices) - ref, axis=1).mean())
                    for h in pool.hypotheses)
        pool_distance = total / (n - 1)
    else:
        pool_distance = 0.0
    moved = refinement_history.moved_distance if (refinement_history is not None and tau > 0) else 0.0
    return FeatureVector.from_array(
        feature_array(scene, pose, tau, tau_max, moved, pool_distance, inlier_threshold))


class EnergyNet:
    """Fully connected tanh network with a shared trunk and a 2-unit linear output."""

    def __init__(self, layer_sizes: Sequence[int], weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]) or b.shape != (self.layer_sizes[i + 1],):
                raise ValueError(f"layer {i} has shape {w.shape}/{b.shape}")
        self.forward_count = 0
        self.backward_count = 0

    @classmethod
    def initialize(cls, seed: int, hidden: int = 16, n_hidden_layers: int = 2, scale: float = 0.1) -> "EnergyNet":
        rng = np.random.default_rng(seed)
        sizes = [N_FEATURES] + [hidden] * n_hidden_layers + [2]
        ws = [rng.uniform(-scale, scale, size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        bs = [rng.uniform(-scale, scale, size=b) for b in sizes[1:]]
        return cls(sizes, ws, bs)

    @classmethod
    def zeros(cls, hidden: int = 16, n_hidden_layers: int = 2) -> "EnergyNet":
        sizes = [N_FEATURES] + [hidden] * n_hidden_layers + [2]
        return cls(sizes, [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])], [np.zeros(b) for b in sizes[1:]])

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        """Canonical order: W1 (row-major), b1, W2, b2, ..."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    def unflatten(self, theta) -> "EnergyNet":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        ws, bs, i = [], [], 0
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            ws.append(theta[i:i + a * b].reshape(a, b).copy())
            i += a * b
            bs.append(theta[i:i + b].copy())
            i += b
        return EnergyNet(self.layer_sizes, ws, bs)

    def copy(self) -> "EnergyNet":
        return self.unflatten(self.flatten())

    def _activations(self, x: np.ndarray) -> list[np.ndarray]:
        acts = [x]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            acts.append(z if i == last else np.tanh(z))
        return acts

    def forward(self, features) -> np.ndarray:
        """Energies for a batch of feature rows, shape (k, 2)."""
        x = np.atleast_2d(np.asarray(features, dtype=float))
        self.forward_count += len(x)
        return self._activations(x)[-1]

    def backward(self, features, upstream) -> np.ndarray:
        """Gradient of sum(upstream * forward(features)) with respect to the flat parameters."""
        x = np.atleast_2d(np.asarray(features, dtype=float))
        g = np.atleast_2d(np.asarray(upstream, dtype=float))
        self.backward_count += len(x)
        acts = self._activations(x)
        grads_w, grads_b = [], []
        delta = g
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w.append(acts[i].T @ delta)
            grads_b.append(delta.sum(axis=0))
            if i > 0:
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        grads_w.reverse()
        grads_b.reverse()
        parts = []
        for gw, gb in zip(grads_w, grads_b):
            parts += [gw.ravel(), gb]
        return np.concatenate(parts)

    def score_states(self, states) -> np.ndarray:
        return self.forward(np.stack([s.features for s in states]))

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "ordering_version": ORDERING_VERSION,
            "layer_sizes": list(self.layer_sizes),
            "params": self.flatten().tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EnergyNet":
        if data.get("format") != MODEL_FORMAT or data.get("ordering_version") != ORDERING_VERSION:
            raise ValueError(
                f"unsupported model file (format={data.get('format')!r}, ordering_version={data.get('ordering_version')!r})")
        sizes = data["layer_sizes"]
        if sizes[0] != N_FEATURES or sizes[-1] != 2:
            raise ValueError(f"layer sizes {sizes} do not match {N_FEATURES} features / 2 energies")
        proto = cls(sizes, [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])], [np.zeros(b) for b in sizes[1:]])
        return proto.unflatten(data["params"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "EnergyNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def forward(net: EnergyNet, features) -> tuple[float, float]:
    x = features.as_array() if isinstance(features, FeatureVector) else np.asarray(features, dtype=float)
    e = net.forward(x)[0]
    return float(e[0]), float(e[1])


def backward(net: EnergyNet, features, upstream) -> np.ndarray:
    x = features.as_array() if isinstance(features, FeatureVector) else np.asarray(features, dtype=float)
    return net.backward(x, np.asarray(upstream, dtype=float).reshape(1, 2))
