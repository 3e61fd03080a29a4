"""JSON documents for scenes and episode traces."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import ObjectModel, Pose
from .scene import SyntheticScene

SCENE_FORMAT_VERSION = 1


class CorruptFile(ValueError):
    pass


def scene_to_dict(scene: SyntheticScene) -> dict:
    return {
        "format_version": SCENE_FORMAT_VERSION,
        "scene_id": int(scene.scene_id),
        "truth": scene.truth.to_list(),
        "decoy": None if scene.decoy_pose is None else scene.decoy_pose.to_list(),
        "noise_sigma": scene.noise_sigma,
        "outlier_rate": scene.outlier_rate,
        "model_vertices": scene.model.vertices.tolist(),
        # one row per pixel: object_prob, object xyz, camera xyz, kind
        "pixels": [[float(p), *map(float, o), *map(float, c), int(k)] for p, o, c, k in
                   zip(scene.object_probs, scene.object_coords, scene.camera_coords, scene.kinds)],
    }


def scene_from_dict(data: dict) -> SyntheticScene:
    if data.get("format_version") != SCENE_FORMAT_VERSION:
        raise CorruptFile(f"unsupported scene format_version {data.get('format_version')!r}")
    px = np.asarray(data["pixels"], dtype=float).reshape(-1, 8)
    return SyntheticScene(
        scene_id=int(data["scene_id"]),
        truth=Pose.from_list(data["truth"]),
        model=ObjectModel.from_vertices(np.asarray(data["model_vertices"], dtype=float)),
        object_probs=px[:, 0].copy(),
        object_coords=px[:, 1:4].copy(),
        camera_coords=px[:, 4:7].copy(),
        kinds=px[:, 7].astype(np.int8),
        noise_sigma=float(data["noise_sigma"]),
        outlier_rate=float(data["outlier_rate"]),
        decoy_pose=None if data.get("decoy") is None else Pose.from_list(data["decoy"]),
    )


def scene_path(directory, scene_id: int) -> Path:
    return Path(directory) / f"scene_{scene_id}.json"


def save_scene(scene: SyntheticScene, directory) -> Path:
    path = scene_path(directory, scene.scene_id)
    path.write_text(json.dumps(scene_to_dict(scene)))
    return path


def load_scene(path) -> SyntheticScene:
    path = Path(path)
    try:
        return scene_from_dict(json.loads(path.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptFile(f"{path}: {exc}") from exc


def load_scene_dir(directory) -> list[SyntheticScene]:
    """All ``scene_<id>.json`` files in ``directory``, ordered by id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"scene directory {directory} does not exist")
    paths = sorted(directory.glob("scene_*.json"), key=lambda p: int(p.stem.split("_", 1)[1]))
    return [load_scene(p) for p in paths]


def write_traces(traces, path) -> None:
    """Episode traces as JSON lines."""
    with open(path, "w") as fh:
        for tr in traces:
            fh.write(tr.to_json() + "\n")
