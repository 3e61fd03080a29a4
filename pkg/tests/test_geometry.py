import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from budgetpose.geometry import (Correspondence, DegenerateInput, ObjectModel, Pose, apply_pose, is_pose_correct,
                                 kabsch, kabsch_arrays, pairwise_vertex_distances, random_rotation, rotation_error,
                                 vertex_distance_error)


def rot_z(deg):
    c, s = np.cos(np.deg2rad(deg)), np.sin(np.deg2rad(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


TETRA = ObjectModel.from_vertices([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, 0, 1.0]])


def test_kabsch_identity():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    p = kabsch([Correspondence(x, x) for x in pts])
    assert np.allclose(p.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(p.translation, 0, atol=1e-12)


def test_kabsch_quarter_turn_with_translation():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 3.0]])
    truth = Pose(rot_z(90), [1, 2, 3])
    p = kabsch_arrays(pts, apply_pose(truth, pts))
    assert np.abs(p.rotation - rot_z(90)).max() < 1e-9
    assert np.abs(p.translation - [1, 2, 3]).max() < 1e-9


def test_kabsch_round_trip_many_poses():
    rng = np.random.default_rng(0)
    for _ in range(300):
        truth = Pose(random_rotation(rng), rng.uniform(-5, 5, 3))
        pts = rng.normal(size=(rng.integers(4, 11), 3))
        p = kabsch_arrays(pts, apply_pose(truth, pts))
        assert rotation_error(p.rotation, truth.rotation) < 1e-8
        assert np.linalg.norm(p.translation - truth.translation) < 1e-8


def test_kabsch_rejects_degenerate():
    with pytest.raises(DegenerateInput):
        kabsch([Correspondence(np.zeros(3), np.zeros(3))] * 2)
    line = np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3.0]])
    with pytest.raises(DegenerateInput):
        kabsch_arrays(line, line + 1)


def test_kabsch_mirrored_input_still_proper():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(6, 3))
    mirrored = pts * np.array([1, 1, -1.0])
    p = kabsch_arrays(pts, mirrored)
    assert np.linalg.det(p.rotation) == pytest.approx(1.0, abs=1e-9)
    assert np.abs(p.rotation.T @ p.rotation - np.eye(3)).max() < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1e-3))
def test_kabsch_output_is_proper_rotation(seed, noise):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(5, 3))
    cam = apply_pose(Pose(random_rotation(rng), rng.normal(size=3)), pts) + noise * rng.normal(size=(5, 3))
    r = kabsch_arrays(pts, cam).rotation
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(r) - 1) < 1e-9


def test_apply_pose_basics(rng):
    p = rng.normal(size=3)
    assert np.allclose(apply_pose(Pose.identity(), p), p)
    pose = Pose(random_rotation(rng), [4, 5, 6])
    assert np.allclose(apply_pose(pose, np.zeros(3)), [4, 5, 6])


def test_compose_matches_sequential_application(rng):
    for _ in range(50):
        p1 = Pose(random_rotation(rng), rng.normal(size=3))
        p2 = Pose(random_rotation(rng), rng.normal(size=3))
        x = rng.normal(size=(7, 3))
        assert np.abs(apply_pose(p2, apply_pose(p1, x)) - apply_pose(p2.compose(p1), x)).max() < 1e-12


def test_inverse_and_serialisation(rng):
    p = Pose(random_rotation(rng), rng.normal(size=3))
    ident = p.compose(p.inverse())
    assert np.allclose(ident.rotation, np.eye(3), atol=1e-12)
    assert Pose.from_list(p.to_list()).to_list() == p.to_list()
    with pytest.raises(ValueError):
        Pose.from_list([0.0] * 11)


def test_vertex_distance_error_cases(rng):
    truth = Pose(random_rotation(rng), rng.normal(size=3))
    assert vertex_distance_error(truth, truth, TETRA) == 0.0
    shifted = Pose(truth.rotation, truth.translation + [0.37, 0, 0])
    assert vertex_distance_error(shifted, truth, TETRA) == pytest.approx(0.37, abs=1e-12)


def test_vertex_distance_error_half_turn_closed_form():
    # half turn about z through the centroid: each vertex moves by twice its distance to the axis
    v = TETRA.vertices
    c = v.mean(axis=0)
    turn = Pose(rot_z(180), c - rot_z(180) @ c)
    radial = np.linalg.norm((v - c)[:, :2], axis=1)
    assert vertex_distance_error(turn, Pose.identity(), TETRA) == pytest.approx(2 * radial.mean(), abs=1e-12)


def test_vertex_distance_error_symmetric(rng):
    a = Pose(random_rotation(rng), rng.normal(size=3))
    b = Pose(random_rotation(rng), rng.normal(size=3))
    assert vertex_distance_error(a, b, TETRA) == pytest.approx(vertex_distance_error(b, a, TETRA), abs=1e-14)


def test_is_pose_correct_thresholds():
    d = TETRA.diameter
    truth = Pose.identity()
    assert is_pose_correct(truth, truth, TETRA, 1e-6)
    assert not is_pose_correct(Pose(np.eye(3), [0.2 * d, 0, 0]), truth, TETRA, 0.1)
    assert is_pose_correct(Pose(np.eye(3), [0.1 * d - 1e-9, 0, 0]), truth, TETRA, 0.1)
    with pytest.raises(ValueError):
        is_pose_correct(truth, truth, TETRA, 0.0)


def test_object_model_validation():
    assert TETRA.diameter == pytest.approx(2.0)
    with pytest.raises(ValueError):
        ObjectModel.from_vertices([[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    with pytest.raises(ValueError):
        ObjectModel.from_vertices([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])


def test_pairwise_distances_and_rotation_error(rng):
    poses = [Pose(random_rotation(rng), rng.normal(size=3)) for _ in range(4)]
    d = pairwise_vertex_distances(poses, TETRA)
    assert np.allclose(d, d.T) and np.allclose(np.diag(d), 0)
    assert d[1, 2] == pytest.approx(vertex_distance_error(poses[1], poses[2], TETRA))
    assert rotation_error(rot_z(30), np.eye(3)) == pytest.approx(np.deg2rad(30), abs=1e-12)
    assert rotation_error(np.eye(3), np.eye(3)) == 0.0


def test_orthonormalized_projects_to_rotation(rng):
    r = random_rotation(rng) + 1e-4 * rng.normal(size=(3, 3))
    q = Pose(r, np.zeros(3)).orthonormalized().rotation
    assert np.abs(q.T @ q - np.eye(3)).max() < 1e-12
    assert np.linalg.det(q) == pytest.approx(1.0)
