import math

import numpy as np
import pytest

from errors import MeshError
from mesh_util import (ObjectModel, box_corners, closest_points, contains, load_object, make_box, penetration_depth,
                       save_object, signed_distance, surface_samples)


def box_distance(points, half):
    """Analytic distance from outside points to an axis-aligned box centered at the origin."""
    return np.linalg.norm(np.maximum(np.abs(points) - half, 0.0), axis=1)


class TestObjectModel:
    def test_cube_properties(self, unit_cube):
        assert unit_cube.centroid == pytest.approx(np.zeros(3), abs=1e-12)
        assert unit_cube.diameter == pytest.approx(math.sqrt(3.0), rel=1e-12)
        lower, upper = unit_cube.bounds
        assert lower == pytest.approx([-0.5] * 3)
        assert upper == pytest.approx([0.5] * 3)
        assert unit_cube.face_areas.sum() == pytest.approx(6.0)

    def test_corners_follow_bounds(self):
        corners = box_corners((0, 0, 0), (1, 2, 3))
        assert corners[0] == pytest.approx([0, 0, 0])
        assert corners[7] == pytest.approx([1, 2, 3])
        assert corners[4] == pytest.approx([1, 0, 0])

    def test_rejects_bad_indices(self):
        vertices = np.eye(4)[:, :3]
        with pytest.raises(MeshError):
            ObjectModel.from_arrays("bad", vertices, np.array([[0, 1, 9]]))

    def test_rejects_degenerate_surface(self):
        vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
        with pytest.raises(MeshError):
            ObjectModel.from_arrays("flat", vertices, np.array([[0, 1, 2], [1, 2, 3]]))


class TestClosestPoints:
    def test_matches_analytic_box_distance(self, rng):
        box = make_box((0.06, 0.04, 0.03))
        half = np.array([0.03, 0.02, 0.015])
        points = rng.uniform(-0.1, 0.1, (200, 3))
        points = points[np.any(np.abs(points) > half, axis=1)]
        _, distance, _ = closest_points(box, points)
        assert distance == pytest.approx(box_distance(points, half), abs=1e-12)

    def test_surface_point_has_zero_distance(self, unit_cube):
        closest, distance, _ = closest_points(unit_cube, np.array([[0.5, 0.1, -0.2]]))
        assert distance[0] == pytest.approx(0.0, abs=1e-12)
        assert closest[0] == pytest.approx([0.5, 0.1, -0.2])


class TestContains:
    def test_cube_inside_outside(self, unit_cube):
        points = np.array([[0.0, 0.0, 0.0], [0.3, -0.2, 0.45], [0.6, 0.0, 0.0], [0.0, 0.0, -2.0]])
        assert contains(unit_cube, points).tolist() == [True, True, False, False]

    def test_sphere_against_radius(self, sphere, rng):
        points = rng.uniform(-0.05, 0.05, (300, 3))
        radius = np.linalg.norm(points, axis=1)
        # icosphere faces sit slightly inside the true sphere
        clear = (radius < 0.037) | (radius > 0.041)
        assert np.array_equal(contains(sphere, points[clear]), radius[clear] < 0.04)

    def test_signed_distance_sign(self, unit_cube):
        values = signed_distance(unit_cube, np.array([[0.0, 0.0, 0.4], [0.0, 0.0, 0.7]]))
        assert values == pytest.approx([-0.1, 0.2])

    def test_penetration_depth(self, unit_cube):
        depth = penetration_depth(unit_cube, np.array([[0.0, 0.0, 0.45], [0.0, 0.0, 0.9]]))
        assert depth == pytest.approx([0.05, 0.0])


class TestSurfaceSamples:
    def test_samples_lie_on_surface(self, grasp_box, rng):
        points, faces = surface_samples(grasp_box, 500, rng)
        _, distance, _ = closest_points(grasp_box, points)
        assert distance.max() < 1e-12
        assert faces.min() >= 0 and faces.max() < len(grasp_box.triangles)

    def test_reproducible(self, sphere):
        a, _ = surface_samples(sphere, 50, np.random.default_rng(3))
        b, _ = surface_samples(sphere, 50, np.random.default_rng(3))
        assert np.array_equal(a, b)


class TestObjFiles:
    def test_save_load_round_trip(self, grasp_box, tmp_path):
        path = tmp_path / "meshes" / "box_a.obj"
        save_object(grasp_box, str(path))
        loaded = load_object(str(path))
        assert loaded.id == "box_a"
        assert loaded.diameter == pytest.approx(grasp_box.diameter, rel=1e-6)
        assert loaded.face_areas.sum() == pytest.approx(grasp_box.face_areas.sum(), rel=1e-6)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MeshError):
            load_object(str(tmp_path / "nope.obj"))

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "junk.obj"
        path.write_text("this is not a mesh\n")
        with pytest.raises(MeshError):
            load_object(str(path))
