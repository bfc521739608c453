import itertools
import logging
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np
import trimesh
from scipy.spatial import ConvexHull, cKDTree

from errors import MeshError

logger = logging.getLogger(__name__)

# fixed, non axis-aligned directions so rays rarely graze mesh edges
RAY_DIRECTIONS = np.array([
    [0.5773502691896258, 0.5773502691896258, 0.5773502691896258],
    [-0.2672612419124244, 0.5345224838248488, 0.8017837257372732],
    [0.8164965809277261, -0.4082482904638631, 0.4082482904638631],
])

# upper bound on point x triangle pairs held in memory by one query chunk
PAIR_CHUNK = 250_000


def box_corners(lower: Sequence[float], upper: Sequence[float]) -> np.ndarray:
    """
    Corners of an axis-aligned box, ordered by (x, y, z) bit pattern.

    Args:
        lower (Sequence[float]): Minimum corner.
        upper (Sequence[float]): Maximum corner.

    Returns:
        np.ndarray: (8, 3) corner array.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    return np.array([
        [upper[0] if i else lower[0], upper[1] if j else lower[1], upper[2] if k else lower[2]]
        for i, j, k in itertools.product((0, 1), repeat=3)
    ])


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """
    Triangle mesh of a rigid object in its canonical frame (meters).
    """

    id: str
    vertices: np.ndarray
    triangles: np.ndarray
    centroid: np.ndarray
    corners: np.ndarray

    @classmethod
    def from_arrays(cls, object_id: str, vertices: np.ndarray, triangles: np.ndarray) -> "ObjectModel":
        vertices = np.ascontiguousarray(vertices, dtype=float)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3 or len(vertices) < 4:
            raise MeshError(f"Object {object_id}: need at least 4 vertices, got shape {vertices.shape}")
        if triangles.ndim != 2 or triangles.shape[1] != 3 or len(triangles) == 0:
            raise MeshError(f"Object {object_id}: mesh has no triangles")
        if triangles.min() < 0 or triangles.max() >= len(vertices):
            raise MeshError(f"Object {object_id}: triangle index out of range")
        if not np.all(np.isfinite(vertices)):
            raise MeshError(f"Object {object_id}: non-finite vertex coordinates")
        tri = vertices[triangles]
        area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1).sum()
        if area < 1e-12:
            raise MeshError(f"Object {object_id}: mesh has zero surface area")
        corners = box_corners(vertices.min(axis=0), vertices.max(axis=0))
        return cls(object_id, vertices, triangles, vertices.mean(axis=0), corners)

    @classmethod
    def from_trimesh(cls, mesh: trimesh.Trimesh, object_id: str) -> "ObjectModel":
        return cls.from_arrays(object_id, np.asarray(mesh.vertices), np.asarray(mesh.faces))

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.triangles, process=False)

    @cached_property
    def triangle_vertices(self) -> np.ndarray:
        return self.vertices[self.triangles]

    @cached_property
    def face_areas(self) -> np.ndarray:
        tri = self.triangle_vertices
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        tri = self.triangle_vertices
        normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        return normals / np.where(lengths > 0, lengths, 1.0)

    @cached_property
    def kdtree(self) -> cKDTree:
        return cKDTree(self.vertices)

    @cached_property
    def diameter(self) -> float:
        """Largest vertex-to-vertex distance."""
        try:
            points = self.vertices[ConvexHull(self.vertices).vertices]
        except Exception:
            points = self.vertices
        diffs = points[:, None, :] - points[None, :, :]
        return float(np.sqrt((diffs ** 2).sum(-1)).max())

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def load_object(path: str, object_id: Optional[str] = None) -> ObjectModel:
    """
    Load a Wavefront OBJ (or any trimesh-readable mesh) as an ObjectModel.
    Polygons are triangulated on load.

    Args:
        path (str): Mesh file path.
        object_id (str, optional): Identifier; defaults to the file stem.

    Returns:
        ObjectModel: The loaded object.
    """
    if not os.path.exists(path):
        raise MeshError(f"Mesh file not found: {path}")
    object_id = object_id or os.path.splitext(os.path.basename(path))[0]
    try:
        mesh = trimesh.load(path, force="mesh", process=True)
    except Exception as e:
        raise MeshError(f"Could not read mesh {path}: {e}") from e
    if not isinstance(mesh, trimesh.Trimesh) or len(mesh.faces) == 0:
        raise MeshError(f"Mesh {path} has no triangles")
    logger.debug("Loaded %s: %d vertices, %d triangles", object_id, len(mesh.vertices), len(mesh.faces))
    return ObjectModel.from_trimesh(mesh, object_id)


def save_object(obj: ObjectModel, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    obj.to_trimesh().export(path)


def make_sphere(radius: float, subdivisions: int = 3, object_id: str = "sphere") -> ObjectModel:
    return ObjectModel.from_trimesh(trimesh.creation.icosphere(subdivisions=subdivisions, radius=radius), object_id)


def make_box(extents: Sequence[float], max_edge: Optional[float] = None, object_id: str = "box") -> ObjectModel:
    mesh = trimesh.creation.box(extents=extents)
    if max_edge:
        mesh = mesh.subdivide_to_size(max_edge=max_edge, max_iter=20)
    return ObjectModel.from_trimesh(mesh, object_id)


def make_cylinder(radius: float, height: float, sections: int = 36, max_edge: Optional[float] = None,
                  object_id: str = "cylinder") -> ObjectModel:
    mesh = trimesh.creation.cylinder(radius=radius, height=height, sections=sections)
    if max_edge:
        mesh = mesh.subdivide_to_size(max_edge=max_edge, max_iter=20)
    return ObjectModel.from_trimesh(mesh, object_id)


def closest_points(obj: ObjectModel, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Exact closest surface point for each query point, scanning every triangle.

    Args:
        obj (ObjectModel): Object mesh.
        points (np.ndarray): (N, 3) query points.

    Returns:
        tuple: closest points (N, 3), distances (N,), triangle ids (N,).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tris = obj.triangle_vertices
    n_tri = len(tris)
    closest = np.empty_like(points)
    distance = np.empty(len(points))
    tri_id = np.empty(len(points), dtype=np.int64)
    step = max(1, PAIR_CHUNK // n_tri)
    for start in range(0, len(points), step):
        chunk = points[start:start + step]
        tiled = np.tile(tris, (len(chunk), 1, 1))
        repeated = np.repeat(chunk, n_tri, axis=0)
        candidates = trimesh.triangles.closest_point(tiled, repeated).reshape(len(chunk), n_tri, 3)
        dist = np.linalg.norm(candidates - chunk[:, None, :], axis=2)
        best = dist.argmin(axis=1)
        rows = np.arange(len(chunk))
        closest[start:start + step] = candidates[rows, best]
        distance[start:start + step] = dist[rows, best]
        tri_id[start:start + step] = best
    return closest, distance, tri_id


def _ray_crossings(points: np.ndarray, direction: np.ndarray, tris: np.ndarray) -> np.ndarray:
    # Moller-Trumbore against every triangle
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    pvec = np.cross(direction, e2)
    det = (e1 * pvec).sum(axis=1)
    usable = np.abs(det) > 1e-18
    inv_det = np.where(usable, 1.0 / np.where(usable, det, 1.0), 0.0)
    tvec = points[:, None, :] - v0[None, :, :]
    u = (tvec * pvec).sum(axis=2) * inv_det
    qvec = np.cross(tvec, e1)
    v = (qvec @ direction) * inv_det
    t = (qvec * e2).sum(axis=2) * inv_det
    hit = usable & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
    return hit.sum(axis=1)


def contains(obj: ObjectModel, points: np.ndarray) -> np.ndarray:
    """
    Inside test by ray parity, majority vote over three ray directions.
    Points outside the bounding box are outside without casting rays.
    Crossings are counted in numpy (_ray_crossings) since trimesh's ray
    intersector requires the optional rtree backend, which is not a dependency.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    inside = np.zeros(len(points), dtype=bool)
    lower, upper = obj.bounds
    candidates = np.flatnonzero(np.all((points >= lower) & (points <= upper), axis=1))
    if len(candidates) == 0:
        return inside
    tris = obj.triangle_vertices
    step = max(1, PAIR_CHUNK // len(tris))
    for start in range(0, len(candidates), step):
        idx = candidates[start:start + step]
        votes = sum((_ray_crossings(points[idx], d, tris) % 2 == 1).astype(int) for d in RAY_DIRECTIONS)
        inside[idx] = votes >= 2
    return inside


def signed_distance(obj: ObjectModel, points: np.ndarray) -> np.ndarray:
    """Distance to the surface, negative inside the object."""
    _, distance, _ = closest_points(obj, points)
    return np.where(contains(obj, points), -distance, distance)


def penetration_depth(obj: ObjectModel, points: np.ndarray) -> np.ndarray:
    """
    Depth below the surface for each point, 0 for points outside.
    Only points found inside pay for a closest-point query.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    depth = np.zeros(len(points))
    inside = contains(obj, points)
    if inside.any():
        _, distance, _ = closest_points(obj, points[inside])
        depth[inside] = distance
    return depth


def surface_samples(obj: ObjectModel, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Area-uniform samples on the surface.

    Returns:
        tuple: points (count, 3) and the face index of each point.
    """
    probabilities = obj.face_areas / obj.face_areas.sum()
    faces = rng.choice(len(probabilities), size=count, p=probabilities)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tri = obj.triangle_vertices[faces]
    points = ((1.0 - r1)[:, None] * tri[:, 0]
              + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
              + (r1 * r2)[:, None] * tri[:, 2])
    return points, faces
