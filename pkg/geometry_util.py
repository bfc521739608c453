from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

Quaternion = Tuple[float, float, float, float]
Vec3 = Tuple[float, float, float]


def rotation_from_wxyz(quat: Sequence[float]) -> Rotation:
    """Build a scipy Rotation from a scalar-first quaternion."""
    w, x, y, z = quat
    return Rotation.from_quat([x, y, z, w])


def wxyz_from_rotation(rotation: Rotation) -> Quaternion:
    """
    Scalar-first unit quaternion of a rotation, sign fixed so that w >= 0.

    Args:
        rotation (Rotation): Rotation to convert.

    Returns:
        tuple: (w, x, y, z) as python floats.
    """
    x, y, z, w = rotation.as_quat()
    if w < 0:
        x, y, z, w = -x, -y, -z, -w
    return (float(w), float(x), float(y), float(z))


def axis_angle_matrix(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rotation matrix of `angle` radians about a unit `axis` (Rodrigues)."""
    return Rotation.from_rotvec(np.asarray(axis, dtype=float) * angle).as_matrix()


def rotvec_matrix(rotvec: Sequence[float]) -> np.ndarray:
    """exp map so(3) -> SO(3)."""
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix()


def rotation_angle(matrix: np.ndarray) -> float:
    """Angle in radians of the rotation held by a 3x3 matrix."""
    cos_angle = (np.trace(matrix) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos_angle, -1.0, 1.0)))


def normalize(vector: Sequence[float]) -> np.ndarray:
    vector = np.asarray(vector, dtype=float)
    return vector / np.linalg.norm(vector)


@dataclass(frozen=True)
class RigidTransform:
    """
    Rigid motion stored as a scalar-first unit quaternion plus a translation.

    Values are plain tuples of floats so that transforms compare field-wise and
    serialize to JSON without losing bits.
    """

    quat: Quaternion = (1.0, 0.0, 0.0, 0.0)
    translation: Vec3 = (0.0, 0.0, 0.0)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, rotation: np.ndarray, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        quat = wxyz_from_rotation(Rotation.from_matrix(np.asarray(rotation, dtype=float)))
        return cls(quat, tuple(float(v) for v in translation))

    @classmethod
    def from_rotvec(cls, rotvec: Sequence[float], translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        quat = wxyz_from_rotation(Rotation.from_rotvec(np.asarray(rotvec, dtype=float)))
        return cls(quat, tuple(float(v) for v in translation))

    @property
    def rotation(self) -> np.ndarray:
        if self.quat == (1.0, 0.0, 0.0, 0.0):
            return np.eye(3)
        return rotation_from_wxyz(self.quat).as_matrix()

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=float)

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.t
        return matrix

    def apply(self, points: np.ndarray) -> np.ndarray:
        """
        Transform points.

        Args:
            points (np.ndarray): (N, 3) or (3,) array.

        Returns:
            np.ndarray: Transformed points with the input's shape.
        """
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self ∘ other (other is applied first)."""
        rotation = self.rotation @ other.rotation
        translation = self.rotation @ other.t + self.t
        return RigidTransform.from_matrix(rotation, translation)

    def inverse(self) -> "RigidTransform":
        rotation = self.rotation.T
        return RigidTransform.from_matrix(rotation, -rotation @ self.t)

    def to_list(self) -> list:
        return list(self.quat) + list(self.translation)

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "RigidTransform":
        if len(values) != 7:
            raise ValueError(f"Rigid transform needs 7 values (wxyz + xyz), got {len(values)}")
        return cls(tuple(float(v) for v in values[:4]), tuple(float(v) for v in values[4:]))
