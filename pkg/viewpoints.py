import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from errors import InvalidArgumentError
from geometry_util import RigidTransform, axis_angle_matrix

TWO_PI = 2.0 * math.pi
POLE_THRESHOLD = 1.0 - 1e-6
DEFAULT_CAMERA_RADIUS = 0.6


@dataclass(frozen=True)
class ViewpointSample:
    """Camera direction on the unit sphere plus an in-plane roll."""

    u: float
    phi: float
    direction: Tuple[float, float, float]
    inplane: float = 0.0

    @classmethod
    def at(cls, u: float, phi: float, inplane: float = 0.0) -> "ViewpointSample":
        return cls(float(u), float(phi), direction_from(u, phi), float(inplane))


def direction_from(u: float, phi: float) -> Tuple[float, float, float]:
    """
    Unit direction for elevation parameter u and azimuth phi:
    (sqrt(1 - u^2) cos phi, sqrt(1 - u^2) sin phi, u).
    """
    if not -1.0 <= u <= 1.0:
        raise InvalidArgumentError(f"u must lie in [-1, 1], got {u}")
    radius = math.sqrt(1.0 - u * u)
    return (radius * math.cos(phi), radius * math.sin(phi), float(u))


def uniform_direction(rng: np.random.Generator) -> ViewpointSample:
    """Area-uniform random direction: u ~ U[-1, 1], phi ~ U[0, 2 pi)."""
    u = rng.uniform(-1.0, 1.0)
    phi = rng.uniform(0.0, TWO_PI)
    return ViewpointSample.at(u, phi)


def sphere_grid(n_u: int, n_phi: int) -> List[ViewpointSample]:
    """
    Grid of n_u x n_phi viewpoints. u sits at the midpoints of n_u equal
    subdivisions of [-1, 1], phi at n_phi equal steps from 0.
    """
    if n_u < 1 or n_phi < 1:
        raise InvalidArgumentError(f"Grid counts must be >= 1, got ({n_u}, {n_phi})")
    samples = []
    for i in range(n_u):
        u = -1.0 + (2.0 * i + 1.0) / n_u
        for j in range(n_phi):
            samples.append(ViewpointSample.at(u, TWO_PI * j / n_phi))
    return samples


def disturb_viewpoint(vp: ViewpointSample, delta_u: float, delta_phi: float,
                      rng: np.random.Generator) -> ViewpointSample:
    """
    Jitter a viewpoint: u by U(-delta_u, delta_u) clamped to [-1, 1], phi by
    U(-delta_phi, delta_phi) wrapped to [0, 2 pi), and a fresh in-plane roll
    drawn from U(0, 2 pi).
    """
    if delta_u < 0 or delta_phi < 0:
        raise InvalidArgumentError("Viewpoint disturbances must be non-negative")
    du = rng.uniform(-delta_u, delta_u)
    dphi = rng.uniform(-delta_phi, delta_phi)
    inplane = rng.uniform(0.0, TWO_PI)
    if delta_u == 0 and delta_phi == 0:
        return ViewpointSample(vp.u, vp.phi, vp.direction, float(inplane))
    u = min(1.0, max(-1.0, vp.u + du))
    phi = (vp.phi + dphi) % TWO_PI
    return ViewpointSample.at(u, phi, inplane)


def camera_extrinsics(vp: ViewpointSample, radius: float = DEFAULT_CAMERA_RADIUS,
                      target: Sequence[float] = (0.0, 0.0, 0.0)) -> RigidTransform:
    """
    Camera-to-world pose looking at `target` from `radius` along the viewpoint
    direction. Camera axes follow the x-right, y-down, z-forward convention;
    the in-plane angle rolls the camera about its optical axis.

    Args:
        vp (ViewpointSample): Viewpoint.
        radius (float): Camera distance in meters.
        target (Sequence[float]): Look-at point.

    Returns:
        RigidTransform: Rotation columns are the camera axes in world coordinates,
        translation is the camera center.
    """
    if radius <= 0:
        raise InvalidArgumentError(f"Camera radius must be positive, got {radius}")
    direction = np.asarray(vp.direction, dtype=float)
    target = np.asarray(target, dtype=float)
    forward = -direction
    up = np.array([0.0, 0.0, 1.0])
    if abs(direction @ up) > POLE_THRESHOLD:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.column_stack([right, down, forward])
    if vp.inplane:
        rotation = rotation @ axis_angle_matrix((0.0, 0.0, 1.0), vp.inplane)
    center = target + radius * direction
    return RigidTransform.from_matrix(rotation, center)
