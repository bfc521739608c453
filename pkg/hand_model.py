"""
Skeletal right hand: 21 joints, twist-splay-bend joint frames, 21-DoF compact
pose, forward kinematics and pose/shape disturbances.

Wrist frame convention: +x points from the wrist toward the middle knuckle,
+y toward the thumb side, +z is the palm normal (the side fingers flex toward).
At rest every joint frame is aligned with the wrist frame, so rest offsets and
tsb axes are written in wrist coordinates.
"""
import logging
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from errors import InvalidArgumentError
from geometry_util import RigidTransform

logger = logging.getLogger(__name__)

FINGERS = ("thumb", "index", "middle", "ring", "little")
JOINT_SLOTS = ("mcp", "pip", "dip", "tip")
JOINT_NAMES = ("wrist",) + tuple(f"{finger}_{slot}" for finger in FINGERS for slot in JOINT_SLOTS)
PARENTS = (-1,) + tuple(
    parent for f in range(5) for parent in (0, 1 + 4 * f, 2 + 4 * f, 3 + 4 * f)
)
FINGERTIP_IDS = (4, 8, 12, 16, 20)
JOINT_COUNT = 21

# average phalanx lengths in meters: metacarpal, proximal, middle, distal
CANONICAL_BONE_LENGTHS = np.array([
    [0.040712, 0.034040, 0.029417, 0.026423],
    [0.079706, 0.035224, 0.023270, 0.022036],
    [0.075669, 0.041975, 0.026329, 0.024504],
    [0.075358, 0.039978, 0.023513, 0.022647],
    [0.074556, 0.027541, 0.019826, 0.020395],
])
# wrist-to-fingertip bone sum of the canonical middle finger
CANONICAL_MIDDLE_CHAIN = float(CANONICAL_BONE_LENGTHS[2].sum())

# metacarpal direction in the palm plane, degrees from +x toward +y
METACARPAL_ANGLES = np.radians([45.0, 10.0, 0.0, -9.0, -19.0])

_SQRT_HALF = math.sqrt(0.5)
FINGER_TWIST = np.array([
    [_SQRT_HALF, _SQRT_HALF, 0.0],
    [1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
])
# flexion direction; the thumb curls across the palm
FINGER_FLEXION = np.array([
    [0.5, -0.5, _SQRT_HALF],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, 1.0],
])

# fingertip anchors in the distal frame (twist, splay, bend) relative to the tip joint:
# tip, pad center, then four pad ring points
ANCHOR_LOCAL = np.array([
    [0.0, 0.0, 0.0],
    [-0.008, 0.006, 0.0],
    [-0.004, 0.0045, 0.0],
    [-0.012, 0.0045, 0.0],
    [-0.008, 0.0045, 0.004],
    [-0.008, 0.0045, -0.004],
])
PAD_ANCHOR = 1
ANCHORS_PER_FINGER = len(ANCHOR_LOCAL)

DEFAULT_COUPLING = 2.0 / 3.0
SHAPE_SIZE = 10
SHAPE_GAIN = 0.05
SHAPE_CLAMP = 2.0


@dataclass(frozen=True)
class JointLimits:
    """
    Anatomical intervals in radians. Bends: metacarpal vs proximal/distal joints;
    splay applies at metacarpals only, the thumb has its own opposed range.
    """

    bend_mcp: Tuple[float, float] = (math.radians(-30.0), math.radians(90.0))
    bend_other: Tuple[float, float] = (math.radians(-10.0), math.radians(100.0))
    splay: Tuple[float, float] = (math.radians(-25.0), math.radians(25.0))
    thumb_splay: Tuple[float, float] = (math.radians(-25.0), math.radians(45.0))

    def bend_interval(self, slot: int) -> Tuple[float, float]:
        return self.bend_mcp if slot == 0 else self.bend_other

    def splay_interval(self, finger: int) -> Tuple[float, float]:
        return self.thumb_splay if finger == 0 else self.splay

    def bend_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Lower/upper arrays for the 15 expanded bend angles."""
        lower = np.array([self.bend_interval(i % 3)[0] for i in range(15)])
        upper = np.array([self.bend_interval(i % 3)[1] for i in range(15)])
        return lower, upper

    def splay_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lower = np.array([self.splay_interval(f)[0] for f in range(5)])
        upper = np.array([self.splay_interval(f)[1] for f in range(5)])
        return lower, upper


DEFAULT_LIMITS = JointLimits()


@dataclass(frozen=True)
class ShapeParams:
    coefficients: Tuple[float, ...] = (0.0,) * SHAPE_SIZE

    @classmethod
    def zeros(cls) -> "ShapeParams":
        return cls()

    def length_scale(self) -> np.ndarray:
        beta = np.asarray(self.coefficients[:5], dtype=float)
        return np.clip(1.0 + SHAPE_GAIN * beta, 0.5, 1.5)

    def width_scale(self) -> np.ndarray:
        beta = np.asarray(self.coefficients[5:], dtype=float)
        return np.clip(1.0 + SHAPE_GAIN * beta, 0.5, 1.5)


@dataclass(frozen=True, eq=False)
class HandSkeleton:
    """
    Fixed-topology skeleton. tsb_frames[j] holds rows (twist, splay, bend);
    anchor_points[f] are fingertip anchors in the distal frame of finger f.
    """

    rest_offsets: np.ndarray
    tsb_frames: np.ndarray
    anchor_points: np.ndarray
    joint_names: Tuple[str, ...] = JOINT_NAMES
    parent: Tuple[int, ...] = PARENTS
    fingertip_ids: Tuple[int, ...] = FINGERTIP_IDS

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    def finger_chain_length(self, finger: int) -> float:
        """Sum of bone lengths from the wrist to the fingertip of one finger."""
        base = 1 + 4 * finger
        return float(np.linalg.norm(self.rest_offsets[base:base + 4], axis=1).sum())

    @property
    def reach_max(self) -> float:
        return max(self.finger_chain_length(f) for f in range(5))


@dataclass(frozen=True)
class HandPoseCompact:
    """21-DoF pose: wrist (6) + per finger splay, bend_mcp and linked bend_pd."""

    wrist: RigidTransform = field(default_factory=RigidTransform)
    splay: Tuple[float, ...] = (0.0,) * 5
    bend_mcp: Tuple[float, ...] = (0.0,) * 5
    bend_pd: Tuple[float, ...] = (0.0,) * 5

    def finger_angles(self) -> np.ndarray:
        """(5, 3) array of (splay, bend_mcp, bend_pd) per finger."""
        return np.column_stack([self.splay, self.bend_mcp, self.bend_pd]).astype(float)

    @classmethod
    def from_finger_angles(cls, wrist: RigidTransform, angles: np.ndarray) -> "HandPoseCompact":
        angles = np.asarray(angles, dtype=float).reshape(5, 3)
        return cls(wrist,
                   tuple(float(v) for v in angles[:, 0]),
                   tuple(float(v) for v in angles[:, 1]),
                   tuple(float(v) for v in angles[:, 2]))


@dataclass(frozen=True)
class HandPoseExpanded:
    """
    Per-joint angles for the 15 finger joints (index = 3 * finger + slot, slot 0
    = metacarpal, 1 = proximal, 2 = distal). Twist and non-metacarpal splay are
    representable so that validate_pose can flag them.
    """

    wrist: RigidTransform = field(default_factory=RigidTransform)
    bend: Tuple[float, ...] = (0.0,) * 15
    splay: Tuple[float, ...] = (0.0,) * 15
    twist: Tuple[float, ...] = (0.0,) * 15

    def replace_bend(self, bend: Sequence[float]) -> "HandPoseExpanded":
        return HandPoseExpanded(self.wrist, tuple(float(v) for v in bend), self.splay, self.twist)

    def with_wrist(self, wrist: RigidTransform) -> "HandPoseExpanded":
        return HandPoseExpanded(wrist, self.bend, self.splay, self.twist)


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    protocol_i: bool
    protocol_ii: bool
    protocol_iii: bool
    within_limits: bool
    violations: Tuple[str, ...] = ()


def _finger_frame(finger: int) -> np.ndarray:
    twist = FINGER_TWIST[finger]
    splay = FINGER_FLEXION[finger]
    return np.array([twist, splay, np.cross(twist, splay)])


def _canonical_tables() -> Tuple[np.ndarray, np.ndarray]:
    offsets = np.zeros((JOINT_COUNT, 3))
    frames = np.zeros((JOINT_COUNT, 3, 3))
    frames[0] = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
    for f in range(5):
        base = 1 + 4 * f
        direction = np.array([math.cos(METACARPAL_ANGLES[f]), math.sin(METACARPAL_ANGLES[f]), 0.0])
        offsets[base] = CANONICAL_BONE_LENGTHS[f, 0] * direction
        for k in range(1, 4):
            offsets[base + k] = CANONICAL_BONE_LENGTHS[f, k] * FINGER_TWIST[f]
        frames[base:base + 4] = _finger_frame(f)
    return offsets, frames


def build_skeleton(shape: Optional[ShapeParams] = None) -> HandSkeleton:
    """
    Canonical skeleton with bone lengths scaled per finger by the shape.

    Args:
        shape (ShapeParams, optional): Shape coefficients; zeros give the canonical hand.

    Returns:
        HandSkeleton: Scaled skeleton.
    """
    shape = shape or ShapeParams.zeros()
    coefficients = np.asarray(shape.coefficients, dtype=float)
    if coefficients.shape != (SHAPE_SIZE,) or not np.all(np.isfinite(coefficients)):
        raise InvalidArgumentError(f"Shape needs {SHAPE_SIZE} finite coefficients, got {shape.coefficients}")
    offsets, frames = _canonical_tables()
    lengths = shape.length_scale()
    widths = shape.width_scale()
    for f in range(5):
        base = 1 + 4 * f
        offsets[base:base + 4] *= lengths[f]
    anchors = np.repeat(ANCHOR_LOCAL[None], 5, axis=0)
    anchors[:, :, 1:] *= widths[:, None, None]
    return HandSkeleton(rest_offsets=offsets, tsb_frames=frames, anchor_points=anchors)


@lru_cache(maxsize=1)
def canonical_skeleton() -> HandSkeleton:
    return build_skeleton(ShapeParams.zeros())


def expand_pose(pose: HandPoseCompact, coupling: float = DEFAULT_COUPLING) -> HandPoseExpanded:
    """Unlink the proximal/distal pair: proximal = bend_pd, distal = coupling * bend_pd."""
    bend = []
    splay = []
    for f in range(5):
        bend.extend([float(pose.bend_mcp[f]), float(pose.bend_pd[f]), float(coupling * pose.bend_pd[f])])
        splay.extend([float(pose.splay[f]), 0.0, 0.0])
    return HandPoseExpanded(pose.wrist, tuple(bend), tuple(splay), (0.0,) * 15)


def clamp_compact(pose: HandPoseCompact, limits: JointLimits = DEFAULT_LIMITS) -> HandPoseCompact:
    angles = pose.finger_angles()
    splay_lower, splay_upper = limits.splay_bounds()
    angles[:, 0] = np.clip(angles[:, 0], splay_lower, splay_upper)
    angles[:, 1] = np.clip(angles[:, 1], *limits.bend_mcp)
    angles[:, 2] = np.clip(angles[:, 2], *limits.bend_other)
    return HandPoseCompact.from_finger_angles(pose.wrist, angles)


def compact_within_limits(pose: HandPoseCompact, limits: JointLimits = DEFAULT_LIMITS) -> bool:
    return clamp_compact(pose, limits) == pose


def _joint_name(index15: int) -> str:
    return f"{FINGERS[index15 // 3]}_{JOINT_SLOTS[index15 % 3]}"


def validate_pose(pose: HandPoseExpanded, limits: JointLimits = DEFAULT_LIMITS,
                  coupling: Optional[float] = None, tol: float = 1e-12) -> ValidityReport:
    """
    Check the C-space protocols and joint limits. Never raises.

    Args:
        pose (HandPoseExpanded): Pose to check.
        limits (JointLimits): Anatomical intervals.
        coupling (float, optional): When given, the distal bend must equal
            coupling * proximal bend; None is the disturbed mode where the pair
            is independent.
        tol (float): Numerical slack.

    Returns:
        ValidityReport: Per-protocol flags and violation messages.
    """
    violations: List[str] = []
    bend = np.asarray(pose.bend, dtype=float)
    splay = np.asarray(pose.splay, dtype=float)
    twist = np.asarray(pose.twist, dtype=float)

    finite = all(np.all(np.isfinite(a)) for a in (bend, splay, twist))
    if not finite:
        violations.append("non-finite angle")
    if bend.shape != (15,) or splay.shape != (15,) or twist.shape != (15,):
        return ValidityReport(False, False, False, True, False, ("wrong angle count",))

    protocol_i = True
    for i in range(15):
        if abs(twist[i]) > tol:
            protocol_i = False
            violations.append(f"protocol-i: twist at {_joint_name(i)}")
        if i % 3 != 0 and abs(splay[i]) > tol:
            protocol_i = False
            violations.append(f"protocol-i: splay at non-metacarpal {_joint_name(i)}")

    protocol_ii = True
    if coupling is not None:
        for f in range(5):
            if abs(bend[3 * f + 2] - coupling * bend[3 * f + 1]) > 1e-9:
                protocol_ii = False
                violations.append(f"protocol-ii: {FINGERS[f]} distal bend not linked to proximal")

    within_limits = True
    for i in range(15):
        lower, upper = limits.bend_interval(i % 3)
        if not lower - tol <= bend[i] <= upper + tol:
            within_limits = False
            violations.append(f"limit: bend at {_joint_name(i)} = {bend[i]:.4f} rad")
    for f in range(5):
        lower, upper = limits.splay_interval(f)
        if not lower - tol <= splay[3 * f] <= upper + tol:
            within_limits = False
            violations.append(f"limit: splay at {_joint_name(3 * f)} = {splay[3 * f]:.4f} rad")

    valid = finite and protocol_i and protocol_ii and within_limits
    return ValidityReport(valid, protocol_i, protocol_ii, True, within_limits, tuple(violations))


def _local_rotations(skeleton: HandSkeleton, pose: HandPoseExpanded) -> np.ndarray:
    # rotation of each of the 15 articulated joints: splay, then bend, then twist
    joints = [1 + 4 * f + k for f in range(5) for k in range(3)]
    frames = skeleton.tsb_frames[joints]
    twist = Rotation.from_rotvec(frames[:, 0] * np.asarray(pose.twist)[:, None]).as_matrix()
    splay = Rotation.from_rotvec(frames[:, 1] * np.asarray(pose.splay)[:, None]).as_matrix()
    bend = Rotation.from_rotvec(frames[:, 2] * np.asarray(pose.bend)[:, None]).as_matrix()
    return splay @ bend @ twist


def _local_chain(skeleton: HandSkeleton, pose: HandPoseExpanded) -> Tuple[np.ndarray, np.ndarray]:
    """Joint positions and cumulative rotations with the wrist at the origin."""
    local = _local_rotations(skeleton, pose)
    positions = np.zeros((JOINT_COUNT, 3))
    rotations = np.zeros((JOINT_COUNT, 3, 3))
    rotations[0] = np.eye(3)
    for j in range(1, JOINT_COUNT):
        parent = skeleton.parent[j]
        positions[j] = positions[parent] + rotations[parent] @ skeleton.rest_offsets[j]
        slot = (j - 1) % 4
        if slot == 3:
            rotations[j] = rotations[parent]
        else:
            rotations[j] = rotations[parent] @ local[3 * ((j - 1) // 4) + slot]
    return positions, rotations


def _world_chain(skeleton: HandSkeleton, pose: HandPoseExpanded) -> Tuple[np.ndarray, np.ndarray]:
    positions, rotations = _local_chain(skeleton, pose)
    wrist_rotation = pose.wrist.rotation
    return positions @ wrist_rotation.T + pose.wrist.t, wrist_rotation @ rotations


def forward_kinematics(skeleton: HandSkeleton, pose: HandPoseExpanded,
                       limits: JointLimits = DEFAULT_LIMITS) -> np.ndarray:
    """
    World positions of the 21 joints.

    Args:
        skeleton (HandSkeleton): Skeleton.
        pose (HandPoseExpanded): A protocol-valid pose.
        limits (JointLimits): Limits the pose must respect.

    Returns:
        np.ndarray: (21, 3) positions in meters.
    """
    report = validate_pose(pose, limits)
    if not report.valid:
        raise InvalidArgumentError(f"Invalid hand pose: {'; '.join(report.violations)}")
    positions, _ = _world_chain(skeleton, pose)
    return positions


def anchor_positions(skeleton: HandSkeleton, pose: HandPoseExpanded) -> np.ndarray:
    """World positions of fingertip anchors, shape (5, ANCHORS_PER_FINGER, 3)."""
    positions, rotations = _world_chain(skeleton, pose)
    return _anchors_from_chain(skeleton, positions, rotations)


def _anchors_from_chain(skeleton: HandSkeleton, positions: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    anchors = np.zeros((5, ANCHORS_PER_FINGER, 3))
    for f, tip in enumerate(skeleton.fingertip_ids):
        offsets = skeleton.anchor_points[f] @ skeleton.tsb_frames[tip]
        anchors[f] = positions[tip] + offsets @ rotations[tip].T
    return anchors


def point_jacobians(skeleton: HandSkeleton, pose: HandPoseCompact,
                    coupling: float = DEFAULT_COUPLING) -> Tuple[np.ndarray, np.ndarray]:
    """
    Anchor positions and their analytic Jacobians w.r.t. the 21 compact DoFs.

    DoF order: wrist rotation increment (3, left-multiplied, world frame), wrist
    translation (3), then (splay, bend_mcp, bend_pd) for each finger.

    Returns:
        tuple: anchors (5, A, 3) and jacobians (5, A, 3, 21).
    """
    expanded = expand_pose(pose, coupling)
    positions, rotations = _world_chain(skeleton, expanded)
    anchors = _anchors_from_chain(skeleton, positions, rotations)
    wrist_rotation = expanded.wrist.rotation
    wrist_t = expanded.wrist.t
    jac = np.zeros((5, ANCHORS_PER_FINGER, 3, 21))
    eye = np.eye(3)
    for f in range(5):
        base = 1 + 4 * f
        points = anchors[f]
        rel = points - wrist_t
        for k in range(3):
            jac[f, :, :, k] = np.cross(eye[k], rel)
        jac[f, :, :, 3:6] = eye
        frame = skeleton.tsb_frames[base]
        splay_axis = wrist_rotation @ frame[1]
        splay_rot = Rotation.from_rotvec(frame[1] * expanded.splay[3 * f]).as_matrix()
        bend_axis = wrist_rotation @ splay_rot @ frame[2]
        jac[f, :, :, 6 + 3 * f] = np.cross(splay_axis, points - positions[base])
        jac[f, :, :, 7 + 3 * f] = np.cross(bend_axis, points - positions[base])
        pip_axis = rotations[base] @ skeleton.tsb_frames[base + 1][2]
        dip_axis = rotations[base + 1] @ skeleton.tsb_frames[base + 2][2]
        jac[f, :, :, 8 + 3 * f] = (np.cross(pip_axis, points - positions[base + 1])
                                   + coupling * np.cross(dip_axis, points - positions[base + 2]))
    return anchors, jac


def disturb_pose(pose: HandPoseCompact, sigma_bend: float, sigma_splay: float, rng: np.random.Generator,
                 coupling: float = DEFAULT_COUPLING, limits: JointLimits = DEFAULT_LIMITS) -> HandPoseExpanded:
    """
    Expand a pose and add independent Gaussian noise to every bend (proximal and
    distal separately) and to the metacarpal splays, then clamp to limits.
    """
    if sigma_bend < 0 or sigma_splay < 0:
        raise InvalidArgumentError("Disturbance sigmas must be non-negative")
    expanded = expand_pose(pose, coupling)
    if sigma_bend == 0 and sigma_splay == 0:
        return expanded
    bend = np.asarray(expanded.bend) + rng.normal(0.0, sigma_bend, 15)
    splay_noise = rng.normal(0.0, sigma_splay, 5)
    lower, upper = limits.bend_bounds()
    bend = np.clip(bend, lower, upper)
    splay = np.zeros(15)
    splay_lower, splay_upper = limits.splay_bounds()
    splay[0::3] = np.clip(np.asarray(expanded.splay)[0::3] + splay_noise, splay_lower, splay_upper)
    return HandPoseExpanded(expanded.wrist,
                            tuple(float(v) for v in bend),
                            tuple(float(v) for v in splay),
                            (0.0,) * 15)


def sample_shape(rng: np.random.Generator, sigma: float = 0.5) -> ShapeParams:
    """Ten N(0, sigma) coefficients clamped to [-2, 2]; sigma is a standard deviation."""
    coefficients = np.clip(rng.normal(0.0, sigma, SHAPE_SIZE), -SHAPE_CLAMP, SHAPE_CLAMP)
    return ShapeParams(tuple(float(v) for v in coefficients))


def dump_skeleton(skeleton: HandSkeleton, path: str) -> None:
    """
    Write the skeleton as a joint table: name parent ox oy oz then the tsb triad
    (twist xyz, splay xyz, bend xyz). The root's parent is "-".
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("# name parent ox oy oz tx ty tz sx sy sz bx by bz\n")
        for j, name in enumerate(skeleton.joint_names):
            parent = skeleton.parent[j]
            values = list(skeleton.rest_offsets[j]) + list(skeleton.tsb_frames[j].reshape(-1))
            parent_name = "-" if parent < 0 else skeleton.joint_names[parent]
            f.write(" ".join([name, parent_name] + [repr(float(v)) for v in values]) + "\n")


def load_skeleton(path: str) -> HandSkeleton:
    """
    Read a joint table written by dump_skeleton. Topology must match the fixed
    21-joint hand; anchors are the canonical ones.
    """
    names: List[str] = []
    parents: List[str] = []
    rows: List[List[float]] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 14:
                raise InvalidArgumentError(f"{path}:{line_no}: expected 14 fields, got {len(parts)}")
            names.append(parts[0])
            parents.append(parts[1])
            rows.append([float(v) for v in parts[2:]])
    if tuple(names) != JOINT_NAMES:
        raise InvalidArgumentError(f"{path}: joint list must be {JOINT_NAMES}")
    parent_index = tuple(-1 if p == "-" else names.index(p) for p in parents)
    if parent_index != PARENTS:
        raise InvalidArgumentError(f"{path}: parent structure does not match the 21-joint hand")
    table = np.array(rows)
    frames = table[:, 3:].reshape(JOINT_COUNT, 3, 3)
    gram = frames @ np.transpose(frames, (0, 2, 1))
    if np.abs(gram - np.eye(3)).max() > 1e-9:
        raise InvalidArgumentError(f"{path}: tsb frames are not orthonormal")
    anchors = np.repeat(ANCHOR_LOCAL[None], 5, axis=0)
    logger.debug("Loaded skeleton from %s", path)
    return HandSkeleton(rest_offsets=table[:, :3].copy(), tsb_frames=frames.copy(), anchor_points=anchors)
