"""
Training losses, evaluation metrics and object symmetry sets.

Units: loc, cor and sym are mean squared distances (m^2); ord is a summed
absolute projected distance (m). They are combined as written, unit mix included.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from errors import AlignmentError, InvalidArgumentError
from geometry_util import RigidTransform, axis_angle_matrix, rotvec_matrix
from mesh_util import ObjectModel

logger = logging.getLogger(__name__)

HAND_JOINTS = 21
LOC_POINTS = 22
CORNER_COUNT = 8
WRIST = 0

REVOLUTION = math.inf
DEFAULT_REVOLUTION_STEPS = 36
DEFAULT_ICP_ITERS = 30
ICP_MIN_IMPROVEMENT = 1e-10
SYMMETRY_TOLERANCE = 1e-3
ORDINAL_DEAD_ZONE = 1e-3
DEDUPE_TOLERANCE = 1e-6
MAX_SYMMETRY_ELEMENTS = 1024

AXES = {
    "x": (1.0, 0.0, 0.0),
    "y": (0.0, 1.0, 0.0),
    "z": (0.0, 0.0, 1.0),
}

# lambda settings (lambda1, lambda2, lambda3) per evaluation scheme
LAMBDA_PRESETS = {
    "mpcpe": (1.0, 1.0, 0.0),
    "sym": (0.0, 0.0, 1.0),
}


@dataclass(frozen=True)
class PosePrediction:
    """Hand joints, object centroid and object rotation (axis-angle), camera frame."""

    hand_joints: np.ndarray
    object_centroid: np.ndarray
    object_rotation: np.ndarray

    def __post_init__(self):
        joints = np.asarray(self.hand_joints, dtype=float)
        centroid = np.asarray(self.object_centroid, dtype=float)
        rotation = np.asarray(self.object_rotation, dtype=float)
        if joints.shape != (HAND_JOINTS, 3) or centroid.shape != (3,) or rotation.shape != (3,):
            raise InvalidArgumentError(
                f"Prediction needs (21, 3) joints, a centroid and a rotation vector, got "
                f"{joints.shape}, {centroid.shape}, {rotation.shape}")
        if not (np.all(np.isfinite(joints)) and np.all(np.isfinite(centroid)) and np.all(np.isfinite(rotation))):
            raise InvalidArgumentError("Prediction has non-finite coordinates")
        object.__setattr__(self, "hand_joints", joints)
        object.__setattr__(self, "object_centroid", centroid)
        object.__setattr__(self, "object_rotation", rotation)

    def loc_points(self) -> np.ndarray:
        """21 joints plus the object centroid."""
        return np.vstack([self.hand_joints, self.object_centroid])

    def object_transform(self) -> RigidTransform:
        return RigidTransform.from_rotvec(self.object_rotation, self.object_centroid)

    def corners(self, corners_canonical: np.ndarray) -> np.ndarray:
        """Camera-frame corners from centroid-relative canonical corners."""
        return corners_canonical @ rotvec_matrix(self.object_rotation).T + self.object_centroid


@dataclass(frozen=True)
class SymmetrySpec:
    """Generator entries: (unit axis, angle in radians or REVOLUTION)."""

    entries: Tuple[Tuple[Tuple[float, float, float], float], ...] = ()

    def __post_init__(self):
        for axis, angle in self.entries:
            if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
                raise InvalidArgumentError(f"Symmetry axis {axis} is not a unit vector")
            if angle == REVOLUTION:
                continue
            if not angle > 0:
                raise InvalidArgumentError(f"Symmetry angle must be positive, got {angle}")
            turns = 2.0 * math.pi / angle
            if abs(turns - round(turns)) > 1e-9:
                raise InvalidArgumentError(f"Symmetry angle {math.degrees(angle):.4f} deg does not divide 360")


@dataclass(eq=False)
class SymmetrySet:
    """
    Rotations of the principal-axis frame that map the object onto itself,
    with the alignment that defines that frame and the self-map residual of each.
    """

    rotations: List[np.ndarray]
    alignment: RigidTransform = field(default_factory=RigidTransform)
    residuals: List[float] = field(default_factory=list)
    tolerance: float = 0.0
    dropped: int = 0

    @classmethod
    def from_rotations(cls, rotations: Sequence[np.ndarray]) -> "SymmetrySet":
        mats = [np.asarray(r, dtype=float) for r in rotations]
        return cls(mats, RigidTransform(), [0.0] * len(mats))

    def __len__(self) -> int:
        return len(self.rotations)

    def object_frame_rotations(self) -> List[np.ndarray]:
        align = self.alignment.rotation
        return [align.T @ r @ align for r in self.rotations]

    def object_frame_transforms(self) -> List[RigidTransform]:
        """Symmetries as rigid motions of the object frame (rotations about the centroid)."""
        align = self.alignment.rotation
        shift = self.alignment.t
        transforms = []
        for r in self.rotations:
            transforms.append(RigidTransform.from_matrix(align.T @ r @ align, align.T @ (r - np.eye(3)) @ shift))
        return transforms


@dataclass(frozen=True)
class LossBundle:
    loc: float
    cor: float
    ord: float
    sym: float
    total: float


def _points(values: Any, count: int, name: str) -> np.ndarray:
    points = np.asarray(values, dtype=float)
    if points.shape != (count, 3):
        raise InvalidArgumentError(f"{name} needs ({count}, 3) points, got {points.shape}")
    return points


def loss_loc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean squared distance over the 21 joints and the object centroid."""
    pred = _points(pred, LOC_POINTS, "loss_loc prediction")
    gt = _points(gt, LOC_POINTS, "loss_loc ground truth")
    return float(((pred - gt) ** 2).sum(axis=1).mean())


def loss_cor(r_o: Sequence[float], corners_canonical: np.ndarray, corners_gt: np.ndarray) -> float:
    """Mean squared distance between exp(r_o) c_i and the ground-truth corners."""
    canonical = _points(corners_canonical, CORNER_COUNT, "canonical corners")
    target = _points(corners_gt, CORNER_COUNT, "ground-truth corners")
    rotated = canonical @ rotvec_matrix(r_o).T
    return float(((rotated - target) ** 2).sum(axis=1).mean())


def _projected_depth(hand: np.ndarray, corners: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    return (hand[:, None, :] - corners[None, :, :]) @ view_dir


def _unit(view_dir: Sequence[float]) -> np.ndarray:
    view_dir = np.asarray(view_dir, dtype=float)
    if view_dir.shape != (3,) or abs(np.linalg.norm(view_dir) - 1.0) > 1e-9:
        raise InvalidArgumentError(f"View direction must be a unit 3-vector, got {view_dir}")
    return view_dir


def depth_relations(hand: np.ndarray, corners: np.ndarray, view_dir: Sequence[float],
                    dead_zone: float = ORDINAL_DEAD_ZONE) -> np.ndarray:
    """
    Ground-truth ordinal signs (21, 8) of (p_i - c_j) . n. Pairs whose projected
    depth is within the dead zone get 0 and are never penalized.
    """
    hand = _points(hand, HAND_JOINTS, "hand joints")
    corners = _points(corners, CORNER_COUNT, "corners")
    depth = _projected_depth(hand, corners, _unit(view_dir))
    signs = np.sign(depth).astype(np.int8)
    signs[np.abs(depth) <= dead_zone] = 0
    return signs


def loss_ord(hand: np.ndarray, corners: np.ndarray, gt_relations: np.ndarray,
             view_dir: Sequence[float]) -> float:
    """Sum of |(p_i - c_j) . n| over joint/corner pairs whose depth sign disagrees with the ground truth."""
    hand = _points(hand, HAND_JOINTS, "hand joints")
    corners = _points(corners, CORNER_COUNT, "corners")
    gt_relations = np.asarray(gt_relations)
    if gt_relations.shape != (HAND_JOINTS, CORNER_COUNT):
        raise InvalidArgumentError(f"gt_relations must be (21, 8), got {gt_relations.shape}")
    depth = _projected_depth(hand, corners, _unit(view_dir))
    misaligned = (gt_relations != 0) & (np.sign(depth) != gt_relations)
    return float(np.abs(depth)[misaligned].sum())


def loss_sym(r_pred: Sequence[float], r_gt: Sequence[float], sym: SymmetrySet,
             corners_canonical: np.ndarray) -> float:
    """min over R in S of the mean squared distance between exp(r_pred) c and exp(r_gt) R c."""
    if len(sym) == 0:
        raise InvalidArgumentError("Symmetry set is empty")
    canonical = _points(corners_canonical, CORNER_COUNT, "canonical corners")
    predicted = canonical @ rotvec_matrix(r_pred).T
    gt_rotation = rotvec_matrix(r_gt)
    best = math.inf
    for rotation in sym.object_frame_rotations():
        target = canonical @ (gt_rotation @ rotation).T
        best = min(best, float(((predicted - target) ** 2).sum(axis=1).mean()))
    return best


def combine_losses(loc: float, cor: float, ord_: float, sym: float,
                   lambdas: Tuple[float, float, float]) -> LossBundle:
    lambda1, lambda2, lambda3 = lambdas
    if not all(math.isfinite(v) for v in lambdas):
        raise InvalidArgumentError(f"Loss weights must be finite, got {lambdas}")
    return LossBundle(loc, cor, ord_, sym, loc + lambda1 * cor + lambda2 * ord_ + lambda3 * sym)


def loss_total(pred: PosePrediction, gt: PosePrediction, corners_canonical: np.ndarray, sym: SymmetrySet,
               view_dir: Sequence[float], lambdas: Tuple[float, float, float] = LAMBDA_PRESETS["mpcpe"],
               dead_zone: float = ORDINAL_DEAD_ZONE) -> LossBundle:
    """
    Compute the four terms for one prediction and weight them.

    Args:
        pred (PosePrediction): Prediction.
        gt (PosePrediction): Ground truth.
        corners_canonical (np.ndarray): (8, 3) centroid-relative box corners.
        sym (SymmetrySet): Object symmetries.
        view_dir (Sequence[float]): Unit projection direction for the ordinal term.
        lambdas (tuple): (lambda1, lambda2, lambda3).
        dead_zone (float): Ordinal tie band in meters.

    Returns:
        LossBundle: Terms and total = loc + l1 cor + l2 ord + l3 sym.
    """
    loc = loss_loc(pred.loc_points(), gt.loc_points())
    gt_corners_relative = corners_canonical @ rotvec_matrix(gt.object_rotation).T
    cor = loss_cor(pred.object_rotation, corners_canonical, gt_corners_relative)
    relations = depth_relations(gt.hand_joints, gt.corners(corners_canonical), view_dir, dead_zone)
    ord_ = loss_ord(pred.hand_joints, pred.corners(corners_canonical), relations, view_dir)
    sym_term = loss_sym(pred.object_rotation, gt.object_rotation, sym, corners_canonical)
    return combine_losses(loc, cor, ord_, sym_term, lambdas)


def mpjpe(pred_hand: np.ndarray, gt_hand: np.ndarray) -> float:
    """Mean joint distance after moving both wrists to the origin."""
    pred = _points(pred_hand, HAND_JOINTS, "predicted hand")
    gt = _points(gt_hand, HAND_JOINTS, "ground-truth hand")
    return float(np.linalg.norm((pred - pred[WRIST]) - (gt - gt[WRIST]), axis=1).mean())


def mpcpe(pred_corners: np.ndarray, gt_corners: np.ndarray) -> float:
    pred = _points(pred_corners, CORNER_COUNT, "predicted corners")
    gt = _points(gt_corners, CORNER_COUNT, "ground-truth corners")
    return float(np.linalg.norm(pred - gt, axis=1).mean())


def mssd(pred: RigidTransform, gt: RigidTransform, sym: SymmetrySet, vertices: np.ndarray) -> float:
    """
    Maximum symmetry-aware surface distance: min over S of the largest vertex
    displacement between the predicted pose and the symmetric ground truth.
    """
    vertices = np.asarray(vertices, dtype=float)
    if vertices.ndim != 2 or vertices.shape[1] != 3 or len(vertices) == 0:
        raise InvalidArgumentError("mssd needs a non-empty (N, 3) vertex array")
    if len(sym) == 0:
        raise InvalidArgumentError("Symmetry set is empty")
    predicted = pred.apply(vertices)
    best = math.inf
    for transform in sym.object_frame_transforms():
        target = gt.apply(transform.apply(vertices))
        best = min(best, float(np.linalg.norm(predicted - target, axis=1).max()))
    return best


def principal_axis_align(obj: ObjectModel) -> RigidTransform:
    """
    Rigid transform taking the vertex centroid to the origin and the inertia
    eigenvectors (eigenvalues descending) onto x, y, z.

    The first two axes are flipped so their largest-magnitude component is
    positive (ties go to the lowest index); z = x cross y.
    """
    vertices = np.asarray(obj.vertices, dtype=float)
    centered = vertices - vertices.mean(axis=0)
    singular = np.linalg.svd(centered, compute_uv=False)
    if len(vertices) < 4 or singular[-1] <= 1e-9 * singular[0]:
        raise AlignmentError(f"Object {obj.id}: vertex cloud is degenerate (coplanar)")
    squared = (centered ** 2).sum(axis=1)
    inertia = np.eye(3) * squared.sum() - centered.T @ centered
    _, vectors = np.linalg.eigh(inertia)
    axes = vectors[:, ::-1].T.copy()
    for k in range(2):
        if axes[k, int(np.argmax(np.abs(axes[k])))] < 0:
            axes[k] = -axes[k]
    axes[2] = np.cross(axes[0], axes[1])
    centroid = vertices.mean(axis=0)
    return RigidTransform.from_matrix(axes, -axes @ centroid)


def parse_symmetry_row(line: str) -> Tuple[str, SymmetrySpec]:
    """
    Parse "object_id | x, y, z | 180, 180, inf". A "-" axis column means no
    symmetry beyond identity.
    """
    parts = [p.strip() for p in line.split("|")]
    if len(parts) != 3:
        raise InvalidArgumentError(f"Symmetry row needs 3 columns: {line!r}")
    object_id, axes_text, angles_text = parts
    if axes_text in ("", "-"):
        return object_id, SymmetrySpec()
    axes = [a.strip().lower() for a in axes_text.split(",")]
    angles = [a.strip().lower() for a in angles_text.split(",")]
    if len(axes) != len(angles):
        raise InvalidArgumentError(f"{object_id}: {len(axes)} axes but {len(angles)} angles")
    entries = []
    for axis, angle in zip(axes, angles):
        if axis not in AXES:
            raise InvalidArgumentError(f"{object_id}: unknown axis {axis!r}")
        value = REVOLUTION if angle in ("inf", "∞") else math.radians(float(angle))
        entries.append((AXES[axis], value))
    return object_id, SymmetrySpec(tuple(entries))


def load_symmetry_table(path: str) -> Dict[str, SymmetrySpec]:
    table = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            object_id, spec = parse_symmetry_row(line)
            table[object_id] = spec
    return table


def _generators(spec: SymmetrySpec, revolution_steps: int) -> List[np.ndarray]:
    generators = []
    for axis, angle in spec.entries:
        step = 2.0 * math.pi / revolution_steps if angle == REVOLUTION else angle
        generators.append(axis_angle_matrix(axis, step))
    return generators


def close_group(generators: Sequence[np.ndarray], max_size: int = MAX_SYMMETRY_ELEMENTS) -> List[np.ndarray]:
    """Breadth-first closure of the generators under composition, identity first."""
    group = [np.eye(3)]
    frontier = [np.eye(3)]
    while frontier:
        next_frontier = []
        for element in frontier:
            for generator in generators:
                candidate = generator @ element
                if any(np.linalg.norm(candidate - g) < DEDUPE_TOLERANCE for g in group):
                    continue
                group.append(candidate)
                next_frontier.append(candidate)
                if len(group) > max_size:
                    raise InvalidArgumentError(f"Symmetry group exceeds {max_size} elements")
        frontier = next_frontier
    return group


def icp_cost(vertices: np.ndarray, rotation: np.ndarray, tree: Optional[cKDTree] = None) -> float:
    """Mean squared nearest-neighbour distance from rotated vertices to the cloud."""
    tree = tree or cKDTree(vertices)
    distance, _ = tree.query(vertices @ rotation.T)
    return float((distance ** 2).mean())


def icp_refine(vertices: np.ndarray, r_def: np.ndarray, icp_iters: int = DEFAULT_ICP_ITERS,
               tree: Optional[cKDTree] = None) -> np.ndarray:
    """
    Rotation-only ICP: find dR so that dR r_def maps the cloud onto itself.

    Args:
        vertices (np.ndarray): (N, 3) cloud, centered at the rotation origin.
        r_def (np.ndarray): Initial symmetry rotation.
        icp_iters (int): Maximum iterations.
        tree (cKDTree, optional): Prebuilt tree over `vertices`.

    Returns:
        np.ndarray: Best dR found.
    """
    vertices = np.asarray(vertices, dtype=float)
    if len(vertices) < 3:
        raise InvalidArgumentError("ICP needs at least 3 points")
    tree = tree or cKDTree(vertices)
    source = vertices @ np.asarray(r_def, dtype=float).T
    delta = np.eye(3)
    distance, index = tree.query(source)
    cost = float((distance ** 2).mean())
    best, best_cost = delta, cost
    for _ in range(icp_iters):
        rotation, _ = Rotation.align_vectors(vertices[index], source)
        delta = rotation.as_matrix()
        distance, index = tree.query(source @ delta.T)
        new_cost = float((distance ** 2).mean())
        if new_cost < best_cost:
            best, best_cost = delta, new_cost
        if cost - new_cost < ICP_MIN_IMPROVEMENT:
            break
        cost = new_cost
    return best


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between two point clouds."""
    forward, _ = cKDTree(b).query(a)
    backward, _ = cKDTree(a).query(b)
    return float(max(forward.max(), backward.max()))


def symmetry_set(obj: ObjectModel, spec: SymmetrySpec, revolution_steps: int = DEFAULT_REVOLUTION_STEPS,
                 icp_iters: int = DEFAULT_ICP_ITERS, tolerance_factor: float = SYMMETRY_TOLERANCE,
                 threads: int = 1) -> SymmetrySet:
    """
    Build the set of object rotations from axis/angle generators.

    The object is aligned to its principal axes, generator rotations are closed
    under composition and every element is refined by ICP. Elements whose
    refined self-map residual (symmetric Hausdorff) exceeds
    tolerance_factor x diameter are dropped; identity is always kept.

    Args:
        obj (ObjectModel): Object mesh.
        spec (SymmetrySpec): Generators.
        revolution_steps (int): Discretization of a revolution axis.
        icp_iters (int): ICP iterations per element.
        tolerance_factor (float): Residual tolerance relative to the diameter.
        threads (int): Workers for the per-element refinement.

    Returns:
        SymmetrySet: Rotations in the principal-axis frame plus the alignment.
    """
    if revolution_steps < 1:
        raise InvalidArgumentError(f"revolution_steps must be >= 1, got {revolution_steps}")
    alignment = principal_axis_align(obj)
    cloud = alignment.apply(obj.vertices)
    tree = cKDTree(cloud)
    tolerance = tolerance_factor * obj.diameter
    elements = close_group(_generators(spec, revolution_steps))

    def refine(r_def):
        delta = icp_refine(cloud, r_def, icp_iters, tree)
        refined = delta @ r_def
        return refined, hausdorff(cloud @ refined.T, cloud)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        refined = list(pool.map(refine, elements[1:]))

    rotations = [np.eye(3)]
    residuals = [0.0]
    dropped = 0
    for r_def, (rotation, residual) in zip(elements[1:], refined):
        if not np.isfinite(residual) or residual > tolerance:
            dropped += 1
            logger.warning("%s: dropped symmetry element (angle %.2f deg), residual %.2e m > %.2e m",
                           obj.id, math.degrees(Rotation.from_matrix(r_def).magnitude()), residual, tolerance)
            continue
        rotations.append(rotation)
        residuals.append(residual)
    logger.debug("%s: %d symmetry elements kept, %d dropped", obj.id, len(rotations), dropped)
    return SymmetrySet(rotations, alignment, residuals, tolerance, dropped)


def symmetry_set_to_record(sym: SymmetrySet, object_id: str = "") -> Dict[str, Any]:
    return {
        "object_id": object_id,
        "alignment": sym.alignment.to_list(),
        "tolerance": float(sym.tolerance),
        "rotations": [[float(v) for v in r.reshape(-1)] for r in sym.rotations],
        "residuals": [float(v) for v in sym.residuals],
        "dropped": int(sym.dropped),
    }


def symmetry_set_from_record(record: Dict[str, Any]) -> SymmetrySet:
    try:
        rotations = [np.array(r, dtype=float).reshape(3, 3) for r in record["rotations"]]
        return SymmetrySet(rotations,
                           RigidTransform.from_list(record.get("alignment", RigidTransform().to_list())),
                           [float(v) for v in record.get("residuals", [0.0] * len(rotations))],
                           float(record.get("tolerance", 0.0)),
                           int(record.get("dropped", 0)))
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidArgumentError(f"Malformed symmetry set record: {e}") from e
