"""
Discrete object x hand-pose x viewpoint sampling space with a per-triplet
weight map, weighted draws without replacement and loss-feedback re-weighting.
"""
import logging
import struct
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np

from errors import InvalidArgumentError, SnapshotError
from file_handler import FileHandler
from viewpoints import ViewpointSample, sphere_grid

if TYPE_CHECKING:
    from grasp_forge import GraspCandidate
    from mesh_util import ObjectModel

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"CCVW"
SNAPSHOT_VERSION = 1
SNAPSHOT_HEADER = struct.Struct("<4sB3Q")

WEIGHT_LOWER_BOUND = 0.1
WEIGHT_UPPER_BOUND = 2.0


@dataclass(frozen=True, order=True)
class TripletIndex:
    object_id: int
    pose_id: int
    viewpoint_id: int

    def as_tuple(self) -> Tuple[int, int, int]:
        return (self.object_id, self.pose_id, self.viewpoint_id)


@dataclass(frozen=True)
class FeedbackRecord:
    triplet: TripletIndex
    error: float

    def __post_init__(self):
        if not np.isfinite(self.error) or self.error < 0:
            raise InvalidArgumentError(f"Feedback error must be finite and >= 0, got {self.error}")


@dataclass(eq=False)
class WeightMap:
    """Dense sampling weights, one float64 per triplet in (object, pose, viewpoint) row-major order."""

    dims: Tuple[int, int, int]
    weights: np.ndarray
    lower_bound: float = WEIGHT_LOWER_BOUND
    upper_bound: float = WEIGHT_UPPER_BOUND

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64).reshape(-1)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InvalidArgumentError(f"Weight map dims must be three counts >= 1, got {self.dims}")
        if self.weights.size != int(np.prod(self.dims)):
            raise InvalidArgumentError(f"Weight map has {self.weights.size} weights for dims {self.dims}")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise InvalidArgumentError("Weights must be finite and non-negative")
        if self.weights.sum() <= 0:
            raise InvalidArgumentError("Weight sum must be positive")

    @classmethod
    def uniform(cls, dims: Tuple[int, int, int]) -> "WeightMap":
        return cls(dims, np.ones(int(np.prod(dims))))

    @property
    def size(self) -> int:
        return self.weights.size

    def flat_index(self, idx: TripletIndex) -> int:
        n_o, n_p, n_v = self.dims
        if not (0 <= idx.object_id < n_o and 0 <= idx.pose_id < n_p and 0 <= idx.viewpoint_id < n_v):
            raise InvalidArgumentError(f"Triplet {idx.as_tuple()} out of bounds for dims {self.dims}")
        return (idx.object_id * n_p + idx.pose_id) * n_v + idx.viewpoint_id

    def triplet_of(self, flat: int) -> TripletIndex:
        _, n_p, n_v = self.dims
        object_id, rest = divmod(int(flat), n_p * n_v)
        pose_id, viewpoint_id = divmod(rest, n_v)
        return TripletIndex(object_id, pose_id, viewpoint_id)

    def weight(self, idx: TripletIndex) -> float:
        return float(self.weights[self.flat_index(idx)])

    def copy(self) -> "WeightMap":
        return WeightMap(self.dims, self.weights.copy(), self.lower_bound, self.upper_bound)


@dataclass(eq=False)
class CCVSpace:
    """
    The sampling space. pose_table / objects are bound by attach_grasps; an
    index-only space (no grasps) is enough for sampling and the loop harness.
    """

    n_objects: int
    n_poses: int
    n_viewpoints: int
    viewpoint_table: List[ViewpointSample]
    weight_map: WeightMap
    viewpoint_grid: Tuple[int, int] = (1, 1)
    pose_table: Optional[List[List["GraspCandidate"]]] = None
    objects: Optional[List["ObjectModel"]] = None
    object_ids: List[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.n_objects * self.n_poses * self.n_viewpoints

    def grasp(self, object_id: int, pose_id: int) -> "GraspCandidate":
        if self.pose_table is None:
            raise InvalidArgumentError("No grasps are attached to this space")
        if not (0 <= object_id < self.n_objects and 0 <= pose_id < self.n_poses):
            raise InvalidArgumentError(f"(object {object_id}, pose {pose_id}) out of bounds")
        return self.pose_table[object_id][pose_id]

    def object_model(self, object_id: int) -> "ObjectModel":
        if self.objects is None:
            raise InvalidArgumentError("No object models are attached to this space")
        return self.objects[object_id]

    def viewpoint(self, viewpoint_id: int) -> ViewpointSample:
        if not 0 <= viewpoint_id < self.n_viewpoints:
            raise InvalidArgumentError(f"Viewpoint {viewpoint_id} out of bounds")
        return self.viewpoint_table[viewpoint_id]


def build_space(n_objects: int, poses_per_object: int, viewpoint_grid: Tuple[int, int]) -> CCVSpace:
    """
    Build an index-only space with N_v = n_u * n_phi grid viewpoints and
    uniform (all-ones) weights.

    Args:
        n_objects (int): N_o.
        poses_per_object (int): N_p.
        viewpoint_grid (tuple): (n_u, n_phi).

    Returns:
        CCVSpace: The space.
    """
    n_u, n_phi = viewpoint_grid
    if min(n_objects, poses_per_object, n_u, n_phi) < 1:
        raise InvalidArgumentError(
            f"All space dimensions must be >= 1, got ({n_objects}, {poses_per_object}, ({n_u}, {n_phi}))")
    table = sphere_grid(n_u, n_phi)
    dims = (n_objects, poses_per_object, len(table))
    logger.debug("Built CCV space %s with %d triplets", dims, int(np.prod(dims)))
    return CCVSpace(n_objects, poses_per_object, len(table), table, WeightMap.uniform(dims), (n_u, n_phi),
                    object_ids=[str(i) for i in range(n_objects)])


def attach_grasps(space: CCVSpace, grasps: Sequence[Sequence["GraspCandidate"]],
                  objects: Optional[Sequence["ObjectModel"]] = None) -> CCVSpace:
    """
    Bind per-object grasp lists (and optionally object meshes) to a space.
    Every object must supply exactly N_p grasps.
    """
    if len(grasps) != space.n_objects:
        raise InvalidArgumentError(f"Expected grasps for {space.n_objects} objects, got {len(grasps)}")
    for o, table in enumerate(grasps):
        if len(table) != space.n_poses:
            raise InvalidArgumentError(f"Object {o} has {len(table)} grasps, space needs {space.n_poses}")
    if objects is not None and len(objects) != space.n_objects:
        raise InvalidArgumentError(f"Expected {space.n_objects} object models, got {len(objects)}")
    space.pose_table = [list(table) for table in grasps]
    space.objects = list(objects) if objects is not None else None
    space.object_ids = [table[0].object_id for table in grasps]
    return space


def probability_of(weight_map: WeightMap, idx: TripletIndex) -> float:
    """p_i = w_i / sum_j w_j."""
    return float(weight_map.weights[weight_map.flat_index(idx)] / weight_map.weights.sum())


class SumTree:
    """
    Binary tree of partial weight sums over a power-of-two leaf array.
    Drawing and removing a leaf are O(log N).
    """

    def __init__(self, weights: np.ndarray):
        n = len(weights)
        self.capacity = 1 << max(0, (n - 1).bit_length())
        self.tree = np.zeros(2 * self.capacity)
        self.tree[self.capacity:self.capacity + n] = weights
        size = self.capacity
        while size > 1:
            half = size // 2
            self.tree[half:size] = self.tree[size:2 * size:2] + self.tree[size + 1:2 * size:2]
            size = half

    @property
    def total(self) -> float:
        return float(self.tree[1]) if self.capacity > 1 else float(self.tree[self.capacity])

    def find(self, value: float) -> int:
        node = 1
        if self.capacity == 1:
            return 0
        while node < self.capacity:
            left = self.tree[2 * node]
            if value < left or self.tree[2 * node + 1] <= 0.0:
                node = 2 * node
            else:
                value -= left
                node = 2 * node + 1
        return node - self.capacity

    def remove(self, leaf: int) -> None:
        node = self.capacity + leaf
        self.tree[node] = 0.0
        node //= 2
        while node >= 1:
            self.tree[node] = self.tree[2 * node] + self.tree[2 * node + 1]
            node //= 2


def sample_triplets(weight_map: WeightMap, n: int, rng: np.random.Generator) -> List[TripletIndex]:
    """
    Draw n distinct triplets, each from the multinomial of the remaining weights.

    Args:
        weight_map (WeightMap): Current weights.
        n (int): Number of draws.
        rng (np.random.Generator): Seeded random source.

    Returns:
        list: Triplets in draw order.
    """
    if n < 0 or n > weight_map.size:
        raise InvalidArgumentError(f"Cannot draw {n} triplets from a pool of {weight_map.size}")
    if n > np.count_nonzero(weight_map.weights):
        raise InvalidArgumentError(
            f"Cannot draw {n} triplets: only {np.count_nonzero(weight_map.weights)} have positive weight")
    tree = SumTree(weight_map.weights)
    drawn = []
    for _ in range(n):
        leaf = tree.find(rng.random() * tree.total)
        tree.remove(leaf)
        drawn.append(weight_map.triplet_of(leaf))
    return drawn


def weight_update(error: float, e_min: float, e_max: float) -> float:
    """
    Reciprocal percentile update: q = (e_max - e) / (e_max - e_min),
    dw = 1 / (q + 0.5). A degenerate epoch (e_max == e_min) is neutral.
    """
    if e_max < e_min:
        raise InvalidArgumentError(f"e_max ({e_max}) is below e_min ({e_min})")
    if e_max == e_min:
        return 1.0
    if not e_min <= error <= e_max:
        raise InvalidArgumentError(f"Error {error} outside [{e_min}, {e_max}]")
    q = (e_max - error) / (e_max - e_min)
    return 1.0 / (q + 0.5)


def apply_epoch_feedback(weight_map: WeightMap, records: Sequence[FeedbackRecord]) -> WeightMap:
    """
    Re-weight the triplets seen in one epoch, in place:
    w_i <- clamp(w_i * dw_i, lower_bound, upper_bound). Unreferenced entries keep
    their weights.

    Args:
        weight_map (WeightMap): Map to update.
        records (Sequence[FeedbackRecord]): One record per sampled triplet.

    Returns:
        WeightMap: The same map, updated.
    """
    if not records:
        raise InvalidArgumentError("Epoch feedback needs at least one record")
    flat = np.array([weight_map.flat_index(r.triplet) for r in records], dtype=np.int64)
    if len(np.unique(flat)) != len(flat):
        raise InvalidArgumentError("Duplicate triplet in epoch feedback")
    errors = np.array([r.error for r in records], dtype=float)
    e_min, e_max = float(errors.min()), float(errors.max())
    factors = np.array([weight_update(e, e_min, e_max) for e in errors])
    weight_map.weights[flat] = np.clip(weight_map.weights[flat] * factors,
                                       weight_map.lower_bound, weight_map.upper_bound)
    logger.debug("Re-weighted %d triplets (e_min=%.5f, e_max=%.5f)", len(flat), e_min, e_max)
    return weight_map


def snapshot_bytes(weight_map: WeightMap) -> bytes:
    header = SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, *weight_map.dims)
    return header + weight_map.weights.astype("<f8").tobytes()


def weight_map_from_bytes(data: bytes) -> WeightMap:
    if len(data) < SNAPSHOT_HEADER.size:
        raise SnapshotError("Snapshot shorter than its header")
    magic, version, n_o, n_p, n_v = SNAPSHOT_HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotError(f"Bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"Unsupported snapshot version {version}")
    count = n_o * n_p * n_v
    expected = SNAPSHOT_HEADER.size + 8 * count
    if len(data) != expected:
        raise SnapshotError(f"Snapshot length {len(data)} does not match dims ({n_o}, {n_p}, {n_v})")
    weights = np.frombuffer(data, dtype="<f8", offset=SNAPSHOT_HEADER.size, count=count).astype(np.float64)
    return WeightMap((n_o, n_p, n_v), weights)


def save_snapshot(weight_map: WeightMap, path: str) -> None:
    FileHandler().write_bytes(path, snapshot_bytes(weight_map))


def load_snapshot(path: str) -> WeightMap:
    return weight_map_from_bytes(FileHandler().read_bytes(path))
