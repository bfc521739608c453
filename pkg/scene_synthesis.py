"""
Scene descriptors: one sampled triplet turned into a disturbed hand pose, a
hand shape, a disturbed camera and asset ids, without forming an image.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ccv_space import CCVSpace, TripletIndex
from errors import InvalidArgumentError, SynthError
from geometry_util import RigidTransform
from hand_model import (DEFAULT_COUPLING, DEFAULT_LIMITS, HandPoseExpanded, HandSkeleton, JointLimits, ShapeParams,
                        anchor_positions, build_skeleton, disturb_pose, sample_shape)
from mesh_util import ObjectModel, penetration_depth
from seed_util import derive_seed
from viewpoints import DEFAULT_CAMERA_RADIUS, ViewpointSample, camera_extrinsics, disturb_viewpoint

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 245.0
    fy: float = 245.0
    cx: float = 112.0
    cy: float = 112.0
    width: int = 224
    height: int = 224


@dataclass(frozen=True)
class SynthConfig:
    sigma_bend: float = math.radians(3.0)
    sigma_splay: float = math.radians(1.5)
    delta_u: float = 0.05
    delta_phi: float = math.radians(7.5)
    shape_sigma: float = 0.5
    mitigate: bool = True
    mitigation_step: float = math.radians(0.5)
    max_steps: int = 60
    tau_pen: float = 0.002
    max_resamples: int = 4
    camera_radius: float = DEFAULT_CAMERA_RADIUS
    intrinsics: Intrinsics = field(default_factory=Intrinsics)
    background_pool: int = 1000
    texture_pool: int = 100
    coupling: float = DEFAULT_COUPLING
    limits: JointLimits = DEFAULT_LIMITS

    @classmethod
    def zero_disturbance(cls, **overrides: Any) -> "SynthConfig":
        """No pose, shape or viewpoint noise (in-plane roll is still drawn) and no mitigation."""
        values = dict(sigma_bend=0.0, sigma_splay=0.0, delta_u=0.0, delta_phi=0.0, shape_sigma=0.0, mitigate=False)
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class MitigationReport:
    steps: int
    initial_depth: Tuple[float, ...]
    final_depth: Tuple[float, ...]

    @property
    def max_penetration(self) -> float:
        return max(self.final_depth)


@dataclass(frozen=True)
class SceneDescriptor:
    """Everything needed to reproduce one synthetic sample. hand_pose.wrist is in the world frame."""

    triplet: TripletIndex
    hand_pose: HandPoseExpanded
    shape: ShapeParams
    object_transform: RigidTransform
    camera: RigidTransform
    intrinsics: Intrinsics
    viewpoint: ViewpointSample
    background_id: int
    texture_id: int
    seed: int
    mitigation_steps: int = 0
    max_penetration: float = 0.0


def derive_item_seed(master_seed: int, triplet: TripletIndex, attempt: int = 0) -> int:
    """Per-triplet seed, so each descriptor can be regenerated on its own."""
    return derive_seed(master_seed, "synth", *triplet.as_tuple(), attempt)


def _finger_depths(pose: HandPoseExpanded, obj: ObjectModel, skeleton: HandSkeleton) -> np.ndarray:
    anchors = anchor_positions(skeleton, pose)
    return penetration_depth(obj, anchors.reshape(-1, 3)).reshape(5, -1).max(axis=1)


def mitigate_penetration(pose: HandPoseExpanded, obj: ObjectModel, skeleton: HandSkeleton, max_steps: int = 60,
                         step: float = math.radians(0.5),
                         limits: JointLimits = DEFAULT_LIMITS) -> Tuple[HandPoseExpanded, MitigationReport]:
    """
    Uncurl penetrating fingers until their anchors leave the object.

    Each step lowers the three bends of every penetrating finger by `step`
    (clamped at the lower limit). A finger's step is kept only if its own
    penetration does not grow; a finger that cannot move further stops.
    Non-penetrating fingers are never touched.

    Args:
        pose (HandPoseExpanded): Pose in the object frame.
        obj (ObjectModel): Object mesh.
        skeleton (HandSkeleton): Skeleton the pose is posed on.
        max_steps (int): Step budget.
        step (float): Bend decrement per step in radians.
        limits (JointLimits): Joint limits.

    Returns:
        tuple: Mitigated pose and a MitigationReport with per-finger depths.
    """
    depths = _finger_depths(pose, obj, skeleton)
    initial = tuple(float(d) for d in depths)
    bend = np.asarray(pose.bend, dtype=float).copy()
    lower, _ = limits.bend_bounds()
    active = depths > 0
    steps = 0
    while steps < max_steps and active.any():
        steps += 1
        for f in np.flatnonzero(active):
            joints = slice(3 * f, 3 * f + 3)
            trial_bend = bend.copy()
            trial_bend[joints] = np.maximum(trial_bend[joints] - step, lower[joints])
            if np.array_equal(trial_bend[joints], bend[joints]):
                active[f] = False
                continue
            trial = pose.replace_bend(trial_bend)
            depth = _finger_depths(trial, obj, skeleton)[f]
            if depth > depths[f]:
                active[f] = False
                continue
            bend = trial_bend
            pose = trial
            depths[f] = depth
            if depth <= 0:
                active[f] = False
    report = MitigationReport(steps, initial, tuple(float(d) for d in depths))
    if steps:
        logger.debug("Mitigation: %d steps, penetration %.4f -> %.4f m", steps, max(initial), report.max_penetration)
    return pose, report


def synthesize(triplet: TripletIndex, space: CCVSpace, config: Optional[SynthConfig] = None,
               seed: int = 0) -> SceneDescriptor:
    """
    Build the scene descriptor for one triplet.

    The world frame is the object frame shifted so the object centroid is at
    the origin; the camera looks at the origin from the disturbed viewpoint.
    Random draws come from numpy.random.default_rng(seed) in a fixed order
    (shape, pose noise, viewpoint noise, asset ids), so the stored seed
    reproduces the descriptor exactly.

    Args:
        triplet (TripletIndex): Sampled triplet.
        space (CCVSpace): Space with grasps (and object models when mitigating).
        config (SynthConfig, optional): Disturbance and camera settings.
        seed (int): Item seed.

    Returns:
        SceneDescriptor: The descriptor.

    Raises:
        SynthError: Penetration above tau_pen remains after mitigation.
    """
    config = config or SynthConfig()
    grasp = space.grasp(triplet.object_id, triplet.pose_id)
    viewpoint = space.viewpoint(triplet.viewpoint_id)
    rng = np.random.default_rng(seed)

    shape = sample_shape(rng, config.shape_sigma) if config.shape_sigma > 0 else ShapeParams.zeros()
    skeleton = build_skeleton(shape)
    pose = disturb_pose(grasp.pose, config.sigma_bend, config.sigma_splay, rng, config.coupling, config.limits)

    steps = 0
    max_penetration = 0.0
    obj = space.objects[triplet.object_id] if space.objects is not None else None
    if config.mitigate:
        if obj is None:
            raise InvalidArgumentError("Penetration mitigation needs object models attached to the space")
        pose, report = mitigate_penetration(pose, obj, skeleton, config.max_steps, config.mitigation_step,
                                            config.limits)
        steps = report.steps
        max_penetration = report.max_penetration
        if max_penetration > config.tau_pen:
            raise SynthError(f"Triplet {triplet.as_tuple()}: {max_penetration * 1000:.2f} mm penetration "
                             f"left after {steps} mitigation steps")

    disturbed = disturb_viewpoint(viewpoint, config.delta_u, config.delta_phi, rng)
    background_id = int(rng.integers(config.background_pool))
    texture_id = int(rng.integers(config.texture_pool))

    centroid = obj.centroid if obj is not None else np.zeros(3)
    object_transform = RigidTransform(translation=tuple(float(-c) for c in centroid))
    hand_pose = pose.with_wrist(object_transform.compose(pose.wrist))
    camera = camera_extrinsics(disturbed, config.camera_radius)
    return SceneDescriptor(
        triplet=triplet,
        hand_pose=hand_pose,
        shape=shape,
        object_transform=object_transform,
        camera=camera,
        intrinsics=config.intrinsics,
        viewpoint=disturbed,
        background_id=background_id,
        texture_id=texture_id,
        seed=int(seed),
        mitigation_steps=steps,
        max_penetration=max_penetration,
    )


def synthesize_with_retries(triplet: TripletIndex, space: CCVSpace, config: SynthConfig,
                            master_seed: int) -> SceneDescriptor:
    """Try successive derived seeds until mitigation succeeds or max_resamples is used up."""
    last_error = None
    for attempt in range(config.max_resamples + 1):
        try:
            return synthesize(triplet, space, config, derive_item_seed(master_seed, triplet, attempt))
        except SynthError as e:
            last_error = e
    raise SynthError(f"{last_error} (after {config.max_resamples + 1} attempts)")


def synthesize_batch(triplets: Sequence[TripletIndex], space: CCVSpace, config: Optional[SynthConfig] = None,
                     master_seed: int = 0, threads: int = 1) -> List[SceneDescriptor]:
    """Descriptors for many triplets, one derived seed per item, in input order."""
    config = config or SynthConfig()
    if space.objects is not None:
        for obj in space.objects:
            _ = (obj.triangle_vertices, obj.bounds)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(lambda t: synthesize_with_retries(t, space, config, master_seed), triplets))


def descriptor_to_record(descriptor: SceneDescriptor) -> Dict[str, Any]:
    pose = descriptor.hand_pose
    intrinsics = descriptor.intrinsics
    return {
        "sdv": SCHEMA_VERSION,
        "triplet": list(descriptor.triplet.as_tuple()),
        "seed": descriptor.seed,
        "hand_pose": {
            "wrist": pose.wrist.to_list(),
            "bend": list(pose.bend),
            "splay": list(pose.splay),
            "twist": list(pose.twist),
        },
        "shape": list(descriptor.shape.coefficients),
        "object_transform": descriptor.object_transform.to_list(),
        "camera": {
            "extrinsics": descriptor.camera.to_list(),
            "fx": intrinsics.fx,
            "fy": intrinsics.fy,
            "cx": intrinsics.cx,
            "cy": intrinsics.cy,
            "width": intrinsics.width,
            "height": intrinsics.height,
        },
        "viewpoint": {
            "u": descriptor.viewpoint.u,
            "phi": descriptor.viewpoint.phi,
            "inplane": descriptor.viewpoint.inplane,
        },
        "background_id": descriptor.background_id,
        "texture_id": descriptor.texture_id,
        "mitigation_steps": descriptor.mitigation_steps,
        "max_penetration": descriptor.max_penetration,
    }


def descriptor_from_record(record: Dict[str, Any]) -> SceneDescriptor:
    if record.get("sdv") != SCHEMA_VERSION:
        raise InvalidArgumentError(f"Unsupported scene descriptor version {record.get('sdv')!r}")
    try:
        hand = record["hand_pose"]
        camera = record["camera"]
        viewpoint = record["viewpoint"]
        return SceneDescriptor(
            triplet=TripletIndex(*(int(v) for v in record["triplet"])),
            hand_pose=HandPoseExpanded(
                wrist=RigidTransform.from_list(hand["wrist"]),
                bend=tuple(float(v) for v in hand["bend"]),
                splay=tuple(float(v) for v in hand["splay"]),
                twist=tuple(float(v) for v in hand["twist"]),
            ),
            shape=ShapeParams(tuple(float(v) for v in record["shape"])),
            object_transform=RigidTransform.from_list(record["object_transform"]),
            camera=RigidTransform.from_list(camera["extrinsics"]),
            intrinsics=Intrinsics(float(camera["fx"]), float(camera["fy"]), float(camera["cx"]), float(camera["cy"]),
                                  int(camera["width"]), int(camera["height"])),
            viewpoint=ViewpointSample.at(viewpoint["u"], viewpoint["phi"], viewpoint["inplane"]),
            background_id=int(record["background_id"]),
            texture_id=int(record["texture_id"]),
            seed=int(record["seed"]),
            mitigation_steps=int(record.get("mitigation_steps", 0)),
            max_penetration=float(record.get("max_penetration", 0.0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidArgumentError(f"Malformed scene descriptor: {e}") from e
