"""
Grasp synthesis: wrist sites on an offset surface, a pre-grasp template,
fingertip/contact pairing, contact-cost fitting over the 21 compact DoFs and
validity filtering.
"""
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import GenerationError, InvalidArgumentError, MeshError, PairingError, RegionError
from geometry_util import RigidTransform, axis_angle_matrix, normalize, rotvec_matrix
from hand_model import (DEFAULT_COUPLING, DEFAULT_LIMITS, PAD_ANCHOR, HandPoseCompact, HandSkeleton,
                        JointLimits, anchor_positions, canonical_skeleton, clamp_compact, expand_pose,
                        point_jacobians, validate_pose)
from mesh_util import ObjectModel, closest_points, contains, penetration_depth, surface_samples

logger = logging.getLogger(__name__)

# pre-grasp template, radians
TEMPLATE_BEND_MCP = math.radians(20.0)
TEMPLATE_BEND_PD = math.radians(25.0)
TEMPLATE_THUMB_SPLAY = math.radians(30.0)

SITE_TOLERANCE = 1e-6
SITE_ROUNDS = 50
MAX_BACKTRACKS = 12
DOF_COUNT = 21


@dataclass(frozen=True)
class GraspConfig:
    offset: float = 0.08
    n_sites: int = 64
    budget_factor: int = 3
    max_iters: int = 200
    grad_tol: float = 1e-6
    w_rep: float = 10.0
    eps_contact: float = 0.002
    tau_pen: float = 0.002
    # cap on the final fit cost (m^2); stands in for discarding implausible fits by hand
    residual_cap: float = 2.5e-3
    pairing_retries: int = 8
    reject_unconverged: bool = False
    damping: float = 1e-3
    fd_step: float = 1e-5
    coupling: float = DEFAULT_COUPLING
    limits: JointLimits = DEFAULT_LIMITS
    threads: int = 1


@dataclass(frozen=True)
class WristSite:
    position: Tuple[float, float, float]
    approach: Tuple[float, float, float]
    nearest_vertex: Tuple[float, float, float]
    nearest_vertex_id: int = -1


@dataclass(frozen=True)
class ContactAssignment:
    finger_id: int
    fingertip_point: Tuple[float, float, float]
    contact_vertex: Tuple[float, float, float]
    min_radius: float
    contact_vertex_id: int = -1


@dataclass(frozen=True)
class GraspCandidate:
    """
    A fitted (object, hand pose) pair with its contact assignments and the
    geometry measured on the final pose.
    """

    object_id: str
    pose: HandPoseCompact
    assignments: Tuple[ContactAssignment, ...]
    max_penetration: float
    contact_distance: Tuple[float, ...]
    residual: float
    iterations: int = 0
    converged: bool = True
    attempt: int = -1
    site_index: int = -1


@dataclass(frozen=True)
class GraspReport:
    accepted: bool
    reasons: Tuple[str, ...]
    max_penetration: float
    contact_distance: Tuple[float, ...]


@dataclass
class GenerationStats:
    attempts: int = 0
    accepted: int = 0
    rejections: Counter = field(default_factory=Counter)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else 0.0


def _vec(values: Any) -> Tuple[float, float, float]:
    return tuple(float(v) for v in values)


def offset_surface_sites(obj: ObjectModel, offset: float, n_sites: int,
                         rng: np.random.Generator) -> List[WristSite]:
    """
    Sample wrist sites on the surface dilated by `offset`.

    Surface points are drawn uniformly by area and pushed out along their face
    normal. A candidate is kept only if its nearest-surface distance equals
    the offset (within 1e-6) and it lies outside the object, so concave
    regions never yield sites closer than the offset.

    Args:
        obj (ObjectModel): Object mesh.
        offset (float): Dilation distance in meters.
        n_sites (int): Number of sites.
        rng (np.random.Generator): Random source.

    Returns:
        list: WristSite per sample, with nearest vertex and approach direction.
    """
    if offset <= 0:
        raise InvalidArgumentError(f"Offset must be positive, got {offset}")
    if n_sites < 1:
        raise InvalidArgumentError(f"Need at least one site, got {n_sites}")
    if obj.face_areas.sum() <= 0:
        raise MeshError(f"Object {obj.id} has no surface area")

    kept: List[np.ndarray] = []
    for _ in range(SITE_ROUNDS):
        need = n_sites - sum(len(k) for k in kept)
        if need <= 0:
            break
        points, faces = surface_samples(obj, need, rng)
        candidates = points + offset * obj.face_normals[faces]
        _, distance, _ = closest_points(obj, candidates)
        ok = (np.abs(distance - offset) <= SITE_TOLERANCE) & ~contains(obj, candidates)
        kept.append(candidates[ok])
    positions = np.concatenate(kept) if kept else np.zeros((0, 3))
    if len(positions) < n_sites:
        raise MeshError(f"Object {obj.id}: placed only {len(positions)} of {n_sites} sites at offset {offset}")
    positions = positions[:n_sites]

    _, nearest = obj.kdtree.query(positions)
    sites = []
    for position, vertex_id in zip(positions, nearest):
        vertex = obj.vertices[vertex_id]
        sites.append(WristSite(_vec(position), _vec(normalize(vertex - position)), _vec(vertex), int(vertex_id)))
    return sites


def pregrasp_pose(site: WristSite, roll: float = 0.0) -> HandPoseCompact:
    """
    Open-hand template at a wrist site with the palm normal along the approach
    direction. `roll` turns the hand about the approach axis.
    """
    z = normalize(site.approach)
    reference = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = reference - (reference @ z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    frame = np.column_stack([x, y, z])
    if roll:
        frame = frame @ axis_angle_matrix((0.0, 0.0, 1.0), roll)
    wrist = RigidTransform.from_matrix(frame, site.position)
    return HandPoseCompact(
        wrist=wrist,
        splay=(TEMPLATE_THUMB_SPLAY, 0.0, 0.0, 0.0, 0.0),
        bend_mcp=(TEMPLATE_BEND_MCP,) * 5,
        bend_pd=(TEMPLATE_BEND_PD,) * 5,
    )


def contact_feasible_region(site: WristSite, obj: ObjectModel, skeleton: HandSkeleton) -> np.ndarray:
    """
    Indices of the object vertices within reach_max of the wrist, sorted.

    Raises:
        RegionError: No vertex is reachable from the site.
    """
    distance = np.linalg.norm(obj.vertices - np.asarray(site.position), axis=1)
    region = np.flatnonzero(distance <= skeleton.reach_max)
    if len(region) == 0:
        raise RegionError(f"No vertex of {obj.id} within {skeleton.reach_max:.4f} m of the wrist site")
    return region


def pair_fingertips(site: WristSite, region: np.ndarray, obj: ObjectModel, skeleton: HandSkeleton,
                    rng: np.random.Generator, pregrasp: Optional[HandPoseCompact] = None,
                    coupling: float = DEFAULT_COUPLING, retries: int = 8) -> List[ContactAssignment]:
    """
    Pick the thumb plus 1 to 4 other fingers and pair each with a contact vertex.

    For each finger a minimal reaching radius r_c ~ U[0, max region distance]
    is drawn; the contact is the region vertex nearest the finger's pre-grasp
    pad among vertices at least r_c from the wrist.

    Args:
        site (WristSite): Wrist site.
        region (np.ndarray): Vertex indices from contact_feasible_region.
        obj (ObjectModel): Object mesh.
        skeleton (HandSkeleton): Hand skeleton.
        rng (np.random.Generator): Random source.
        pregrasp (HandPoseCompact, optional): Pose the pads are measured on;
            defaults to the zero-roll template at the site.
        coupling (float): Proximal/distal coupling ratio.
        retries (int): Extra r_c draws before giving up on a finger.

    Returns:
        list: One ContactAssignment per selected finger, thumb first.
    """
    region = np.asarray(region, dtype=np.int64)
    if len(region) == 0:
        raise PairingError("Empty contact-feasible region")
    pregrasp = pregrasp or pregrasp_pose(site)
    pads = anchor_positions(skeleton, expand_pose(pregrasp, coupling))[:, PAD_ANCHOR]

    n_others = int(rng.integers(1, 5))
    fingers = [0] + sorted(int(f) for f in rng.choice([1, 2, 3, 4], size=n_others, replace=False))

    vertices = obj.vertices[region]
    wrist_distance = np.linalg.norm(vertices - np.asarray(site.position), axis=1)
    max_feasible = float(wrist_distance.max())

    assignments = []
    for finger in fingers:
        for _ in range(retries + 1):
            min_radius = float(rng.uniform(0.0, max_feasible))
            allowed = np.flatnonzero(wrist_distance >= min_radius)
            if len(allowed):
                break
        else:
            raise PairingError(f"No region vertex satisfies the reaching radius for finger {finger}")
        pad_distance = np.linalg.norm(vertices[allowed] - pads[finger], axis=1)
        best = allowed[int(np.argmin(pad_distance))]
        assignments.append(ContactAssignment(
            finger_id=finger,
            fingertip_point=_vec(pads[finger]),
            contact_vertex=_vec(vertices[best]),
            min_radius=min_radius,
            contact_vertex_id=int(region[best]),
        ))
    return assignments


def _compact_bounds(limits: JointLimits) -> Tuple[np.ndarray, np.ndarray]:
    splay_lower, splay_upper = limits.splay_bounds()
    lower = np.column_stack([splay_lower, np.full(5, limits.bend_mcp[0]), np.full(5, limits.bend_other[0])])
    upper = np.column_stack([splay_upper, np.full(5, limits.bend_mcp[1]), np.full(5, limits.bend_other[1])])
    return lower.ravel(), upper.ravel()


def _apply_step(pose: HandPoseCompact, step: np.ndarray, limits: JointLimits) -> HandPoseCompact:
    rotation = rotvec_matrix(step[:3]) @ pose.wrist.rotation
    wrist = RigidTransform.from_matrix(rotation, pose.wrist.t + step[3:6])
    angles = pose.finger_angles() + step[6:].reshape(5, 3)
    return clamp_compact(HandPoseCompact.from_finger_angles(wrist, angles), limits)


def _depth_gradient(obj: ObjectModel, points: np.ndarray, step: float) -> np.ndarray:
    """Central finite-difference gradient of penetration depth at each point."""
    offsets = np.vstack([np.eye(3) * step, -np.eye(3) * step])
    probes = (points[:, None, :] + offsets[None]).reshape(-1, 3)
    depth = penetration_depth(obj, probes).reshape(-1, 6)
    return (depth[:, :3] - depth[:, 3:]) / (2.0 * step)


def _measure(pose: HandPoseCompact, obj: ObjectModel, skeleton: HandSkeleton,
             coupling: float) -> Tuple[float, Tuple[float, ...]]:
    """Max anchor penetration and per-finger anchor-to-surface distance."""
    anchors = anchor_positions(skeleton, expand_pose(pose, coupling))
    flat = anchors.reshape(-1, 3)
    depth = penetration_depth(obj, flat)
    _, distance, _ = closest_points(obj, flat)
    per_finger = distance.reshape(5, -1).min(axis=1)
    return float(depth.max()), tuple(float(d) for d in per_finger)


def fit_grasp(init: HandPoseCompact, assignments: Sequence[ContactAssignment], obj: ObjectModel,
              skeleton: HandSkeleton, config: Optional[GraspConfig] = None) -> GraspCandidate:
    """
    Pull assigned pads onto their contact vertices while pushing penetrating
    anchors out of the object.

    Minimizes E = sum ||p_f - v_c||^2 + w_rep * sum max(0, -sdf(anchor))^2 with a
    damped Gauss-Newton (Levenberg-Marquardt) iteration over the 21 compact
    DoFs. Attraction rows use the analytic kinematic Jacobian, repulsion rows a
    finite-difference depth gradient chained through it. A step is accepted only
    if it lowers E, and finger angles are clamped to their limits after every step.

    Args:
        init (HandPoseCompact): Starting pose.
        assignments (Sequence[ContactAssignment]): Pad/contact pairs.
        obj (ObjectModel): Object mesh.
        skeleton (HandSkeleton): Hand skeleton.
        config (GraspConfig, optional): Fit parameters.

    Returns:
        GraspCandidate: Final pose with diagnostics; converged is False when
        max_iters ran out.
    """
    config = config or GraspConfig()
    if not assignments:
        raise InvalidArgumentError("fit_grasp needs at least one contact assignment")
    fingers = np.array([a.finger_id for a in assignments])
    targets = np.array([a.contact_vertex for a in assignments], dtype=float)
    sqrt_rep = math.sqrt(config.w_rep)
    lower, upper = _compact_bounds(config.limits)

    def evaluate(pose):
        anchors, jac = point_jacobians(skeleton, pose, config.coupling)
        flat = anchors.reshape(-1, 3)
        depth = penetration_depth(obj, flat)
        residual = np.concatenate([(anchors[fingers, PAD_ANCHOR] - targets).ravel(), sqrt_rep * depth])
        return residual, flat, jac, depth

    def jacobian(flat, jac, depth):
        rows = np.zeros((len(fingers) * 3 + len(flat), DOF_COUNT))
        rows[:len(fingers) * 3] = jac[fingers, PAD_ANCHOR].reshape(-1, DOF_COUNT)
        penetrating = np.flatnonzero(depth > 0)
        if len(penetrating):
            gradient = _depth_gradient(obj, flat[penetrating], config.fd_step)
            point_jac = jac.reshape(-1, 3, DOF_COUNT)[penetrating]
            rows[len(fingers) * 3 + penetrating] = sqrt_rep * np.einsum("kc,kcd->kd", gradient, point_jac)
        return rows

    pose = clamp_compact(init, config.limits)
    residual, flat, jac, depth = evaluate(pose)
    cost = float(residual @ residual)
    damping = config.damping
    iterations = 0
    converged = False

    while iterations < config.max_iters:
        J = jacobian(flat, jac, depth)
        gradient = J.T @ residual
        angles = pose.finger_angles().ravel()
        blocked = ((angles <= lower + 1e-12) & (gradient[6:] > 0)) | ((angles >= upper - 1e-12) & (gradient[6:] < 0))
        free = np.linalg.norm(J, axis=0) > 0
        free[6:] &= ~blocked
        if np.linalg.norm(gradient[free]) < config.grad_tol:
            converged = True
            break
        Jf = J[:, free]
        hessian = Jf.T @ Jf
        scale = np.diag(np.diag(hessian))
        improved = False
        for _ in range(MAX_BACKTRACKS):
            step = np.zeros(DOF_COUNT)
            step[free] = np.linalg.solve(hessian + damping * scale, -gradient[free])
            trial = _apply_step(pose, step, config.limits)
            t_residual, t_flat, t_jac, t_depth = evaluate(trial)
            t_cost = float(t_residual @ t_residual)
            if t_cost < cost:
                pose, residual, flat, jac, depth, cost = trial, t_residual, t_flat, t_jac, t_depth, t_cost
                damping = max(damping / 3.0, 1e-9)
                improved = True
                break
            damping *= 4.0
        if not improved:
            # no descent step left at any damping: numerically stationary
            converged = True
            break
        iterations += 1

    max_penetration, contact_distance = _measure(pose, obj, skeleton, config.coupling)
    logger.debug("Fit %s: %d iterations, cost %.3e, penetration %.4f m", obj.id, iterations, cost, max_penetration)
    return GraspCandidate(
        object_id=obj.id,
        pose=pose,
        assignments=tuple(assignments),
        max_penetration=max_penetration,
        contact_distance=contact_distance,
        residual=cost,
        iterations=iterations,
        converged=converged,
    )


def validate_grasp(candidate: GraspCandidate, obj: ObjectModel, skeleton: HandSkeleton,
                   eps_contact: float = 0.002, tau_pen: float = 0.002, limits: JointLimits = DEFAULT_LIMITS,
                   coupling: float = DEFAULT_COUPLING) -> GraspReport:
    """
    Re-measure a candidate and decide acceptance. Never raises.

    Accepts iff the thumb and at least one other assigned finger are within
    eps_contact of the surface, no anchor is deeper than tau_pen, and the pose
    is protocol-valid.
    """
    reasons = []
    try:
        max_penetration, contact_distance = _measure(candidate.pose, obj, skeleton, coupling)
    except Exception as e:
        return GraspReport(False, (f"measure-failed: {e}",), float("inf"), (float("inf"),) * 5)

    others = sorted({a.finger_id for a in candidate.assignments if a.finger_id != 0}) or [1, 2, 3, 4]
    if contact_distance[0] > eps_contact:
        reasons.append("no-thumb-contact")
    if not any(contact_distance[f] <= eps_contact for f in others):
        reasons.append("no-finger-contact")
    if max_penetration > tau_pen:
        reasons.append("penetration")
    if not validate_pose(expand_pose(candidate.pose, coupling), limits, coupling=coupling).valid:
        reasons.append("invalid-pose")
    return GraspReport(not reasons, tuple(reasons), max_penetration, contact_distance)


def _attempt(k: int, seed: int, sites: List[WristSite], obj: ObjectModel, skeleton: HandSkeleton,
             config: GraspConfig) -> Tuple[Optional[GraspCandidate], Optional[str]]:
    """One site -> pre-grasp -> pair -> fit -> validate pass. Returns (candidate, rejection reason)."""
    rng = np.random.default_rng(seed)
    site_index = k % len(sites)
    site = sites[site_index]
    init = pregrasp_pose(site, float(rng.uniform(0.0, 2.0 * math.pi)))
    try:
        region = contact_feasible_region(site, obj, skeleton)
        assignments = pair_fingertips(site, region, obj, skeleton, rng, pregrasp=init,
                                      coupling=config.coupling, retries=config.pairing_retries)
    except RegionError:
        return None, "region"
    except PairingError:
        return None, "pairing"
    candidate = fit_grasp(init, assignments, obj, skeleton, config)
    candidate = replace(candidate, attempt=k, site_index=site_index)
    if config.reject_unconverged and not candidate.converged:
        return None, "unconverged"
    if candidate.residual > config.residual_cap:
        return None, "residual"
    report = validate_grasp(candidate, obj, skeleton, config.eps_contact, config.tau_pen,
                            config.limits, config.coupling)
    if not report.accepted:
        return None, report.reasons[0]
    return candidate, None


def run_generation(obj: ObjectModel, target_count: int, config: Optional[GraspConfig] = None,
                   rng: Optional[np.random.Generator] = None,
                   skeleton: Optional[HandSkeleton] = None) -> Tuple[List[GraspCandidate], GenerationStats]:
    """
    Run the grasp pipeline until target_count candidates are accepted or the
    attempt budget (budget_factor x target_count) is used up.

    Attempt seeds are drawn upfront and attempt k uses site k mod n_sites, so
    the selection (the first target_count accepted attempts) does not depend on
    the worker count.

    Returns:
        tuple: Accepted candidates sorted by (residual, attempt) and the
        generation statistics.
    """
    config = config or GraspConfig()
    if target_count < 1:
        raise InvalidArgumentError(f"target_count must be >= 1, got {target_count}")
    rng = rng if rng is not None else np.random.default_rng()
    skeleton = skeleton or canonical_skeleton()
    # warm cached geometry before worker threads share the object
    _ = (obj.triangle_vertices, obj.face_areas, obj.face_normals, obj.kdtree, obj.bounds)

    sites = offset_surface_sites(obj, config.offset, config.n_sites, rng)
    budget = config.budget_factor * target_count
    seeds = rng.integers(0, 2 ** 63 - 1, size=budget)
    threads = max(1, int(config.threads))
    wave = max(threads, 4)

    outcomes: List[Tuple[Optional[GraspCandidate], Optional[str]]] = []
    accepted = 0
    with ThreadPoolExecutor(max_workers=threads) as pool:
        while len(outcomes) < budget and accepted < target_count:
            ks = range(len(outcomes), min(budget, len(outcomes) + wave))
            results = list(pool.map(lambda k: _attempt(k, int(seeds[k]), sites, obj, skeleton, config), ks))
            outcomes.extend(results)
            accepted += sum(1 for c, _ in results if c is not None)

    stats = GenerationStats()
    chosen: List[GraspCandidate] = []
    for candidate, reason in outcomes:
        if len(chosen) >= target_count:
            break
        stats.attempts += 1
        if candidate is None:
            stats.rejections[reason] += 1
        else:
            chosen.append(candidate)
    stats.accepted = len(chosen)
    logger.info("%s: accepted %d of %d attempts", obj.id, stats.accepted, stats.attempts)
    if not chosen:
        raise GenerationError(f"No grasp accepted for {obj.id} after {stats.attempts} attempts",
                              dict(stats.rejections))
    chosen.sort(key=lambda c: (c.residual, c.attempt))
    return chosen, stats


def generate_poses(obj: ObjectModel, target_count: int, config: Optional[GraspConfig] = None,
                   rng: Optional[np.random.Generator] = None,
                   skeleton: Optional[HandSkeleton] = None) -> List[GraspCandidate]:
    """Accepted grasp candidates for one object, sorted by fit residual."""
    candidates, _ = run_generation(obj, target_count, config, rng, skeleton)
    return candidates


def grasp_to_record(candidate: GraspCandidate) -> Dict[str, Any]:
    pose = candidate.pose
    return {
        "object_id": candidate.object_id,
        "wrist": pose.wrist.to_list(),
        "splay": list(pose.splay),
        "bend_mcp": list(pose.bend_mcp),
        "bend_pd": list(pose.bend_pd),
        "assignments": [
            {
                "finger_id": a.finger_id,
                "fingertip_point": list(a.fingertip_point),
                "contact_vertex": list(a.contact_vertex),
                "contact_vertex_id": a.contact_vertex_id,
                "min_radius": a.min_radius,
            }
            for a in candidate.assignments
        ],
        "diagnostics": {
            "max_penetration": candidate.max_penetration,
            "contact_distance": list(candidate.contact_distance),
            "residual": candidate.residual,
            "iterations": candidate.iterations,
            "converged": candidate.converged,
        },
        "attempt": candidate.attempt,
        "site_index": candidate.site_index,
    }


def grasp_from_record(record: Dict[str, Any]) -> GraspCandidate:
    try:
        pose = HandPoseCompact(
            wrist=RigidTransform.from_list(record["wrist"]),
            splay=tuple(float(v) for v in record["splay"]),
            bend_mcp=tuple(float(v) for v in record["bend_mcp"]),
            bend_pd=tuple(float(v) for v in record["bend_pd"]),
        )
        assignments = tuple(
            ContactAssignment(
                finger_id=int(a["finger_id"]),
                fingertip_point=_vec(a["fingertip_point"]),
                contact_vertex=_vec(a["contact_vertex"]),
                min_radius=float(a["min_radius"]),
                contact_vertex_id=int(a.get("contact_vertex_id", -1)),
            )
            for a in record["assignments"]
        )
        diagnostics = record["diagnostics"]
        return GraspCandidate(
            object_id=str(record["object_id"]),
            pose=pose,
            assignments=assignments,
            max_penetration=float(diagnostics["max_penetration"]),
            contact_distance=tuple(float(v) for v in diagnostics["contact_distance"]),
            residual=float(diagnostics["residual"]),
            iterations=int(diagnostics["iterations"]),
            converged=bool(diagnostics["converged"]),
            attempt=int(record.get("attempt", -1)),
            site_index=int(record.get("site_index", -1)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidArgumentError(f"Malformed grasp record: {e}") from e
