import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from ccv_space import TripletIndex, attach_grasps, build_space, load_snapshot, sample_triplets, save_snapshot
from errors import ArtifactError, ConfigError
from file_handler import FileHandler
from geometry_util import RigidTransform, rotvec_matrix
from grasp_forge import grasp_from_record, grasp_to_record, run_generation
from loop_harness import run_experiment
from mesh_util import ObjectModel, load_object
from pose_eval import (LAMBDA_PRESETS, PosePrediction, SymmetrySet, load_symmetry_table, loss_total, mpcpe, mpjpe,
                       mssd, symmetry_set, symmetry_set_from_record, symmetry_set_to_record)
from run_config import RunConfig, add_config_flags, apply_flag_overrides, load_config
from scene_synthesis import descriptor_to_record, synthesize_batch
from seed_util import derive_seed

MANIFEST_NAME = "manifest.json"
SNAPSHOT_NAME = "weights.ccvw"
# camera looks down +z in its own frame
CAMERA_VIEW_DIR = (0.0, 0.0, 1.0)
EVAL_COLUMNS = ["id", "object_id", "mpjpe", "mpcpe", "mssd", "loc", "cor", "ord", "sym", "total"]


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _resolve(base_dir: str, path: Optional[str]) -> Optional[str]:
    if path is None:
        return None
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def cmd_grasp_gen(args: argparse.Namespace, config: RunConfig, files: FileHandler) -> int:
    object_id = args.object_id or _stem(args.mesh)
    obj = load_object(args.mesh, object_id)
    target = args.target if args.target is not None else config.grasp_target
    print(f"\n--- Generating {target} grasp(s) for {object_id} ---")
    rng = np.random.default_rng(derive_seed(config.seed, "grasp", object_id))
    candidates, stats = run_generation(obj, target, config.grasp_config(), rng)
    written = files.write_jsonl(args.out, (grasp_to_record(c) for c in candidates))
    print(f"Accepted {stats.accepted} of {stats.attempts} attempt(s) ({stats.acceptance_rate:.1%}).")
    for reason, count in sorted(stats.rejections.items()):
        print(f"  rejected ({reason}): {count}")
    if stats.accepted < target:
        print(f"WARNING: Attempt budget used up with {stats.accepted} of {target} grasp(s) accepted.")
    if args.stats:
        frame = pd.DataFrame([{"object_id": object_id, "attempts": stats.attempts, "accepted": stats.accepted,
                               **{f"rejected_{k}": v for k, v in sorted(stats.rejections.items())}}])
        files.write_csv(args.stats, frame)
    print(f"Finished grasp generation. Wrote {written} grasp(s) to {args.out}.")
    return 0


def _read_grasps(files: FileHandler, path: str) -> list:
    try:
        return [grasp_from_record(r) for r in files.read_jsonl(path)]
    except (OSError, ValueError) as e:
        raise ConfigError(f"Could not read grasps from {path}: {e}") from e


def cmd_build_space(args: argparse.Namespace, config: RunConfig, files: FileHandler) -> int:
    if args.meshes and len(args.meshes) != len(args.grasps):
        raise ConfigError(f"Got {len(args.grasps)} grasp file(s) but {len(args.meshes)} mesh file(s)")
    print(f"\n--- Building CCV space from {len(args.grasps)} grasp file(s) ---")
    tables = [_read_grasps(files, path) for path in args.grasps]
    counts = {path: len(table) for path, table in zip(args.grasps, tables)}
    if len(set(counts.values())) != 1 or 0 in counts.values():
        detail = ", ".join(f"{_stem(p)}={n}" for p, n in counts.items())
        raise ConfigError(f"Every object needs the same non-zero number of grasps ({detail})")
    for path, table in zip(args.grasps, tables):
        if len({c.object_id for c in table}) != 1:
            raise ConfigError(f"{path} mixes grasps of several objects")

    grid = (config.viewpoint_n_u, config.viewpoint_n_phi)
    space = attach_grasps(build_space(len(tables), len(tables[0]), grid), tables)
    out_dir = args.out_dir
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    files.ensure_parent(manifest_path)

    def rel(path):
        return os.path.relpath(os.path.abspath(path), os.path.abspath(out_dir))

    manifest = {
        "dims": [space.n_objects, space.n_poses, space.n_viewpoints],
        "viewpoint_grid": list(grid),
        "grasp_files": [rel(p) for p in args.grasps],
        "object_ids": list(space.object_ids),
        "meshes": [rel(p) for p in args.meshes] if args.meshes else None,
        "weights": SNAPSHOT_NAME,
    }
    files.write_json(manifest_path, manifest)
    save_snapshot(space.weight_map, os.path.join(out_dir, SNAPSHOT_NAME))
    print(f"Space dims {tuple(manifest['dims'])}: {space.size} triplet(s).")
    print(f"Finished building space. Wrote {manifest_path}.")
    return 0


def load_manifest_space(files: FileHandler, manifest_path: str, with_grasps: bool = True,
                        with_meshes: bool = False):
    """Rebuild the space a manifest describes, optionally with grasps and meshes attached."""
    try:
        manifest = files.read_json(manifest_path)
        dims = [int(v) for v in manifest["dims"]]
        grid = tuple(int(v) for v in manifest["viewpoint_grid"])
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"Invalid manifest {manifest_path}: {e}") from e
    base = os.path.dirname(os.path.abspath(manifest_path))
    space = build_space(dims[0], dims[1], grid)
    if space.n_viewpoints != dims[2]:
        raise ConfigError(f"Manifest viewpoint grid {grid} does not give {dims[2]} viewpoints")
    if with_grasps:
        tables = [_read_grasps(files, _resolve(base, p)) for p in manifest["grasp_files"]]
        objects = None
        if with_meshes and manifest.get("meshes"):
            objects = [load_object(_resolve(base, p), oid)
                       for p, oid in zip(manifest["meshes"], manifest["object_ids"])]
        attach_grasps(space, tables, objects)
    space.object_ids = list(manifest.get("object_ids", space.object_ids))
    weights_path = _resolve(base, manifest.get("weights"))
    return space, manifest, weights_path


def cmd_loop(args: argparse.Namespace, config: RunConfig, files: FileHandler) -> int:
    loop_config = config.loop_config()
    seeds = [int(s) for s in config.loop_seeds]
    print(f"\n--- Running sampling loop: {len(seeds)} seed(s), {loop_config.epochs} epoch(s), "
          f"schemes {', '.join(loop_config.schemes)} ---")
    report = run_experiment(loop_config, seeds)
    curves_path = os.path.join(args.out_dir, "curves.csv")
    files.write_csv(curves_path, report.curves)
    files.write_csv(os.path.join(args.out_dir, "mean_curves.csv"), report.mean_curves)
    files.write_json(os.path.join(args.out_dir, "run_config.json"), config.to_dict())
    for scheme, weight_map in report.final_maps.items():
        save_snapshot(weight_map, os.path.join(args.out_dir, f"weights_{scheme}.ccvw"))
    print(f"Target mean error: {report.target_error:.6f}")
    for scheme in loop_config.schemes:
        reached = report.reach_epoch[scheme]
        reached_text = f"epoch {reached}" if reached is not None else "not reached"
        print(f"  {scheme}: final mean error {report.final_mean[scheme]:.6f}, target {reached_text}")
    if len(loop_config.schemes) > 1:
        print(f"Online better on {report.wins} of {len(seeds)} seed(s) ({report.ties} tie(s)), "
              f"sign test p = {report.p_value:.4g}")
    print(f"Finished loop. Wrote {len(report.curves)} curve row(s) to {curves_path}.")
    return 0


def _prediction(record: dict, source: str) -> PosePrediction:
    try:
        return PosePrediction(record["hand_joints"], record["object_centroid"], record["object_rotation"])
    except KeyError as e:
        raise ConfigError(f"{source}: record {record.get('id')!r} lacks {e}") from e


def _load_meshes(paths: Sequence[str]) -> Dict[str, ObjectModel]:
    meshes = {}
    for path in paths or []:
        obj = load_object(path, _stem(path))
        meshes[obj.id] = obj
    return meshes


def _load_symsets(files: FileHandler, paths: Sequence[str]) -> Dict[str, SymmetrySet]:
    symsets = {}
    for path in paths or []:
        record = files.read_json(path)
        symsets[str(record.get("object_id") or _stem(path))] = symmetry_set_from_record(record)
    return symsets


def _object_pose(pred: PosePrediction, obj: ObjectModel) -> RigidTransform:
    """Pose over original mesh vertices: v -> R (v - c) + centroid."""
    rotation = rotvec_matrix(pred.object_rotation)
    translation = np.asarray(pred.object_centroid, dtype=float) - rotation @ obj.centroid
    return RigidTransform.from_matrix(rotation, translation)


def cmd_eval(args: argparse.Namespace, config: RunConfig, files: FileHandler) -> int:
    mode = args.mode or config.eval_mode
    if mode not in LAMBDA_PRESETS:
        raise ConfigError(f"Unknown evaluation mode {mode!r}; expected one of {sorted(LAMBDA_PRESETS)}")
    predictions = {str(r["id"]): r for r in files.read_jsonl(args.pred)}
    truths = {str(r["id"]): r for r in files.read_jsonl(args.gt)}
    orphans = sorted(set(predictions) ^ set(truths))
    if orphans:
        raise ConfigError(f"Prediction and ground-truth ids do not match: {', '.join(orphans[:10])}")
    meshes = _load_meshes(args.meshes)
    symsets = _load_symsets(files, args.symsets)
    print(f"\n--- Evaluating {len(truths)} prediction(s), mode {mode} ---")

    rows = []
    skipped = 0
    for record_id in sorted(truths):
        gt_record = truths[record_id]
        object_id = str(gt_record.get("object_id", ""))
        obj = meshes.get(object_id)
        if obj is None:
            skipped += 1
            print(f"WARNING: No mesh for object {object_id!r}; skipping record {record_id}.")
            continue
        pred = _prediction(predictions[record_id], args.pred)
        gt = _prediction(gt_record, args.gt)
        sym = symsets.get(object_id) or SymmetrySet.from_rotations([np.eye(3)])
        corners = obj.corners - obj.centroid
        losses = loss_total(pred, gt, corners, sym, CAMERA_VIEW_DIR, LAMBDA_PRESETS[mode],
                            config.ordinal_dead_zone)
        rows.append({
            "id": record_id,
            "object_id": object_id,
            "mpjpe": mpjpe(pred.hand_joints, gt.hand_joints),
            "mpcpe": mpcpe(pred.corners(corners), gt.corners(corners)),
            "mssd": mssd(_object_pose(pred, obj), _object_pose(gt, obj), sym, obj.vertices),
            "loc": losses.loc,
            "cor": losses.cor,
            "ord": losses.ord,
            "sym": losses.sym,
            "total": losses.total,
        })
    frame = pd.DataFrame(rows, columns=EVAL_COLUMNS)
    if rows:
        means = frame[EVAL_COLUMNS[2:]].mean()
        frame = pd.concat([frame, pd.DataFrame([{"id": "mean", "object_id": "", **means.to_dict()}])],
                          ignore_index=True)
        print("Means: " + ", ".join(f"{k} {v:.6f}" for k, v in means.items()))
    files.write_csv(args.out, frame)
    print(f"Finished evaluation. Scored {len(rows)} record(s), skipped {skipped}; wrote {args.out}.")
    return 0 if not skipped else 1


def cmd_symset(args: argparse.Namespace, config: RunConfig, files: FileHandler) -> int:
    object_id = args.object_id or _stem(args.mesh)
    table = load_symmetry_table(args.table)
    if object_id not in table:
        raise ConfigError(f"Object {object_id!r} is not listed in {args.table}")
    obj = load_object(args.mesh, object_id)
    print(f"\n--- Building symmetry set for {object_id} ---")
    sym = symmetry_set(obj, table[object_id], config.symmetry_revolution_steps, config.symmetry_icp_iters,
                       config.symmetry_tolerance, config.threads)
    files.write_json(args.out, symmetry_set_to_record(sym, object_id))
    if sym.dropped:
        print(f"WARNING: {sym.dropped} element(s) exceeded the residual tolerance and were dropped.")
    print(f"Finished symmetry set. Kept {len(sym)} element(s); wrote {args.out}.")
    return 0


def cmd_sample(args: argparse.Namespace, config: RunConfig, files: FileHandler) -> int:
    space, manifest, weights_path = load_manifest_space(files, args.manifest, with_grasps=False)
    weight_map = load_snapshot(args.weights or weights_path)
    if weight_map.dims != (space.n_objects, space.n_poses, space.n_viewpoints):
        raise ConfigError(f"Snapshot dims {weight_map.dims} do not match the manifest {tuple(manifest['dims'])}")
    print(f"\n--- Sampling {args.count} triplet(s) ---")
    rng = np.random.default_rng(derive_seed(config.seed, "sample"))
    triplets = sample_triplets(weight_map, args.count, rng)
    written = files.write_jsonl(args.out, ({"object_id": t.object_id, "pose_id": t.pose_id,
                                            "viewpoint_id": t.viewpoint_id} for t in triplets))
    print(f"Finished sampling. Wrote {written} triplet(s) to {args.out}.")
    return 0


def cmd_synth(args: argparse.Namespace, config: RunConfig, files: FileHandler) -> int:
    space, _, _ = load_manifest_space(files, args.manifest, with_grasps=True, with_meshes=True)
    synth_config = config.synth_config()
    if space.objects is None:
        print("WARNING: Manifest lists no meshes. Penetration mitigation is disabled.")
        synth_config = replace(synth_config, mitigate=False)
    try:
        triplets = [TripletIndex(int(r["object_id"]), int(r["pose_id"]), int(r["viewpoint_id"]))
                    for r in files.read_jsonl(args.triplets)]
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"Malformed triplet file {args.triplets}: {e}") from e
    print(f"\n--- Synthesizing {len(triplets)} scene descriptor(s) ---")
    descriptors = synthesize_batch(triplets, space, synth_config, config.seed, config.threads)
    written = files.write_jsonl(args.out, (descriptor_to_record(d) for d in descriptors))
    print(f"Finished synthesis. Wrote {written} descriptor(s) to {args.out}.")
    return 0


COMMANDS = {
    "grasp-gen": cmd_grasp_gen,
    "build-space": cmd_build_space,
    "loop": cmd_loop,
    "eval": cmd_eval,
    "symset": cmd_symset,
    "sample": cmd_sample,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="Flat JSON config file (UPPER_SNAKE keys)")
    common.add_argument("--seed", type=int, default=None, help="Master seed")
    common.add_argument("--threads", type=int, default=None, help="Worker threads")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    add_config_flags(common)

    parser = argparse.ArgumentParser(description="Grasp, viewpoint and sampling-loop tools for hand-object data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("grasp-gen", parents=[common], help="Generate grasps for one object mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--object-id", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--stats", default=None, help="Optional CSV of generation statistics")

    p = sub.add_parser("build-space", parents=[common], help="Build a space manifest and uniform weights")
    p.add_argument("--grasps", nargs="+", required=True)
    p.add_argument("--meshes", nargs="+", default=None)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("loop", parents=[common], help="Online vs uniform sampling experiment")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("eval", parents=[common], help="Score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--meshes", nargs="+", default=None)
    p.add_argument("--symsets", nargs="+", default=None)
    p.add_argument("--mode", choices=sorted(LAMBDA_PRESETS), default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("symset", parents=[common], help="Build an object's symmetry set")
    p.add_argument("--mesh", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--object-id", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample", parents=[common], help="Draw triplets from a weight snapshot")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", parents=[common], help="Turn sampled triplets into scene descriptors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--triplets", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = apply_flag_overrides(load_config(args.config), args)
        return COMMANDS[args.command](args, config, FileHandler())
    except ArtifactError as e:
        print(f"ERROR: {e}")
    except (OSError, ValueError) as e:
        print(f"ERROR during {args.command}: {e}")
    return 1


if __name__ == "__main__":
    sys.exit(main())
