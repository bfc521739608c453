import logging
import math
from pathlib import Path

import numpy as np
import pytest
import trimesh
from scipy.spatial.transform import Rotation

from errors import AlignmentError, InvalidArgumentError
from geometry_util import RigidTransform, axis_angle_matrix, rotation_angle
from mesh_util import ObjectModel, make_box, make_cylinder
from pose_eval import (LAMBDA_PRESETS, REVOLUTION, PosePrediction, SymmetrySet, SymmetrySpec, close_group,
                       combine_losses, depth_relations, hausdorff, icp_cost, icp_refine, load_symmetry_table,
                       loss_cor, loss_loc, loss_ord, loss_sym, loss_total, mpcpe, mpjpe, mssd, parse_symmetry_row,
                       principal_axis_align, symmetry_set, symmetry_set_from_record, symmetry_set_to_record)

TABLE_PATH = Path(__file__).resolve().parent.parent / "symmetry_axes.txt"
BOX_SPEC = SymmetrySpec((((1.0, 0.0, 0.0), math.pi), ((0.0, 1.0, 0.0), math.pi), ((0.0, 0.0, 1.0), math.pi)))


def rodrigues(rotvec):
    """Independent exp map for the oracles."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = math.sqrt(sum(v * v for v in rotvec))
    if angle == 0.0:
        return np.eye(3)
    k = rotvec / angle
    cross = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * cross + (1.0 - math.cos(angle)) * cross @ cross


def random_rotvec(rng):
    axis = rng.normal(size=3)
    return axis / np.linalg.norm(axis) * rng.uniform(0.0, math.pi)


@pytest.fixture(scope="module")
def slab():
    """Axis-aligned 30 x 20 x 10 cm box without subdivision."""
    return make_box((0.3, 0.2, 0.1), object_id="slab")


@pytest.fixture(scope="module")
def slab_symmetries(slab):
    return symmetry_set(slab, BOX_SPEC)


class TestLossLoc:
    def test_single_joint_offset(self):
        gt = np.zeros((22, 3))
        pred = gt.copy()
        pred[4, 0] = 0.03
        assert loss_loc(pred, gt) == pytest.approx(0.0009 / 22, rel=1e-12)
        assert loss_loc(gt, gt) == 0.0

    def test_matches_loop(self, rng):
        for _ in range(1000):
            pred, gt = rng.normal(scale=0.1, size=(2, 22, 3))
            naive = 0.0
            for i in range(22):
                naive += sum((pred[i][k] - gt[i][k]) ** 2 for k in range(3))
            assert loss_loc(pred, gt) == pytest.approx(naive / 22, rel=1e-12)

    def test_wrong_count(self):
        with pytest.raises(InvalidArgumentError):
            loss_loc(np.zeros((21, 3)), np.zeros((22, 3)))

    def test_permutation_covariant(self, rng):
        pred, gt = rng.normal(size=(2, 22, 3))
        order = rng.permutation(22)
        assert loss_loc(pred[order], gt[order]) == pytest.approx(loss_loc(pred, gt), rel=1e-14)


class TestLossCor:
    def test_consistent_rotation_is_zero(self, rng):
        canonical = rng.normal(scale=0.05, size=(8, 3))
        r = random_rotvec(rng)
        assert loss_cor(r, canonical, canonical @ rodrigues(r).T) == pytest.approx(0.0, abs=1e-12)
        assert loss_cor((0.0, 0.0, 0.0), canonical, canonical) == 0.0

    def test_matches_manual_expansion(self, rng):
        for _ in range(1000):
            canonical, target = rng.normal(scale=0.05, size=(2, 8, 3))
            r = random_rotvec(rng)
            rotation = rodrigues(r)
            naive = sum(float(np.sum((rotation @ canonical[i] - target[i]) ** 2)) for i in range(8)) / 8
            assert loss_cor(r, canonical, target) == pytest.approx(naive, rel=1e-12)


class TestLossOrd:
    def test_matching_signs_cost_nothing(self, rng):
        hand = rng.normal(scale=0.05, size=(21, 3))
        corners = rng.normal(scale=0.05, size=(8, 3))
        relations = depth_relations(hand, corners, (0.0, 0.0, 1.0))
        assert loss_ord(hand, corners, relations, (0.0, 0.0, 1.0)) == 0.0

    def test_single_misaligned_pair(self):
        hand = np.zeros((21, 3))
        corners = np.zeros((8, 3))
        corners[:, 2] = -1.0
        corners[3, 2] = -0.02
        relations = np.ones((21, 8), dtype=np.int8)
        relations[5, 3] = -1
        assert loss_ord(hand, corners, relations, (0.0, 0.0, 1.0)) == pytest.approx(0.02, abs=1e-15)

    def test_dead_zone_pairs_never_penalized(self):
        hand = np.zeros((21, 3))
        corners = np.zeros((8, 3))
        corners[:, 2] = 0.0005
        relations = depth_relations(hand, corners, (0.0, 0.0, 1.0))
        assert not relations.any()
        flipped = corners.copy()
        flipped[:, 2] = -0.5
        assert loss_ord(hand, flipped, relations, (0.0, 0.0, 1.0)) == 0.0

    def test_matches_brute_force(self, rng):
        view = np.array([0.3, -0.4, 0.5])
        view /= np.linalg.norm(view)
        for _ in range(1000):
            gt_hand, hand = rng.normal(scale=0.05, size=(2, 21, 3))
            gt_corners, corners = rng.normal(scale=0.05, size=(2, 8, 3))
            relations = depth_relations(gt_hand, gt_corners, view, dead_zone=0.0)
            naive = 0.0
            for i in range(21):
                for j in range(8):
                    depth = float((hand[i] - corners[j]) @ view)
                    gt_sign = int(np.sign((gt_hand[i] - gt_corners[j]) @ view))
                    if gt_sign != 0 and int(np.sign(depth)) != gt_sign:
                        naive += abs(depth)
            assert loss_ord(hand, corners, relations, view) == pytest.approx(naive, rel=1e-12)

    def test_view_direction_must_be_unit(self):
        with pytest.raises(InvalidArgumentError):
            depth_relations(np.zeros((21, 3)), np.zeros((8, 3)), (0.0, 0.0, 2.0))


class TestLossSym:
    def test_identity_in_set(self, rng):
        corners = rng.normal(scale=0.05, size=(8, 3))
        r = random_rotvec(rng)
        assert loss_sym(r, r, SymmetrySet.from_rotations([np.eye(3)]), corners) == pytest.approx(0.0, abs=1e-15)

    def test_symmetry_absorbs_flip(self):
        corners = make_box((0.3, 0.2, 0.1)).corners
        flip = axis_angle_matrix((0.0, 0.0, 1.0), math.pi)
        sym = SymmetrySet.from_rotations([np.eye(3), flip])
        r_gt = np.array([0.2, -0.1, 0.4])
        r_pred = Rotation.from_matrix(rodrigues(r_gt) @ flip).as_rotvec()
        assert loss_sym(r_pred, r_gt, sym, corners) == pytest.approx(0.0, abs=1e-12)

    def test_matches_enumeration(self, rng, slab, slab_symmetries):
        corners = slab.corners - slab.centroid
        rotations = slab_symmetries.object_frame_rotations()
        for _ in range(200):
            r_pred, r_gt = random_rotvec(rng), random_rotvec(rng)
            naive = min(
                sum(float(np.sum((rodrigues(r_pred) @ c - rodrigues(r_gt) @ rotation @ c) ** 2)) for c in corners) / 8
                for rotation in rotations)
            assert loss_sym(r_pred, r_gt, slab_symmetries, corners) == pytest.approx(naive, rel=1e-10)

    def test_empty_set(self):
        with pytest.raises(InvalidArgumentError):
            loss_sym((0, 0, 0), (0, 0, 0), SymmetrySet.from_rotations([]), np.zeros((8, 3)))


class TestLossTotal:
    @staticmethod
    def _prediction(rng):
        return PosePrediction(rng.normal(scale=0.05, size=(21, 3)), rng.normal(scale=0.05, size=3),
                              random_rotvec(rng))

    def test_presets(self, rng, slab):
        corners = slab.corners - slab.centroid
        sym = SymmetrySet.from_rotations([np.eye(3)])
        pred, gt = self._prediction(rng), self._prediction(rng)
        mpcpe_bundle = loss_total(pred, gt, corners, sym, (0.0, 0.0, 1.0), LAMBDA_PRESETS["mpcpe"])
        assert mpcpe_bundle.total == mpcpe_bundle.loc + mpcpe_bundle.cor + mpcpe_bundle.ord
        sym_bundle = loss_total(pred, gt, corners, sym, (0.0, 0.0, 1.0), LAMBDA_PRESETS["sym"])
        assert sym_bundle.total == sym_bundle.loc + sym_bundle.sym

    def test_all_zero(self):
        assert combine_losses(0.0, 0.0, 0.0, 0.0, (1.0, 1.0, 1.0)).total == 0.0

    def test_linear_in_lambda(self):
        single = combine_losses(0.0, 0.0, 0.25, 0.0, (1.0, 1.0, 0.0))
        double = combine_losses(0.0, 0.0, 0.25, 0.0, (1.0, 2.0, 0.0))
        assert double.total == 2 * single.total

    def test_non_finite_lambda(self):
        with pytest.raises(InvalidArgumentError):
            combine_losses(0.0, 0.0, 0.0, 0.0, (1.0, math.nan, 0.0))

    def test_perfect_prediction(self, rng, slab):
        gt = self._prediction(rng)
        bundle = loss_total(gt, gt, slab.corners - slab.centroid, SymmetrySet.from_rotations([np.eye(3)]),
                            (0.0, 0.0, 1.0))
        assert (bundle.loc, bundle.cor, bundle.ord, bundle.sym) == (0.0, 0.0, 0.0, 0.0)

    def test_prediction_rejects_nan(self):
        with pytest.raises(InvalidArgumentError):
            PosePrediction(np.full((21, 3), np.nan), np.zeros(3), np.zeros(3))


class TestMetrics:
    def test_mpjpe_translation_invariant(self, rng):
        gt = rng.normal(scale=0.05, size=(21, 3))
        assert mpjpe(gt + np.array([0.3, -0.2, 0.1]), gt) == pytest.approx(0.0, abs=1e-15)

    def test_mpjpe_single_joint(self):
        gt = np.zeros((21, 3))
        pred = gt.copy()
        pred[7, 1] = 0.03
        assert mpjpe(pred, gt) == pytest.approx(0.03 / 21, rel=1e-12)

    def test_mpjpe_matches_loop(self, rng):
        for _ in range(200):
            pred, gt = rng.normal(scale=0.05, size=(2, 21, 3))
            naive = sum(math.dist(pred[i] - pred[0], gt[i] - gt[0]) for i in range(21)) / 21
            assert mpjpe(pred, gt) == pytest.approx(naive, rel=1e-12)

    def test_mpcpe_offset(self, slab):
        assert mpcpe(slab.corners + np.array([0.0, 0.01, 0.0]), slab.corners) == pytest.approx(0.01, rel=1e-12)

    def test_mpcpe_wrong_count(self):
        with pytest.raises(InvalidArgumentError):
            mpcpe(np.zeros((7, 3)), np.zeros((8, 3)))


class TestMssd:
    def test_identity_set_is_max_distance(self, rng, slab):
        pred = RigidTransform.from_rotvec(random_rotvec(rng), rng.normal(scale=0.01, size=3))
        gt = RigidTransform.from_rotvec(random_rotvec(rng), rng.normal(scale=0.01, size=3))
        expected = max(math.dist(pred.apply(v), gt.apply(v)) for v in slab.vertices)
        assert mssd(pred, gt, SymmetrySet.from_rotations([np.eye(3)]), slab.vertices) == pytest.approx(expected,
                                                                                                    rel=1e-12)

    def test_same_pose_is_zero(self, rng, slab, slab_symmetries):
        pose = RigidTransform.from_rotvec(random_rotvec(rng), (0.1, 0.2, 0.3))
        assert mssd(pose, pose, slab_symmetries, slab.vertices) == pytest.approx(0.0, abs=1e-12)

    def test_symmetric_flip_is_free(self, slab, slab_symmetries):
        gt = RigidTransform.from_rotvec((0.3, 0.1, -0.2), (0.0, 0.0, 0.5))
        pred = gt.compose(RigidTransform.from_rotvec((0.0, 0.0, math.pi)))
        assert mssd(pred, gt, slab_symmetries, slab.vertices) <= slab_symmetries.tolerance
        plain = mssd(pred, gt, SymmetrySet.from_rotations([np.eye(3)]), slab.vertices)
        assert plain > 0.1

    def test_matches_enumeration(self, rng, slab, slab_symmetries):
        for _ in range(100):
            pred = RigidTransform.from_rotvec(random_rotvec(rng), rng.normal(scale=0.01, size=3))
            gt = RigidTransform.from_rotvec(random_rotvec(rng), rng.normal(scale=0.01, size=3))
            naive = min(max(math.dist(pred.apply(v), gt.apply(s.apply(v))) for v in slab.vertices)
                        for s in slab_symmetries.object_frame_transforms())
            value = mssd(pred, gt, slab_symmetries, slab.vertices)
            assert value == pytest.approx(naive, rel=1e-12)
            identity_only = mssd(pred, gt, SymmetrySet.from_rotations([np.eye(3)]), slab.vertices)
            assert value <= identity_only + 1e-15

    def test_empty_vertices(self, slab_symmetries):
        with pytest.raises(InvalidArgumentError):
            mssd(RigidTransform(), RigidTransform(), slab_symmetries, np.zeros((0, 3)))


class TestPrincipalAxisAlign:
    def test_axis_aligned_box(self, slab):
        alignment = principal_axis_align(slab)
        permutation = np.abs(alignment.rotation)
        assert permutation == pytest.approx(np.round(permutation), abs=1e-9)
        extents = np.ptp(alignment.apply(slab.vertices), axis=0)
        # descending inertia puts the shortest edge first
        assert extents == pytest.approx([0.1, 0.2, 0.3])

    def test_recovers_rotated_copy(self, slab):
        rotation = axis_angle_matrix((1.0, 2.0, 3.0), 0.7)
        turned = ObjectModel.from_arrays("turned", slab.vertices @ rotation.T, slab.triangles)
        aligned = principal_axis_align(slab).apply(slab.vertices)
        aligned_turned = principal_axis_align(turned).apply(turned.vertices)
        assert hausdorff(aligned, aligned_turned) < 1e-9

    def test_translation_moves_centroid_to_origin(self, slab):
        shifted = ObjectModel.from_arrays("shifted", slab.vertices + np.array([1.0, -2.0, 0.5]), slab.triangles)
        alignment = principal_axis_align(shifted)
        assert alignment.apply(shifted.centroid) == pytest.approx(np.zeros(3), abs=1e-12)
        assert alignment.rotation @ alignment.rotation.T == pytest.approx(np.eye(3), abs=1e-12)
        assert np.linalg.det(alignment.rotation) == pytest.approx(1.0)

    def test_coplanar_cloud(self):
        vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
        flat = ObjectModel.from_arrays("flat", vertices, np.array([[0, 1, 2], [0, 2, 3]]))
        with pytest.raises(AlignmentError):
            principal_axis_align(flat)


class TestSymmetryGroups:
    def test_box_spec_gives_klein_four(self, slab_symmetries):
        assert len(slab_symmetries) == 4
        assert slab_symmetries.dropped == 0
        for rotation in slab_symmetries.rotations:
            assert rotation @ rotation.T == pytest.approx(np.eye(3), abs=1e-9)
            assert np.linalg.det(rotation) == pytest.approx(1.0, abs=1e-9)

    def test_every_element_maps_cloud_to_itself(self, slab, slab_symmetries):
        cloud = slab_symmetries.alignment.apply(slab.vertices)
        assert np.array_equal(slab_symmetries.rotations[0], np.eye(3))
        for rotation in slab_symmetries.rotations:
            assert hausdorff(cloud @ rotation.T, cloud) <= slab_symmetries.tolerance

    def test_single_half_turn(self, slab):
        sym = symmetry_set(slab, SymmetrySpec((((0.0, 0.0, 1.0), math.pi),)))
        assert len(sym) == 2

    def test_revolution(self):
        can = make_cylinder(0.03, 0.1, sections=36, object_id="can")
        sym = symmetry_set(can, SymmetrySpec((((0.0, 0.0, 1.0), REVOLUTION),)), revolution_steps=36)
        assert len(sym) == 36
        cloud = sym.alignment.apply(can.vertices)
        for rotation in sym.rotations:
            assert hausdorff(cloud @ rotation.T, cloud) <= sym.tolerance

    def test_false_symmetries_dropped(self, caplog):
        points = np.random.default_rng(42).uniform(-1.0, 1.0, (40, 3)) * np.array([0.05, 0.03, 0.02])
        lump = ObjectModel.from_trimesh(trimesh.convex.convex_hull(points), "lump")
        with caplog.at_level(logging.WARNING):
            sym = symmetry_set(lump, SymmetrySpec((((0.0, 0.0, 1.0), math.pi),)))
        assert len(sym) == 1
        assert sym.dropped == 1
        assert "dropped symmetry element" in caplog.text

    def test_closure_cap(self):
        with pytest.raises(InvalidArgumentError):
            close_group([axis_angle_matrix((0.0, 0.0, 1.0), 1.0)], max_size=50)

    def test_spec_angle_must_divide_turn(self):
        with pytest.raises(InvalidArgumentError):
            SymmetrySpec((((0.0, 0.0, 1.0), math.radians(70.0)),))

    def test_record_round_trip(self, slab_symmetries):
        restored = symmetry_set_from_record(symmetry_set_to_record(slab_symmetries, "slab"))
        assert len(restored) == len(slab_symmetries)
        for a, b in zip(restored.rotations, slab_symmetries.rotations):
            assert np.array_equal(a, b)
        assert restored.alignment == slab_symmetries.alignment


class TestIcpRefine:
    @staticmethod
    def _cloud(rng):
        return rng.uniform(-1.0, 1.0, (200, 3)) * np.array([0.05, 0.03, 0.02])

    def test_exact_symmetry_needs_no_correction(self, rng):
        half_turn = axis_angle_matrix((0.0, 0.0, 1.0), math.pi)
        points = self._cloud(rng)
        cloud = np.vstack([points, points @ half_turn.T])
        assert rotation_angle(icp_refine(cloud, half_turn)) < 1e-4

    def test_recovers_tilted_axis(self, rng):
        tilted = np.array([math.sin(0.005), 0.0, math.cos(0.005)])
        true_rotation = axis_angle_matrix(tilted, math.pi)
        nominal = axis_angle_matrix((0.0, 0.0, 1.0), math.pi)
        points = self._cloud(rng)
        cloud = np.vstack([points, points @ true_rotation.T])
        assert rotation_angle(true_rotation @ nominal.T) == pytest.approx(0.01, abs=1e-9)
        delta = icp_refine(cloud, nominal)
        assert rotation_angle(delta @ nominal @ true_rotation.T) < 1e-3

    def test_never_worse_than_start(self, rng):
        cloud = self._cloud(rng)
        start = axis_angle_matrix((1.0, 1.0, 0.0), 0.4)
        delta = icp_refine(cloud, start)
        assert icp_cost(cloud, delta @ start) <= icp_cost(cloud, start)

    def test_too_few_points(self):
        with pytest.raises(InvalidArgumentError):
            icp_refine(np.zeros((2, 3)), np.eye(3))


class TestSymmetryTable:
    def test_parse_rows(self):
        object_id, spec = parse_symmetry_row("024_bowl | z | inf")
        assert object_id == "024_bowl"
        assert spec.entries == (((0.0, 0.0, 1.0), REVOLUTION),)
        assert parse_symmetry_row("011_banana | - | -")[1].entries == ()
        _, box = parse_symmetry_row("036_wood_block | x, y, z | 180, 180, 90")
        assert [angle for _, angle in box.entries] == pytest.approx([math.pi, math.pi, math.pi / 2])

    @pytest.mark.parametrize("row", ["a | q | 180", "a | x, y | 180", "a | x"])
    def test_bad_rows(self, row):
        with pytest.raises(InvalidArgumentError):
            parse_symmetry_row(row)

    def test_shipped_table(self):
        table = load_symmetry_table(str(TABLE_PATH))
        assert len(table) == 20
        assert table["025_mug"].entries == ()
        assert table["024_bowl"].entries[0][1] == REVOLUTION
