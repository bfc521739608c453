import math
import struct

import numpy as np
import pytest

from ccv_space import (SNAPSHOT_HEADER, FeedbackRecord, SumTree, TripletIndex, WeightMap, apply_epoch_feedback,
                       attach_grasps, build_space, load_snapshot, probability_of, sample_triplets, save_snapshot,
                       snapshot_bytes, weight_map_from_bytes, weight_update)
from errors import InvalidArgumentError, SnapshotError
from grasp_forge import GraspCandidate
from hand_model import HandPoseCompact


def _map(weights):
    weights = np.asarray(weights, dtype=float)
    return WeightMap((1, 1, len(weights)), weights)


class TestBuildSpace:
    def test_benchmark_scale(self):
        space = build_space(20, 100, (12, 24))
        assert space.n_viewpoints == 288
        assert space.size == 576_000
        assert space.weight_map.dims == (20, 100, 288)
        assert np.all(space.weight_map.weights == 1.0)

    def test_single_triplet(self):
        assert build_space(1, 1, (1, 1)).size == 1

    def test_small_space_uniform_weights(self):
        space = build_space(2, 3, (2, 2))
        assert space.size == 24
        assert space.weight_map.weights.sum() == 24.0

    @pytest.mark.parametrize("args", [(0, 1, (1, 1)), (1, 0, (1, 1)), (1, 1, (0, 1)), (1, 1, (1, 0))])
    def test_zero_dimension_rejected(self, args):
        with pytest.raises(InvalidArgumentError):
            build_space(*args)

    def test_flat_index_round_trip(self):
        weight_map = build_space(2, 3, (2, 2)).weight_map
        for flat in range(weight_map.size):
            assert weight_map.flat_index(weight_map.triplet_of(flat)) == flat


class TestProbabilityOf:
    def test_uniform(self):
        space = build_space(20, 100, (12, 24))
        assert probability_of(space.weight_map, TripletIndex(3, 17, 200)) == pytest.approx(1 / 576_000, rel=1e-12)

    def test_normalization(self):
        weight_map = _map([2.0, 1.0, 1.0])
        probabilities = [probability_of(weight_map, TripletIndex(0, 0, v)) for v in range(3)]
        assert probabilities == pytest.approx([0.5, 0.25, 0.25], abs=1e-15)

    def test_matches_independent_normalization(self, rng):
        weights = rng.uniform(0.1, 2.0, 60)
        weight_map = WeightMap((3, 4, 5), weights)
        total = math.fsum(weights.tolist())
        probabilities = []
        for flat in range(60):
            p = probability_of(weight_map, weight_map.triplet_of(flat))
            assert p == pytest.approx(weights[flat] / total, rel=1e-12)
            probabilities.append(p)
        assert math.fsum(probabilities) == pytest.approx(1.0, abs=1e-9)

    def test_out_of_bounds(self):
        with pytest.raises(InvalidArgumentError):
            probability_of(_map([1.0, 1.0]), TripletIndex(0, 0, 2))


class TestSampleTriplets:
    def test_degenerate_support(self):
        weight_map = _map([1.0, 0.0, 0.0])
        for seed in range(50):
            assert sample_triplets(weight_map, 1, np.random.default_rng(seed)) == [TripletIndex(0, 0, 0)]

    def test_exhaustive_draw_is_permutation(self, rng):
        weight_map = WeightMap((2, 3, 5), rng.uniform(0.1, 2.0, 30))
        drawn = sample_triplets(weight_map, 30, rng)
        assert sorted(t.as_tuple() for t in drawn) == [weight_map.triplet_of(i).as_tuple() for i in range(30)]

    def test_epoch_draw_has_no_duplicates(self, rng):
        weight_map = build_space(4, 10, (4, 8)).weight_map
        weight_map.weights[:] = rng.uniform(0.1, 2.0, weight_map.size)
        drawn = sample_triplets(weight_map, 256, rng)
        assert len(set(drawn)) == 256

    def test_first_draw_frequencies(self):
        weight_map = _map([3.0, 1.0, 1.0])
        rng = np.random.default_rng(7)
        counts = np.zeros(3)
        draws = 100_000
        for _ in range(draws):
            counts[sample_triplets(weight_map, 1, rng)[0].viewpoint_id] += 1
        assert counts / draws == pytest.approx([0.6, 0.2, 0.2], abs=0.01)

    def test_deterministic_for_seed(self):
        weight_map = WeightMap((3, 3, 3), np.linspace(0.1, 2.0, 27))
        first = sample_triplets(weight_map, 20, np.random.default_rng(99))
        second = sample_triplets(weight_map, 20, np.random.default_rng(99))
        assert first == second

    def test_too_many_draws(self, rng):
        with pytest.raises(InvalidArgumentError):
            sample_triplets(_map([1.0, 1.0]), 3, rng)
        with pytest.raises(InvalidArgumentError):
            sample_triplets(_map([1.0, 0.0]), 2, rng)


class TestSumTree:
    @pytest.mark.parametrize("size", [1, 2, 3, 5, 17])
    def test_never_returns_removed_leaf(self, size, rng):
        tree = SumTree(np.ones(size))
        seen = set()
        for _ in range(size):
            leaf = tree.find(rng.random() * tree.total)
            assert leaf not in seen
            seen.add(leaf)
            tree.remove(leaf)
        assert seen == set(range(size))

    def test_top_of_range_lands_on_weighted_leaf(self):
        tree = SumTree(np.array([1.0, 1.0, 1.0]))
        assert tree.find(np.nextafter(tree.total, 0.0)) == 2


class TestWeightUpdate:
    def test_endpoints(self):
        assert weight_update(0.5, 0.1, 0.5) == 2.0
        assert weight_update(0.1, 0.1, 0.5) == 2.0 / 3.0

    def test_midpoint_is_neutral(self):
        assert weight_update(1.0, 0.0, 2.0) == 1.0

    def test_degenerate_epoch_is_neutral(self):
        assert weight_update(0.3, 0.3, 0.3) == 1.0

    def test_inverted_range(self):
        with pytest.raises(InvalidArgumentError):
            weight_update(0.2, 0.5, 0.1)

    def test_strictly_increasing(self):
        values = [weight_update(e, 0.01, 0.09) for e in np.linspace(0.01, 0.09, 50)]
        assert all(b > a for a, b in zip(values, values[1:]))
        assert min(values) >= 2.0 / 3.0 and max(values) <= 2.0


class TestApplyEpochFeedback:
    def test_hardest_sample_doubles(self):
        weight_map = build_space(1, 2, (1, 2)).weight_map
        records = [FeedbackRecord(TripletIndex(0, 0, 0), 0.01), FeedbackRecord(TripletIndex(0, 0, 1), 0.05)]
        apply_epoch_feedback(weight_map, records)
        assert weight_map.weight(TripletIndex(0, 0, 1)) == 2.0
        assert weight_map.weight(TripletIndex(0, 0, 0)) == pytest.approx(2.0 / 3.0)

    def test_upper_clamp(self):
        weight_map = _map([1.5, 1.0])
        apply_epoch_feedback(weight_map, [FeedbackRecord(TripletIndex(0, 0, 0), 0.9),
                                          FeedbackRecord(TripletIndex(0, 0, 1), 0.1)])
        assert weight_map.weights[0] == 2.0

    def test_unreferenced_entries_untouched(self, rng):
        weight_map = WeightMap((2, 2, 4), rng.uniform(0.1, 2.0, 16))
        before = weight_map.weights.copy()
        records = [FeedbackRecord(weight_map.triplet_of(i), float(e)) for i, e in zip((1, 5, 9), (0.1, 0.2, 0.3))]
        apply_epoch_feedback(weight_map, records)
        untouched = [i for i in range(16) if i not in (1, 5, 9)]
        assert np.array_equal(weight_map.weights[untouched], before[untouched])

    def test_duplicates_rejected(self):
        weight_map = _map([1.0, 1.0])
        records = [FeedbackRecord(TripletIndex(0, 0, 0), 0.1), FeedbackRecord(TripletIndex(0, 0, 0), 0.2)]
        with pytest.raises(InvalidArgumentError):
            apply_epoch_feedback(weight_map, records)

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            apply_epoch_feedback(_map([1.0]), [])

    def test_weights_stay_in_bounds_over_many_epochs(self, rng):
        weight_map = build_space(4, 10, (4, 8)).weight_map
        for _ in range(100):
            triplets = sample_triplets(weight_map, 64, rng)
            records = [FeedbackRecord(t, float(e)) for t, e in zip(triplets, rng.lognormal(-4.0, 1.0, 64))]
            apply_epoch_feedback(weight_map, records)
            assert weight_map.weights.min() >= 0.1 and weight_map.weights.max() <= 2.0

    def test_negative_error_rejected(self):
        with pytest.raises(InvalidArgumentError):
            FeedbackRecord(TripletIndex(0, 0, 0), -0.1)


class TestSnapshot:
    def test_header_layout(self):
        data = snapshot_bytes(WeightMap((2, 3, 4), np.arange(1, 25, dtype=float)))
        assert data[:4] == b"CCVW"
        assert data[4] == 1
        assert struct.unpack_from("<3Q", data, 5) == (2, 3, 4)
        assert len(data) == SNAPSHOT_HEADER.size + 24 * 8

    def test_file_round_trip(self, tmp_path, rng):
        weight_map = WeightMap((2, 5, 3), rng.uniform(0.1, 2.0, 30))
        path = tmp_path / "nested" / "weights.ccvw"
        save_snapshot(weight_map, str(path))
        loaded = load_snapshot(str(path))
        assert loaded.dims == weight_map.dims
        assert np.array_equal(loaded.weights, weight_map.weights)

    def test_bad_magic(self):
        data = bytearray(snapshot_bytes(_map([1.0, 2.0])))
        data[:4] = b"XXXX"
        with pytest.raises(SnapshotError):
            weight_map_from_bytes(bytes(data))

    def test_bad_version(self):
        data = bytearray(snapshot_bytes(_map([1.0, 2.0])))
        data[4] = 9
        with pytest.raises(SnapshotError):
            weight_map_from_bytes(bytes(data))

    def test_truncated(self):
        data = snapshot_bytes(_map([1.0, 2.0]))
        with pytest.raises(SnapshotError):
            weight_map_from_bytes(data[:-3])
        with pytest.raises(SnapshotError):
            weight_map_from_bytes(data[:10])


class TestAttachGrasps:
    @staticmethod
    def _grasp(object_id):
        return GraspCandidate(object_id, HandPoseCompact(), (), 0.0, (0.0,) * 5, 0.0)

    def test_binds_tables_and_ids(self):
        space = build_space(2, 2, (1, 2))
        attach_grasps(space, [[self._grasp("a"), self._grasp("a")], [self._grasp("b"), self._grasp("b")]])
        assert space.object_ids == ["a", "b"]
        assert space.grasp(1, 0).object_id == "b"

    def test_pose_count_mismatch(self):
        space = build_space(2, 2, (1, 1))
        with pytest.raises(InvalidArgumentError):
            attach_grasps(space, [[self._grasp("a")] * 2, [self._grasp("b")]])

    def test_index_only_space_has_no_grasps(self):
        with pytest.raises(InvalidArgumentError):
            build_space(1, 1, (1, 1)).grasp(0, 0)
