"""Coreset selector oracles: hand-traceable greedy recomputation."""

from itertools import combinations

import numpy as np
import pytest

from csidistill.coresets import (
    CoresetResult,
    feature_embed,
    herding_select,
    kcenter_select,
    kmeans_select,
    random_select,
    select,
)
from csidistill.data import LabeledDataset, Manifest


def make_ds(*class_blocks):
    samples = np.concatenate([np.asarray(b, dtype=np.float32) for b in class_blocks])
    labels = np.concatenate(
        [np.full(len(b), c, dtype=np.int64) for c, b in enumerate(class_blocks)]
    )
    man = Manifest(len(class_blocks), samples.shape[1:], split="fixture")
    return LabeledDataset(samples, labels, man)


def int_cloud(rng, n, dim=3):
    return rng.integers(-8, 9, size=(n, dim)).astype(np.float32)


class TestFeatureEmbed:
    def test_flatten_shape(self):
        ds = make_ds(np.zeros((4, 2, 3)))
        assert feature_embed(ds).shape == (4, 6)

    def test_identity_up_to_reshape(self):
        rng = np.random.default_rng(0)
        block = rng.normal(size=(5, 2, 3)).astype(np.float32)
        ds = make_ds(block)
        flat = feature_embed(ds)
        assert np.array_equal(flat.reshape(5, 2, 3), block.astype(np.float64))

    def test_identical_samples_identical_vectors(self):
        ds = make_ds(np.ones((3, 4)))
        flat = feature_embed(ds)
        assert np.array_equal(flat[0], flat[1])
        assert np.array_equal(flat[1], flat[2])


class TestCoresetResult:
    def test_duplicate_indices_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            CoresetResult("random", [1, 1], 1)

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError, match="method"):
            CoresetResult("margin", [0], 1)

    def test_validate_count_mismatch(self):
        ds = make_ds(np.zeros((3, 2)), np.ones((3, 2)))
        with pytest.raises(ValueError, match="indices"):
            CoresetResult("random", [0, 1], 2).validate(ds)

    def test_validate_label_mismatch(self):
        ds = make_ds(np.zeros((3, 2)), np.ones((3, 2)))
        with pytest.raises(ValueError, match="class-major"):
            CoresetResult("random", [3, 0], 1).validate(ds)


class TestRandom:
    def test_whole_class_exhaustive(self):
        ds = make_ds(np.arange(8).reshape(4, 2), np.arange(8, 16).reshape(4, 2))
        res = random_select(ds, 4, seed=3)
        res.validate(ds)
        assert sorted(res.indices) == list(range(8))

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        ds = make_ds(int_cloud(rng, 12), int_cloud(rng, 12))
        assert random_select(ds, 3, 7).indices == random_select(ds, 3, 7).indices
        assert random_select(ds, 3, 7).indices != random_select(ds, 3, 8).indices

    def test_monte_carlo_uniform(self):
        ds = make_ds(np.arange(40).reshape(20, 2))
        counts = np.zeros(20)
        trials = 10000
        for seed in range(trials):
            counts[random_select(ds, 5, seed).indices] += 1
        p = 5 / 20
        sigma = np.sqrt(trials * p * (1 - p))
        assert np.all(np.abs(counts - trials * p) < 3 * sigma)

    def test_class_too_small(self):
        ds = make_ds(np.zeros((2, 2)))
        with pytest.raises(ValueError, match="class 0"):
            random_select(ds, 3, 0)


class TestKmeans:
    def test_two_tight_clusters(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(-0.5, 0.5, size=(10, 2))
        b = rng.uniform(99.5, 100.5, size=(10, 2))
        ds = make_ds(np.concatenate([a, b]))
        for seed in (0, 1, 2):
            res = kmeans_select(ds, 2, seed)
            res.validate(ds)
            sides = sorted(ds.samples[i][0] > 50 for i in res.indices)
            assert sides == [False, True]

    def test_spc1_is_nearest_mean(self):
        rng = np.random.default_rng(9)
        block = int_cloud(rng, 11)
        ds = make_ds(block)
        flat = feature_embed(ds)
        mean = flat.mean(axis=0)
        expected = min(
            range(11), key=lambda i: (float(np.sum((flat[i] - mean) ** 2)), i)
        )
        assert kmeans_select(ds, 1, seed=2).indices == [expected]

    def test_identical_points_take_next_unused(self):
        ds = make_ds(np.ones((5, 2)))
        res = kmeans_select(ds, 3, seed=4)
        assert res.indices == [0, 1, 2]

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        ds = make_ds(int_cloud(rng, 15), int_cloud(rng, 15))
        assert kmeans_select(ds, 4, 6).indices == kmeans_select(ds, 4, 6).indices

    def test_class_too_small(self):
        ds = make_ds(np.zeros((3, 2)))
        with pytest.raises(ValueError, match="need 4"):
            kmeans_select(ds, 4, 0)


def kcenter_oracle(x, spc):
    x = x.astype(np.float64)
    mean = x.mean(axis=0)
    first = min(range(len(x)), key=lambda i: (float(np.sum((x[i] - mean) ** 2)), i))
    chosen = [first]
    while len(chosen) < spc:
        best, best_d = None, -1.0
        for i in range(len(x)):
            if i in chosen:
                continue
            d = min(float(np.sum((x[i] - x[j]) ** 2)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def covering_radius(x, subset):
    x = x.astype(np.float64)
    return max(
        min(float(np.linalg.norm(p - x[s])) for s in subset) for p in x
    )


class TestKcenter:
    def test_line_fixture(self):
        ds = make_ds([[0.0], [1.0], [10.0]])
        res = kcenter_select(ds, 2, seed=0)
        assert sorted(ds.samples[i][0] for i in res.indices) == [1.0, 10.0]

    def test_whole_class(self):
        rng = np.random.default_rng(4)
        ds = make_ds(int_cloud(rng, 6))
        assert sorted(kcenter_select(ds, 6, 0).indices) == list(range(6))

    def test_greedy_trace_matches_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            block = int_cloud(rng, 10)
            ds = make_ds(block)
            got = kcenter_select(ds, 4, seed=0).indices
            assert got == kcenter_oracle(block, 4)

    def test_radius_within_twice_optimal(self):
        rng = np.random.default_rng(13)
        for _ in range(4):
            block = int_cloud(rng, 10, dim=2)
            ds = make_ds(block)
            spc = 3
            greedy = covering_radius(block, kcenter_select(ds, spc, 0).indices)
            best = min(
                covering_radius(block, s)
                for s in combinations(range(len(block)), spc)
            )
            assert greedy <= 2 * best + 1e-9

    def test_seed_independent(self):
        rng = np.random.default_rng(6)
        ds = make_ds(int_cloud(rng, 9))
        assert kcenter_select(ds, 3, 0).indices == kcenter_select(ds, 3, 99).indices


def herding_oracle(x, spc):
    x = x.astype(np.float64)
    mu = x.mean(axis=0)
    chosen = []
    for _ in range(spc):
        best, best_e = None, None
        for i in range(len(x)):
            if i in chosen:
                continue
            m = x[chosen + [i]].sum(axis=0) / (len(chosen) + 1)
            e = float(np.linalg.norm(m - mu))
            if best_e is None or e < best_e:
                best, best_e = i, e
        chosen.append(best)
    return chosen


class TestHerding:
    def test_first_pick_nearest_mean(self):
        rng = np.random.default_rng(21)
        block = int_cloud(rng, 9)
        ds = make_ds(block)
        flat = block.astype(np.float64)
        mean = flat.mean(axis=0)
        expected = min(
            range(9), key=lambda i: (float(np.linalg.norm(flat[i] - mean)), i)
        )
        assert herding_select(ds, 1, 0).indices == [expected]

    def test_exact_mean_member(self):
        ds = make_ds([[0.0, 0.0], [2.0, 0.0], [1.0, 0.0]])
        res = herding_select(ds, 1, 0)
        assert [list(ds.samples[i]) for i in res.indices] == [[1.0, 0.0]]

    def test_greedy_trace_matches_oracle(self):
        rng = np.random.default_rng(31)
        for _ in range(5):
            block = int_cloud(rng, 10)
            ds = make_ds(block)
            assert herding_select(ds, 5, 0).indices == herding_oracle(block, 5)

    def test_mean_error_envelope(self):
        # greedy mean error is not monotone step to step (a forced pick after
        # an exact hit must raise it), but it always sits under the
        # telescoping bound err_k <= (n - k) / k * max_i |x_i - mu| and ends
        # at exactly zero when the class is exhausted
        rng = np.random.default_rng(41)
        for _ in range(4):
            block = int_cloud(rng, 12)
            ds = make_ds(block)
            flat = block.astype(np.float64)
            mu = flat.mean(axis=0)
            spread = np.linalg.norm(flat - mu, axis=1).max()
            picks = herding_select(ds, 12, 0).indices
            for k in range(1, 13):
                err = float(np.linalg.norm(flat[picks[:k]].mean(axis=0) - mu))
                assert err <= (12 - k) / k * spread + 1e-9
            assert float(np.linalg.norm(flat[picks].mean(axis=0) - mu)) < 1e-12

    def test_paired_fixture_hits_mean_exactly(self):
        # points come in reflection pairs around the mean, so every even
        # prefix can match it exactly; greedy must find those zeros
        vecs = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
        block = np.concatenate([vecs, -vecs]).astype(np.float32)
        ds = make_ds(block)
        flat = block.astype(np.float64)
        picks = herding_select(ds, 6, 0).indices
        for k in (2, 4, 6):
            assert float(np.linalg.norm(flat[picks[:k]].mean(axis=0))) == 0.0

    def test_seed_independent(self):
        rng = np.random.default_rng(51)
        ds = make_ds(int_cloud(rng, 8))
        assert herding_select(ds, 3, 1).indices == herding_select(ds, 3, 2).indices


class TestAcrossMethods:
    def test_all_valid_on_interleaved_labels(self):
        rng = np.random.default_rng(61)
        ds0 = make_ds(int_cloud(rng, 8), int_cloud(rng, 8), int_cloud(rng, 8))
        perm = rng.permutation(24)
        ds = LabeledDataset(ds0.samples[perm], ds0.labels[perm], ds0.manifest)
        for method in ("random", "kmeans", "kcenter", "herding"):
            res = select(method, ds, 3, seed=5)
            res.validate(ds)
            assert res.method == method

    def test_dispatcher_rejects_unknown(self):
        ds = make_ds(np.zeros((2, 2)))
        with pytest.raises(ValueError, match="method"):
            select("forgetting", ds, 1, 0)

    def test_results_on_csi_fixture(self, csi_splits):
        train, _ = csi_splits
        for method in ("random", "kmeans", "kcenter", "herding"):
            res = select(method, train, 2, seed=17)
            res.validate(train)
