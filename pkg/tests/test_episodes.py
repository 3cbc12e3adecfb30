import numpy as np
import pytest

from metaconf import episodes, model
from metaconf.data import Dataset
from metaconf.episodes import EpochPools, round_half_up
from metaconf.errors import ConfigError


def make_dataset(n, d=2, correct_rate=0.5, seed=0):
    """Regression dataset with an exactly controllable correct count."""
    rng = np.random.default_rng(seed)
    gt = np.full(n, 10.0)
    pred = np.full(n, 10.0)
    n_wrong = n - int(round(correct_rate * n))
    wrong = rng.choice(n, size=n_wrong, replace=False)
    pred[wrong] = 20.0  # relative difference 1.0 => incorrect
    return Dataset(inputs=rng.normal(size=(n, d)), task_pred=pred, ground_truth=gt)


class ForcedUniform:
    """Delegating rng whose uniform() returns a fixed value."""

    def __init__(self, rng, value):
        self._rng = rng
        self._value = value

    def uniform(self, lo, hi):
        return self._value

    def __getattr__(self, name):
        return getattr(self._rng, name)


class TestRounding:
    def test_half_always_rounds_up(self):
        assert round_half_up(7.5) == 8
        assert round_half_up(6.5) == 7  # not banker's rounding
        assert round_half_up(7.4) == 7
        assert round_half_up(0.0) == 0


class TestEpochSplit:
    def test_partitions_exactly(self):
        a, b = episodes.epoch_split(10, 2, np.random.default_rng(0))
        assert len(a) == 5 and len(b) == 5
        assert sorted(np.concatenate([a, b])) == list(range(10))

    def test_odd_size_differs_by_one(self):
        a, b = episodes.epoch_split(11, 2, np.random.default_rng(0))
        assert {len(a), len(b)} == {6, 5}

    def test_deterministic_per_seed(self):
        a1, b1 = episodes.epoch_split(100, 4, np.random.default_rng(7))
        a2, b2 = episodes.epoch_split(100, 4, np.random.default_rng(7))
        assert np.array_equal(a1, a2) and np.array_equal(b1, b2)

    def test_each_index_lands_evenly(self):
        # each index should land in the first half ~500/1000 times, +- 3 sigma
        counts = np.zeros(100)
        for s in range(1000):
            a, _ = episodes.epoch_split(100, 2, np.random.default_rng(s))
            counts[a] += 1
        sigma = np.sqrt(1000 * 0.25)
        assert np.all(np.abs(counts - 500) <= 3 * sigma)

    def test_too_small_rejected(self):
        with pytest.raises(ConfigError):
            episodes.epoch_split(7, 4, np.random.default_rng(0))


class TestSplitCorrectnessPools:
    def test_sizes_round_half_up(self):
        ds = make_dataset(20)
        half = np.arange(10)
        vtr, vte = episodes.split_correctness_pools(
            ds, half, 0.6, np.random.default_rng(0)
        )
        assert len(vtr) == 6 and len(vte) == 4
        assert sorted(np.concatenate([vtr, vte])) == list(range(10))

    def test_labels_cached_after_split(self):
        ds = make_dataset(20, correct_rate=1.0)
        episodes.split_correctness_pools(ds, np.arange(10), 0.6, np.random.default_rng(0))
        assert ds._correctness is not None
        assert np.all(ds.correctness() == 1)

    def test_realized_rate_tracks_pool_rate(self):
        # sampling without replacement: vte pool rate stays within 3 hypergeometric sigmas
        ds = make_dataset(1000, correct_rate=0.7, seed=3)
        half = np.arange(1000)
        rate = ds.correctness().mean()
        for s in range(20):
            _, vte = episodes.split_correctness_pools(ds, half, 0.6, np.random.default_rng(s))
            k, n = len(vte), 1000
            sigma = np.sqrt(k * rate * (1 - rate) * (n - k) / (n - 1)) / k
            assert abs(ds.correctness()[vte].mean() - rate) <= 3 * sigma

    def test_degenerate_fraction_rejected(self):
        ds = make_dataset(4)
        with pytest.raises(ConfigError):
            episodes.split_correctness_pools(ds, np.arange(2), 0.1, np.random.default_rng(0))


class TestLabelEpisode:
    def _pools(self, ds, fraction=0.6, seed=0):
        half = np.arange(len(ds))
        return episodes.split_correctness_pools(
            ds, half, fraction, np.random.default_rng(seed)
        )

    def test_zero_percentage_gives_all_incorrect(self):
        ds = make_dataset(200, correct_rate=0.5)
        vtr_pool, vte_pool = self._pools(ds)
        rng = ForcedUniform(np.random.default_rng(1), 0.0)
        ep = episodes.build_label_episode(ds, vtr_pool, vte_pool, 10, rng)
        assert np.all(ds.correctness()[ep.vte] == 0)
        assert ep.provenance.realized_positive == 0

    def test_full_percentage_gives_all_correct(self):
        ds = make_dataset(200, correct_rate=0.5)
        vtr_pool, vte_pool = self._pools(ds)
        rng = ForcedUniform(np.random.default_rng(1), 1.0)
        ep = episodes.build_label_episode(ds, vtr_pool, vte_pool, 10, rng)
        assert np.all(ds.correctness()[ep.vte] == 1)

    def test_rounding_rule_37_percent(self):
        # round(0.37 * 20) = round(7.4) = 7 correct, 13 incorrect
        ds = make_dataset(400, correct_rate=0.5)
        vtr_pool, vte_pool = self._pools(ds)
        rng = ForcedUniform(np.random.default_rng(2), 0.37)
        ep = episodes.build_label_episode(ds, vtr_pool, vte_pool, 20, rng)
        labels = ds.correctness()[ep.vte]
        assert labels.sum() == 7
        assert len(labels) == 20
        assert ep.provenance.target_positive == 7

    def test_vtr_is_sample_without_replacement_from_pool(self):
        ds = make_dataset(100)
        vtr_pool, vte_pool = self._pools(ds)
        ep = episodes.build_label_episode(
            ds, vtr_pool, vte_pool, 16, np.random.default_rng(3)
        )
        assert len(np.unique(ep.vtr)) == 16
        assert set(ep.vtr) <= set(vtr_pool)

    def test_single_class_pool_still_returns_episode(self):
        ds = make_dataset(100, correct_rate=1.0)
        vtr_pool, vte_pool = self._pools(ds)
        rng = ForcedUniform(np.random.default_rng(4), 0.1)
        ep = episodes.build_label_episode(ds, vtr_pool, vte_pool, 10, rng)
        assert ep.provenance.target_positive == 1
        assert ep.provenance.realized_positive == 10  # shortfall filled from C=1
        assert ep.provenance.realized_fraction == 1.0

    def test_oversized_batch_rejected(self):
        ds = make_dataset(20)
        vtr_pool, vte_pool = self._pools(ds)
        with pytest.raises(ConfigError):
            episodes.build_label_episode(ds, vtr_pool, vte_pool, 50, np.random.default_rng(0))


def wcss(x, assignments, n_clusters):
    total = 0.0
    for k in range(n_clusters):
        members = x[assignments == k]
        if len(members):
            total += ((members - members.mean(axis=0)) ** 2).sum()
    return total


def is_nearest_centroid_assignment(x, assignments, centroids):
    dists = np.sum((x[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    own = dists[np.arange(len(x)), assignments]
    return np.all(own <= dists.min(axis=1) + 1e-12)


class TestKmeans:
    def test_single_cluster_is_mean(self):
        x = np.random.default_rng(0).normal(size=(12, 3))
        assign, centroids = episodes.kmeans(x, 1, np.random.default_rng(1))
        assert np.all(assign == 0)
        assert np.allclose(centroids[0], x.mean(axis=0))

    def test_two_far_blobs_recovered(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(20, 2)) * 0.1
        b = rng.normal(size=(20, 2)) * 0.1 + 100.0
        x = np.vstack([a, b])
        assign, _ = episodes.kmeans(x, 2, np.random.default_rng(3))
        assert len(np.unique(assign[:20])) == 1
        assert len(np.unique(assign[20:])) == 1
        assert assign[0] != assign[20]

    def test_beats_random_assignments(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(8, 2)) * 3
        assign, _ = episodes.kmeans(x, 2, np.random.default_rng(5))
        got = wcss(x, assign, 2)
        best_random = min(
            wcss(x, np.random.default_rng(1000 + t).integers(0, 2, size=8), 2)
            for t in range(1000)
        )
        assert got <= best_random + 1e-9

    def test_output_is_nearest_centroid_fixed_point(self):
        rng = np.random.default_rng(6)
        for trial in range(20):
            x = rng.normal(size=(30, 4))
            assign, centroids = episodes.kmeans(x, 5, np.random.default_rng(trial))
            assert is_nearest_centroid_assignment(x, assign, centroids)
            assert len(np.unique(assign)) >= 1

    def test_deterministic_per_seed(self):
        x = np.random.default_rng(7).normal(size=(40, 3))
        a1, c1 = episodes.kmeans(x, 4, np.random.default_rng(9))
        a2, c2 = episodes.kmeans(x, 4, np.random.default_rng(9))
        assert np.array_equal(a1, a2) and np.array_equal(c1, c2)

    def test_too_few_vectors_rejected(self):
        with pytest.raises(ConfigError):
            episodes.kmeans(np.zeros((2, 2)), 3, np.random.default_rng(0))


class TestClusterInputPool:
    def _net(self, input_dim=2):
        arch = model.Architecture(input_dim=input_dim, hidden_dims=(8, 8))
        params = model.init_params(arch, np.random.default_rng(0))
        return arch, params

    def test_identical_inputs_still_select(self):
        arch, params = self._net()
        ds = Dataset(
            inputs=np.ones((30, 2)), task_pred=np.ones(30), ground_truth=np.ones(30)
        )
        assign, chosen = episodes.cluster_input_pool(
            ds, np.arange(30), params, arch, 4, np.random.default_rng(1)
        )
        assert chosen in np.unique(assign)

    def test_blob_pool_selected_cluster_is_one_blob(self):
        arch, params = self._net()
        rng = np.random.default_rng(2)
        centers = np.array([[6, 0], [-6, 0], [0, 6], [0, -6], [5, 5], [-5, -5]], dtype=float)
        inputs = np.vstack([c + rng.normal(size=(15, 2)) * 0.05 for c in centers])
        ds = Dataset(inputs=inputs, task_pred=np.ones(90), ground_truth=np.ones(90))
        blob_of = np.repeat(np.arange(6), 15)
        assign, chosen = episodes.cluster_input_pool(
            ds, np.arange(90), params, arch, 6, np.random.default_rng(3)
        )
        members = blob_of[assign == chosen]
        assert len(members) > 0
        purity = np.max(np.bincount(members, minlength=6)) / len(members)
        assert purity >= 0.95

    def test_deterministic(self):
        arch, params = self._net()
        rng = np.random.default_rng(4)
        ds = Dataset(
            inputs=rng.normal(size=(50, 2)),
            task_pred=np.ones(50),
            ground_truth=np.ones(50),
        )
        out1 = episodes.cluster_input_pool(
            ds, np.arange(50), params, arch, 3, np.random.default_rng(5)
        )
        out2 = episodes.cluster_input_pool(
            ds, np.arange(50), params, arch, 3, np.random.default_rng(5)
        )
        assert np.array_equal(out1[0], out2[0]) and out1[1] == out2[1]


class TestInputEpisode:
    def _pools(self, n, assignments, chosen):
        return EpochPools(
            label_half=np.arange(0),
            input_half=np.arange(n),
            label_vtr_pool=np.arange(0),
            label_vte_pool=np.arange(0),
            input_cluster_ids=np.asarray(assignments),
            train_cluster=chosen,
        )

    def _dataset(self, n):
        rng = np.random.default_rng(0)
        return Dataset(
            inputs=rng.normal(size=(n, 2)), task_pred=np.ones(n), ground_truth=np.ones(n)
        )

    def test_two_clusters_force_the_other(self):
        ds = self._dataset(20)
        pools = self._pools(20, [0] * 10 + [1] * 10, 0)
        ep = episodes.build_input_episode(ds, pools, 5, np.random.default_rng(1))
        assert ep.provenance.test_cluster == 1
        assert set(ep.vte) <= set(range(10, 20))

    def test_clusters_always_differ(self):
        ds = self._dataset(60)
        pools = self._pools(60, np.arange(60) % 4, 2)
        for s in range(1000):
            ep = episodes.build_input_episode(ds, pools, 6, np.random.default_rng(s))
            assert ep.provenance.train_cluster != ep.provenance.test_cluster

    def test_small_test_cluster_uses_replacement(self):
        ds = self._dataset(20)
        assignments = [0] * 17 + [1] * 3
        pools = self._pools(20, assignments, 0)
        ep = episodes.build_input_episode(ds, pools, 8, np.random.default_rng(2))
        assert ep.provenance.vte_with_replacement
        assert len(ep.vte) == 8
        assert set(ep.vte) <= {17, 18, 19}

    def test_no_other_cluster_rejected(self):
        ds = self._dataset(10)
        pools = self._pools(10, [0] * 10, 0)
        with pytest.raises(ConfigError):
            episodes.build_input_episode(ds, pools, 4, np.random.default_rng(3))
