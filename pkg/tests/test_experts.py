import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpoe.errors import InputError, UsageError
from gpoe.experts import (
    EnsembleConfig,
    Strategy,
    build_ball_tree,
    build_local,
    build_sod,
    build_tree,
    fit_subsets,
    local_subset,
    select_local,
    select_sod,
    select_tree,
    substream,
    train_ensemble,
    tree_path_experts,
)
from gpoe.gp_core import OptimizerConfig, gp_fit, predict_many

FAST = OptimizerConfig(max_iter=30, restarts=0)


def data_1d(n, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-3, 3, (n, 1))
    return X, np.sin(2 * X[:, 0]) + 0.1 * rng.standard_normal(n)


def two_clusters(rng, size=50, gap=100.0, D=2):
    a = rng.normal(size=(size, D))
    b = rng.normal(size=(size, D)) + gap
    return np.vstack([a, b])


def check_tree_invariants(tree, n):
    leaves = tree.leaves()
    counts = np.zeros(n, dtype=int)
    for leaf in leaves:
        counts[tree.nodes[leaf].point_indices] += 1
    assert np.all(counts == 1)
    for node in tree.nodes:
        if node.children:
            union = np.concatenate([tree.nodes[c].point_indices for c in node.children])
            assert np.array_equal(np.sort(union), node.point_indices)


def check_covering(tree, X):
    for node in tree.nodes:
        d = np.sqrt(np.sum((X[node.point_indices] - node.center) ** 2, axis=1))
        assert np.all(d <= node.radius * (1 + 1e-12) + 1e-12)


class TestConfig:
    def test_rejects_tiny_subsets(self):
        with pytest.raises(InputError):
            EnsembleConfig(points_per_expert=1)

    def test_rejects_oversized_subsets(self):
        X, y = data_1d(10)
        with pytest.raises(InputError):
            build_sod((X, y), EnsembleConfig(Strategy.SOD, 11, 2))

    def test_strategy_from_string(self):
        assert EnsembleConfig("Tree").strategy is Strategy.TREE

    def test_substreams_are_independent_of_siblings(self):
        a = substream(3, "sod", "subsets").integers(1 << 30, size=5)
        b = substream(3, "sod", "subsets").integers(1 << 30, size=5)
        c = substream(3, "tree", "subsets").integers(1 << 30, size=5)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestSoD:
    def test_cardinality(self):
        subsets = select_sod(1000, EnsembleConfig(Strategy.SOD, 256, 4, seed=1))
        assert len(subsets) == 4
        for s in subsets:
            assert np.unique(s).shape[0] == 256
            assert s.min() >= 0 and s.max() < 1000

    def test_same_seed_same_ensemble(self):
        X, y = data_1d(200)
        cfg = EnsembleConfig(Strategy.SOD, 32, 3, seed=9, optimizer=FAST)
        a = build_sod((X, y), cfg)
        b = build_sod((X, y), cfg)
        for pa, pb in zip(a.provenance, b.provenance):
            assert np.array_equal(pa.subset, pb.subset)
        for ea, eb in zip(a.experts, b.experts):
            assert np.array_equal(ea.hyper.to_vector(), eb.hyper.to_vector())

    def test_single_full_expert_equals_full_gp(self):
        X, y = data_1d(60, seed=3)
        ens = build_sod((X, y), EnsembleConfig(Strategy.SOD, 60, 1, seed=0, optimizer=FAST))
        expert = ens.experts[0]
        full = gp_fit(X, y, expert.hyper)
        Xs = np.linspace(-3, 3, 25)[:, None]
        for got, ref in zip(predict_many(expert, Xs), predict_many(full, Xs)):
            np.testing.assert_allclose(got, ref, atol=1e-10, rtol=0)

    def test_wrong_strategy_is_usage_error(self):
        X, y = data_1d(20)
        with pytest.raises(UsageError):
            build_sod((X, y), EnsembleConfig(Strategy.TREE, 10, 1))


class TestLocal:
    def test_contiguous_window_on_a_line(self):
        X = np.arange(1000.0)[:, None]
        subsets, centers = select_local(X, EnsembleConfig(Strategy.LOCAL, 256, 50, seed=2))
        for s, c in zip(subsets, centers):
            assert c in s
            assert np.all(np.diff(s) == 1)
            assert s[-1] - s[0] == 255

    def test_window_around_centre_500(self):
        X = np.arange(1000.0)[:, None]
        # enumeration: 500 +/- 127 gives 255 points, the tie at 128 goes to index 372
        expected = np.arange(372, 628)
        assert np.array_equal(local_subset(X, 500, 256), expected)

    def test_full_neighbourhood(self):
        X, _ = data_1d(40)
        subsets, _ = select_local(X, EnsembleConfig(Strategy.LOCAL, 40, 5, seed=0))
        for s in subsets:
            assert np.array_equal(s, np.arange(40))

    def test_centres_without_replacement(self):
        X, _ = data_1d(30)
        _, centers = select_local(X, EnsembleConfig(Strategy.LOCAL, 5, 30, seed=4))
        assert sorted(centers) == list(range(30))

    def test_build(self):
        X, y = data_1d(80)
        ens = build_local((X, y), EnsembleConfig(Strategy.LOCAL, 20, 3, seed=0, optimizer=FAST))
        assert len(ens) == 3
        assert all(p.strategy is Strategy.LOCAL for p in ens.provenance)


class TestBallTree:
    def test_single_node(self, rng):
        tree = build_ball_tree(rng.normal(size=(10, 2)), 10)
        assert len(tree.nodes) == 1 and tree.root.is_leaf

    def test_separates_clusters(self, rng):
        X = two_clusters(rng)
        tree = build_ball_tree(X, 64, seed=0)
        left, right = (tree.nodes[c].point_indices for c in tree.root.children)
        groups = {tuple(left), tuple(right)}
        assert groups == {tuple(range(50)), tuple(range(50, 100))}

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            build_ball_tree(np.zeros((0, 2)), 4)

    def test_coincident_points_terminate(self):
        X = np.ones((20, 3))
        tree = build_ball_tree(X, 3)
        check_tree_invariants(tree, 20)
        assert all(len(tree.nodes[i].point_indices) <= 3 for i in tree.leaves())

    def test_leaf_capacity_respected(self, rng):
        X = rng.normal(size=(500, 3))
        tree = build_ball_tree(X, 16, seed=1)
        assert all(tree.nodes[i].point_indices.shape[0] <= 16 for i in tree.leaves())

    def test_breadth_first_ids(self, rng):
        tree = build_ball_tree(rng.normal(size=(300, 2)), 20, seed=0)
        depths = [n.depth for n in tree.nodes]
        assert depths == sorted(depths)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), n=st.integers(1, 400), D=st.integers(1, 6),
           cap=st.integers(1, 40))
    def test_partition_and_covering(self, seed, n, D, cap):
        X = np.random.default_rng(seed).normal(size=(n, D))
        tree = build_ball_tree(X, cap, seed=seed)
        check_tree_invariants(tree, n)
        check_covering(tree, X)


class TestTreeEnsemble:
    def test_depth_one_counts(self):
        X = np.arange(512.0)[:, None]
        y = np.sin(X[:, 0] / 40)
        cfg = EnsembleConfig(Strategy.TREE, 256, 512, seed=0)
        tree, subsets, node_ids = select_tree(X, cfg)
        assert len(tree.nodes) == 3
        assert [s.shape[0] for s in subsets] == [256, 256, 256]
        assert node_ids == [0, 1, 2]
        for s, nid in zip(subsets, node_ids):
            assert set(s) <= set(tree.nodes[nid].point_indices)
        assert y.shape == (512,)

    def test_truncation_and_node_subsets(self, rng):
        X = rng.normal(size=(400, 2))
        tree, subsets, node_ids = select_tree(X, EnsembleConfig(Strategy.TREE, 30, 7, seed=3))
        assert len(subsets) == 7 and node_ids == list(range(7))
        for s, nid in zip(subsets, node_ids):
            node = tree.nodes[nid]
            assert s.shape[0] == min(30, node.point_indices.shape[0])
            assert np.all(np.isin(s, node.point_indices))

    def test_deterministic(self, rng):
        X = rng.normal(size=(300, 2))
        cfg = EnsembleConfig(Strategy.TREE, 40, 10, seed=5)
        t1, s1, _ = select_tree(X, cfg)
        t2, s2, _ = select_tree(X, cfg)
        assert all(np.array_equal(a.point_indices, b.point_indices)
                   for a, b in zip(t1.nodes, t2.nodes))
        assert all(np.array_equal(a, b) for a, b in zip(s1, s2))

    def test_fewer_nodes_than_requested(self, rng):
        X = rng.normal(size=(50, 1))
        y = rng.normal(size=50)
        ens = build_tree((X, y), EnsembleConfig(Strategy.TREE, 30, 100, seed=0, optimizer=FAST))
        assert len(ens) == len(ens.tree.nodes) == 3

    def test_path_experts(self, rng):
        X = two_clusters(rng, size=40, gap=50.0, D=1)
        y = np.sin(X[:, 0])
        ens = build_tree((X, y), EnsembleConfig(Strategy.TREE, 40, 3, seed=0, optimizer=FAST))
        left = ens.tree.root.children[0]
        left_is_a = 0 in ens.tree.nodes[left].point_indices
        x = X[0] if left_is_a else X[-1]
        assert tree_path_experts(ens, x) == [0, 1]

    def test_path_length_is_depth_plus_one(self, rng):
        X = rng.normal(size=(200, 2))
        ens = build_tree((X, np.zeros(200)),
                         EnsembleConfig(Strategy.TREE, 25, 1000, seed=0,
                                        optimizer=OptimizerConfig(max_iter=3, restarts=0)))
        for x in rng.normal(size=(10, 2)):
            path = ens.tree.path_to_leaf(x)
            assert len(tree_path_experts(ens, x)) == ens.tree.nodes[path[-1]].depth + 1

    def test_depth_zero_tree(self, rng):
        X = rng.normal(size=(20, 1))
        ens = build_tree((X, rng.normal(size=20)),
                         EnsembleConfig(Strategy.TREE, 20, 4, seed=0, optimizer=FAST))
        assert tree_path_experts(ens, [0.0]) == [0]

    def test_path_on_non_tree_is_usage_error(self):
        X, y = data_1d(30)
        ens = build_sod((X, y), EnsembleConfig(Strategy.SOD, 10, 1, optimizer=FAST))
        with pytest.raises(UsageError):
            tree_path_experts(ens, [0.0])


class TestTraining:
    def test_parallelism_invariance(self):
        X, y = data_1d(300, seed=8)
        cfg = EnsembleConfig(Strategy.SOD, 40, 8, seed=11)
        serial = train_ensemble((X, y), cfg, parallelism=1)
        parallel = train_ensemble((X, y), cfg, parallelism=8)
        for a, b in zip(serial.experts, parallel.experts):
            assert np.array_equal(a.hyper.to_vector(), b.hyper.to_vector())
            assert np.array_equal(a.weight_vector, b.weight_vector)

    def test_failed_expert_is_recorded(self):
        X, y = data_1d(400, seed=1)
        cfg = EnsembleConfig(Strategy.SOD, 25, 16, seed=0, optimizer=FAST)
        subsets = [np.arange(25 * i, 25 * (i + 1)) for i in range(16)]
        y = y.copy()
        y[subsets[5][3]] = np.nan
        ens = fit_subsets(X, y, subsets, cfg)
        assert len(ens) == 15
        assert len(ens.failures) == 1 and ens.failures[0].index == 5
        assert "non-finite targets" in ens.failures[0].reason
        assert 5 not in [p.index for p in ens.provenance]

    def test_sixteen_experts_under_a_minute(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-2, 2, (4096, 2))
        y = np.sin(3 * X[:, 0]) * np.cos(2 * X[:, 1]) + 0.1 * rng.standard_normal(4096)
        y = (y - y.mean()) / y.std()
        t0 = time.perf_counter()
        ens = train_ensemble((X, y), EnsembleConfig(Strategy.SOD, 256, 16, seed=0))
        elapsed = time.perf_counter() - t0
        assert len(ens) == 16
        assert elapsed < 60.0
