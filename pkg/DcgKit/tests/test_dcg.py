import logging
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from DcgKit.core import DistanceMatrix, Partition, is_ultrametric, \
    pairwise_euclidean, DataMatrix
from DcgKit.dcg import DcgConfig, SharingMatrix, SimilarityMatrix, \
    TemperatureProfile, WalkError, WalkParams, composition, dcg_run, \
    dcg_tree, eigen_cluster_count, jacobi_eigenvalues, profile, \
    select_indices, select_temperatures, sharing_ensemble, similarity, \
    spikes, synthesize_tree, transition, walk_partition
from DcgKit.util import derive_seed

ABCD = ["a", "b", "c", "d"]


def two_pairs():
    d = np.full((4, 4), 10.0)
    d[0, 1] = d[1, 0] = d[2, 3] = d[3, 2] = 0.1
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(d, ABCD)


def exchangeable(n=4):
    return DistanceMatrix(np.ones((n, n)) - np.eye(n),
                          [f"x{i}" for i in range(n)])


def block_sharing(sizes):
    n = sum(sizes)
    q = np.zeros((n, n))
    start = 0
    for size in sizes:
        q[start:start + size, start:start + size] = 1.0
        start += size
    return SharingMatrix(q, 1)


def planted(per_cluster=10, seed=1, spread=0.05):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [5.0, 8.66]])
    points = np.vstack([c + rng.normal(0, spread, size=(per_cluster, 2))
                        for c in centers])
    labels = [f"p{i}" for i in range(len(points))]
    M = DataMatrix(points, labels, ["x", "y"])
    truth = Partition(np.repeat(np.arange(3), per_cluster).tolist())
    return pairwise_euclidean(M), truth


def test_similarity():
    D = DistanceMatrix([[0, 2], [2, 0]], ["a", "b"])
    S = similarity(D, 2.0)
    assert S.s[0, 0] == 1.0
    assert S.s[0, 1] == pytest.approx(math.exp(-1))
    with pytest.raises(ValueError):
        similarity(D, 0.0)


def test_similarity_elementwise():
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 5, size=(5, 5))
    D = DistanceMatrix(np.triu(x, 1) + np.triu(x, 1).T,
                       [str(i) for i in range(5)])
    S = similarity(D, 1.7)
    for i in range(5):
        for j in range(5):
            assert S.s[i, j] == pytest.approx(math.exp(-D.d[i, j] / 1.7))


def test_transition():
    P = transition(SimilarityMatrix(np.array([[1, 0.5], [0.5, 1]]), 1.0))
    assert P.p == pytest.approx(np.array([[2 / 3, 1 / 3], [1 / 3, 2 / 3]]))
    P = transition(SimilarityMatrix(np.ones((4, 4)), 1.0))
    assert (P.p == 0.25).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 100))
def test_transition_rows_sum_to_one(seed, T):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 20, size=(6, 6))
    D = DistanceMatrix(np.triu(x, 1) + np.triu(x, 1).T,
                       [str(i) for i in range(6)])
    P = transition(similarity(D, T))
    assert np.abs(P.p.sum(axis=1) - 1).max() <= 1e-12
    assert (P.p >= 0).all()


def test_walk_single_node():
    P = transition(similarity(DistanceMatrix([[0.0]], ["a"]), 1.0))
    partition, removals = walk_partition(P, seed=5)
    assert partition == Partition((0,))
    assert removals == []


def test_walk_two_pairs():
    P = transition(similarity(two_pairs(), 0.5))
    for seed in range(200):
        partition, removals = walk_partition(P, seed=seed)
        assert partition == Partition([0, 0, 1, 1])
        assert [step for step, _ in removals] == [10, 11, 22, 23]


def test_walk_exchangeable_points():
    P = transition(similarity(exchangeable(), 0.1))
    together = sum(walk_partition(P, seed=seed)[0].k == 1
                   for seed in range(200))
    assert together >= 190


def test_walk_length():
    params = WalkParams(visit_threshold=3)
    D, _ = planted(per_cluster=4)
    P = transition(similarity(D, 1.0))
    partition, removals = walk_partition(P, params, seed=11)
    assert sorted(node for _, node in removals) == list(range(12))
    assert removals[-1][0] == 12 * 4 - 1
    assert partition.n == 12


def test_walk_step_cap():
    P = transition(similarity(two_pairs(), 0.5))
    with pytest.raises(WalkError) as e:
        walk_partition(P, WalkParams(max_steps=10), seed=0)
    assert len(e.value.removals) == 1


def test_walk_params_checks():
    with pytest.raises(ValueError):
        WalkParams(visit_threshold=0)
    with pytest.raises(ValueError):
        WalkParams(spike_factor=0.5)


def test_sharing_single_trajectory():
    D = two_pairs()
    Q = sharing_ensemble(D, 0.5, m_traj=1, seed=4)
    partition, _ = walk_partition(transition(similarity(D, 0.5)),
                                  seed=derive_seed(4, 0))
    assert np.array_equal(Q.q, partition.co_membership().astype(float))


def test_sharing_two_pairs():
    Q = sharing_ensemble(two_pairs(), 0.5, m_traj=200, seed=0)
    assert Q.q[0, 1] >= 0.95
    assert Q.q[0, 2] <= 0.05
    assert np.array_equal(Q.q, Q.q.T)
    assert (np.diag(Q.q) == 1).all()
    assert Q.m_traj == 200 and Q.failed == 0


def test_sharing_independent_of_workers():
    D, _ = planted(per_cluster=4)
    one = sharing_ensemble(D, 2.0, m_traj=20, seed=9, workers=1)
    many = sharing_ensemble(D, 2.0, m_traj=20, seed=9, workers=4)
    assert np.array_equal(one.q, many.q)


def test_sharing_all_trajectories_fail():
    with pytest.raises(WalkError):
        sharing_ensemble(two_pairs(), 0.5, m_traj=3,
                         params=WalkParams(max_steps=2))


def test_jacobi_matches_eigvalsh():
    rng = np.random.default_rng(8)
    for n in (2, 5, 9):
        x = rng.normal(size=(n, n))
        a = x + x.T
        expected = np.sort(np.linalg.eigvalsh(a))[::-1]
        assert jacobi_eigenvalues(a) == pytest.approx(expected, abs=1e-8)


def test_jacobi_two_blocks():
    eig = jacobi_eigenvalues(block_sharing([2, 3]).q)
    assert eig == pytest.approx([3, 2, 0, 0, 0], abs=1e-9)


def test_jacobi_converges_on_sharing_matrix(caplog):
    D, _ = planted(per_cluster=6)
    Q = sharing_ensemble(D, 2.0, m_traj=30, seed=5)
    with caplog.at_level(logging.WARNING, logger="DcgKit.dcg"):
        eig = jacobi_eigenvalues(Q.q)
    assert "no convergence" not in caplog.text
    expected = np.sort(np.linalg.eigvalsh(Q.q))[::-1]
    assert eig == pytest.approx(expected, abs=1e-8)


def test_jacobi_tiny_off_diagonal():
    a = np.array([[1.0, 1e-160, 0.5], [1e-160, 2.0, 0.0], [0.5, 0.0, 3.0]])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        eig = jacobi_eigenvalues(a)
    expected = np.sort(np.linalg.eigvalsh(a))[::-1]
    assert eig == pytest.approx(expected, abs=1e-12)


def test_spikes():
    assert spikes([1, 11, 1], 5.0).tolist() == [False, True, False]
    assert spikes([1, 2, 1, 1, 2, 30, 1, 1], 5.0).tolist() == \
        [False] * 5 + [True, False, False]
    # gaps shrinking as a near-uniform walk drains
    assert not spikes([12, 30, 9, 7, 5, 4, 3, 2, 2, 1, 1], 5.0).any()
    assert not spikes([40, 1, 1, 1], 5.0).any()
    assert not spikes([1, 9], 5.0).any()
    assert spikes([], 5.0).size == 0


def test_eigen_cluster_count():
    assert eigen_cluster_count(block_sharing([2, 3])) == 2
    assert eigen_cluster_count(SharingMatrix(np.eye(4), 1)) == 4
    assert eigen_cluster_count(SharingMatrix(np.ones((5, 5)), 1)) == 1
    with pytest.raises(ValueError):
        eigen_cluster_count(SharingMatrix(np.array([[1, 0.5], [0.2, 1]]), 1))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=6))
def test_eigen_count_of_blocks(sizes):
    assert eigen_cluster_count(block_sharing(sizes)) == len(sizes)


def test_composition():
    Q = block_sharing([2, 2])
    assert composition(Q, 2) == Partition([0, 0, 1, 1])
    assert composition(Q, 1) == Partition.single(4)
    assert composition(Q, 4) == Partition.singletons(4)
    with pytest.raises(ValueError):
        composition(Q, 5)


def test_select_indices():
    assert sorted(select_indices([5, 5, 5, 3, 3, 3, 3, 1, 1], 3)) == [1, 4]
    assert select_indices([5, 5, 5, 3, 3, 3, 3, 1, 1], 3) == [4, 1]
    assert select_indices([1] * 6, 3) == []
    assert select_indices([2, 2, 2], 3) == [1]
    # the hotter of two runs with the same count wins
    assert select_indices([2, 2, 2, 4, 2, 2, 2, 2], 3) == [5]
    assert select_indices([3, 3, 2, 2], 1) == [2, 0]


def hand_profile(counts, sharing):
    grid = tuple(float(g) for g in range(1, len(counts) + 1))
    return TemperatureProfile(grid, tuple(counts), tuple(sharing))


def test_synthesize_tree():
    singles, pairs, ones = (SharingMatrix(np.eye(4), 1), block_sharing([2, 2]),
                            SharingMatrix(np.ones((4, 4)), 1))
    prof = hand_profile([4, 4, 4, 2, 2, 2, 1],
                        [singles] * 3 + [pairs] * 3 + [ones])
    tree, prof = synthesize_tree(prof, ABCD)
    assert [s.index for s in prof.selected] == [4, 1]
    assert select_temperatures(prof) == [5.0, 2.0]
    assert tree.branch_counts == [1, 2, 4]
    assert tree.heights == [10.0, 5.0, 2.0]
    assert tree.levels[1].partition == Partition([0, 0, 1, 1])
    assert is_ultrametric(tree.cophenetic(), tol=0)[0]


def test_synthesize_tree_plurality_nesting():
    # colder composition {a} {b, c} {d}, hotter {a, b} {c, d}
    q = np.eye(4)
    q[1:3, 1:3] = 1.0
    fine = SharingMatrix(q, 1)
    coarse = block_sharing([2, 2])
    prof = hand_profile([3, 3, 3, 2, 2, 2], [fine] * 3 + [coarse] * 3)
    tree, _ = synthesize_tree(prof, ABCD)
    assert tree.bottom == Partition([0, 1, 1, 2])
    # {b, c} is split evenly and joins the lower coarse id
    assert tree.levels[1].partition == Partition([0, 0, 0, 1])
    assert tree.branch_counts == [1, 2, 3]


def test_synthesize_tree_empty_selection():
    prof = hand_profile([1, 1, 1], [SharingMatrix(np.ones((4, 4)), 1)] * 3)
    tree, prof = synthesize_tree(prof, ABCD)
    assert prof.selected == ()
    assert tree.branch_counts == [1]


def test_profile_identical_points():
    D = DistanceMatrix(np.zeros((2, 2)), ["a", "b"])
    prof = profile(D, [0.5, 1.0, 2.0], m_traj=5)
    assert prof.counts == (1, 1, 1)


def test_profile_near_uniform_walk_is_one_cluster():
    D, _ = planted(per_cluster=4)
    d_max = float(D.d.max())
    grid = [100 * d_max, 150 * d_max, 200 * d_max]
    assert all(math.exp(-d_max / T) >= 0.99 for T in grid)
    prof = profile(D, grid, m_traj=40, seed=1)
    assert prof.counts == (1, 1, 1)


def test_dcg_zero_distances():
    result = dcg_run(DistanceMatrix(np.zeros((3, 3)), ["a", "b", "c"]))
    assert result.empty_selection
    assert result.tree.branch_counts == [1]


def test_dcg_exchangeable_cloud():
    config = DcgConfig(grid=(0.5, 1.0, 2.0, 4.0), m_traj=50)
    result = dcg_run(exchangeable(), config, seed=2)
    assert result.empty_selection
    assert result.tree.n_levels == 1


def test_dcg_planted_clusters():
    D, truth = planted()
    grid = np.linspace(0.4, 1.0, 7)
    tree = dcg_tree(D, grid=grid, m_traj=40, seed=7)
    assert tree.bottom == truth
    assert tree.branch_counts == [1, 3]
    assert is_ultrametric(tree.cophenetic(), tol=0)[0]


def test_dcg_deterministic_and_scale_free():
    D, _ = planted(per_cluster=5)
    grid = np.linspace(0.4, 1.0, 5)
    first = dcg_tree(D, grid=grid, m_traj=20, seed=3)
    assert dcg_tree(D, grid=grid, m_traj=20, seed=3) == first
    scaled = dcg_tree(D.scaled(2.0), grid=grid * 2, m_traj=20, seed=3)
    assert [lv.partition for lv in scaled.levels] == \
        [lv.partition for lv in first.levels]
    assert scaled.heights == pytest.approx([2 * h for h in first.heights])


@pytest.mark.slow
def test_dcg_random_clouds_are_ultrametric():
    rng = np.random.default_rng(2024)
    config = DcgConfig(m_traj=10, grid_points=8)
    for run in range(50):
        n = int(rng.integers(3, 41))
        points = rng.uniform(0, 10, size=(n, 2))
        M = DataMatrix(points, [f"p{i}" for i in range(n)], ["x", "y"])
        result = dcg_run(pairwise_euclidean(M), config, seed=run)
        assert is_ultrametric(result.tree.cophenetic(), tol=0)[0]


@pytest.mark.slow
def test_dcg_planted_clusters_default_grid():
    D, truth = planted(per_cluster=20, spread=0.5)
    result = dcg_run(D, DcgConfig(), seed=7)
    assert 3 in result.profile.counts
    assert result.tree.bottom == truth


@pytest.mark.slow
def test_dcg_zoo():
    from DcgKit import ZOO
    from DcgKit.read import read_matrix
    M = read_matrix(ZOO)
    result = dcg_run(pairwise_euclidean(M), DcgConfig(), seed=0)
    tree = result.tree
    assert tree.n_levels >= 4
    counts = tree.branch_counts
    assert all(a < b for a, b in zip(counts, counts[1:]))
    two = [lv.partition for lv in tree.levels if lv.partition.k == 2]
    assert two
    assert min(two[0].sizes()) < 30
    assert is_ultrametric(tree.cophenetic(), tol=0)[0]
