import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from DcgKit.core import BINARY, CODED, REAL, ClusterTree, DataMatrix, \
    DistanceMatrix, Level, Partition, cut_partition, is_ultrametric, \
    pairwise_euclidean, rank_normalize


def matrix(values, kind=REAL):
    values = np.asarray(values, dtype=float)
    m, n = values.shape
    return DataMatrix(values, [f"r{i}" for i in range(m)],
                      [f"c{j}" for j in range(n)], kind=kind)


def three_points(ab, ac, bc):
    return DistanceMatrix([[0, ab, ac], [ab, 0, bc], [ac, bc, 0]],
                          ["a", "b", "c"])


def test_partition_canonical():
    assert Partition([3, 3, 7, 1]) == Partition([0, 0, 1, 2])
    p = Partition([5, 2, 5, 2, 9])
    assert p.assignment == (0, 1, 0, 1, 2)
    assert p.k == 3
    assert p.sizes() == [2, 2, 1]
    assert [c.tolist() for c in p.clusters()] == [[0, 2], [1, 3], [4]]
    with pytest.raises(ValueError):
        Partition([])


def test_partition_refines():
    coarse = Partition([0, 0, 0, 1, 1])
    assert Partition([0, 1, 1, 2, 2]).refines(coarse)
    assert Partition.singletons(5).refines(coarse)
    assert not Partition([0, 0, 1, 1, 1]).refines(coarse)
    assert coarse.refines(Partition.single(5))


def test_data_matrix_checks():
    with pytest.raises(ValueError):
        DataMatrix(np.zeros((2, 2)), ["a", "a"], ["x", "y"])
    with pytest.raises(ValueError):
        DataMatrix(np.zeros((2, 2)), ["a"], ["x", "y"])
    with pytest.raises(ValueError):
        matrix([[0, 2]], kind=BINARY)
    with pytest.raises(ValueError):
        matrix([[1, 3]], kind=CODED)
    M = matrix([[1, np.nan], [5, 6]], kind=CODED)
    assert M.has_gaps
    assert M.gaps.tolist() == [[False, True], [False, False]]
    assert M.transpose().shape == (2, 2)
    assert M.take([1], [1, 0]).values.tolist() == [[6, 5]]


def test_distance_matrix_checks():
    with pytest.raises(ValueError):
        DistanceMatrix([[0, -1], [-1, 0]], ["a", "b"])
    with pytest.raises(ValueError):
        DistanceMatrix([[1, 1], [1, 0]], ["a", "b"])
    with pytest.raises(ValueError):
        DistanceMatrix([[0, 1], [2, 0]], ["a", "b"])
    with pytest.raises(ValueError):
        DistanceMatrix([[0, np.inf], [np.inf, 0]], ["a", "b"])
    D = DistanceMatrix([[0, 1], [1 + 1e-12, 0]], ["a", "b"])
    assert D.d[0, 1] == D.d[1, 0]


def test_rank_normalize():
    M = matrix([[10, 20, 30], [7, 7, 7], [3, 1, 3]])
    out = rank_normalize(M).values
    assert out[0].tolist() == [0.0, 0.5, 1.0]
    assert out[1].tolist() == [0.0, 0.0, 0.0]
    assert out[2].tolist() == [0.75, 0.0, 0.75]
    binary = matrix([[0, 1, 1, 0]], kind=BINARY)
    assert rank_normalize(binary) == binary


def test_rank_normalize_rejects_non_finite():
    M = matrix([[1, 2], [np.nan, 4]])
    with pytest.raises(ValueError, match="r1"):
        rank_normalize(M)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6),
              elements=st.floats(-100, 100, allow_nan=False)))
def test_rank_normalize_idempotent(values):
    once = rank_normalize(matrix(values))
    assert rank_normalize(once) == once


def test_pairwise_euclidean():
    D = pairwise_euclidean(matrix([[0, 0], [3, 4], [3, 4]]))
    assert D.d[0, 1] == 5.0
    assert D.d[1, 2] == 0.0
    with pytest.raises(ValueError):
        pairwise_euclidean(matrix([[1, 2, 3]]))
    with pytest.raises(ValueError):
        pairwise_euclidean(matrix([[1, 2], [3, np.nan]]))
    with pytest.raises(ValueError):
        pairwise_euclidean(matrix([[1, 2], [3, 4]]), axis="diagonal")


def test_pairwise_euclidean_brute_force():
    values = np.array([[1.0, -2.0], [0.5, 4.0], [3.0, 3.0]])
    D = pairwise_euclidean(matrix(values), axis="cols")
    for a, b in itertools.combinations(range(2), 2):
        total = 0.0
        for i in range(3):
            total += (values[i, a] - values[i, b]) ** 2
        assert D.d[a, b] == pytest.approx(total ** 0.5)
    D = pairwise_euclidean(matrix(values))
    for a, b in itertools.combinations(range(3), 2):
        total = sum((values[a, j] - values[b, j]) ** 2 for j in range(2))
        assert D.d[a, b] == pytest.approx(total ** 0.5)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 3),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_pairwise_euclidean_is_distance(values):
    D = pairwise_euclidean(matrix(values))
    assert np.array_equal(D.d, D.d.T)
    assert (np.diag(D.d) == 0).all()
    assert (D.d >= 0).all()


def test_is_ultrametric():
    assert is_ultrametric(three_points(1, 1, 1)) == (True, 0)
    assert is_ultrametric(three_points(1, 2, 2)) == (True, 0)
    assert is_ultrametric(three_points(1, 2, 3), tol=0) == (False, 1)
    assert is_ultrametric(three_points(1, 2, 3), tol=1.5) == (True, 0)
    with pytest.raises(ValueError):
        is_ultrametric(DistanceMatrix([[0, 1], [1, 0]], ["a", "b"]))


def small_tree():
    return ClusterTree((Level(4.0, Partition.single(5)),
                        Level(2.0, Partition([0, 0, 0, 1, 1])),
                        Level(1.0, Partition([0, 0, 1, 2, 3]))),
                       ["a", "b", "c", "d", "e"])


def test_cluster_tree_validation():
    leaves = ["a", "b", "c"]
    with pytest.raises(ValueError):
        ClusterTree((Level(1.0, Partition.single(3)),
                     Level(2.0, Partition([0, 0, 1]))), leaves)
    with pytest.raises(ValueError):
        ClusterTree((Level(2.0, Partition([0, 0, 1])),
                     Level(1.0, Partition([0, 1, 0]))), leaves)
    with pytest.raises(ValueError):
        ClusterTree((Level(2.0, Partition([0, 0, 1])),
                     Level(1.0, Partition([0, 1, 1]))), leaves)
    with pytest.raises(ValueError):
        ClusterTree((), leaves)


def test_cluster_tree_cophenetic():
    tree = small_tree()
    u = tree.cophenetic()
    assert u.d[0, 1] == 1.0
    assert u.d[0, 2] == 2.0
    assert u.d[3, 4] == 2.0
    assert u.d[0, 3] == 4.0
    assert is_ultrametric(u, tol=0) == (True, 0)
    assert tree.branch_counts == [1, 2, 4]
    assert tree.bottom == Partition([0, 0, 1, 2, 3])


def test_leaf_order_keeps_clusters_contiguous():
    tree = ClusterTree((Level(2.0, Partition([0, 1, 0, 1])),
                        Level(1.0, Partition([0, 1, 2, 1]))),
                       ["a", "b", "c", "d"])
    assert tree.leaf_order() == [0, 2, 1, 3]


def test_to_newick():
    tree = small_tree()
    assert tree.to_newick() == \
        "(((a:1.0,b:1.0):1.0,(c:1.0):1.0):2.0,((d:1.0):1.0,(e:1.0):1.0):2.0);"
    flat = ClusterTree.root_only(["x y", "z"])
    assert flat.to_newick() == "('x y':1.0,z:1.0);"


def test_cut_partition():
    tree = small_tree()
    assert cut_partition(tree, 0).k == 1
    assert cut_partition(tree, 2).k == tree.branch_counts[-1]
    with pytest.raises(IndexError):
        cut_partition(tree, 3)
    with pytest.raises(IndexError):
        cut_partition(tree, -1)
