import json
import os

import numpy as np
import pytest

from DcgKit.core import REAL, ClusterTree, DataMatrix, DistanceMatrix, \
    Level, Partition
from DcgKit.read import read_distance, read_matrix, read_newick
from DcgKit.write import ensure_dir, partition_record, tree_record, \
    write_distance, write_energy, write_json, write_matrix, write_newick, \
    write_profile, write_square

FILES = os.path.join(os.path.dirname(__file__), "Files")


def test_write_matrix_coded_with_gaps(tmp_path):
    M = read_matrix(os.path.join(FILES, "letters.csv"))
    path = str(tmp_path / "letters.csv")
    write_matrix(M, path)
    with open(path) as f:
        assert f.read() == (",s1,s2,s3,s4\n"
                            "f1,1,2,,6\n"
                            "f2,5,6,1,\n"
                            "f3,2,2,5,5\n")
    assert read_matrix(path) == M


def test_write_matrix_order(tmp_path):
    M = read_matrix(os.path.join(FILES, "checkerboard.csv"))
    path = str(tmp_path / "permuted.csv")
    write_matrix(M, path, row_order=[1, 0, 2, 3, 4], col_order=[5, 4, 3, 2,
                                                                 1, 0])
    with open(path) as f:
        lines = f.read().splitlines()
    assert lines[0] == ",c5,c4,c3,c2,c1,c0"
    assert lines[1] == "r1,5,2,2,5,2,5"
    assert lines[2] == "r0,1,6,6,1,6,1"
    back = read_matrix(path)
    assert back.row_labels == ("r1", "r0", "r2", "r3", "r4")
    assert np.array_equal(back.values, M.values[[1, 0, 2, 3, 4]][:, ::-1])


def test_write_matrix_real(tmp_path):
    M = DataMatrix([[0.1, 1 / 3], [np.nan, 2.0]], ["a", "b"], ["x", "y"],
                   kind=REAL)
    path = str(tmp_path / "real.csv")
    write_matrix(M, path)
    assert read_matrix(path, kind=REAL) == M


def test_write_distance(tmp_path):
    D = DistanceMatrix([[0, 0.1, 2 / 3], [0.1, 0, 5], [2 / 3, 5, 0]],
                       ["a", "b", "c"])
    path = str(tmp_path / "d.csv")
    write_distance(D, path)
    assert read_distance(path) == D
    write_square(np.eye(2), ["p", "q"], path)
    with open(path) as f:
        assert f.read() == ",p,q\np,1.0,0.0\nq,0.0,1.0\n"


def test_write_profile(tmp_path):
    path = str(tmp_path / "profile.tsv")
    write_profile([0.5, 1.0, 2.0], [3, 2, 1], path, selected=[1])
    with open(path) as f:
        assert f.read() == ("temperature\tcluster_count\tselected\n"
                            "0.5\t3\t0\n"
                            "1.0\t2\t1\n"
                            "2.0\t1\t0\n")


def test_write_energy(tmp_path):
    path = str(tmp_path / "energy.tsv")
    write_energy((0.0, 0.25, np.float64(1 / 3)), "3x2", path)
    with open(path) as f:
        lines = f.read().splitlines()
    assert lines[0] == "3x2"
    assert [float(v) for v in lines[1:]] == [0.0, 0.25, 1 / 3]


def test_write_json(tmp_path):
    path = str(tmp_path / "report.json")
    write_json({"b": np.int64(2), "a": np.array([1.5]),
                "p": Partition([3, 3, 1])}, path)
    with open(path) as f:
        text = f.read()
    assert text.startswith('{\n  "a"')
    assert json.loads(text) == {"a": [1.5], "b": 2, "p": [0, 0, 1]}
    with pytest.raises(TypeError):
        write_json({"x": object()}, path)


def test_records():
    p = Partition([2, 2, 0])
    assert partition_record(p, ["a", "b", "c"]) == \
        {"labels": ["a", "b", "c"], "assignment": [0, 0, 1], "k": 2}
    tree = ClusterTree((Level(3.0, Partition.single(3)),
                        Level(1.0, Partition([0, 0, 1]))), ["a", "b", "c"])
    record = tree_record(tree)
    assert record["newick"] == tree.to_newick()
    assert record["levels"] == [{"height": 3.0, "k": 1},
                                {"height": 1.0, "k": 2}]


def test_write_newick(tmp_path):
    tree = ClusterTree((Level(3.0, Partition.single(4)),
                        Level(1.0, Partition([0, 1, 0, 1]))),
                       ["a", "b", "c", "d"])
    path = str(tmp_path / "tree.nwk")
    write_newick(tree, path)
    back = read_newick(path, leaves=tree.leaves)
    assert back == tree


def test_ensure_dir(tmp_path):
    path = str(tmp_path / "a" / "b")
    assert ensure_dir(path) == path
    assert os.path.isdir(path)
    ensure_dir(path)
