import json
import logging
import os
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from DcgKit.core import REAL, ClusterTree, DataMatrix, DistanceMatrix, \
    Partition

logger = logging.getLogger(__name__)


def _cell(value: float, integral: bool) -> str:
    if np.isnan(value):
        return ""
    if integral:
        return str(int(value))
    return repr(float(value))


def _write_frame(cells, row_labels, col_labels, path: str):
    frame = pd.DataFrame(cells, index=list(row_labels),
                         columns=list(col_labels))
    frame.to_csv(path, index_label="", lineterminator="\n")
    logger.debug("wrote %s", path)


def write_matrix(M: DataMatrix, path: str,
                 row_order: Optional[Sequence[int]] = None,
                 col_order: Optional[Sequence[int]] = None):
    """
    Write a data matrix as CSV, optionally permuted. Gaps are empty cells,
    coded values are written as integers and real values at full precision.
    """
    if row_order is not None or col_order is not None:
        M = M.take(range(M.shape[0]) if row_order is None else row_order,
                   range(M.shape[1]) if col_order is None else col_order)
    integral = M.kind != REAL
    cells = [[_cell(v, integral) for v in row] for row in M.values]
    _write_frame(cells, M.row_labels, M.col_labels, path)


def write_square(values: np.ndarray, labels: Sequence[str], path: str):
    """Square labelled matrix (distances or similarities) as CSV"""
    cells = [[repr(float(v)) for v in row] for row in np.asarray(values)]
    _write_frame(cells, labels, labels, path)


def write_distance(D: DistanceMatrix, path: str):
    write_square(D.d, D.labels, path)


def write_newick(tree, path: str):
    """Newick text of a ClusterTree or Dendrogram"""
    with open(path, "w") as f:
        f.write(tree.to_newick() + "\n")


def write_profile(grid: Sequence[float], counts: Sequence[int], path: str,
                  selected: Sequence[int] = ()):
    """N(T) table: temperature, cluster count and whether T was selected"""
    chosen = set(selected)
    with open(path, "w") as f:
        f.write("temperature\tcluster_count\tselected\n")
        for i, (T, N) in enumerate(zip(grid, counts)):
            f.write(f"{float(T)!r}\t{int(N)}\t{int(i in chosen)}\n")


def write_energy(values: Sequence[float], label: str, path: str):
    """One-column TSV of energy samples headed by the block setup label"""
    with open(path, "w") as f:
        f.write(f"{label}\n")
        for v in values:
            f.write(f"{float(v)!r}\n")


def write_json(obj, path: str):
    """Deterministic JSON: sorted keys, fixed indentation"""
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_jsonable)
        f.write("\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Partition):
        return list(obj.assignment)
    raise TypeError(f"cannot write {type(obj).__name__} as JSON")


def partition_record(partition: Partition, labels: Sequence[str]) -> dict:
    return {"labels": list(labels), "assignment": list(partition.assignment),
            "k": partition.k}


def tree_record(tree: ClusterTree) -> dict:
    return {"newick": tree.to_newick(),
            "levels": [{"height": level.height, "k": level.partition.k}
                       for level in tree.levels]}


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
