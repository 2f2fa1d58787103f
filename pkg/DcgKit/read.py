import json
import logging
import re
from io import StringIO
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from Bio import Phylo
from Bio.Phylo.NewickIO import NewickError

from DcgKit.core import BINARY, CODED, DEFAULT_CODES, LETTER_CODES, REAL, \
    ClusterTree, DataMatrix, DistanceMatrix, Level, Partition
from DcgKit.seqscore import AlignedSet, parse_alignment

logger = logging.getLogger(__name__)

GAP_CELLS = ("", "-", "NA", "NaN", "nan")
_ESCAPED = re.compile(r"\\(.)")


def _read_grid(path: str):
    raw = pd.read_csv(path, header=None, dtype=str, keep_default_na=False)
    if raw.shape[0] < 2 or raw.shape[1] < 2:
        raise ValueError(f"{path}: need a header row, a label column and at "
                         f"least one data cell")
    col_labels = [c.strip() for c in raw.iloc[0, 1:]]
    row_labels = [r.strip() for r in raw.iloc[1:, 0]]
    return row_labels, col_labels, raw.iloc[1:, 1:].to_numpy()


def _parse_cells(path: str, row_labels: List[str], col_labels: List[str],
                 cells: np.ndarray) -> Tuple[np.ndarray, bool]:
    values = np.full(cells.shape, np.nan)
    lettered = False
    for (i, j), cell in np.ndenumerate(cells):
        cell = cell.strip()
        if cell in GAP_CELLS:
            continue
        if cell.upper() in LETTER_CODES:
            values[i, j] = LETTER_CODES[cell.upper()]
            lettered = True
            continue
        try:
            values[i, j] = float(cell)
        except ValueError:
            raise ValueError(f"{path}: row '{row_labels[i]}' (line {i + 2}), "
                             f"column '{col_labels[j]}': cannot read "
                             f"'{cell}'")
    return values, lettered


def read_matrix(path: str, kind: Optional[str] = None,
                codes: Tuple[int, ...] = DEFAULT_CODES) -> DataMatrix:
    """
    Read a labelled data matrix from CSV: first row holds column labels,
    first column holds row labels. Empty cells and "-" are gaps; A/G/C/T
    cells are coded as 1/2/5/6.
    :param path: CSV file
    :type path: str
    :param kind: Force "binary", "coded-categorical" or "real"; inferred from
        the cells when None
    :type kind: str
    :param codes: Code set for coded-categorical matrices
    :type codes: Tuple[int]
    :rtype: DataMatrix
    """
    row_labels, col_labels, cells = _read_grid(path)
    values, lettered = _parse_cells(path, row_labels, col_labels, cells)
    if kind is None:
        observed = values[~np.isnan(values)]
        if lettered:
            kind, codes = CODED, DEFAULT_CODES
        elif np.isin(observed, (0, 1)).all():
            kind = BINARY
        elif np.isin(observed, codes).all():
            kind = CODED
        else:
            kind = REAL
    logger.debug("%s: %dx%d %s matrix", path, len(row_labels),
                 len(col_labels), kind)
    return DataMatrix(values, row_labels, col_labels, kind=kind, codes=codes)


def _read_square(path: str) -> Tuple[np.ndarray, List[str]]:
    row_labels, col_labels, cells = _read_grid(path)
    if row_labels != col_labels:
        raise ValueError(f"{path}: row labels must repeat the column labels")
    values, _ = _parse_cells(path, row_labels, col_labels, cells)
    if np.isnan(values).any():
        i, j = np.argwhere(np.isnan(values))[0]
        raise ValueError(f"{path}: missing value at ({row_labels[i]}, "
                         f"{col_labels[j]})")
    return values, row_labels


def read_distance(path: str) -> DistanceMatrix:
    """
    Read a square, symmetric distance matrix whose row labels repeat the
    column labels.
    """
    values, labels = _read_square(path)
    return DistanceMatrix(values, labels)


def read_similarity(path: str) -> DistanceMatrix:
    """Read a similarity matrix in [0, 1] and return distances 1 - S"""
    values, labels = _read_square(path)
    if (values < 0).any() or (values > 1).any():
        raise ValueError(f"{path}: similarities must lie within [0, 1]")
    d = 1.0 - values
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(d, labels)


def read_alignment(path: str, format: Optional[str] = None) -> AlignedSet:
    with open(path, "r") as f:
        text = f.read()
    return parse_alignment(text, format)


def parse_phylo(text: str):
    """
    Parse one Newick tree with Bio.Phylo. Quoted labels follow the Phylo
    writer: backslash escapes inside single quotes.
    :param text: Newick text ending in ';'
    :type text: str
    :rtype: Bio.Phylo.Newick.Tree
    """
    if not text.strip().endswith(";"):
        raise ValueError("newick: expected ';' at the end of the tree")
    try:
        return Phylo.read(StringIO(text), "newick")
    except NewickError as e:
        raise ValueError(f"newick: {e}")


def _label(clade) -> str:
    return _ESCAPED.sub(r"\1", clade.name or "")


def _clade_height(clade) -> float:
    if clade.is_terminal():
        return 0.0
    return max(_clade_height(child) + child.branch_length
               for child in clade.clades)


def parse_newick(text: str, leaves: Optional[Sequence[str]] = None
                 ) -> ClusterTree:
    """
    Rebuild a ClusterTree from the Newick text ClusterTree.to_newick writes:
    every leaf sits at the same depth and each depth of internal nodes is one
    level.
    :param text: Newick text
    :type text: str
    :param leaves: Leaf order of the returned tree (Newick order when None)
    :type leaves: Sequence[str]
    :rtype: ClusterTree
    """
    root = parse_phylo(text).root
    if root.is_terminal():
        raise ValueError("newick: tree has no internal levels")
    found = []
    by_depth = {}

    def walk(clade, ancestors: Tuple[int, ...]):
        if clade is not root and clade.branch_length is None:
            raise ValueError(f"newick: missing or bad branch length above "
                             f"'{_label(clade) or 'an internal node'}'")
        if clade.is_terminal():
            found.append((_label(clade), ancestors))
            return
        by_depth.setdefault(len(ancestors), []).append(clade)
        for child in clade.clades:
            walk(child, ancestors + (id(clade),))

    walk(root, ())
    depths = {len(ancestors) for _, ancestors in found}
    if len(depths) != 1:
        raise ValueError("newick: leaves sit at different depths, not a level "
                         "tree")
    depth = depths.pop()
    # a top level of several clusters hangs off a zero-length root; a real
    # root level never has zero-length internal children
    wrapped = all(not child.is_terminal() and child.branch_length == 0
                  for child in root.clades)
    first = 1 if wrapped else 0
    if leaves is not None:
        index = {name: i for i, (name, _) in enumerate(found)}
        if sorted(index) != sorted(leaves):
            raise ValueError("newick: leaf names differ from the requested "
                             "order")
        found = [found[index[name]] for name in leaves]
    levels = [Level(max(_clade_height(c) for c in by_depth[d]),
                    Partition([ancestors[d] for _, ancestors in found]))
              for d in range(first, depth)]
    if not levels:
        raise ValueError("newick: tree has no internal levels")
    return ClusterTree(tuple(levels), [name for name, _ in found])


def read_newick(path: str, leaves: Optional[Sequence[str]] = None
                ) -> ClusterTree:
    with open(path, "r") as f:
        return parse_newick(f.read(), leaves)


def read_coupling(path: str) -> Dict:
    """
    Load the coupling JSON written by `dcgkit dm`. Returns its fields with
    the final row and column partitions as Partition objects.
    """
    with open(path, "r") as f:
        data = json.load(f)
    try:
        rows = data["row_partition"]
        cols = data["col_partition"]
        data["row_partition"] = Partition(rows["assignment"])
        data["col_partition"] = Partition(cols["assignment"])
        data["row_labels"] = rows["labels"]
        data["col_labels"] = cols["labels"]
    except (KeyError, TypeError):
        raise ValueError(f"{path}: not a coupling file (needs row_partition "
                         f"and col_partition)")
    return data
