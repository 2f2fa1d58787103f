"""
Shared data model for DcgKit: labelled data matrices, distance matrices,
partitions and multi-level ultrametric cluster trees, plus the structural
checks every clustering engine in the package relies on.
"""
import itertools
import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import pdist, squareform
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

BINARY = "binary"
CODED = "coded-categorical"
REAL = "real"
KINDS = (BINARY, CODED, REAL)

# A, G, C, T coded with a gap between the purine and pyrimidine pairs
DEFAULT_CODES = (1, 2, 5, 6)
LETTER_CODES = dict(zip("AGCT", DEFAULT_CODES))

ROWS = "rows"
COLS = "cols"


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_labels(labels: Sequence[str], size: int, what: str) -> Tuple[str, ...]:
    labels = tuple(str(label) for label in labels)
    if len(labels) != size:
        raise ValueError(f"{what}: expected {size} labels, got {len(labels)}")
    seen = set()
    for label in labels:
        if label in seen:
            raise ValueError(f"{what}: duplicate label '{label}'")
        seen.add(label)
    return labels


@dataclass(frozen=True, eq=False)
class DataMatrix:
    """
    An observed m x n matrix with labelled rows and columns.
    :param values: m x n grid. Gap cells are stored as NaN.
    :type values: np.ndarray
    :param row_labels: m unique row names
    :type row_labels: Sequence[str]
    :param col_labels: n unique column names
    :type col_labels: Sequence[str]
    :param kind: One of "binary", "coded-categorical" or "real"
    :type kind: str
    :param codes: Declared code set for coded-categorical matrices
    :type codes: Tuple[int]
    """
    values: np.ndarray
    row_labels: Tuple[str, ...]
    col_labels: Tuple[str, ...]
    kind: str = REAL
    codes: Tuple[int, ...] = DEFAULT_CODES

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"DataMatrix: need a non-empty 2-D grid, got "
                             f"shape {values.shape}")
        m, n = values.shape
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "row_labels",
                           _check_labels(self.row_labels, m, "row labels"))
        object.__setattr__(self, "col_labels",
                           _check_labels(self.col_labels, n, "column labels"))
        if self.kind not in KINDS:
            raise ValueError(f"DataMatrix: kind must be one of {KINDS}")
        if self.kind == BINARY:
            object.__setattr__(self, "codes", (0, 1))
        else:
            object.__setattr__(self, "codes",
                               tuple(int(c) for c in self.codes))
        if self.kind != REAL:
            allowed = np.array(self.codes, dtype=float)
            bad = ~self.gaps & ~np.isin(values, allowed)
            if bad.any():
                i, j = np.argwhere(bad)[0]
                raise ValueError(f"DataMatrix: cell ({self.row_labels[i]}, "
                                 f"{self.col_labels[j]}) = {values[i, j]} is "
                                 f"not in the {self.kind} code set "
                                 f"{self.codes}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def gaps(self) -> np.ndarray:
        """Boolean mask of gap cells"""
        return np.isnan(self.values)

    @property
    def has_gaps(self) -> bool:
        return bool(self.gaps.any())

    @property
    def is_categorical(self) -> bool:
        return self.kind in (BINARY, CODED)

    def with_values(self, values: np.ndarray) -> "DataMatrix":
        """Copy of this matrix carrying new cell values"""
        return DataMatrix(values, self.row_labels, self.col_labels,
                          kind=self.kind, codes=self.codes)

    def take(self, rows: Sequence[int], cols: Sequence[int]) -> "DataMatrix":
        """Sub-matrix (or permutation) selected by row and column indices"""
        rows, cols = list(rows), list(cols)
        return DataMatrix(self.values[np.ix_(rows, cols)],
                          [self.row_labels[i] for i in rows],
                          [self.col_labels[j] for j in cols],
                          kind=self.kind, codes=self.codes)

    def transpose(self) -> "DataMatrix":
        return DataMatrix(self.values.T, self.col_labels, self.row_labels,
                          kind=self.kind, codes=self.codes)

    def __eq__(self, other):
        if not isinstance(other, DataMatrix):
            return NotImplemented
        return (self.kind == other.kind and self.codes == other.codes and
                self.row_labels == other.row_labels and
                self.col_labels == other.col_labels and
                np.array_equal(self.values, other.values, equal_nan=True))

    def __repr__(self):
        return f"DataMatrix {self.shape[0]}x{self.shape[1]} ({self.kind})"


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    """
    Symmetric n x n matrix of non-negative finite distances with a zero
    diagonal.
    :param d: n x n distances
    :type d: np.ndarray
    :param labels: n identifiers
    :type labels: Sequence[str]
    """
    d: np.ndarray
    labels: Tuple[str, ...]

    def __post_init__(self):
        d = np.array(self.d, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] < 1:
            raise ValueError(f"DistanceMatrix: need a square grid, got shape "
                             f"{d.shape}")
        if not np.isfinite(d).all():
            raise ValueError("DistanceMatrix: entries must be finite")
        if (d < 0).any():
            i, j = np.argwhere(d < 0)[0]
            raise ValueError(f"DistanceMatrix: negative entry at ({i}, {j})")
        if np.any(np.diag(d) != 0):
            raise ValueError("DistanceMatrix: diagonal must be zero")
        if not np.array_equal(d, d.T):
            if not np.allclose(d, d.T, rtol=0, atol=1e-9):
                i, j = np.argwhere(~np.isclose(d, d.T, rtol=0, atol=1e-9))[0]
                raise ValueError(f"DistanceMatrix: not symmetric at ({i}, {j})")
            d = (d + d.T) / 2
        object.__setattr__(self, "d", _frozen(d))
        object.__setattr__(self, "labels",
                           _check_labels(self.labels, d.shape[0],
                                         "distance labels"))

    @property
    def n(self) -> int:
        return self.d.shape[0]

    def off_diagonal(self) -> np.ndarray:
        """Upper-triangle entries (one per unordered pair)"""
        return self.d[np.triu_indices(self.n, k=1)]

    def scaled(self, factor: float) -> "DistanceMatrix":
        return DistanceMatrix(self.d * factor, self.labels)

    def __eq__(self, other):
        if not isinstance(other, DistanceMatrix):
            return NotImplemented
        return (self.labels == other.labels and
                np.array_equal(self.d, other.d))

    def __repr__(self):
        return f"DistanceMatrix over {self.n} items"


@dataclass(frozen=True)
class Partition:
    """
    Assignment of n leaves to k clusters. Cluster ids are renumbered on
    construction in order of first appearance, so two partitions grouping
    the leaves identically compare equal.
    :param assignment: cluster id of every leaf
    :type assignment: Sequence[int]
    """
    assignment: Tuple[int, ...]

    def __post_init__(self):
        raw = list(self.assignment)
        if not raw:
            raise ValueError("Partition: no leaves")
        relabel = {}
        canonical = []
        for label in raw:
            if label not in relabel:
                relabel[label] = len(relabel)
            canonical.append(relabel[label])
        object.__setattr__(self, "assignment", tuple(canonical))

    @classmethod
    def single(cls, n: int) -> "Partition":
        return cls((0,) * n)

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls(tuple(range(n)))

    @property
    def n(self) -> int:
        return len(self.assignment)

    @property
    def k(self) -> int:
        return max(self.assignment) + 1

    @property
    def labels(self) -> np.ndarray:
        return np.array(self.assignment, dtype=np.int64)

    def clusters(self) -> List[np.ndarray]:
        """Member indices of every cluster, in cluster-id order"""
        labels = self.labels
        return [np.flatnonzero(labels == c) for c in range(self.k)]

    def sizes(self) -> List[int]:
        return [int(s) for s in np.bincount(self.labels, minlength=self.k)]

    def co_membership(self) -> np.ndarray:
        """n x n boolean matrix, True where two leaves share a cluster"""
        labels = self.labels
        return labels[:, None] == labels[None, :]

    def refines(self, coarser: "Partition") -> bool:
        """True when every cluster here lies inside one cluster of coarser"""
        if coarser.n != self.n:
            return False
        parent = {}
        for fine, coarse in zip(self.assignment, coarser.assignment):
            if parent.setdefault(fine, coarse) != coarse:
                return False
        return True


class Level(NamedTuple):
    height: float
    partition: Partition


@dataclass(frozen=True)
class ClusterTree:
    """
    A multi-level ultrametric tree: partitions ordered coarse to fine, each
    carrying a height. Heights strictly decrease and branch counts strictly
    increase down the levels, and every level refines the one above it.
    :param levels: (height, partition) pairs, coarsest first
    :type levels: Sequence[Level]
    :param leaves: leaf identifiers
    :type leaves: Sequence[str]
    """
    levels: Tuple[Level, ...]
    leaves: Tuple[str, ...]

    def __post_init__(self):
        levels = tuple(Level(float(h), p) for h, p in self.levels)
        if not levels:
            raise ValueError("ClusterTree: at least one level is required")
        leaves = _check_labels(self.leaves, levels[0].partition.n, "leaves")
        for upper, lower in zip(levels, levels[1:]):
            if lower.partition.n != len(leaves):
                raise ValueError("ClusterTree: levels cover different leaves")
            if not lower.height < upper.height:
                raise ValueError(f"ClusterTree: heights must strictly decrease "
                                 f"({upper.height} then {lower.height})")
            if not lower.partition.k > upper.partition.k:
                raise ValueError(f"ClusterTree: branch counts must strictly "
                                 f"increase ({upper.partition.k} then "
                                 f"{lower.partition.k})")
            if not lower.partition.refines(upper.partition):
                raise ValueError(f"ClusterTree: level at height {lower.height} "
                                 f"is not nested in the level above")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "leaves", leaves)

    @classmethod
    def root_only(cls, leaves: Sequence[str], height: float = 1.0):
        return cls((Level(height, Partition.single(len(leaves))),), leaves)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def branch_counts(self) -> List[int]:
        return [level.partition.k for level in self.levels]

    @property
    def heights(self) -> List[float]:
        return [level.height for level in self.levels]

    @property
    def bottom(self) -> Partition:
        return self.levels[-1].partition

    def cophenetic(self) -> DistanceMatrix:
        """
        Tree distance between leaves: the height of the finest level at
        which two leaves share a cluster. Pairs that never share one sit at
        the coarsest height.
        """
        n = len(self.leaves)
        u = np.full((n, n), self.levels[0].height)
        for height, partition in self.levels:
            u[partition.co_membership()] = height
        np.fill_diagonal(u, 0.0)
        return DistanceMatrix(u, self.leaves)

    def leaf_order(self) -> List[int]:
        """Leaf permutation that keeps every cluster of every level contiguous"""
        keys = [tuple(level.partition.assignment[i] for level in self.levels)
                for i in range(len(self.leaves))]
        return sorted(range(len(self.leaves)), key=lambda i: (keys[i], i))

    def to_newick(self) -> str:
        """
        Newick text in which every cluster of every level is a node, so a
        cluster that persists unchanged shows up as a unary node. Branch
        lengths are height differences; leaves sit at height 0.
        """
        def node(level_index: int, members: np.ndarray, parent_height: float):
            height = self.levels[level_index].height
            if level_index == len(self.levels) - 1:
                children = [f"{_newick_name(self.leaves[i])}:{_fmt(height)}"
                            for i in members]
            else:
                below = self.levels[level_index + 1].partition.labels
                children = []
                for cluster in dict.fromkeys(below[members].tolist()):
                    sub = members[below[members] == cluster]
                    children.append(node(level_index + 1, sub, height))
            text = "(" + ",".join(children) + ")"
            if parent_height is not None:
                text += f":{_fmt(parent_height - height)}"
            return text

        everyone = np.arange(len(self.leaves))
        top = self.levels[0]
        if top.partition.k == 1:
            return node(0, everyone, None) + ";"
        # no single root cluster: hang the top level off a zero-length root
        children = [node(0, members, top.height)
                    for members in top.partition.clusters()]
        return "(" + ",".join(children) + ");"

    def __repr__(self):
        return (f"ClusterTree over {len(self.leaves)} leaves with branch "
                f"counts {self.branch_counts}")


def _fmt(x: float) -> str:
    return repr(float(x))


def _newick_name(name: str) -> str:
    if any(ch in name for ch in " \t(),:;'[]\\"):
        return "'" + name.replace("\\", "\\\\").replace("'", "\\'") + "'"
    return name


def rank_normalize(M: DataMatrix) -> DataMatrix:
    """
    Map every row (feature) of a real-valued matrix onto [0, 1] by rank:
    value -> (rank - 1) / (count - 1), average ranks for ties. Constant rows
    become all zeros. Binary and coded matrices are returned unchanged.
    :param M: Matrix to normalize
    :type M: DataMatrix
    :return: Normalized matrix
    :rtype: DataMatrix
    """
    if M.kind != REAL:
        return M
    bad = ~np.isfinite(M.values)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValueError(f"rank_normalize: non-finite cell at row "
                         f"'{M.row_labels[i]}' ({i}), column "
                         f"'{M.col_labels[j]}' ({j})")
    out = np.zeros_like(M.values)
    count = M.shape[1]
    for i, row in enumerate(M.values):
        if count < 2 or np.all(row == row[0]):
            continue
        out[i] = (rankdata(row, method="average") - 1) / (count - 1)
    return M.with_values(out)


def pairwise_euclidean(M: DataMatrix, axis: str = ROWS) -> DistanceMatrix:
    """
    Euclidean distances between the row vectors (axis="rows") or the column
    vectors (axis="cols") of a gap-free matrix.
    :param M: Data matrix without gaps
    :type M: DataMatrix
    :param axis: "rows" or "cols"
    :type axis: str
    :rtype: DistanceMatrix
    """
    vectors, labels = _axis_vectors(M, axis)
    if M.has_gaps:
        raise ValueError("pairwise_euclidean: matrix contains gap cells")
    if vectors.shape[0] < 2:
        raise ValueError(f"pairwise_euclidean: need at least 2 {axis}, got "
                         f"{vectors.shape[0]}")
    return DistanceMatrix(squareform(pdist(vectors, metric="euclidean")),
                          labels)


def _axis_vectors(M: DataMatrix, axis: str):
    if axis == ROWS:
        return M.values, M.row_labels
    if axis == COLS:
        return M.values.T, M.col_labels
    raise ValueError(f"axis must be '{ROWS}' or '{COLS}', got '{axis}'")


def is_ultrametric(D: DistanceMatrix, tol: float = 1e-9) -> Tuple[bool, int]:
    """
    Check the super-triangular inequality d(x,y) <= max(d(x,z), d(y,z)) on
    every triple: the two largest distances of a triple must agree within
    tol.
    :param D: Distances to check
    :type D: DistanceMatrix
    :param tol: Allowed gap between the two largest distances of a triple
    :type tol: float
    :return: (flag, number of violating triples)
    :rtype: tuple
    """
    if D.n < 3:
        raise ValueError(f"is_ultrametric: need at least 3 items, got {D.n}")
    if tol < 0:
        raise ValueError("is_ultrametric: tol must be non-negative")
    triples = np.array(list(itertools.combinations(range(D.n), 3)))
    i, j, k = triples.T
    sides = np.sort(np.stack([D.d[i, j], D.d[i, k], D.d[j, k]], axis=1), axis=1)
    violations = int(np.count_nonzero(sides[:, 2] - sides[:, 1] > tol))
    return violations == 0, violations


def cut_partition(tree: ClusterTree, level_index: int) -> Partition:
    """
    Partition stored at one level of a tree (0 is the coarsest).
    :param tree: The tree
    :type tree: ClusterTree
    :param level_index: Level to read
    :type level_index: int
    :rtype: Partition
    """
    if not 0 <= level_index < tree.n_levels:
        raise IndexError(f"cut_partition: level {level_index} out of range "
                         f"for a tree with {tree.n_levels} levels")
    return tree.levels[level_index].partition
