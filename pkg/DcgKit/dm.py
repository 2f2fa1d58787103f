"""
Data Mechanics: couple a row tree and a column tree of one matrix, frame
the resulting block pattern and measure how heterogeneous the blocks are.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from DcgKit.core import COLS, ROWS, CODED, ClusterTree, DataMatrix, \
    DistanceMatrix, Partition, _axis_vectors, pairwise_euclidean
from DcgKit.dcg import DcgConfig, dcg_run
from DcgKit.hc import AVERAGE, COMPLETE, hc_tree
from DcgKit.util import derive_seed

logger = logging.getLogger(__name__)

HC_AVERAGE = "hc-average"
HC_COMPLETE = "hc-complete"
DCG = "dcg"
ALGORITHMS = (HC_AVERAGE, HC_COMPLETE, DCG)

TV = "tv"
ADJACENT = "adjacent"
ENERGY_METHODS = (TV, ADJACENT)


@dataclass(frozen=True)
class CouplingConfig:
    """
    :param max_iterations: upper bound on column/row rebuild rounds
    :type max_iterations: int
    :param row_algorithm: tree builder for rows
    :type row_algorithm: str
    :param col_algorithm: tree builder for columns
    :type col_algorithm: str
    :param row_k: per-iteration override of the row cluster count used to
        extend column vectors (the last value repeats)
    :type row_k: Sequence[int]
    :param col_k: same for the column cluster count
    :type col_k: Sequence[int]
    :param dcg: settings used when an axis is built with DCG
    :type dcg: DcgConfig
    """
    max_iterations: int = 3
    row_algorithm: str = HC_AVERAGE
    col_algorithm: str = HC_AVERAGE
    row_k: Tuple[int, ...] = ()
    col_k: Tuple[int, ...] = ()
    dcg: DcgConfig = field(default_factory=DcgConfig)

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for algorithm in (self.row_algorithm, self.col_algorithm):
            if algorithm not in ALGORITHMS:
                raise ValueError(f"unknown tree algorithm '{algorithm}', "
                                 f"expected one of {ALGORITHMS}")
        object.__setattr__(self, "row_k", tuple(int(k) for k in self.row_k))
        object.__setattr__(self, "col_k", tuple(int(k) for k in self.col_k))
        if any(k < 1 for k in self.row_k + self.col_k):
            raise ValueError("cluster count overrides must be >= 1")


@dataclass(frozen=True)
class CouplingResult:
    row_tree: ClusterTree
    col_tree: ClusterTree
    row_partition: Partition
    col_partition: Partition
    log: Tuple[dict, ...]
    iterations: int
    stable: bool


@dataclass(frozen=True)
class BlockDecomposition:
    """
    Cross product of a row partition and a column partition. Block (r, c)
    holds the cells whose row is in row cluster r and whose column is in
    column cluster c.
    """
    row_partition: Partition
    col_partition: Partition

    @property
    def shape(self) -> Tuple[int, int]:
        return self.row_partition.k, self.col_partition.k

    @property
    def row_groups(self) -> List[np.ndarray]:
        return self.row_partition.clusters()

    @property
    def col_groups(self) -> List[np.ndarray]:
        return self.col_partition.clusters()

    @property
    def label(self) -> str:
        return f"{self.shape[0]}x{self.shape[1]}"

    def blocks(self):
        """Yield ((r, c), row indices, column indices) for every block"""
        for r, rows in enumerate(self.row_groups):
            for c, cols in enumerate(self.col_groups):
                yield (r, c), rows, cols

    def cells(self, r: int, c: int) -> np.ndarray:
        """Flat (row-major) cell indices of block (r, c)"""
        rows, cols = self.row_groups[r], self.col_groups[c]
        n = self.col_partition.n
        return (rows[:, None] * n + cols[None, :]).ravel()

    def sizes(self) -> np.ndarray:
        rows = np.array(self.row_partition.sizes())
        cols = np.array(self.col_partition.sizes())
        return rows[:, None] * cols[None, :]


@dataclass(frozen=True)
class EnergySamples:
    values: Tuple[float, ...]
    label: str
    observed: Optional[float] = None
    examples: Tuple[np.ndarray, ...] = field(default=(), compare=False,
                                             repr=False)

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if any(not np.isfinite(v) or v < 0 for v in values):
            raise ValueError("energy samples must be finite and non-negative")
        object.__setattr__(self, "values", values)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 \
            else 0.0


def extended_distance(M: DataMatrix, counterpart: Partition, axis: str = ROWS
                      ) -> DistanceMatrix:
    """
    Euclidean distance between vectors along `axis`, each extended with the
    mean of its entries over every cluster of the counterpart partition.
    :param M: Gap-free matrix
    :type M: DataMatrix
    :param counterpart: Partition of the opposite axis
    :type counterpart: Partition
    :param axis: "rows" or "cols"
    :type axis: str
    :rtype: DistanceMatrix
    """
    vectors, labels = _axis_vectors(M, axis)
    if counterpart.n != vectors.shape[1]:
        raise ValueError(f"extended_distance: counterpart partition has "
                         f"{counterpart.n} members, the opposite axis has "
                         f"{vectors.shape[1]}")
    means = np.column_stack([vectors[:, members].mean(axis=1)
                             for members in counterpart.clusters()])
    extended = DataMatrix(np.hstack([vectors, means]), labels,
                          [f"x{j}" for j in range(vectors.shape[1] +
                                                  means.shape[1])])
    return pairwise_euclidean(extended, ROWS)


def build_tree(D: DistanceMatrix, algorithm: str, dcg: DcgConfig, seed: int
               ) -> ClusterTree:
    if algorithm == HC_AVERAGE:
        return hc_tree(D, AVERAGE)
    if algorithm == HC_COMPLETE:
        return hc_tree(D, COMPLETE)
    return dcg_run(D, dcg, seed).tree


def choose_level(tree: ClusterTree, target: int) -> Tuple[int, Partition]:
    """
    Level whose branch count is closest to target; the coarser level wins a
    tie.
    """
    best = min(range(tree.n_levels),
               key=lambda i: (abs(tree.levels[i].partition.k - target), i))
    return best, tree.levels[best].partition


def _target(overrides: Tuple[int, ...], iteration: int, size: int) -> int:
    if overrides:
        return overrides[min(iteration, len(overrides) - 1)]
    return max(1, int(round(np.sqrt(size))))


def couple(M: DataMatrix, cfg: Optional[CouplingConfig] = None, seed: int = 0
           ) -> CouplingResult:
    """
    Iteratively rebuild the column tree from row clusters and the row tree
    from column clusters until both chosen partitions repeat or the
    iteration cap is reached. The first row tree uses plain Euclidean
    distances.
    :param M: Gap-free matrix with at least 2 rows and 2 columns
    :type M: DataMatrix
    :param cfg: Coupling settings
    :type cfg: CouplingConfig
    :param seed: Master seed for DCG-built axes
    :type seed: int
    :rtype: CouplingResult
    """
    cfg = cfg or CouplingConfig()
    if M.has_gaps:
        raise ValueError("couple: the matrix must be fully observed")
    m, n = M.shape
    log = []

    def pick(tree: ClusterTree, axis: str, iteration: int) -> Partition:
        overrides, size = (cfg.row_k, m) if axis == ROWS else (cfg.col_k, n)
        index, partition = choose_level(tree, _target(overrides, iteration,
                                                      size))
        log.append({"iteration": iteration, "axis": axis, "level": index,
                    "k": partition.k,
                    "assignment": list(partition.assignment)})
        logger.debug("iteration %d: %s level %d with %d clusters", iteration,
                     axis, index, partition.k)
        return partition

    row_tree = build_tree(pairwise_euclidean(M, ROWS), cfg.row_algorithm,
                          cfg.dcg, derive_seed(seed, 0, 0))
    rp = pick(row_tree, ROWS, 0)
    cp = None
    col_tree = None
    stable = False
    iteration = 0
    for iteration in range(1, cfg.max_iterations + 1):
        col_tree = build_tree(extended_distance(M, rp, COLS),
                              cfg.col_algorithm, cfg.dcg,
                              derive_seed(seed, iteration, 1))
        new_cp = pick(col_tree, COLS, iteration)
        row_tree = build_tree(extended_distance(M, new_cp, ROWS),
                              cfg.row_algorithm, cfg.dcg,
                              derive_seed(seed, iteration, 0))
        new_rp = pick(row_tree, ROWS, iteration)
        stable = new_rp == rp and (cp is None or new_cp == cp)
        rp, cp = new_rp, new_cp
        if stable:
            logger.info("coupling stable after %d iterations", iteration)
            break
    else:
        logger.info("coupling stopped at the %d iteration cap",
                    cfg.max_iterations)
    return CouplingResult(row_tree, col_tree, rp, cp, tuple(log), iteration,
                          stable)


def blocks(M: DataMatrix, rp: Partition, cp: Partition) -> BlockDecomposition:
    if rp.n != M.shape[0] or cp.n != M.shape[1]:
        raise ValueError(f"blocks: partitions cover {rp.n}x{cp.n} but the "
                         f"matrix is {M.shape[0]}x{M.shape[1]}")
    return BlockDecomposition(rp, cp)


def merge_partition(p: Partition, k: int,
                    order: Optional[Sequence[int]] = None) -> Partition:
    """
    Fold the trailing clusters together so k remain: with 3 clusters merged
    to 2 the result is {0}, {1, 2}.
    :param p: Partition to merge
    :type p: Partition
    :param k: Clusters left afterwards
    :type k: int
    :param order: Cluster ids from first to last (default 0..k-1), e.g. the
        order in which they appear along a permuted axis
    :type order: Sequence[int]
    :rtype: Partition
    """
    if not 1 <= k <= p.k:
        raise ValueError(f"merge_partition: k must be within [1, {p.k}], got "
                         f"{k}")
    order = list(range(p.k)) if order is None else [int(c) for c in order]
    if sorted(order) != list(range(p.k)):
        raise ValueError(f"merge_partition: order must list every cluster id "
                         f"0..{p.k - 1} once")
    rank = np.empty(p.k, dtype=np.int64)
    rank[order] = np.arange(p.k)
    return Partition(np.minimum(rank[p.labels], k - 1).tolist())


def cluster_order(order: Sequence[int], partition: Partition) -> List[int]:
    """Cluster ids in the order they first appear along a permuted axis"""
    labels = partition.labels[list(order)]
    return list(dict.fromkeys(int(c) for c in labels))


def _tv_block(onehot: np.ndarray) -> float:
    counts = onehot.sum(axis=(0, 1))
    total = counts.sum()
    if total == 0:
        return 0.0
    block_dist = counts / total
    h = 0.0
    for per_line in (onehot.sum(axis=1), onehot.sum(axis=0)):
        line_totals = per_line.sum(axis=1)
        seen = line_totals > 0
        if not seen.any():
            continue
        dist = per_line[seen] / line_totals[seen, None]
        h += float(np.mean(0.5 * np.abs(dist - block_dist).sum(axis=1)))
    return h


def _adjacent_block(sub: np.ndarray) -> float:
    unequal, pairs = 0, 0
    for a, b in ((sub[:, 1:], sub[:, :-1]), (sub[1:, :], sub[:-1, :])):
        both = ~np.isnan(a) & ~np.isnan(b)
        pairs += int(both.sum())
        unequal += int((both & (a != b)).sum())
    return unequal / pairs if pairs else 0.0


def energy_density(M: DataMatrix, bd: BlockDecomposition, method: str = TV,
                   values: Optional[np.ndarray] = None) -> float:
    """
    Cell-weighted heterogeneity of the blocks of a categorical matrix.

    With method="tv" every block scores the mean total-variation distance
    between each of its rows' category distribution and the block's, plus
    the same for its columns. With method="adjacent" a block scores the
    share of unequal neighbouring cell pairs. Gap cells are ignored.

    :param M: Binary or coded matrix
    :type M: DataMatrix
    :param bd: Block decomposition of M
    :type bd: BlockDecomposition
    :param method: "tv" or "adjacent"
    :type method: str
    :param values: Cell values to score in place of M.values (same shape)
    :type values: np.ndarray
    :rtype: float
    """
    if method not in ENERGY_METHODS:
        raise ValueError(f"unknown energy method '{method}', expected one of "
                         f"{ENERGY_METHODS}")
    if not M.is_categorical:
        raise ValueError("energy_density: discretize real-valued matrices "
                         "first")
    if bd.row_partition.n != M.shape[0] or bd.col_partition.n != M.shape[1]:
        raise ValueError("energy_density: block decomposition does not match "
                         "the matrix shape")
    grid = M.values if values is None else np.asarray(values, dtype=float)
    categories = np.array(M.codes, dtype=float)
    total = grid.size
    energy = 0.0
    for _, rows, cols in bd.blocks():
        sub = grid[np.ix_(rows, cols)]
        if method == TV:
            h = _tv_block(sub[..., None] == categories)
        else:
            h = _adjacent_block(sub)
        energy += sub.size / total * h
    return float(energy)


def discretize(M: DataMatrix, bins: int = 8) -> DataMatrix:
    """
    Equal-frequency binning of a real matrix into codes 1..bins. Categorical
    matrices pass through unchanged.
    """
    if M.is_categorical:
        return M
    if bins < 2:
        raise ValueError("discretize: need at least 2 bins")
    observed = M.values[~M.gaps]
    edges = np.quantile(observed, np.linspace(0, 1, bins + 1))[1:-1]
    coded = np.searchsorted(edges, M.values, side="right") + 1.0
    coded[M.gaps] = np.nan
    return DataMatrix(coded, M.row_labels, M.col_labels, kind=CODED,
                      codes=tuple(range(1, bins + 1)))


def permuted(M: DataMatrix, result: CouplingResult) -> DataMatrix:
    """Matrix reordered so every row and column cluster is contiguous"""
    return M.take(result.row_tree.leaf_order(), result.col_tree.leaf_order())


def block_bounds(order: Sequence[int], partition: Partition
                 ) -> List[Dict[str, int]]:
    """Start/stop positions of every cluster along a permuted axis"""
    labels = partition.labels[list(order)]
    bounds = []
    start = 0
    for pos in range(1, len(labels) + 1):
        if pos == len(labels) or labels[pos] != labels[start]:
            bounds.append({"cluster": int(labels[start]), "start": start,
                           "stop": pos})
            start = pos
    return bounds
