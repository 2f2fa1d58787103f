"""
Agglomerative hierarchical clustering (single, complete and average
linkage) and conversion of the resulting binary dendrogram into a
multi-level ClusterTree.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from DcgKit.core import ClusterTree, DistanceMatrix, Level, Partition, _fmt, \
    _newick_name

logger = logging.getLogger(__name__)

SINGLE = "single"
COMPLETE = "complete"
AVERAGE = "average"
LINKAGES = (SINGLE, COMPLETE, AVERAGE)


@dataclass(frozen=True)
class Linkage:
    mode: str = AVERAGE

    def __post_init__(self):
        if self.mode not in LINKAGES:
            raise ValueError(f"unknown linkage '{self.mode}', expected one of "
                             f"{LINKAGES}")

    def update(self, d_ki: np.ndarray, d_kj: np.ndarray, n_i: int, n_j: int
               ) -> np.ndarray:
        """Lance-Williams distance from every k to the union of i and j"""
        if self.mode == SINGLE:
            return np.minimum(d_ki, d_kj)
        if self.mode == COMPLETE:
            return np.maximum(d_ki, d_kj)
        return (n_i * d_ki + n_j * d_kj) / (n_i + n_j)


class Merge(NamedTuple):
    left: int
    right: int
    height: float
    size: int


@dataclass(frozen=True)
class Dendrogram:
    """
    Binary merge history over n leaves. Leaves are nodes 0..n-1 and the i-th
    merge creates node n+i.
    """
    merges: Tuple[Merge, ...]
    labels: Tuple[str, ...]
    linkage: str = AVERAGE

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def heights(self) -> np.ndarray:
        return np.array([m.height for m in self.merges], dtype=float)

    def _members(self) -> Dict[int, List[int]]:
        members = {i: [i] for i in range(self.n)}
        for step, merge in enumerate(self.merges):
            members[self.n + step] = members[merge.left] + members[merge.right]
        return members

    def cut(self, k: int) -> Partition:
        """
        Partition left after applying the first n-k merges.
        :param k: Number of clusters, 1 <= k <= n
        :type k: int
        :rtype: Partition
        """
        n = self.n
        if not 1 <= k <= n:
            raise ValueError(f"cut: k must be within [1, {n}], got {k}")
        owner = np.arange(n)
        for step, merge in enumerate(self.merges[:n - k]):
            node = n + step
            # leaves currently owned by either side move to the new node
            owner[(owner == merge.left) | (owner == merge.right)] = node
        return Partition(owner.tolist())

    def cut_height(self, k: int) -> float:
        """Height of the level holding k clusters (0 for all singletons)"""
        m = self.n - k
        return 0.0 if m == 0 else float(self.merges[m - 1].height)

    def reachable_counts(self) -> List[int]:
        """
        Cluster counts that correspond to a distinct cut height. A count is
        unreachable when the merge after it is tied with the merge before.
        """
        n = self.n
        counts = []
        for k in range(1, n + 1):
            m = n - k
            if m == n - 1 or self.cut_height(k) < self.merges[m].height:
                counts.append(k)
        return counts

    def cophenetic(self) -> DistanceMatrix:
        """Merge height at which each pair of leaves first joins"""
        members = self._members()
        u = np.zeros((self.n, self.n))
        for merge in self.merges:
            left, right = members[merge.left], members[merge.right]
            u[np.ix_(left, right)] = merge.height
            u[np.ix_(right, left)] = merge.height
        return DistanceMatrix(u, self.labels)

    def to_newick(self) -> str:
        """Binary Newick text, branch lengths as height differences"""
        n = self.n
        if n == 1:
            return f"{_newick_name(self.labels[0])};"

        def height(node: int) -> float:
            return 0.0 if node < n else self.merges[node - n].height

        def render(node: int, parent: float) -> str:
            length = _fmt(parent - height(node))
            if node < n:
                return f"{_newick_name(self.labels[node])}:{length}"
            merge = self.merges[node - n]
            h = merge.height
            return f"({render(merge.left, h)},{render(merge.right, h)}):{length}"

        root = self.merges[-1]
        return (f"({render(root.left, root.height)},"
                f"{render(root.right, root.height)});")


def hc_build(D: DistanceMatrix, link: Union[Linkage, str] = AVERAGE
             ) -> Dendrogram:
    """
    Agglomerate the closest pair of active clusters until one remains.
    Ties between equal distances go to the lexicographically smallest pair
    of cluster ids.
    :param D: Distances between n >= 2 items
    :type D: DistanceMatrix
    :param link: Linkage rule or its name
    :type link: Linkage or str
    :return: The merge history
    :rtype: Dendrogram
    """
    if isinstance(link, str):
        link = Linkage(link)
    n = D.n
    if n < 2:
        raise ValueError(f"hc_build: need at least 2 items, got {n}")
    size = 2 * n - 1
    # pair (i, j) lives in w[i, j] with i < j; everything else is inf
    w = np.full((size, size), np.inf)
    iu = np.triu_indices(n, k=1)
    w[iu] = D.d[iu]
    active = np.zeros(size, dtype=bool)
    active[:n] = True
    sizes = np.zeros(size, dtype=np.int64)
    sizes[:n] = 1

    merges = []
    for step in range(n - 1):
        best = w.min()
        i, j = (int(x) for x in np.argwhere(w == best)[0])
        new = n + step
        d_i = np.minimum(w[i, :], w[:, i])
        d_j = np.minimum(w[j, :], w[:, j])
        others = active.copy()
        others[[i, j]] = False
        w[i, :] = w[:, i] = np.inf
        w[j, :] = w[:, j] = np.inf
        w[others, new] = link.update(d_i[others], d_j[others],
                                     sizes[i], sizes[j])
        active[[i, j]] = False
        active[new] = True
        sizes[new] = sizes[i] + sizes[j]
        merges.append(Merge(i, j, float(best), int(sizes[new])))
    logger.debug("hc_build: %d merges with %s linkage, top height %s",
                 len(merges), link.mode, merges[-1].height)
    return Dendrogram(tuple(merges), D.labels, link.mode)


def nearest_reachable(dg: Dendrogram, k: int) -> int:
    reachable = dg.reachable_counts()
    return min(reachable, key=lambda r: (abs(r - k), r))


def dendrogram_to_tree(dg: Dendrogram, k_list: Sequence[int]) -> ClusterTree:
    """
    Cut a dendrogram at several cluster counts and stack the cuts into a
    ClusterTree.
    :param dg: Merge history
    :type dg: Dendrogram
    :param k_list: Strictly increasing cluster counts within [1, n]
    :type k_list: Sequence[int]
    :rtype: ClusterTree
    """
    k_list = [int(k) for k in k_list]
    if not k_list:
        raise ValueError("dendrogram_to_tree: k_list is empty")
    if any(b <= a for a, b in zip(k_list, k_list[1:])):
        raise ValueError(f"dendrogram_to_tree: k_list must be strictly "
                         f"increasing, got {k_list}")
    reachable = set(dg.reachable_counts())
    levels = []
    for k in k_list:
        if not 1 <= k <= dg.n:
            raise ValueError(f"dendrogram_to_tree: k={k} outside [1, {dg.n}]")
        if k not in reachable:
            raise ValueError(f"dendrogram_to_tree: k={k} is not reachable "
                             f"(tied merge heights); nearest achievable k="
                             f"{nearest_reachable(dg, k)}")
        levels.append(Level(dg.cut_height(k), dg.cut(k)))
    return ClusterTree(tuple(levels), dg.labels)


def hc_tree(D: DistanceMatrix, link: Union[Linkage, str] = AVERAGE,
            k_list: Optional[Sequence[int]] = None) -> ClusterTree:
    """
    Build a ClusterTree straight from distances. Without k_list every
    reachable cluster count becomes a level.
    """
    if D.n == 1:
        return ClusterTree.root_only(D.labels, height=0.0)
    dg = hc_build(D, link)
    return dendrogram_to_tree(dg, k_list or dg.reachable_counts())
