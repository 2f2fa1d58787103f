"""
Data Cloud Geometry (DCG) tree construction.

A distance matrix is turned into a family of random walks, one family per
temperature. Each walk removes the nodes it visits too often and splits
the removal order into clusters wherever the waiting time between
removals spikes. Co-membership over many walks gives a sharing matrix
whose dominant eigenvalues count the clusters at that temperature. Runs
of temperatures with a constant count give the levels of the tree.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from DcgKit.core import ClusterTree, DistanceMatrix, Level, Partition, \
    is_ultrametric
from DcgKit.hc import COMPLETE, hc_build
from DcgKit.util import check_grid, default_grid, derive_seed, map_ordered

logger = logging.getLogger(__name__)

# outgoing mass below this is treated as a stuck walker
STUCK_MASS = 1e-12
# spikes are only looked for once this many inter-removal gaps exist
MIN_GAP_HISTORY = 3
SYMMETRY_TOL = 1e-9
JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100
MAX_FAILED_RETRIES = 1


class WalkError(RuntimeError):
    """A random walk hit its step cap before removing every node"""

    def __init__(self, message: str, removals=None):
        super().__init__(message)
        self.removals = list(removals or [])


@dataclass(frozen=True)
class WalkParams:
    """
    :param visit_threshold: a node is removed once its visits exceed this
    :type visit_threshold: int
    :param spike_factor: a gap larger than spike_factor times the reference
        gap starts a new cluster
    :type spike_factor: float
    :param max_steps: hard cap on walk length
    :type max_steps: int
    """
    visit_threshold: int = 5
    spike_factor: float = 5.0
    max_steps: int = 1_000_000

    def __post_init__(self):
        if self.visit_threshold < 1:
            raise ValueError("visit_threshold must be >= 1")
        if self.spike_factor <= 1:
            raise ValueError("spike_factor must be > 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass(frozen=True)
class DcgConfig:
    """Every knob of a DCG run, as exposed on the command line"""
    grid: Optional[Tuple[float, ...]] = None
    grid_points: int = 30
    m_traj: int = 100
    walk: WalkParams = field(default_factory=WalkParams)
    rel_tol: float = 0.05
    min_run: int = 3
    workers: Optional[int] = None

    def __post_init__(self):
        if self.grid is not None:
            object.__setattr__(self, "grid",
                               tuple(float(t) for t in check_grid(self.grid)))
        if self.m_traj < 1:
            raise ValueError("m_traj must be >= 1")
        if not 0 < self.rel_tol < 1:
            raise ValueError("rel_tol must be within (0, 1)")
        if self.min_run < 1:
            raise ValueError("min_run must be >= 1")

    def as_dict(self) -> dict:
        return {"grid": list(self.grid) if self.grid else None,
                "grid_points": self.grid_points, "m_traj": self.m_traj,
                "visit_threshold": self.walk.visit_threshold,
                "spike_factor": self.walk.spike_factor,
                "max_steps": self.walk.max_steps, "rel_tol": self.rel_tol,
                "min_run": self.min_run}


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    s: np.ndarray
    temperature: float


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    p: np.ndarray

    @property
    def n(self) -> int:
        return self.p.shape[0]


@dataclass(frozen=True, eq=False)
class SharingMatrix:
    """
    Fraction of successful trajectories in which each pair of nodes landed
    in the same cluster.
    """
    q: np.ndarray
    m_traj: int
    failed: int = 0
    temperature: float = float("nan")

    def distance(self, labels: Sequence[str]) -> DistanceMatrix:
        return DistanceMatrix(1.0 - self.q, labels)

    def ultrametric_violations(self, labels: Sequence[str],
                               tol: float = 1e-9) -> Optional[float]:
        """Share of node triples on which 1 - q breaks the ultrametric rule"""
        n = self.q.shape[0]
        if n < 3:
            return None
        _, bad = is_ultrametric(self.distance(labels), tol)
        return bad / (n * (n - 1) * (n - 2) / 6)


class Selection(NamedTuple):
    temperature: float
    index: int
    partition: Partition


@dataclass(frozen=True)
class TemperatureProfile:
    """
    Cluster count N(T) across the temperature grid, with the sharing matrix
    behind every count and, once chosen, the selected temperatures.
    """
    grid: Tuple[float, ...]
    counts: Tuple[int, ...]
    sharing: Tuple[SharingMatrix, ...] = field(default=(), compare=False,
                                                repr=False)
    selected: Tuple[Selection, ...] = ()


@dataclass(frozen=True)
class DcgResult:
    tree: ClusterTree
    profile: TemperatureProfile
    empty_selection: bool = False


def similarity(D: DistanceMatrix, T: float) -> SimilarityMatrix:
    """
    s_ij = exp(-d_ij / T)
    :param D: Distances
    :type D: DistanceMatrix
    :param T: Temperature (> 0)
    :type T: float
    """
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    return SimilarityMatrix(np.exp(-D.d / T), float(T))


def transition(S: SimilarityMatrix) -> TransitionMatrix:
    """Row-normalize a similarity matrix into transition probabilities"""
    s = np.asarray(S.s, dtype=float)
    totals = s.sum(axis=1)
    # the diagonal is exp(0) = 1 so totals never vanish
    return TransitionMatrix(s / totals[:, None])


def _next_node(row: np.ndarray, alive: np.ndarray, current: int, u: float
               ) -> int:
    weights = np.where(alive, row, 0.0)
    weights[current] = 0.0
    mass = weights.sum()
    if mass < STUCK_MASS:
        candidates = np.flatnonzero(alive)
        others = candidates[candidates != current]
        if others.size:
            candidates = others
        return int(candidates[min(int(u * candidates.size),
                                  candidates.size - 1)])
    j = int(np.searchsorted(np.cumsum(weights), u * mass, side="right"))
    if j >= weights.size or weights[j] == 0:
        j = int(np.flatnonzero(weights)[-1])
    return j


def spikes(gaps: np.ndarray, spike_factor: float) -> np.ndarray:
    """
    Flag the removal gaps that exceed spike_factor times the median of the
    gaps before them. The first MIN_GAP_HISTORY gaps are measured against
    the median of that opening window, and the very first gap never counts.
    Series shorter than the window have no spikes.
    :param gaps: Steps between successive removals
    :type gaps: np.ndarray
    :rtype: np.ndarray
    """
    gaps = np.asarray(gaps, dtype=float)
    flags = np.zeros(gaps.size, dtype=bool)
    if gaps.size < MIN_GAP_HISTORY:
        return flags
    for i in range(1, gaps.size):
        history = gaps[:max(i, MIN_GAP_HISTORY)]
        flags[i] = gaps[i] > spike_factor * np.median(history)
    return flags


def _spike_partition(removals: Sequence[Tuple[int, int]], n: int,
                     spike_factor: float) -> Partition:
    steps = np.array([step for step, _ in removals], dtype=float)
    flags = spikes(np.diff(steps), spike_factor)
    labels = np.empty(n, dtype=np.int64)
    cluster = 0
    labels[removals[0][1]] = cluster
    for spike, (_, node) in zip(flags, removals[1:]):
        if spike:
            cluster += 1
        labels[node] = cluster
    return Partition(labels.tolist())


def walk_partition(P: TransitionMatrix, params: Optional[WalkParams] = None,
                   seed: int = 0) -> Tuple[Partition, List[Tuple[int, int]]]:
    """
    Run one removal walk and cut its removal order at waiting-time spikes.

    The walker starts at a uniformly chosen node (the start counts as a
    visit) and always moves to a different live node with probability
    proportional to the transition row restricted to live nodes. When that
    mass is negligible it jumps to a uniformly chosen live node. A node is
    removed as soon as its visit count exceeds the threshold. Since every
    arrival adds one visit to a live node, the walk ends within
    n * (visit_threshold + 1) steps.

    :param P: Transition matrix
    :type P: TransitionMatrix
    :param params: Walk parameters
    :type params: WalkParams
    :param seed: Seed for this trajectory
    :type seed: int
    :return: The partition and the (step, node) removal series
    :rtype: tuple
    """
    params = params or WalkParams()
    p = np.asarray(P.p, dtype=float)
    n = p.shape[0]
    if n == 1:
        return Partition((0,)), []
    rng = np.random.default_rng(seed)
    n_steps = n * (params.visit_threshold + 1)
    draws = rng.random(n_steps + 1)
    alive = np.ones(n, dtype=bool)
    visits = np.zeros(n, dtype=np.int64)
    current = min(int(draws[0] * n), n - 1)
    visits[current] = 1
    removals = []
    step = 0
    while True:
        if visits[current] > params.visit_threshold:
            alive[current] = False
            removals.append((step, current))
            if len(removals) == n:
                break
        if step >= params.max_steps:
            raise WalkError(f"walk stopped at the {params.max_steps} step cap "
                            f"with {n - len(removals)} nodes left", removals)
        step += 1
        current = _next_node(p[current], alive, current, draws[step])
        visits[current] += 1
    return _spike_partition(removals, n, params.spike_factor), removals


def sharing_ensemble(D: DistanceMatrix, T: float, m_traj: int = 100,
                     params: Optional[WalkParams] = None, seed: int = 0,
                     workers: Optional[int] = None) -> SharingMatrix:
    """
    Run m_traj independent walks at temperature T and average their
    co-membership. Trajectory t is seeded from (seed, t); a failed walk is
    retried once from (seed, t, 1) and otherwise left out of the average.
    :rtype: SharingMatrix
    """
    if m_traj < 1:
        raise ValueError("m_traj must be >= 1")
    P = transition(similarity(D, T))

    def run(t: int) -> Optional[Partition]:
        for attempt in range(MAX_FAILED_RETRIES + 1):
            keys = (t,) if attempt == 0 else (t, attempt)
            try:
                return walk_partition(P, params, derive_seed(seed, *keys))[0]
            except WalkError as e:
                logger.debug("trajectory %d at T=%g failed: %s", t, T, e)
        return None

    counts = np.zeros((D.n, D.n))
    ok = 0
    for partition in map_ordered(run, range(m_traj), workers):
        if partition is None:
            continue
        counts += partition.co_membership()
        ok += 1
    failed = m_traj - ok
    if ok == 0:
        raise WalkError(f"all {m_traj} trajectories failed at T={T}")
    if failed:
        logger.warning("%d of %d trajectories failed at T=%g", failed, m_traj,
                       T)
    q = counts / ok
    np.fill_diagonal(q, 1.0)
    return SharingMatrix(q, ok, failed, float(T))


def jacobi_eigenvalues(A: np.ndarray, tol: float = JACOBI_TOL,
                       max_sweeps: int = JACOBI_MAX_SWEEPS) -> np.ndarray:
    """
    Eigenvalues of a real symmetric matrix by cyclic Jacobi rotations.
    Sweeps stop once the off-diagonal Frobenius norm drops below
    tol * max(1, ||A||_F).
    :param A: Symmetric matrix
    :type A: np.ndarray
    :return: Eigenvalues, largest first
    :rtype: np.ndarray
    """
    a = np.array(A, dtype=float)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise ValueError("jacobi_eigenvalues: matrix must be square")
    limit = tol * max(1.0, float(np.linalg.norm(a)))

    def off_norm() -> float:
        return float(np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2)))

    for sweep in range(max_sweeps):
        if off_norm() <= limit:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                g = 100.0 * abs(apq)
                # below the precision of both diagonal entries
                if abs(a[p, p]) + g == abs(a[p, p]) and \
                        abs(a[q, q]) + g == abs(a[q, q]):
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                else:
                    # hypot keeps theta ** 2 finite for small apq
                    t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0))
                c = 1.0 / np.sqrt(t ** 2 + 1.0)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
    else:
        if off_norm() > limit:
            logger.warning("jacobi_eigenvalues: no convergence after %d "
                           "sweeps (off-diagonal norm %g)", max_sweeps,
                           off_norm())
    return np.sort(np.diag(a))[::-1]


def eigen_cluster_count(Q: SharingMatrix, rel_tol: float = 0.05) -> int:
    """
    Number of eigenvalues of the sharing matrix above rel_tol times the
    largest one.
    """
    q = np.asarray(Q.q, dtype=float)
    asym = float(np.max(np.abs(q - q.T))) if q.size else 0.0
    if asym > SYMMETRY_TOL:
        raise ValueError(f"sharing matrix is not symmetric (max error "
                         f"{asym:g})")
    eig = jacobi_eigenvalues(q)
    return max(1, int(np.count_nonzero(eig > rel_tol * eig[0])))


def composition(Q: SharingMatrix, N: int,
                labels: Optional[Sequence[str]] = None) -> Partition:
    """
    Partition of the nodes into N clusters: complete linkage on 1 - q, cut
    at N clusters.
    """
    n = Q.q.shape[0]
    if not 1 <= N <= n:
        raise ValueError(f"composition: N must be within [1, {n}], got {N}")
    if n == 1:
        return Partition((0,))
    labels = labels or [str(i) for i in range(n)]
    return hc_build(Q.distance(labels), COMPLETE).cut(N)


def profile(D: DistanceMatrix, grid: Sequence[float], m_traj: int = 100,
            params: Optional[WalkParams] = None, seed: int = 0,
            rel_tol: float = 0.05, workers: Optional[int] = None
            ) -> TemperatureProfile:
    """
    Cluster count at every grid temperature. Grid point g draws its
    trajectories from seed (seed, g).
    """
    grid = check_grid(grid)
    counts, sharing = [], []
    for g, T in enumerate(grid):
        Q = sharing_ensemble(D, T, m_traj, params, derive_seed(seed, g),
                             workers)
        counts.append(eigen_cluster_count(Q, rel_tol))
        sharing.append(Q)
        logger.info("T=%-12.6g N=%d", T, counts[-1])
    return TemperatureProfile(tuple(float(t) for t in grid), tuple(counts),
                              tuple(sharing))


def select_indices(counts: Sequence[int], min_run: int = 3) -> List[int]:
    """
    Grid indices chosen as level temperatures: the middle of every maximal
    run of at least min_run equal counts above 1. When two runs share a
    count, the hotter run is kept. Returned from hottest to coldest.
    """
    chosen = {}
    start = 0
    for end in range(1, len(counts) + 1):
        if end < len(counts) and counts[end] == counts[start]:
            continue
        length = end - start
        if counts[start] > 1 and length >= min_run:
            # later runs are hotter and replace earlier ones with this count
            chosen[counts[start]] = start + (length - 1) // 2
        start = end
    return sorted(chosen.values(), reverse=True)


def select_temperatures(prof: TemperatureProfile, min_run: int = 3
                        ) -> List[float]:
    return [prof.grid[i] for i in select_indices(prof.counts, min_run)]


def _nest(fine: Partition, coarse: Partition) -> Partition:
    """
    Coarse partition rebuilt from fine clusters: every fine cluster joins
    the coarse cluster holding most of its members (lowest id on ties).
    """
    fine_labels, coarse_labels = fine.labels, coarse.labels
    merged = np.empty_like(fine_labels)
    for members in fine.clusters():
        votes = np.bincount(coarse_labels[members], minlength=coarse.k)
        merged[members] = int(np.argmax(votes))
    return Partition(merged.tolist())


def synthesize_tree(prof: TemperatureProfile, labels: Sequence[str],
                    min_run: int = 3) -> Tuple[ClusterTree, TemperatureProfile]:
    """
    Turn a temperature profile into a ClusterTree. Selected compositions are
    nested from the coldest upwards, levels that collapse onto the level
    below are dropped, and a single-cluster root is added on top.
    :return: The tree and the profile with its selection filled in
    :rtype: tuple
    """
    labels = tuple(labels)
    n = len(labels)
    indices = select_indices(prof.counts, min_run)
    selected = tuple(
        Selection(prof.grid[i], i,
                  composition(prof.sharing[i], prof.counts[i], labels))
        for i in indices)
    prof = replace(prof, selected=selected)
    root_height = prof.grid[-1]
    if not selected:
        logger.warning("no temperature run of length >= %d with more than "
                       "one cluster; returning a root-only tree", min_run)
        return ClusterTree.root_only(labels, root_height), prof

    # coldest first
    raw = [(sel.temperature, sel.partition) for sel in reversed(selected)]
    nested = [raw[0]]
    for T, partition in raw[1:]:
        below = nested[-1][1]
        merged = _nest(below, partition)
        if merged == below:
            logger.info("level at T=%g collapses onto the level below",
                        T)
            continue
        nested.append((T, merged))
    root_height = max(root_height, 2 * nested[-1][0])
    if nested[-1][1].k > 1:
        nested.append((root_height, Partition.single(n)))
    levels = tuple(Level(T, p) for T, p in reversed(nested))
    return ClusterTree(levels, labels), prof


def dcg_run(D: DistanceMatrix, config: Optional[DcgConfig] = None,
            seed: int = 0) -> DcgResult:
    """
    Full DCG pipeline: default grid if none is configured, temperature
    profile, selection and tree synthesis.
    """
    config = config or DcgConfig()
    if D.n == 1:
        return DcgResult(ClusterTree.root_only(D.labels),
                         TemperatureProfile((), ()), empty_selection=True)
    grid = config.grid
    if grid is None:
        grid = default_grid(D.off_diagonal(), config.grid_points)
        if grid is None:
            logger.warning("all distances are zero; returning a root-only "
                           "tree")
            return DcgResult(ClusterTree.root_only(D.labels),
                             TemperatureProfile((), ()), empty_selection=True)
    prof = profile(D, grid, config.m_traj, config.walk, seed, config.rel_tol,
                   config.workers)
    tree, prof = synthesize_tree(prof, D.labels, config.min_run)
    return DcgResult(tree, prof, empty_selection=not prof.selected)


def dcg_tree(D: DistanceMatrix, grid: Optional[Sequence[float]] = None,
             m_traj: int = 100, params: Optional[WalkParams] = None,
             seed: int = 0, **kwargs) -> ClusterTree:
    """
    Build the DCG tree of a distance matrix.
    :param D: Distances between n items
    :type D: DistanceMatrix
    :param grid: Strictly increasing temperatures (default grid if None)
    :param m_traj: Trajectories per temperature
    :param params: Walk parameters
    :param seed: Master seed; equal seeds give identical trees
    :rtype: ClusterTree
    """
    config = DcgConfig(grid=tuple(grid) if grid is not None else None,
                       m_traj=m_traj, walk=params or WalkParams(), **kwargs)
    return dcg_run(D, config, seed).tree
