"""
Matrix mimicking: random matrices that keep the row and column counts of
an observed block, used to judge whether a block pattern is supported by
the data.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from DcgKit.core import BINARY, DEFAULT_CODES, REAL, DataMatrix
from DcgKit.dm import TV, BlockDecomposition, EnergySamples, energy_density
from DcgKit.util import derive_seed, map_ordered

logger = logging.getLogger(__name__)

A, G, C, T = DEFAULT_CODES
LETTER_CODES = {"A": A, "G": G, "C": C, "T": T}
CODE_LETTERS = {code: letter for letter, code in LETTER_CODES.items()}
GAP_SYMBOLS = ("-", "")

FIXED = "fixed"
RESAMPLED = "resampled"
MODES = (FIXED, RESAMPLED)

SWAPS_PER_ONE = 10
MAX_ATTEMPTS = 20


class MarginError(ValueError):
    """Requested margins cannot be realised (on the whole grid or a mask)"""


class MimicError(RuntimeError):
    pass


@dataclass(frozen=True)
class MarginSpec:
    """
    Row and column sums of a 0/1 matrix.
    :param row_sums: ones per row
    :type row_sums: Sequence[int]
    :param col_sums: ones per column
    :type col_sums: Sequence[int]
    """
    row_sums: Tuple[int, ...]
    col_sums: Tuple[int, ...]

    def __post_init__(self):
        rows = tuple(int(r) for r in self.row_sums)
        cols = tuple(int(c) for c in self.col_sums)
        if not rows or not cols:
            raise ValueError("MarginSpec: need at least one row and column")
        if min(rows) < 0 or min(cols) < 0:
            raise ValueError("MarginSpec: sums must be non-negative")
        if sum(rows) != sum(cols):
            raise ValueError(f"MarginSpec: row sums total {sum(rows)} but "
                             f"column sums total {sum(cols)}")
        if max(rows) > len(cols):
            raise ValueError(f"MarginSpec: a row sum of {max(rows)} exceeds "
                             f"the {len(cols)} columns")
        if max(cols) > len(rows):
            raise ValueError(f"MarginSpec: a column sum of {max(cols)} exceeds"
                             f" the {len(rows)} rows")
        object.__setattr__(self, "row_sums", rows)
        object.__setattr__(self, "col_sums", cols)

    @classmethod
    def of(cls, grid: np.ndarray) -> "MarginSpec":
        """Margins measured from a 0/1 (or boolean) grid"""
        grid = np.asarray(grid, dtype=np.int64)
        return cls(tuple(grid.sum(axis=1)), tuple(grid.sum(axis=0)))

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.row_sums), len(self.col_sums)

    @property
    def total(self) -> int:
        return sum(self.row_sums)

    def gale_ryser_violation(self) -> Optional[int]:
        """
        First k for which the k largest row sums exceed
        sum_j min(col_sum_j, k), or None when the margins are realisable.
        """
        rows = np.sort(np.array(self.row_sums))[::-1]
        cols = np.array(self.col_sums)
        prefix = np.cumsum(rows)
        for k in range(1, len(rows) + 1):
            if prefix[k - 1] > np.minimum(cols, k).sum():
                return k
        return None


@dataclass(frozen=True, eq=False)
class BinaryLayer:
    grid: np.ndarray
    code: int


def _greedy_fill(ms: MarginSpec) -> np.ndarray:
    m, n = ms.shape
    grid = np.zeros((m, n), dtype=np.int8)
    remaining = np.array(ms.col_sums, dtype=np.int64)
    columns = np.arange(n)
    for i, r in enumerate(ms.row_sums):
        if r == 0:
            continue
        # largest remaining column sums first, lower index on ties
        chosen = np.lexsort((columns, -remaining))[:r]
        grid[i, chosen] = 1
        remaining[chosen] -= 1
    if (remaining != 0).any():
        raise MarginError("greedy fill could not meet the column sums")
    return grid


def _flow_fill(ms: MarginSpec, mask: np.ndarray) -> np.ndarray:
    """Integer max-flow source -> rows -> allowed cells -> columns -> sink"""
    m, n = ms.shape
    source, sink = 0, m + n + 1
    heads, tails, caps = [], [], []
    for i, r in enumerate(ms.row_sums):
        if r:
            heads.append(source)
            tails.append(1 + i)
            caps.append(r)
    cell_rows, cell_cols = np.nonzero(mask)
    heads.extend((1 + cell_rows).tolist())
    tails.extend((1 + m + cell_cols).tolist())
    caps.extend([1] * cell_rows.size)
    for j, c in enumerate(ms.col_sums):
        if c:
            heads.append(1 + m + j)
            tails.append(sink)
            caps.append(c)
    graph = csr_matrix((np.array(caps, dtype=np.int32),
                        (np.array(heads), np.array(tails))),
                       shape=(m + n + 2, m + n + 2))
    result = maximum_flow(graph, source, sink)
    if result.flow_value != ms.total:
        raise MarginError(f"margins cannot be met inside the cell mask (flow "
                          f"{result.flow_value} of {ms.total})")
    flow = result.flow.toarray()
    return (flow[1:m + 1, m + 1:m + n + 1] > 0).astype(np.int8)


def _swap(grid: np.ndarray, mask: Optional[np.ndarray], n_swaps: int,
          rng: np.random.Generator):
    m, n = grid.shape
    if n_swaps <= 0 or m < 2 or n < 2:
        return
    rows = rng.integers(m, size=(n_swaps, 2))
    cols = rng.integers(n, size=(n_swaps, 2))
    for (r1, r2), (c1, c2) in zip(rows, cols):
        if r1 == r2 or c1 == c2:
            continue
        a, b = grid[r1, c1], grid[r1, c2]
        if a == b or grid[r2, c1] != b or grid[r2, c2] != a:
            continue
        if mask is not None and not (mask[r1, c2] and mask[r2, c1] and
                                     mask[r1, c1] and mask[r2, c2]):
            continue
        grid[r1, c1], grid[r1, c2] = b, a
        grid[r2, c1], grid[r2, c2] = a, b


def sample_binary(ms: MarginSpec, seed: int = 0,
                  mask: Optional[np.ndarray] = None,
                  n_swaps: Optional[int] = None) -> np.ndarray:
    """
    Draw a 0/1 matrix with exactly the given margins: a deterministic
    feasible fill followed by random checkerboard swaps.
    :param ms: Requested margins
    :type ms: MarginSpec
    :param seed: Seed for the swaps
    :type seed: int
    :param mask: Boolean grid of cells allowed to hold a one
    :type mask: np.ndarray
    :param n_swaps: Swap attempts (default 10 per one)
    :type n_swaps: int
    :rtype: np.ndarray
    """
    m, n = ms.shape
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (m, n):
            raise ValueError(f"sample_binary: mask shape {mask.shape} does not "
                             f"match margins {m}x{n}")
        if mask.all():
            mask = None
    if ms.total == 0:
        return np.zeros((m, n), dtype=np.int8)
    if mask is None:
        k = ms.gale_ryser_violation()
        if k is not None:
            raise MarginError(f"margins violate the Gale-Ryser inequality at "
                              f"k={k}: the {k} largest row sums exceed "
                              f"sum(min(col_sum, {k}))")
        grid = _greedy_fill(ms)
    else:
        grid = _flow_fill(ms, mask)
    if n_swaps is None:
        n_swaps = SWAPS_PER_ONE * ms.total
    _swap(grid, mask, n_swaps, np.random.default_rng(seed))
    return grid


def slice_digits(M: DataMatrix) -> List[BinaryLayer]:
    """
    One indicator layer per declared code; gap cells are 0 in every layer,
    so sum(code * layer) rebuilds every observed cell.
    """
    if M.kind == REAL:
        raise ValueError("slice_digits: matrix must be binary or coded")
    return [BinaryLayer((M.values == code).astype(np.int8), code)
            for code in M.codes]


def encode_letters(cells) -> np.ndarray:
    """A/G/C/T symbols to codes 1/2/5/6, gaps to NaN"""
    cells = np.asarray(cells, dtype=str)
    out = np.full(cells.shape, np.nan)
    for index, symbol in np.ndenumerate(cells):
        symbol = symbol.strip().upper()
        if symbol in GAP_SYMBOLS:
            continue
        if symbol not in LETTER_CODES:
            raise ValueError(f"encode_letters: unknown symbol '{symbol}' at "
                             f"{index}")
        out[index] = LETTER_CODES[symbol]
    return out


def decode_letters(values) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    out = np.full(values.shape, "-", dtype="<U1")
    for index, code in np.ndenumerate(values):
        if not np.isnan(code):
            out[index] = CODE_LETTERS[int(code)]
    return out


def _as_grid(B) -> np.ndarray:
    values = B.values if isinstance(B, DataMatrix) else B
    return np.array(values, dtype=float)


def _check_nucleotides(block: np.ndarray):
    observed = block[~np.isnan(block)]
    if not np.isin(observed, DEFAULT_CODES).all():
        raise ValueError("block holds codes outside A/G/C/T")


def _wrap(B, out: np.ndarray):
    return B.with_values(out) if isinstance(B, DataMatrix) else out


def _next_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(2 ** 32))


def mimic_block_fixed(B: Union[DataMatrix, np.ndarray], seed: int = 0):
    """
    Keep which cells are purines (A/G) and which are pyrimidines (C/T) and
    reshuffle G among the purine cells and C among the pyrimidine cells
    under their original per-row and per-column counts.
    """
    block = _as_grid(B)
    _check_nucleotides(block)
    rng = np.random.default_rng(seed)
    out = block.copy()
    for inner, outer in ((G, A), (C, T)):
        cells = np.isin(block, (inner, outer))
        placed = sample_binary(MarginSpec.of(block == inner), _next_seed(rng),
                               mask=cells)
        out[cells] = np.where(placed[cells] == 1, inner, outer)
    return _wrap(B, out)


def mimic_block_resampled(B: Union[DataMatrix, np.ndarray], seed: int = 0):
    """
    Resample which cells are pyrimidines under the block's pyrimidine counts,
    then place G inside the new purine cells and C inside the new pyrimidine
    cells under the original G and C counts. An infeasible placement redraws
    the pyrimidine cells, up to 20 times.
    """
    block = _as_grid(B)
    _check_nucleotides(block)
    observed = ~np.isnan(block)
    pyrimidines = MarginSpec.of(np.isin(block, (C, T)))
    g_margins = MarginSpec.of(block == G)
    c_margins = MarginSpec.of(block == C)
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng(derive_seed(seed, attempt))
        new_ct = sample_binary(pyrimidines, _next_seed(rng),
                               mask=observed).astype(bool)
        new_ag = observed & ~new_ct
        try:
            g = sample_binary(g_margins, _next_seed(rng), mask=new_ag)
            c = sample_binary(c_margins, _next_seed(rng), mask=new_ct)
        except MarginError as e:
            logger.debug("resampled block attempt %d infeasible: %s", attempt,
                         e)
            continue
        out = np.full(block.shape, np.nan)
        out[new_ag] = np.where(g[new_ag] == 1, G, A)
        out[new_ct] = np.where(c[new_ct] == 1, C, T)
        return _wrap(B, out)
    raise MimicError(f"could not fill a resampled {block.shape[0]}x"
                     f"{block.shape[1]} block in {MAX_ATTEMPTS} attempts")


def mimic_block_sliced(B: Union[DataMatrix, np.ndarray], codes: Sequence[int],
                       seed: int = 0):
    """
    Mimic a block over any code set one binary layer at a time: each code is
    placed under its own margins inside the cells still free, and the last
    code takes what is left.
    """
    block = _as_grid(B)
    observed = ~np.isnan(block)
    present = [code for code in codes if (block == code).any()]
    if len(present) < 2:
        return _wrap(B, block.copy())
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng(derive_seed(seed, attempt))
        out = np.full(block.shape, np.nan)
        free = observed.copy()
        try:
            for code in present[:-1]:
                layer = sample_binary(MarginSpec.of(block == code),
                                      _next_seed(rng), mask=free) == 1
                out[layer] = code
                free &= ~layer
        except MarginError as e:
            logger.debug("sliced block attempt %d infeasible: %s", attempt, e)
            continue
        out[free] = present[-1]
        return _wrap(B, out)
    raise MimicError(f"could not fill a sliced {block.shape[0]}x"
                     f"{block.shape[1]} block in {MAX_ATTEMPTS} attempts")


def mimic_block(block: np.ndarray, codes: Sequence[int], mode: str = FIXED,
                seed: int = 0) -> np.ndarray:
    """Mimic one block with the nucleotide modes when they apply"""
    if mode not in MODES:
        raise ValueError(f"unknown mimic mode '{mode}', expected one of "
                         f"{MODES}")
    observed = block[~np.isnan(block)]
    if tuple(codes) == DEFAULT_CODES and np.isin(observed,
                                                 DEFAULT_CODES).all():
        if mode == FIXED:
            return mimic_block_fixed(block, seed)
        return mimic_block_resampled(block, seed)
    return mimic_block_sliced(block, codes, seed)


def mimic_ensemble(M: DataMatrix, bd: BlockDecomposition, n_rep: int = 100,
                   mode: str = FIXED, seed: int = 0, method: str = TV,
                   keep: int = 0, workers: Optional[int] = None
                   ) -> EnergySamples:
    """
    Energy density of n_rep matrices in which every block has been mimicked
    independently. Replicate r, block b draws from seed (seed, r, b) so the
    ensemble does not depend on the worker count.
    :param M: Binary or coded matrix
    :type M: DataMatrix
    :param bd: Block decomposition of M
    :type bd: BlockDecomposition
    :param n_rep: Number of replicates
    :type n_rep: int
    :param mode: "fixed" or "resampled" for nucleotide blocks
    :type mode: str
    :param seed: Master seed
    :type seed: int
    :param method: Energy method, see energy_density
    :type method: str
    :param keep: Number of mimicked matrices to return with the samples
    :type keep: int
    :rtype: EnergySamples
    """
    if n_rep < 1:
        raise ValueError("n_rep must be >= 1")
    if M.kind == REAL:
        raise ValueError("mimic_ensemble: matrix must be binary or coded")
    if mode not in MODES:
        raise ValueError(f"unknown mimic mode '{mode}', expected one of "
                         f"{MODES}")
    codes = (0, 1) if M.kind == BINARY else M.codes

    def replicate(r: int):
        out = M.values.copy()
        for b, (_, rows, cols) in enumerate(bd.blocks()):
            cells = np.ix_(rows, cols)
            out[cells] = mimic_block(M.values[cells], codes, mode,
                                     derive_seed(seed, r, b))
        return energy_density(M, bd, method, values=out), \
            (out if r < keep else None)

    results = map_ordered(replicate, range(n_rep), workers)
    observed = energy_density(M, bd, method)
    logger.info("%s: observed energy %.6g, %d replicates", bd.label, observed,
                n_rep)
    return EnergySamples(tuple(e for e, _ in results), bd.label, observed,
                         tuple(g for _, g in results if g is not None))
