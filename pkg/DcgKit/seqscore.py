"""
Pairwise scoring of pre-aligned nucleotide sequences into a standardized
similarity matrix.
"""
import logging
from dataclasses import dataclass
from io import StringIO
from itertools import combinations
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from Bio import AlignIO, SeqIO

from DcgKit.core import CODED, DEFAULT_CODES, LETTER_CODES, DataMatrix
from DcgKit.util import map_ordered

logger = logging.getLogger(__name__)

ALPHABET = set("ACGT-")
GAP = "-"
FASTA = "aligned-fasta"
CLUSTAL = "clustal"
FORMATS = (FASTA, CLUSTAL)


@dataclass(frozen=True)
class ScoringParams:
    """
    :param gap_open: cost of opening a one-sided gap run
    :type gap_open: float
    :param gap_extend: cost per gap position in the run
    :type gap_extend: float
    """
    gap_open: float = 15.0
    gap_extend: float = 0.2

    def __post_init__(self):
        if self.gap_open < 0 or self.gap_extend < 0:
            raise ValueError("gap penalties must be non-negative")


@dataclass(frozen=True)
class AlignedSet:
    names: Tuple[str, ...]
    sequences: Tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        sequences = tuple(s.upper() for s in self.sequences)
        if len(names) != len(sequences):
            raise ValueError("AlignedSet: names and sequences differ in count")
        if len(sequences) < 2:
            raise ValueError(f"AlignedSet: need at least 2 sequences, got "
                             f"{len(sequences)}")
        if len(set(names)) != len(names):
            raise ValueError("AlignedSet: duplicate sequence names")
        width = len(sequences[0])
        for name, seq in zip(names, sequences):
            if len(seq) != width:
                raise ValueError(f"AlignedSet: '{name}' has length {len(seq)},"
                                 f" expected {width}")
            bad = set(seq) - ALPHABET
            if bad:
                raise ValueError(f"AlignedSet: '{name}' holds symbols "
                                 f"{sorted(bad)}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "sequences", sequences)

    @property
    def k(self) -> int:
        return len(self.names)

    @property
    def width(self) -> int:
        return len(self.sequences[0])

    def subset(self, names: Sequence[str]) -> "AlignedSet":
        """Re-scorable subgroup in the given order"""
        lookup = dict(zip(self.names, self.sequences))
        return AlignedSet(tuple(names), tuple(lookup[n] for n in names))


class PairScore(NamedTuple):
    raw: float
    common_length: int
    normalized: float
    matches: int = 0
    runs: Tuple[int, ...] = ()


class _Piece(NamedTuple):
    lineno: int
    length: int


def _fasta_lines(lines: List[str]) -> List[List[_Piece]]:
    records = []
    for lineno, line in enumerate(lines, start=1):
        if line.startswith(">"):
            records.append([_Piece(lineno, 0)])
        elif line.strip():
            if not records:
                raise ValueError(f"line {lineno}: sequence data before the "
                                 f"first '>' header")
            records[-1].append(_Piece(lineno, len(line.strip())))
    return records


def _clustal_lines(lines: List[str]
                   ) -> Tuple[List[str], List[List[_Piece]]]:
    names, records, row = [], [], 0
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line[0].isspace():
            row = 0
            continue
        if line.upper().startswith("CLUSTAL") and not records:
            continue
        fields = line.split()
        piece = _Piece(lineno, len(fields[1]) if len(fields) > 1 else 0)
        if row == len(records):
            names.append(fields[0])
            records.append([_Piece(lineno, 0)])
        records[row].append(piece)
        row += 1
    return names, records


def _locate(pieces: List[_Piece], col: int) -> int:
    """Line holding column col of a record"""
    for piece in pieces[1:]:
        if col < piece.length:
            return piece.lineno
        col -= piece.length
    return pieces[0].lineno


def _check_names(names: List[str], pieces: List[List[_Piece]]):
    seen = set()
    for name, where in zip(names, pieces):
        start = where[0].lineno
        if not name:
            raise ValueError(f"line {start}: empty record name")
        if name in seen:
            raise ValueError(f"line {start}: duplicate record '{name}'")
        seen.add(name)


def _validate(names: List[str], sequences: List[str],
              pieces: List[List[_Piece]]) -> AlignedSet:
    """Symbol, duplicate and length checks with the offending line"""
    if not names:
        raise ValueError("alignment holds no sequences")
    _check_names(names, pieces)
    for name, seq, where in zip(names, sequences, pieces):
        for col, ch in enumerate(seq):
            if ch not in ALPHABET:
                raise ValueError(f"line {_locate(where, col)}: record "
                                 f"'{name}' has symbol '{ch}' outside "
                                 f"A/C/G/T/- (column {col + 1})")
    width = len(sequences[0])
    for name, seq, where in zip(names, sequences, pieces):
        if len(seq) != width:
            raise ValueError(f"line {where[0].lineno}: record '{name}' has "
                             f"aligned length {len(seq)}, expected {width}")
    return AlignedSet(tuple(names), tuple(sequences))


def _parse_fasta(text: str) -> AlignedSet:
    pieces = _fasta_lines(text.splitlines())
    records = list(SeqIO.parse(StringIO(text), "fasta"))
    return _validate([r.id for r in records],
                     [str(r.seq).upper() for r in records], pieces)


def _parse_clustal(text: str) -> AlignedSet:
    lines = text.splitlines()
    header = next((i for i, l in enumerate(lines) if l.strip()), None)
    if header is None or not lines[header].upper().startswith("CLUSTAL"):
        raise ValueError("line 1: missing CLUSTAL header")
    names, pieces = _clustal_lines(lines)
    _check_names(names, pieces)
    try:
        alignment = AlignIO.read(StringIO("\n".join(lines[header:])),
                                 "clustal")
    except (ValueError, AssertionError) as e:
        raise ValueError(f"clustal: {e}")
    return _validate([r.id for r in alignment],
                     [str(r.seq).upper() for r in alignment], pieces)


def guess_format(text: str) -> str:
    first = next((l.strip() for l in text.splitlines() if l.strip()), "")
    if first.startswith(">"):
        return FASTA
    if first.upper().startswith("CLUSTAL"):
        return CLUSTAL
    raise ValueError("cannot tell the alignment format from the first line")


def parse_alignment(text: str, format: Optional[str] = None) -> AlignedSet:
    """
    Parse aligned FASTA or CLUSTAL text.
    :param text: File contents
    :type text: str
    :param format: "aligned-fasta" or "clustal", guessed when None
    :type format: str
    :rtype: AlignedSet
    """
    format = format or guess_format(text)
    if format == FASTA:
        return _parse_fasta(text)
    if format == CLUSTAL:
        return _parse_clustal(text)
    raise ValueError(f"unknown alignment format '{format}', expected one of "
                     f"{FORMATS}")


def pair_score_raw(s1: str, s2: str, params: Optional[ScoringParams] = None
                   ) -> PairScore:
    """
    Score two aligned sequences over the stretch where both have started and
    neither has ended. Columns where both have a gap are ignored. Every
    maximal one-sided gap run of length L costs gap_open + gap_extend * L,
    every match scores 1.
    :param s1: First aligned sequence
    :type s1: str
    :param s2: Second aligned sequence
    :type s2: str
    :param params: Gap penalties
    :type params: ScoringParams
    :return: raw score, compared length and raw / compared length
    :rtype: PairScore
    """
    params = params or ScoringParams()
    s1, s2 = s1.upper(), s2.upper()
    if len(s1) != len(s2):
        raise ValueError(f"sequences differ in aligned length ({len(s1)} vs "
                         f"{len(s2)})")
    spans = []
    for seq in (s1, s2):
        bases = [i for i, ch in enumerate(seq) if ch != GAP]
        if not bases:
            raise ValueError("nothing comparable: a sequence is all gaps")
        spans.append((bases[0], bases[-1]))
    start = max(spans[0][0], spans[1][0])
    stop = min(spans[0][1], spans[1][1])
    matches, compared = 0, 0
    runs = []
    run_owner = None
    for a, b in zip(s1[start:stop + 1], s2[start:stop + 1]):
        if a == GAP and b == GAP:
            continue
        compared += 1
        if a == GAP or b == GAP:
            owner = 0 if a == GAP else 1
            if owner == run_owner:
                runs[-1] += 1
            else:
                runs.append(1)
                run_owner = owner
            continue
        run_owner = None
        if a == b:
            matches += 1
    if compared == 0:
        raise ValueError("nothing comparable: the sequences do not overlap")
    penalty = sum(params.gap_open + params.gap_extend * L for L in runs)
    raw = float(matches - penalty)
    return PairScore(raw, compared, raw / compared, matches, tuple(runs))


def standardize(scores: np.ndarray) -> np.ndarray:
    """
    Min-max scale the off-diagonal entries onto [0, 1]; diagonal set to 1.
    """
    scores = np.array(scores, dtype=float)
    off = ~np.eye(scores.shape[0], dtype=bool)
    lo, hi = scores[off].min(), scores[off].max()
    if hi == lo:
        raise ValueError(f"cannot standardize: every pair scores {lo:g}")
    out = (scores - lo) / (hi - lo)
    np.fill_diagonal(out, 1.0)
    return out


def normalized_scores(aln: AlignedSet, params: Optional[ScoringParams] = None,
                      workers: Optional[int] = None
                      ) -> Tuple[np.ndarray, List[Tuple[int, int, PairScore]]]:
    """All pair scores, as a symmetric grid and as (i, j, score) records"""
    pairs = list(combinations(range(aln.k), 2))
    scored = map_ordered(
        lambda ij: pair_score_raw(aln.sequences[ij[0]], aln.sequences[ij[1]],
                                  params), pairs, workers)
    grid = np.zeros((aln.k, aln.k))
    records = []
    for (i, j), score in zip(pairs, scored):
        grid[i, j] = grid[j, i] = score.normalized
        records.append((i, j, score))
    return grid, records


def similarity_matrix(aln: AlignedSet, params: Optional[ScoringParams] = None,
                      workers: Optional[int] = None) -> np.ndarray:
    """
    Standardized similarity between every pair of aligned sequences.
    :param aln: At least 3 aligned sequences
    :type aln: AlignedSet
    :param params: Gap penalties
    :type params: ScoringParams
    :return: k x k symmetric matrix in [0, 1] with unit diagonal
    :rtype: np.ndarray
    """
    if aln.k < 3:
        raise ValueError(f"similarity_matrix: need at least 3 sequences, got "
                         f"{aln.k}")
    grid, _ = normalized_scores(aln, params, workers)
    return standardize(grid)


def polytypic_matrix(aln: AlignedSet) -> DataMatrix:
    """
    Coded site-by-sequence matrix of the polytypic columns of an alignment,
    the columns where at least two different nucleotides occur (gaps
    ignored). Rows are named site<column> with 1-based alignment columns;
    A, G, C and T are coded 1, 2, 5 and 6 and gaps become gap cells.
    :param aln: Aligned sequences
    :type aln: AlignedSet
    :rtype: DataMatrix
    """
    letters = np.array([list(seq) for seq in aln.sequences])
    codes = np.full(letters.shape, np.nan)
    for letter, code in LETTER_CODES.items():
        codes[letters == letter] = code
    sites = [j for j in range(aln.width)
             if len(set(letters[:, j].tolist()) - {GAP}) >= 2]
    if not sites:
        raise ValueError("alignment has no polytypic sites")
    logger.info("%d of %d alignment columns are polytypic", len(sites),
                aln.width)
    return DataMatrix(codes[:, sites].T, [f"site{j + 1}" for j in sites],
                      aln.names, kind=CODED, codes=DEFAULT_CODES)
