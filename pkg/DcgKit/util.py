import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

THREADS_ENV = "DCGKIT_THREADS"
DEFAULT_GRID_POINTS = 30
MANIFEST_NAME = "manifest.json"


def derive_seed(seed: int, *keys: int) -> int:
    """
    Derive an independent 32-bit seed from a master seed and a path of
    integer keys (trajectory index, grid index, replicate, block, ...).
    :param seed: Master seed
    :type seed: int
    :param keys: Position of the consumer in the run
    :type keys: int
    :return: Seed for np.random.default_rng
    :rtype: int
    """
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("derive_seed: seeds and keys must be non-negative")
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return int(ss.generate_state(1)[0])


def worker_count(workers: Optional[int] = None) -> int:
    """
    Number of worker threads. An explicit value wins, otherwise the
    DCGKIT_THREADS environment variable, otherwise 1.
    """
    if workers is None:
        env = os.environ.get(THREADS_ENV, "").strip()
        if not env:
            return 1
        try:
            workers = int(env)
        except ValueError:
            logger.warning("%s=%r is not an integer; using 1 thread",
                           THREADS_ENV, env)
            return 1
        if workers < 1:
            logger.warning("%s=%d is below 1; using 1 thread", THREADS_ENV,
                           workers)
    return max(1, int(workers))


def map_ordered(func: Callable, items: Iterable, workers: Optional[int] = None
                ) -> List:
    """
    Apply func to every item, optionally on a thread pool. Results come back
    in input order whatever the worker count.
    """
    items = list(items)
    workers = worker_count(workers)
    if workers == 1 or len(items) < 2:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def log_grid(lo: float, hi: float, count: int) -> np.ndarray:
    """
    Log-spaced temperature grid.
    :param lo: Lowest temperature (> 0)
    :param hi: Highest temperature (> lo)
    :param count: Number of points (>= 3)
    :rtype: np.ndarray
    """
    if not (lo > 0 and hi > lo):
        raise ValueError(f"grid bounds must satisfy 0 < lo < hi, got {lo}, "
                         f"{hi}")
    if count < 3:
        raise ValueError(f"grid needs at least 3 points, got {count}")
    return np.geomspace(lo, hi, int(count))


def parse_grid(text: str) -> np.ndarray:
    """
    Parse a grid given as "lo:hi:count" (log-spaced) or as a comma separated
    list of temperatures.
    """
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"grid '{text}' must look like lo:hi:count")
        try:
            lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError:
            raise ValueError(f"grid '{text}' must look like lo:hi:count")
        return log_grid(lo, hi, count)
    try:
        grid = np.array([float(t) for t in text.split(",") if t.strip()])
    except ValueError:
        raise ValueError(f"grid '{text}' is not a list of numbers")
    check_grid(grid)
    return grid


def check_grid(grid: Sequence[float]) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 3:
        raise ValueError("temperature grid needs at least 3 points")
    if not (grid > 0).all() or not np.isfinite(grid).all():
        raise ValueError("temperatures must be positive and finite")
    if not (np.diff(grid) > 0).all():
        raise ValueError("temperature grid must be strictly increasing")
    return grid


def default_grid(distances: np.ndarray, count: int = DEFAULT_GRID_POINTS
                 ) -> Optional[np.ndarray]:
    """
    Grid spanning one decade below the median pairwise distance to one decade
    above the largest. Falls back to the smallest positive distance when the
    median is zero. Returns None when every distance is zero.
    :param distances: Off-diagonal distances
    :type distances: np.ndarray
    """
    distances = np.asarray(distances, dtype=float)
    positive = distances[distances > 0]
    if positive.size == 0:
        return None
    median = float(np.median(distances))
    lo = (median if median > 0 else float(positive.min())) / 10
    hi = float(positive.max()) * 10
    return log_grid(lo, hi, count)


def file_digest(path: str) -> str:
    """sha256 of a file's bytes"""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """
    Record of one CLI run, written next to its outputs so the run can be
    repeated and checked with `dcgkit verify`.
    """
    command: str
    argv: List[str]
    parameters: Dict
    seed: Optional[int] = None
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    seconds: float = 0.0
    started: float = field(default_factory=time.time)
    cwd: str = field(default_factory=os.getcwd)

    def add_input(self, path: str):
        self.inputs[os.path.abspath(path)] = file_digest(path)

    def finish(self, out_dir: str):
        """Hash every file written to out_dir and save the manifest there"""
        self.outputs = {}
        for root, _, files in os.walk(out_dir):
            for name in sorted(files):
                path = os.path.join(root, name)
                rel = os.path.relpath(path, out_dir)
                if rel == MANIFEST_NAME:
                    continue
                self.outputs[rel] = file_digest(path)
        self.seconds = round(time.time() - self.started, 3)
        path = os.path.join(out_dir, MANIFEST_NAME)
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True, default=str)
            f.write("\n")
        logger.info("wrote %s (%d outputs)", path, len(self.outputs))
        return path


def read_manifest(path: str) -> RunManifest:
    with open(path, "r") as f:
        data = json.load(f)
    try:
        return RunManifest(**data)
    except TypeError as e:
        raise ValueError(f"{path} is not a DcgKit manifest: {e}")


def compare_outputs(expected: Dict[str, str], out_dir: str) -> List[str]:
    """
    Names of outputs whose digest differs from (or is missing in) out_dir.
    """
    mismatched = []
    for rel, digest in sorted(expected.items()):
        path = os.path.join(out_dir, rel)
        if not os.path.exists(path) or file_digest(path) != digest:
            mismatched.append(rel)
    return mismatched
