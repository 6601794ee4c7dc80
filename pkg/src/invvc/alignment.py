"""Exact DTW alignment of parallel mel sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# successor steps in tie-break order
_STEPS = ((1, 1), (1, 0), (0, 1))


@dataclass
class AlignmentPath:
    pairs: list[tuple[int, int]]
    total_cost: float

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def src_index(self) -> np.ndarray:
        return np.array([i for i, _ in self.pairs], dtype=np.int64)

    @property
    def tgt_index(self) -> np.ndarray:
        return np.array([j for _, j in self.pairs], dtype=np.int64)


@dataclass
class AlignedPair:
    source: np.ndarray
    target: np.ndarray
    path: AlignmentPath | None = None

    def __post_init__(self):
        if self.source.shape != self.target.shape:
            raise ValueError(
                f"aligned source {self.source.shape} and target {self.target.shape} differ"
            )

    def __len__(self) -> int:
        return self.source.shape[0]


def frame_costs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance between every frame of ``a`` and every frame of ``b``."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def cost_to_go(c: np.ndarray) -> np.ndarray:
    """``G[i, j]`` = cheapest cost of a path from (i, j) to the last cell, inclusive.

    Filled one anti-diagonal at a time, from the end backwards.
    """
    ta, tb = c.shape
    g = np.full((ta + 1, tb + 1), np.inf)
    g[ta - 1, tb - 1] = c[ta - 1, tb - 1]
    for s in range(ta + tb - 3, -1, -1):
        i = np.arange(max(0, s - tb + 1), min(ta - 1, s) + 1)
        j = s - i
        best = np.minimum(np.minimum(g[i + 1, j + 1], g[i + 1, j]), g[i, j + 1])
        g[i, j] = c[i, j] + best
    return g


def dtw(a: np.ndarray, b: np.ndarray) -> AlignmentPath:
    """Minimum-cost monotonic alignment of two frame sequences.

    Steps are (1,1), (1,0) and (0,1).  Among equal-cost paths the one whose
    step sequence, read from (0, 0), prefers the diagonal first, then
    (1,0), then (0,1) is returned.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("dtw expects 2-d frame matrices")
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ValueError("dtw of an empty sequence")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"frame dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    c = frame_costs(a, b)
    g = cost_to_go(c)
    ta, tb = c.shape
    i = j = 0
    pairs = [(0, 0)]
    total = float(c[0, 0])
    while (i, j) != (ta - 1, tb - 1):
        best = None
        for di, dj in _STEPS:
            v = g[i + di, j + dj]
            if best is None or v < best[0]:
                best = (v, i + di, j + dj)
        _, i, j = best
        pairs.append((i, j))
        total += float(c[i, j])
    return AlignmentPath(pairs, total)


def align_pair(src: np.ndarray, tgt: np.ndarray) -> AlignedPair:
    """Expand both sequences along their DTW path so rows correspond."""
    path = dtw(src, tgt)
    return AlignedPair(np.asarray(src)[path.src_index], np.asarray(tgt)[path.tgt_index], path)
