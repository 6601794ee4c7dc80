"""Objective metrics: mel-spectrogram distortion, speaker similarity, round trips."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .alignment import dtw

# MCD constant 10 * sqrt(2) / ln(10), applied to natural-log mel differences
MSD_CONSTANT = 10.0 * math.sqrt(2.0) / math.log(10.0)

Embedder = Callable[[np.ndarray], np.ndarray]


class InsufficientPairsError(ValueError):
    pass


def msd(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over the DTW path of ``K * ||a_i - b_j||``, in dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    path = dtw(a, b)
    diff = a[path.src_index] - b[path.tgt_index]
    per_frame = MSD_CONSTANT * np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return float(per_frame.mean())


@dataclass
class MsdReport:
    names: list[str]
    values: list[float]
    frames: list[int]

    @property
    def mean_msd(self) -> float:
        return float(np.mean(self.values)) if self.values else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["utterance", "frames", "msd_db"])
        for name, n, v in zip(self.names, self.frames, self.values):
            w.writerow([name, n, f"{v:.6f}"])
        w.writerow(["mean", sum(self.frames), f"{self.mean_msd:.6f}"])
        return buf.getvalue()


def msd_report(refs: Sequence[np.ndarray], hyps: Sequence[np.ndarray], names=None) -> MsdReport:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    names = list(names) if names is not None else [str(i) for i in range(len(refs))]
    return MsdReport(
        names,
        [msd(r, h) for r, h in zip(refs, hyps)],
        [int(np.asarray(r).shape[0]) for r in refs],
    )


def cosine_similarity(e1, e2) -> float:
    e1 = np.asarray(e1, dtype=np.float64).ravel()
    e2 = np.asarray(e2, dtype=np.float64).ravel()
    if e1.shape != e2.shape:
        raise ValueError(f"embedding lengths differ: {e1.size} vs {e2.size}")
    n1 = np.linalg.norm(e1)
    n2 = np.linalg.norm(e2)
    if n1 == 0 or n2 == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.dot(e1 / n1, e2 / n2))


def reference_embedder(mel: np.ndarray) -> np.ndarray:
    """Per-channel temporal means followed by per-channel standard deviations."""
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[0] < 1:
        raise ValueError("reference_embedder needs a non-empty (T, C) matrix")
    return np.concatenate([mel.mean(axis=0), mel.std(axis=0)])


@dataclass
class PairSet:
    """A named collection to score.

    ``mode`` decides which (left, right) index pairs are eligible:

    * ``within``: unordered pairs of distinct items of ``left``
    * ``matched``: ``(i, i)`` between ``left`` and ``right``
    * ``cross``: ``(i, j)`` with ``i != j`` between ``left`` and ``right``
    """

    name: str
    left: Sequence[np.ndarray]
    right: Sequence[np.ndarray] | None = None
    mode: str = "within"

    def candidates(self) -> list[tuple[int, int]]:
        n = len(self.left)
        if self.mode == "within":
            return [(i, j) for i in range(n) for j in range(i + 1, n)]
        if self.right is None:
            raise ValueError(f"set {self.name!r}: mode {self.mode!r} needs a right-hand side")
        m = len(self.right)
        if self.mode == "matched":
            if n != m:
                raise ValueError(f"set {self.name!r}: matched sides differ ({n} vs {m})")
            return [(i, i) for i in range(n)]
        if self.mode == "cross":
            return [(i, j) for i in range(n) for j in range(m) if i != j]
        raise ValueError(f"unknown pairing mode {self.mode!r}")


@dataclass
class SimilarityReport:
    name: str
    mean_score: float
    pair_count: int


def similarity_suite(
    sets: Sequence[PairSet],
    embedder: Embedder = reference_embedder,
    pairs_per_set: int = 1200,
    seed: int = 0,
) -> list[SimilarityReport]:
    """Mean cosine score over ``pairs_per_set`` sampled unique pairs per set."""
    rng = np.random.default_rng(seed)
    reports = []
    for s in sets:
        if not len(s.left) or (s.right is not None and not len(s.right)):
            raise InsufficientPairsError(f"set {s.name!r} is empty")
        cands = s.candidates()
        if len(cands) < pairs_per_set:
            raise InsufficientPairsError(
                f"set {s.name!r} offers {len(cands)} distinct pairs, {pairs_per_set} requested"
            )
        chosen = rng.choice(len(cands), size=pairs_per_set, replace=False)
        left_emb = {}
        right_emb = {}
        right = s.left if s.right is None else s.right
        scores = []
        for k in sorted(chosen):
            i, j = cands[k]
            if i not in left_emb:
                left_emb[i] = embedder(s.left[i])
            if j not in right_emb:
                right_emb[j] = embedder(right[j])
            scores.append(cosine_similarity(left_emb[i], right_emb[j]))
        reports.append(SimilarityReport(s.name, float(np.mean(scores)), pairs_per_set))
    return reports


def similarity_csv(reports: Sequence[SimilarityReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["set", "pairs", "mean_cosine"])
    for r in reports:
        w.writerow([r.name, r.pair_count, f"{r.mean_score:.6f}"])
    total = sum(r.pair_count for r in reports)
    overall = sum(r.mean_score * r.pair_count for r in reports) / total if total else float("nan")
    w.writerow(["mean", total, f"{overall:.6f}"])
    return buf.getvalue()


@dataclass
class RoundTripRow:
    name: str
    max_abs_error: float
    msd_db: float


def roundtrip_report(model, mels: Sequence[np.ndarray] | Mapping[str, np.ndarray]) -> list[RoundTripRow]:
    """Run convert then invert on each utterance and measure the reconstruction."""
    items = mels.items() if isinstance(mels, Mapping) else ((str(i), m) for i, m in enumerate(mels))
    rows = []
    for name, mel in items:
        inv = model.invert(model.convert(mel))
        err = float(np.abs(np.asarray(inv, dtype=np.float64) - mel).max())
        rows.append(RoundTripRow(name, err, msd(mel, inv)))
    return rows


def roundtrip_csv(rows: Sequence[RoundTripRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["utterance", "max_abs_error", "msd_db"])
    for r in rows:
        w.writerow([r.name, f"{r.max_abs_error:.6e}", f"{r.msd_db:.6e}"])
    if rows:
        w.writerow(
            [
                "mean",
                f"{np.mean([r.max_abs_error for r in rows]):.6e}",
                f"{np.mean([r.msd_db for r in rows]):.6e}",
            ]
        )
    return buf.getvalue()
