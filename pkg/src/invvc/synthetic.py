"""Toy corpora standing in for real speech: smooth random log-mel sequences,
a linear parallel task, and multi-speaker sets with per-speaker channel offsets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import AlignedPair
from .model import orthonormal


def random_mels(rng, n_frames: int, n_channels: int = 80, level: float = -4.0) -> np.ndarray:
    """Temporally and spectrally smooth random log-mel-like frames."""
    raw = rng.standard_normal((n_frames + 8, n_channels + 8))
    # smooth over time and frequency with a short box filter
    k = np.ones(5) / 5
    sm = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 0, raw)
    sm = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 1, sm)
    sm = sm[4 : 4 + n_frames, 4 : 4 + n_channels]
    tilt = np.linspace(0.5, -0.5, n_channels)
    return level + tilt + 2.0 * sm


@dataclass
class LinearTask:
    P: np.ndarray
    b: np.ndarray
    pairs: list[AlignedPair]

    def target_of(self, source: np.ndarray) -> np.ndarray:
        return source @ self.P.T + self.b


def linear_task(
    n_pairs: int = 200,
    n_frames: int = 40,
    n_channels: int = 80,
    seed: int = 0,
    bias_scale: float = 0.5,
) -> LinearTask:
    """Parallel pairs with ``target = P @ source + b`` per frame, P orthonormal."""
    rng = np.random.default_rng(seed)
    P = orthonormal(n_channels, rng)
    b = bias_scale * rng.standard_normal(n_channels)
    task = LinearTask(P, b, [])
    for _ in range(n_pairs):
        src = random_mels(rng, n_frames, n_channels)
        task.pairs.append(AlignedPair(src, task.target_of(src)))
    return task


@dataclass
class SpeakerCorpus:
    """Parallel utterances from several source speakers and one target."""

    source_offsets: list[np.ndarray]
    target_offset: np.ndarray
    sources: list[list[np.ndarray]]  # [speaker][utterance]
    targets: list[np.ndarray]  # one per sentence


def speaker_corpus(
    n_speakers: int = 3,
    n_sentences: int = 40,
    n_frames: tuple[int, int] = (40, 60),
    n_channels: int = 80,
    offset_scale: float = 1.5,
    seed: int = 0,
) -> SpeakerCorpus:
    """Each speaker adds a fixed smooth channel offset to shared sentence content.

    Frame counts are the same for every speaker of a sentence, so pairs are
    already aligned.
    """
    rng = np.random.default_rng(seed)

    def offset():
        raw = rng.standard_normal(n_channels + 8)
        sm = np.convolve(raw, np.ones(9) / 3, mode="same")[4 : 4 + n_channels]
        return offset_scale * sm

    src_off = [offset() for _ in range(n_speakers)]
    tgt_off = offset()
    sources = [[] for _ in range(n_speakers)]
    targets = []
    for _ in range(n_sentences):
        t = int(rng.integers(n_frames[0], n_frames[1] + 1))
        content = random_mels(rng, t, n_channels)
        for k in range(n_speakers):
            sources[k].append(content + src_off[k])
        targets.append(content + tgt_off)
    return SpeakerCorpus(src_off, tgt_off, sources, targets)


def speech_like(seconds: float = 1.0, sample_rate: int = 16000, seed: int = 0) -> np.ndarray:
    """A voiced, vowel-like test signal: gliding harmonics under formant peaks plus breath noise."""
    rng = np.random.default_rng(seed)
    n = int(seconds * sample_rate)
    t = np.arange(n) / sample_rate
    f0 = 120 + 30 * np.sin(2 * np.pi * 1.5 * t)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    formants = [(700, 130), (1220, 70), (2600, 160)]
    x = np.zeros(n)
    for h in range(1, 40):
        fh = h * f0
        amp = sum(np.exp(-0.5 * ((fh - fc) / bw) ** 2) for fc, bw in formants) + 0.05 / h
        x += np.where(fh < sample_rate / 2, amp, 0.0) * np.sin(h * phase)
    env = 0.6 + 0.4 * np.sin(2 * np.pi * 3 * t) ** 2
    x = env * x + 0.01 * rng.standard_normal(n)
    return 0.5 * x / np.abs(x).max()
