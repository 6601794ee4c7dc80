"""WAV I/O, log-mel extraction and a Griffin-Lim inverse for listening tests."""

from __future__ import annotations

import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.optimize


class WavError(Exception):
    """Base class for WAV reading problems."""


class MalformedWavError(WavError):
    pass


class UnsupportedEncodingError(WavError):
    pass


class UnsupportedSampleRateError(WavError):
    pass


class UnsupportedChannelsError(WavError):
    pass


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    win_length: int = 400
    hop: int = 200
    fft_size: int = 512
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.win_length > self.fft_size:
            raise ValueError("win_length must not exceed fft_size")
        if self.fmax > self.sample_rate / 2:
            raise ValueError("fmax must not exceed the Nyquist frequency")
        if self.n_mels < 1 or self.hop < 1 or self.win_length < 1:
            raise ValueError("n_mels, hop and win_length must be positive")
        if not 0 <= self.fmin < self.fmax:
            raise ValueError("need 0 <= fmin < fmax")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def n_freqs(self) -> int:
        return self.fft_size // 2 + 1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000


def read_wav(path, expected_rate: int = 16000) -> Waveform:
    """Read a mono 16-bit PCM WAV file, scaling samples by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            n = fh.getnframes()
            if width != 2:
                raise UnsupportedEncodingError(
                    f"{path.name}: {8 * width}-bit samples, only 16-bit PCM is supported"
                )
            if channels != 1:
                raise UnsupportedChannelsError(f"{path.name}: {channels} channels, need mono")
            if rate != expected_rate:
                raise UnsupportedSampleRateError(
                    f"{path.name}: sample rate {rate} Hz, need {expected_rate} Hz"
                )
            raw = fh.readframes(n)
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedEncodingError(f"{path.name}: {msg}") from None
        raise MalformedWavError(f"{path.name}: {msg}") from None
    except EOFError:
        raise MalformedWavError(f"{path.name}: truncated header") from None
    if len(raw) != 2 * n:
        raise MalformedWavError(
            f"{path.name}: data chunk declares {n} samples but holds {len(raw) // 2}"
        )
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(np.asarray(w.samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def n_frames(n_samples: int, cfg: MelConfig) -> int:
    return 1 + (n_samples - cfg.win_length) // cfg.hop


def _frames(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise ValueError("expected a 1-d sample array")
    if len(samples) < cfg.win_length:
        raise ValueError(
            f"signal of {len(samples)} samples is shorter than one window ({cfg.win_length})"
        )
    t = n_frames(len(samples), cfg)
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop * np.arange(t)[:, None]
    return samples[idx]


def stft(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Complex STFT, frames x (fft_size/2 + 1); no centering."""
    return np.fft.rfft(_frames(samples, cfg) * hann(cfg.win_length), n=cfg.fft_size, axis=-1)


def stft_magnitude(w: Waveform | np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    samples = w.samples if isinstance(w, Waveform) else w
    return np.abs(stft(samples, cfg))


def istft(
    spec: np.ndarray, cfg: MelConfig, length: int | None = None, ridge: float = 1e-3
) -> np.ndarray:
    """Ridge-regularized least-squares inverse of :func:`stft` (weighted overlap-add).

    Without centering, the first and last samples are covered only by the
    window's tails; ``ridge`` (relative to the peak window energy) keeps
    those samples from being divided by ~0.
    """
    t = spec.shape[0]
    win = hann(cfg.win_length)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=-1)[:, : cfg.win_length] * win
    total = cfg.win_length + cfg.hop * (t - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(t):
        s = i * cfg.hop
        out[s : s + cfg.win_length] += frames[i]
        norm[s : s + cfg.win_length] += win * win
    out /= norm + ridge * norm.max()
    if length is not None:
        out = np.pad(out, (0, max(0, length - total)))[:length]
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, fft_size/2 + 1), unnormalized."""
    freqs = np.arange(cfg.n_freqs) * cfg.sample_rate / cfg.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"mel filter {int(empty[0])} has no FFT bin; n_mels={cfg.n_mels} is too large "
            f"for fft_size={cfg.fft_size}"
        )
    return fb


def mel_power(w: Waveform | np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Mel-band power before the log, frames x n_mels."""
    mag = stft_magnitude(w, cfg)
    return (mag * mag) @ mel_filterbank(cfg).T


def mel_spectrogram(w: Waveform | np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Natural-log mel energies, frames x n_mels, floored at ``ln(log_floor)``."""
    return np.log(np.maximum(mel_power(w, cfg), cfg.log_floor))


def mel_to_linear(mel: np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Linear magnitude from log-mels.

    Each frame's power spectrum is the non-negative combination of filter
    shapes whose filterbank response best matches the mel power (NNLS on
    the 80x80 Gram system), which keeps the estimate smooth and >= 0.  Cells
    sitting at the log floor carry no energy information and are taken as 0.
    """
    fb = mel_filterbank(cfg)
    gram = fb @ fb.T
    mel = np.asarray(mel, dtype=np.float64)
    power = np.where(mel <= np.log(cfg.log_floor) + 1e-9, 0.0, np.exp(mel))
    out = np.empty((power.shape[0], fb.shape[1]))
    for i, frame in enumerate(power):
        weights, _ = scipy.optimize.nnls(gram, frame)
        out[i] = weights @ fb
    return np.sqrt(np.maximum(out, 0.0))


def griffin_lim(
    magnitude: np.ndarray,
    cfg: MelConfig = MelConfig(),
    iterations: int = 60,
    seed: int = 0,
    history: list | None = None,
) -> np.ndarray:
    """Recover a signal whose STFT magnitude approximates ``magnitude``.

    If ``history`` is given, the spectral convergence of each iterate,
    ``||(|STFT(x)| - S)|| / ||S||``, is appended to it.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    length = cfg.win_length + cfg.hop * (magnitude.shape[0] - 1)
    ref = np.linalg.norm(magnitude) or 1.0
    x = istft(magnitude * phase, cfg, length)
    for _ in range(iterations):
        spec = stft(x, cfg)
        if history is not None:
            history.append(float(np.linalg.norm(np.abs(spec) - magnitude) / ref))
        x = istft(magnitude * np.exp(1j * np.angle(spec)), cfg, length)
    return x


def griffin_lim_invert(
    mel: np.ndarray,
    cfg: MelConfig = MelConfig(),
    iterations: int = 60,
    seed: int = 0,
    history: list | None = None,
) -> Waveform:
    """Log-mel -> waveform, peak-limited to 1."""
    x = griffin_lim(mel_to_linear(mel, cfg), cfg, iterations, seed, history)
    peak = np.abs(x).max(initial=0.0)
    if peak > 1.0:
        x = x / peak
    return Waveform(x, cfg.sample_rate)
