import math
import struct
import wave

import numpy as np
import pytest

from invvc.audio import (
    MalformedWavError,
    MelConfig,
    UnsupportedChannelsError,
    UnsupportedEncodingError,
    UnsupportedSampleRateError,
    Waveform,
    griffin_lim_invert,
    hann,
    hz_to_mel,
    mel_filterbank,
    mel_power,
    mel_spectrogram,
    n_frames,
    read_wav,
    stft_magnitude,
    write_wav,
)
from invvc.synthetic import speech_like

CFG = MelConfig()


def _write_pcm(path, samples, rate=16000, channels=1, width=2):
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(np.asarray(samples, dtype=f"<i{width}").tobytes())


# -- WAV ---------------------------------------------------------------------


def test_read_zero_pcm(tmp_path):
    _write_pcm(tmp_path / "z.wav", np.zeros(500))
    w = read_wav(tmp_path / "z.wav")
    assert w.sample_rate == 16000 and len(w.samples) == 500
    assert not w.samples.any()


def test_read_scaling(tmp_path):
    _write_pcm(tmp_path / "m.wav", [32767, -32768, 0])
    w = read_wav(tmp_path / "m.wav")
    assert w.samples[0] == 32767 / 32768 == 0.999969482421875
    assert w.samples[1] == -1.0


def test_unsupported_rate(tmp_path):
    _write_pcm(tmp_path / "r.wav", np.zeros(10), rate=44100)
    with pytest.raises(UnsupportedSampleRateError):
        read_wav(tmp_path / "r.wav")


def test_unsupported_channels(tmp_path):
    _write_pcm(tmp_path / "s.wav", np.zeros(20), channels=2)
    with pytest.raises(UnsupportedChannelsError):
        read_wav(tmp_path / "s.wav")


def test_unsupported_width(tmp_path):
    _write_pcm(tmp_path / "w.wav", np.zeros(20), width=4)
    with pytest.raises(UnsupportedEncodingError):
        read_wav(tmp_path / "w.wav")


def test_float_wav_is_unsupported_encoding(tmp_path):
    data = np.zeros(8, dtype="<f4").tobytes()
    fmt = struct.pack("<HHIIHH", 3, 1, 16000, 64000, 4, 32)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", 32) + data
    (tmp_path / "f.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(UnsupportedEncodingError):
        read_wav(tmp_path / "f.wav")


def test_malformed_and_truncated(tmp_path):
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(MalformedWavError):
        read_wav(tmp_path / "junk.wav")
    _write_pcm(tmp_path / "t.wav", np.arange(100))
    raw = (tmp_path / "t.wav").read_bytes()
    (tmp_path / "t.wav").write_bytes(raw[:-40])
    with pytest.raises(MalformedWavError):
        read_wav(tmp_path / "t.wav")


def test_write_read_round_trip(tmp_path):
    x = np.round(speech_like(0.1) * 32768) / 32768
    write_wav(tmp_path / "x.wav", Waveform(x))
    np.testing.assert_array_equal(read_wav(tmp_path / "x.wav").samples, x)


# -- STFT / mel ---------------------------------------------------------------


def test_frame_count_formula():
    assert n_frames(4000, CFG) == 19
    assert stft_magnitude(np.zeros(4000), CFG).shape == (19, 257)
    for n in (400, 401, 599, 600, 16000):
        assert mel_spectrogram(np.zeros(n), CFG).shape[0] == 1 + (n - 400) // 200


def test_silence():
    assert not stft_magnitude(np.zeros(1000), CFG).any()
    m = mel_spectrogram(np.zeros(16000), CFG)
    assert m.shape == (79, 80)
    np.testing.assert_array_equal(m, np.log(1e-5))
    assert m[0, 0] == pytest.approx(-11.512925464970229)


def test_too_short():
    with pytest.raises(ValueError, match="shorter"):
        mel_spectrogram(np.zeros(399), CFG)


def test_cosine_peaks_at_its_bin():
    k = 37
    n = np.arange(2000)
    x = np.cos(2 * np.pi * k * CFG.sample_rate / CFG.fft_size * n / CFG.sample_rate)
    mag = stft_magnitude(x, CFG)
    # direct DFT of the first frame
    frame = np.zeros(CFG.fft_size)
    frame[: CFG.win_length] = x[: CFG.win_length] * hann(CFG.win_length)
    direct = np.array(
        [abs(np.sum(frame * np.exp(-2j * np.pi * f * np.arange(512) / 512))) for f in range(257)]
    )
    np.testing.assert_allclose(mag[0], direct, atol=1e-9)
    assert (mag.argmax(axis=1) == k).all()


def test_filterbank():
    assert hz_to_mel(700.0) == pytest.approx(2595 * math.log10(2))
    assert hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)
    fb = mel_filterbank(CFG)
    assert fb.shape == (80, 257)
    assert (fb >= 0).all() and (fb.sum(axis=1) > 0).all()
    with pytest.raises(ValueError, match="too large"):
        mel_filterbank(MelConfig(n_mels=200, fft_size=256, win_length=256))


def test_channel_count_independent_of_length():
    for n in (400, 1234, 5000):
        assert mel_spectrogram(speech_like(n / 16000), CFG).shape[1] == 80


def test_translation_consistency():
    x = speech_like(0.5)
    full = mel_spectrogram(x, CFG)
    shifted = mel_spectrogram(x[CFG.hop :], CFG)
    np.testing.assert_array_equal(shifted, full[1 : 1 + len(shifted)])


def test_power_scales_quadratically():
    x = speech_like(0.3)
    np.testing.assert_allclose(mel_power(3 * x, CFG), 9 * mel_power(x, CFG), rtol=1e-12)


def test_floor_and_finiteness():
    rng = np.random.default_rng(0)
    for x in (rng.standard_normal(3000) * 1e-9, rng.standard_normal(3000), speech_like(0.2)):
        m = mel_spectrogram(x, CFG)
        assert np.isfinite(m).all() and (m >= np.log(1e-5)).all()


# -- Griffin-Lim -----------------------------------------------------------------


def test_griffin_lim_floor_is_near_silent():
    w = griffin_lim_invert(np.full((20, 80), np.log(1e-5)), CFG, iterations=5)
    assert np.abs(w.samples).max() < 1e-3


def test_griffin_lim_convergence_and_round_trip():
    mel = mel_spectrogram(speech_like(1.0), CFG)
    history = []
    w = griffin_lim_invert(mel, CFG, iterations=60, history=history)
    assert len(history) == 60
    assert all(b <= a for a, b in zip(history, history[1:]))
    assert np.abs(w.samples).max() <= 1.0
    back = mel_spectrogram(w, CFG)
    assert back.shape == mel.shape
    mean_db = np.mean(np.abs(back - mel)) * 10 / np.log(10)
    assert mean_db < 3.0


def test_griffin_lim_rejects_zero_iterations():
    with pytest.raises(ValueError):
        griffin_lim_invert(np.zeros((3, 80)), CFG, iterations=0)
