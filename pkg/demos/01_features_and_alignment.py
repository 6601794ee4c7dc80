"""From a waveform to log-mels, back to audio, and DTW between two takes.

    python demos/01_features_and_alignment.py
"""

import numpy as np

from invvc.alignment import align_pair, dtw
from invvc.audio import MelConfig, griffin_lim_invert, mel_spectrogram
from invvc.evaluation import msd
from invvc.synthetic import speech_like

cfg = MelConfig()
x = speech_like(1.0, seed=0)
mel = mel_spectrogram(x, cfg)
print(f"1 s at 16 kHz -> {mel.shape[0]} frames x {mel.shape[1]} mel channels")
print(f"log-mel range {mel.min():.2f} .. {mel.max():.2f} (floor ln 1e-5 = {np.log(1e-5):.2f})")

# Griffin-Lim is only for listening; the metrics live on the mels
history = []
wav = griffin_lim_invert(mel, cfg, iterations=60, history=history)
back = mel_spectrogram(wav, cfg)
err_db = np.mean(np.abs(back - mel)) * 10 / np.log(10)
print(f"spectral convergence {history[0]:.3f} -> {history[-1]:.3f} over 60 iterations")
print(f"mel round trip through Griffin-Lim: mean |error| {err_db:.2f} dB")

# a slower second take of the "same sentence": drop every 4th frame of a different noise draw
other = mel_spectrogram(speech_like(1.0, seed=1), cfg)
other = np.delete(other, np.arange(0, len(other), 4), axis=0)
path = dtw(mel, other)
pair = align_pair(mel, other)
print(f"DTW: {len(mel)} vs {len(other)} frames, path length {len(path)}, cost {path.total_cost:.1f}")
print(f"aligned pair has {len(pair)} rows on each side")
print(f"MSD between the takes: {msd(mel, other):.2f} dB")
