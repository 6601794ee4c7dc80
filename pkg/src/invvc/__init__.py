"""Invertible voice conversion on log-mel spectrograms."""

from .alignment import AlignedPair, AlignmentPath, align_pair, dtw
from .audio import MelConfig, Waveform, griffin_lim_invert, mel_spectrogram, read_wav, write_wav
from .evaluation import cosine_similarity, msd, reference_embedder, roundtrip_report, similarity_suite
from .model import InvvcModel, ModelConfig, NetConfig, init_model
from .training import Checkpoint, TrainConfig, load_checkpoint, mel_loss, save_checkpoint, train

__version__ = "0.1.0"
