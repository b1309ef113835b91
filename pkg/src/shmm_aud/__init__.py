"""Acoustic unit discovery with subspace hidden Markov models.

A phonetic subspace is learned from transcribed source languages and
then held fixed while a Dirichlet-process inventory of units is
discovered on untranscribed target speech.
"""

from .feats import FeatureMatrix, MfccConfig, Waveform, extract, read_features, write_features
from .inference import UnitTranscript, forward_backward, viterbi
from .metrics import abx_error, bitrate, cer, dtw_kl, levenshtein, nmi
from .train import (ModelContainer, TrainConfig, Utterance, compute_elbo, decode,
                    discover_units, load_model, save_model, train_subspace)

__all__ = [
    "FeatureMatrix", "MfccConfig", "Waveform", "extract", "read_features",
    "write_features", "UnitTranscript", "forward_backward", "viterbi", "abx_error",
    "bitrate", "cer", "dtw_kl", "levenshtein", "nmi", "ModelContainer", "TrainConfig",
    "Utterance", "compute_elbo", "decode", "discover_units", "load_model", "save_model",
    "train_subspace",
]

__version__ = "0.1.0"
