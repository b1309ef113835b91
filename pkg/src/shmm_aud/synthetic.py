"""Synthetic corpora drawn from a planted subspace.

Used for recovery tests and for self-contained demos of the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import N_STATES, Layout
from .subspace import link_arrays
from .train import Utterance


@dataclass
class PlantedSubspace:
    W: np.ndarray
    b: np.ndarray
    layout: Layout

    @property
    def P(self):
        return self.W.shape[1]

    def unit_arrays(self, h):
        """(means, variances, weights) of the unit with embedding h."""
        means, logvar, logw = link_arrays(self.W @ h + self.b, self.layout)
        return means, np.exp(logvar), np.exp(logw)


def planted_subspace(rng, n_components, dim, P, mean_scale=1.5, offset_scale=1.0,
                     logvar_scale=0.1, base_logvar=np.log(0.15), logit_scale=0.3):
    """Random W, b whose mean rows dominate the unit-to-unit variability."""
    layout = Layout(n_components, dim)
    W = np.zeros((layout.size, P))
    b = np.zeros(layout.size)
    mr, vr, lr = layout.mean_rows.ravel(), layout.logvar_rows.ravel(), \
        layout.logit_rows.ravel()
    W[mr] = mean_scale * rng.standard_normal((len(mr), P))
    W[vr] = logvar_scale * rng.standard_normal((len(vr), P))
    W[lr] = logit_scale * rng.standard_normal((len(lr), P))
    b[mr] = offset_scale * rng.standard_normal(len(mr))
    b[vr] = base_logvar
    return PlantedSubspace(W, b, layout)


def ring_embeddings(n_units, P, radius=1.5, phase=0.0):
    """Evenly spaced embeddings on a circle in the first two coordinates."""
    ang = phase + 2 * np.pi * np.arange(n_units) / n_units
    H = np.zeros((n_units, P))
    H[:, 0] = radius * np.cos(ang)
    if P > 1:
        H[:, 1] = radius * np.sin(ang)
    return H


def sample_segment(rng, arrays, self_loop=0.5):
    """Frames of one unit token: geometric state durations, GMM emissions."""
    means, var, w = arrays
    frames = []
    for i in range(N_STATES):
        dur = rng.geometric(1.0 - self_loop)
        comp = rng.choice(len(w[i]), size=dur, p=w[i])
        frames.append(means[i][comp] + np.sqrt(var[i][comp])
                      * rng.standard_normal((dur, means.shape[-1])))
    return np.concatenate(frames)


def sample_utterance(rng, unit_arrays, tokens, self_loop=0.5):
    """Concatenate sampled segments for the unit indices in ``tokens``.

    Returns features, per-frame unit indices and token start frames.
    """
    feats, labels, starts = [], [], []
    t = 0
    for u in tokens:
        seg = sample_segment(rng, unit_arrays[u], self_loop)
        feats.append(seg)
        labels.extend([u] * len(seg))
        starts.append(t)
        t += len(seg)
    return np.concatenate(feats), np.array(labels), np.array(starts)


def make_corpus(rng, planted: PlantedSubspace, H, n_utts, tokens_per_utt=(6, 12),
                self_loop=0.5, names=None, prefix="utt", language=None,
                frame_shift_sec=0.01):
    """Utterances with transcripts plus the frame-level ground truth.

    Returns (utterances, frame_labels) where frame_labels[k] holds the
    unit index of every frame of utterance k.
    """
    arrays = [planted.unit_arrays(h) for h in H]
    names = names or [f"p{i}" for i in range(len(H))]
    utts, truth = [], []
    for k in range(n_utts):
        n_tok = rng.integers(tokens_per_utt[0], tokens_per_utt[1] + 1)
        seq = rng.integers(0, len(H), size=n_tok)
        x, lab, _ = sample_utterance(rng, arrays, seq, self_loop)
        utts.append(Utterance(f"{prefix}{k:04d}", x, [names[u] for u in seq],
                              len(x) * frame_shift_sec, language))
        truth.append(lab)
    return utts, truth


def tone_waveform(rng, tokens, unit_freqs, sample_rate=16000, token_sec=(0.08, 0.16),
                  noise=0.01):
    """Toy waveform: each token is a short chord at its unit's frequencies."""
    pieces = []
    for u in tokens:
        n = int(sample_rate * rng.uniform(*token_sec))
        t = np.arange(n) / sample_rate
        freqs = unit_freqs[u]
        sig = sum(np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
                  for f in freqs) / len(freqs)
        pieces.append(0.5 * sig * np.hanning(n))
    x = np.concatenate(pieces)
    return x + noise * rng.standard_normal(len(x))
