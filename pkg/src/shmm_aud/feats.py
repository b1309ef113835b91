"""MFCC extraction, delta features, mean normalization and feature files.

The binary feature format is::

    b"SHMF" | 0x01 | rows:u32 | cols:u32 | frame_shift:f32 | data:f32[rows*cols]

all little-endian, data row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct


FEATS_MAGIC = b"SHMF"
FEATS_VERSION = 1
_HEADER = struct.Struct("<4sBIIf")
LOG_FLOOR = 1e-10


class FeatureFormatError(ValueError):
    """Raised on malformed feature files."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        object.__setattr__(self, "samples",
                           np.asarray(self.samples, dtype=np.float64).ravel())

    @property
    def duration_sec(self):
        return len(self.samples) / self.sample_rate_hz


def _f32(x):
    return float(np.float32(x))


@dataclass(eq=False)
class FeatureMatrix:
    """Per-utterance T x D matrix of acoustic features.

    ``frame_shift_sec`` is stored at 32-bit precision so that a file
    roundtrip reproduces the object exactly.
    """

    data: np.ndarray
    frame_shift_sec: float = 0.010

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"feature matrix must be T x D with T, D >= 1, "
                             f"got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature matrix contains non-finite values")
        self.data = data
        self.frame_shift_sec = _f32(self.frame_shift_sec)

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return (self.frame_shift_sec == other.frame_shift_sec
                and self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class MfccConfig:
    num_ceps: int = 13
    window_sec: float = 0.025
    shift_sec: float = 0.010
    num_mel_filters: int = 26
    fft_size: int = 512
    delta_window: int = 2
    preemphasis: float = 0.97
    low_freq_hz: float = 0.0
    high_freq_hz: float | None = None
    mean_normalize: bool = True

    def validate(self, sample_rate_hz=16000):
        if self.num_ceps < 1 or self.num_mel_filters < 1:
            raise ValueError("num_ceps and num_mel_filters must be positive")
        if self.num_ceps > self.num_mel_filters:
            raise ValueError("num_ceps must not exceed num_mel_filters")
        if self.window_sec <= 0 or self.shift_sec <= 0:
            raise ValueError("window_sec and shift_sec must be positive")
        if self.delta_window < 1:
            raise ValueError("delta_window must be >= 1")
        win, _ = self.frame_params(sample_rate_hz)
        if self.fft_size < win:
            raise ValueError(f"fft_size {self.fft_size} is smaller than the "
                             f"window ({win} samples)")
        high = self.high_freq_hz or sample_rate_hz / 2
        if not 0 <= self.low_freq_hz < high <= sample_rate_hz / 2:
            raise ValueError("invalid filterbank frequency range")

    def frame_params(self, sample_rate_hz):
        """Window and hop lengths in samples."""
        win = int(round(self.window_sec * sample_rate_hz))
        hop = int(round(self.shift_sec * sample_rate_hz))
        return win, hop

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown MFCC config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def num_frames(num_samples, win, hop):
    if num_samples < win:
        raise ValueError(f"signal of {num_samples} samples is shorter than "
                         f"one window ({win} samples)")
    return (num_samples - win) // hop + 1


def frame_signal(signal, win, hop):
    n = num_frames(len(signal), win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return signal[idx]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(cfg: MfccConfig, sample_rate_hz):
    """Triangular mel filters as a (num_mel_filters, fft_size // 2 + 1) matrix.

    Also returns the FFT bin at the apex of each filter.
    """
    high = cfg.high_freq_hz or sample_rate_hz / 2
    mels = np.linspace(hz_to_mel(cfg.low_freq_hz), hz_to_mel(high),
                       cfg.num_mel_filters + 2)
    bins = np.floor((cfg.fft_size + 1) * mel_to_hz(mels)
                    / sample_rate_hz).astype(int)
    nbins = cfg.fft_size // 2 + 1
    fbank = np.zeros((cfg.num_mel_filters, nbins))
    for m in range(1, cfg.num_mel_filters + 1):
        left, center, right = bins[m - 1], bins[m], bins[m + 1]
        for k in range(left, center):
            fbank[m - 1, k] = (k - left) / max(center - left, 1)
        for k in range(center, right):
            fbank[m - 1, k] = (right - k) / max(right - center, 1)
        if center == right:
            # Degenerate filter at low resolution: keep its apex.
            fbank[m - 1, center] = 1.0
    return fbank, bins[1:-1]


def filterbank_energies(wave: Waveform, cfg: MfccConfig = MfccConfig()):
    """Mel filterbank energies (before the log), shape (T, num_mel_filters)."""
    cfg.validate(wave.sample_rate_hz)
    win, hop = cfg.frame_params(wave.sample_rate_hz)
    x = wave.samples
    if cfg.preemphasis:
        x = np.append(x[0], x[1:] - cfg.preemphasis * x[:-1])
    frames = frame_signal(x, win, hop) * np.hamming(win)
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size)) ** 2 / cfg.fft_size
    fbank, _ = mel_filterbank(cfg, wave.sample_rate_hz)
    return power @ fbank.T


def compute_mfcc(wave: Waveform, cfg: MfccConfig = MfccConfig()):
    """Static MFCCs (C0 included), shape T x num_ceps.

    T = floor((len - win) / hop) + 1; no padding is applied.
    """
    energies = filterbank_energies(wave, cfg)
    logfb = np.log(np.maximum(energies, LOG_FLOOR))
    ceps = dct(logfb, type=2, axis=1, norm="ortho")[:, :cfg.num_ceps]
    return FeatureMatrix(ceps, frame_shift_sec=cfg.shift_sec)


def _deltas(x, width):
    n = len(x)
    padded = np.concatenate([np.repeat(x[:1], width, axis=0), x,
                             np.repeat(x[-1:], width, axis=0)])
    denom = 2.0 * sum(k * k for k in range(1, width + 1))
    out = np.zeros_like(x)
    for k in range(1, width + 1):
        out += k * (padded[width + k:width + k + n]
                    - padded[width - k:width - k + n])
    return out / denom


def append_deltas(feats: FeatureMatrix, delta_window=2):
    """Stack statics, regression deltas and delta-deltas (3 x D columns)."""
    if delta_window < 1:
        raise ValueError("delta_window must be >= 1")
    d1 = _deltas(feats.data, delta_window)
    d2 = _deltas(d1, delta_window)
    return FeatureMatrix(np.hstack([feats.data, d1, d2]),
                         frame_shift_sec=feats.frame_shift_sec)


def mean_normalize(feats: FeatureMatrix):
    data = feats.data - feats.data.mean(axis=0, keepdims=True)
    # A second pass removes the rounding residue of the first.
    data -= data.mean(axis=0, keepdims=True)
    return FeatureMatrix(data, frame_shift_sec=feats.frame_shift_sec)


def extract(wave: Waveform, cfg: MfccConfig = MfccConfig()):
    """Full recipe: MFCC + deltas + delta-deltas, optionally mean-normalized."""
    feats = append_deltas(compute_mfcc(wave, cfg), cfg.delta_window)
    if cfg.mean_normalize:
        feats = mean_normalize(feats)
    return feats


def write_features(path, feats: FeatureMatrix):
    rows, cols = feats.data.shape
    header = _HEADER.pack(FEATS_MAGIC, FEATS_VERSION, rows, cols,
                          feats.frame_shift_sec)
    payload = np.ascontiguousarray(feats.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_features(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, version, rows, cols, shift = _HEADER.unpack_from(raw)
    if magic != FEATS_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != FEATS_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if rows == 0 or cols == 0:
        raise FeatureFormatError(f"{path}: empty matrix {rows}x{cols}")
    count = rows * cols
    if count >= 1 << 32:
        raise FeatureFormatError(f"{path}: dimension overflow {rows}x{cols}")
    expected = 4 * count
    body = raw[_HEADER.size:]
    if len(body) < expected:
        raise FeatureFormatError(
            f"{path}: truncated payload, header claims {rows}x{cols} "
            f"({count} values) but file holds {len(body) // 4}")
    if len(body) > expected:
        raise FeatureFormatError(f"{path}: {len(body) - expected} trailing bytes")
    data = np.frombuffer(body, dtype="<f4").reshape(rows, cols)
    return FeatureMatrix(data.astype(np.float64), frame_shift_sec=shift)
