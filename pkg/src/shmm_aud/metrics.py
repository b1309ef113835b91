"""Evaluation metrics over decoded units and posteriorgrams.

Edit distance and character error rate, empirical-entropy bitrate,
ABX discrimination with edit-distance or DTW+KL backends, and NMI for
scoring against synthetic ground truth.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

KL_EPS = 1e-12


@dataclass
class SymbolSequence:
    utt_id: str
    symbols: list
    duration_sec: float

    @classmethod
    def from_transcript(cls, transcript):
        """Token labels of a decoded UnitTranscript, one symbol per token."""
        return cls(transcript.utt_id, list(transcript.labels), transcript.duration_sec)


@dataclass
class AbxItem:
    item_id: str
    category: str
    payload: Any

    def __post_init__(self):
        if not self.category:
            raise ValueError(f"item {self.item_id!r} has an empty category")


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Minimal number of insertions, deletions and substitutions."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def normalized_levenshtein(a: Sequence, b: Sequence) -> float:
    """Edit distance divided by the longer length (0 for two empty sequences)."""
    n = max(len(a), len(b))
    return levenshtein(a, b) / n if n else 0.0


def cer(hyp: Sequence, ref: Sequence) -> float:
    """Character error rate: edit distance over the reference length."""
    if len(ref) == 0:
        raise ValueError("empty reference")
    return levenshtein(hyp, ref) / len(ref)


def bitrate(sequences: Sequence[SymbolSequence]) -> float:
    """Bits per second of the pooled symbol stream, N * H / D.

    H is the empirical entropy (base 2) of all symbols together, N their
    count and D the total duration.
    """
    D = math.fsum(s.duration_sec for s in sequences)
    if not D > 0:
        raise ValueError("total duration must be positive")
    counts = Counter(sym for s in sequences for sym in s.symbols)
    N = sum(counts.values())
    if N == 0:
        return 0.0
    # N * H = sum_c c log2(N / c), grouped by count value so that K
    # equally frequent symbols give exactly N log2 K
    by_count = Counter(counts.values())
    NH = math.fsum((m * c) * math.log2(N / c) for c, m in by_count.items())
    return max(NH, 0.0) / D


def _as_distributions(p, name):
    p = np.asarray(p, dtype=float)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty (frames, classes) array")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError(f"rows of {name} must be probability distributions")
    p = p + KL_EPS
    return p / p.sum(axis=1, keepdims=True)


def kl_matrix(a, b):
    """Frame-pair costs KL(a_i || b_j), natural log, epsilon-smoothed."""
    a = _as_distributions(a, "a")
    b = _as_distributions(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"column mismatch: {a.shape[1]} vs {b.shape[1]}")
    la, lb = np.log(a), np.log(b)
    # elementwise form keeps KL(p || p) at exactly zero
    return np.einsum("ik,ijk->ij", a, la[:, None, :] - lb[None, :, :])


def dtw_kl(a, b) -> float:
    """DTW alignment cost with KL frame costs, normalized by path length.

    Steps (1,0), (0,1) and (1,1).  Among paths of equal total cost the
    shortest one sets the normalization.
    """
    C = np.maximum(kl_matrix(a, b), 0.0)
    n, m = C.shape
    cost = np.full((n + 1, m + 1), np.inf)
    length = np.zeros((n + 1, m + 1), dtype=int)
    cost[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best, blen = np.inf, 0
            for pi, pj in ((i - 1, j - 1), (i - 1, j), (i, j - 1)):
                c = cost[pi, pj]
                if c < best or (c == best and length[pi, pj] < blen):
                    best, blen = c, length[pi, pj]
            cost[i, j] = best + C[i - 1, j - 1]
            length[i, j] = blen + 1
    return float(cost[n, m] / length[n, m])


BACKENDS = {
    "levenshtein": levenshtein,
    "levenshtein_norm": normalized_levenshtein,
    "dtwkl": dtw_kl,
}


def distance_matrix(items: Sequence[AbxItem], distance):
    dist = BACKENDS[distance] if isinstance(distance, str) else distance
    n = len(items)
    M = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                M[i, j] = dist(items[i].payload, items[j].payload)
    return M


def abx_error(items: Sequence[AbxItem], distance="levenshtein") -> float:
    """ABX error with balanced averaging over ordered category pairs.

    For A and X from one category (distinct items) and B from another,
    a triple scores 1 when d(A, X) > d(B, X) and 0.5 on ties.  Scores
    are averaged within each (category of A, category of B) pair and the
    pair means are averaged.
    """
    cats = sorted({it.category for it in items})
    by_cat = {c: [k for k, it in enumerate(items) if it.category == c] for c in cats}
    if len(cats) < 2 or all(len(v) < 2 for v in by_cat.values()):
        raise ValueError("need two items in some category and one in another")
    M = distance_matrix(items, distance)
    pair_means = []
    for ca in cats:
        A = by_cat[ca]
        if len(A) < 2:
            continue
        for cb in cats:
            if cb == ca:
                continue
            B = by_cat[cb]
            d_ax = M[np.ix_(A, A)]           # [a, x]
            d_bx = M[np.ix_(B, A)]           # [b, x]
            cmp = d_ax[:, None, :] - d_bx[None, :, :]   # [a, b, x]
            score = (cmp > 0) + 0.5 * (cmp == 0)
            mask = ~np.eye(len(A), dtype=bool)[:, None, :]
            pair_means.append(float((score * mask).sum() / (mask.sum() * len(B))))
    return float(np.mean(pair_means))


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(labels_a, labels_b) -> float:
    """Mutual information over the arithmetic mean of the two entropies."""
    labels_a, labels_b = np.asarray(labels_a), np.asarray(labels_b)
    if labels_a.shape != labels_b.shape or labels_a.ndim != 1:
        raise ValueError("label sequences must be 1-D and of equal length")
    if len(labels_a) == 0:
        raise ValueError("empty labelings")
    _, ia = np.unique(labels_a, return_inverse=True)
    _, ib = np.unique(labels_b, return_inverse=True)
    joint = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(joint, (ia, ib), 1.0)
    ha, hb = _entropy(joint.sum(axis=1)), _entropy(joint.sum(axis=0))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    mi = ha + hb - _entropy(joint.ravel())
    return float(min(max(mi / (0.5 * (ha + hb)), 0.0), 1.0))
