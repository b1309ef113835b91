"""Log-domain forward-backward and Viterbi over a DecodeGraph.

The acoustic scale multiplies emission log-likelihoods only; transition,
start and final weights are never scaled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import DecodeGraph


class NoPathError(ValueError):
    """No state sequence reaches a final state with finite score."""


@dataclass(frozen=True)
class Token:
    label: str
    start_frame: int
    end_frame: int

    def to_dict(self):
        return {"label": self.label, "start_frame": self.start_frame,
                "end_frame": self.end_frame}


@dataclass
class UnitTranscript:
    utt_id: str
    tokens: list = field(default_factory=list)
    duration_sec: float | None = None

    def to_dict(self):
        return {"id": self.utt_id, "units": [t.to_dict() for t in self.tokens],
                "duration_sec": self.duration_sec}

    @property
    def labels(self):
        return [t.label for t in self.tokens]

    def frame_labels(self):
        out = []
        for t in self.tokens:
            out.extend([t.label] * (t.end_frame - t.start_frame))
        return out


class _Segments:
    """Arc groupings for segmented reductions (by destination or by source)."""

    def __init__(self, key, n_states):
        order = np.argsort(key, kind="stable")
        self.order = order
        k = key[order]
        self.starts = np.flatnonzero(np.r_[True, k[1:] != k[:-1]])
        self.keys = k[self.starts]
        self.counts = np.diff(np.r_[self.starts, len(k)])
        self.seg_id = np.repeat(np.arange(len(self.starts)), self.counts)
        self.n_states = n_states

    def logsumexp(self, vals):
        v = vals[self.order]
        m = np.maximum.reduceat(v, self.starts)
        m_safe = np.where(np.isfinite(m), m, 0.0)
        with np.errstate(divide="ignore"):
            seg = np.log(np.add.reduceat(np.exp(v - m_safe[self.seg_id]),
                                         self.starts)) + m_safe
        out = np.full(self.n_states, -np.inf)
        out[self.keys] = seg
        return out

    def argmax(self, vals, other_end):
        """Per segment: max value and the smallest ``other_end`` attaining it."""
        v = vals[self.order]
        m = np.maximum.reduceat(v, self.starts)
        hit = np.flatnonzero(v == m[self.seg_id])
        _, first = np.unique(self.seg_id[hit], return_index=True)
        best = np.full(self.n_states, -np.inf)
        ptr = np.full(self.n_states, -1)
        best[self.keys] = m
        ptr[self.keys] = other_end[self.order][hit[first]]
        return best, ptr


def _prepare(graph: DecodeGraph, emissions, acoustic_scale):
    e = np.asarray(emissions, dtype=np.float64)
    if e.ndim != 2 or e.shape[1] != graph.n_states:
        raise ValueError(f"emissions must be T x {graph.n_states}, got {e.shape}")
    if len(e) == 0:
        raise ValueError("emissions must have at least one frame")
    if not acoustic_scale > 0:
        raise ValueError("acoustic_scale must be positive")
    if np.any(np.isnan(e)) or np.any(e == np.inf):
        raise ValueError("emissions must be finite or -inf")
    return e * acoustic_scale


def graph_emissions(unit_state_logliks, graph: DecodeGraph):
    """Gather per-graph-state columns from an inventory emission matrix."""
    return np.asarray(unit_state_logliks)[:, graph.binding]


def _lse(x):
    m = np.max(x)
    if not np.isfinite(m):
        return -np.inf
    return float(m + np.log(np.sum(np.exp(x - m))))


def forward_backward(graph: DecodeGraph, emissions, acoustic_scale=1.0,
                     return_backward_marginal=False):
    """State posteriors (T x M) and the log-marginal of the scaled emissions."""
    e = _prepare(graph, emissions, acoustic_scale)
    T, M = e.shape
    by_dst = _Segments(graph.arc_dst, M)
    by_src = _Segments(graph.arc_src, M)
    src, dst, lp = graph.arc_src, graph.arc_dst, graph.arc_logp
    alpha = np.empty((T, M))
    alpha[0] = graph.log_start + e[0]
    for t in range(1, T):
        alpha[t] = by_dst.logsumexp(alpha[t - 1][src] + lp) + e[t]
    beta = np.empty((T, M))
    beta[-1] = graph.log_final
    for t in range(T - 2, -1, -1):
        nxt = e[t + 1] + beta[t + 1]
        beta[t] = by_src.logsumexp(lp + nxt[dst])
    log_z = _lse(alpha[-1] + graph.log_final)
    if not np.isfinite(log_z):
        raise NoPathError("no admissible path through the graph")
    with np.errstate(invalid="ignore"):
        post = np.exp(alpha + beta - log_z)
    post = np.nan_to_num(post)
    post /= post.sum(axis=1, keepdims=True)
    if return_backward_marginal:
        return post, log_z, _lse(graph.log_start + e[0] + beta[0])
    return post, log_z


def viterbi(graph: DecodeGraph, emissions, acoustic_scale=1.0):
    """Best state path and its score.

    Among equally scoring paths the lexicographically smallest state
    sequence is returned: the recursion runs backwards and the path is
    traced forwards, taking the smallest state index at every tie.
    """
    e = _prepare(graph, emissions, acoustic_scale)
    T, M = e.shape
    by_src = _Segments(graph.arc_src, M)
    dst, lp = graph.arc_dst, graph.arc_logp
    delta = graph.log_final.copy()
    ptr = np.empty((T, M), dtype=int)
    for t in range(T - 2, -1, -1):
        nxt = e[t + 1] + delta
        delta, ptr[t] = by_src.argmax(lp + nxt[dst], dst)
    total = graph.log_start + e[0] + delta
    s = int(np.argmax(total))
    score = float(total[s])
    if not np.isfinite(score):
        raise NoPathError("no admissible path through the graph")
    path = [s]
    for t in range(T - 1):
        s = int(ptr[t, s])
        path.append(s)
    return np.array(path), score


def path_score(graph: DecodeGraph, path, emissions, acoustic_scale=1.0):
    """Score of an explicit state path (start + arcs + scaled emissions + final)."""
    e = np.asarray(emissions, dtype=np.float64) * acoustic_scale
    A = graph.dense_log_transitions()
    path = np.asarray(path)
    score = graph.log_start[path[0]] + graph.log_final[path[-1]]
    score += np.sum(A[path[:-1], path[1:]])
    score += np.sum(e[np.arange(len(path)), path])
    return float(score)


def path_to_units(path, graph: DecodeGraph, labels=None, utt_id=""):
    """Collapse a state path into unit tokens tiling [0, T).

    A token starts whenever the path enters the first state of a unit
    other than by its self-loop.
    """
    path = np.asarray(path)
    if path.ndim != 1 or len(path) == 0:
        raise ValueError("path must be a non-empty sequence of states")
    if path.min() < 0 or path.max() >= graph.n_states:
        raise ValueError("path visits states outside the graph")
    A = graph.dense_log_transitions()
    if not np.isfinite(graph.log_start[path[0]]) or \
            not np.all(np.isfinite(A[path[:-1], path[1:]])):
        raise ValueError("path uses a transition missing from the graph")
    if labels is None:
        labels = [f"u{i + 1}" for i in range(graph.n_units)]
    entry = graph.entry
    starts = [0] + [t for t in range(1, len(path))
                    if entry[path[t]] and path[t] != path[t - 1]]
    bounds = starts + [len(path)]
    tokens = [Token(labels[graph.unit_of[path[a]]], int(a), int(b))
              for a, b in zip(bounds[:-1], bounds[1:])]
    return UnitTranscript(utt_id, tokens)


def unit_posteriorgram(state_post, graph: DecodeGraph):
    """Sum state posteriors per inventory unit, shape (T, n_units)."""
    post = np.asarray(state_post, dtype=np.float64)
    if post.ndim != 2 or post.shape[1] != graph.n_states:
        raise ValueError(f"posteriorgram has {post.shape[1]} columns, graph "
                         f"binds {graph.n_states} states")
    out = np.zeros((len(post), graph.n_units))
    np.add.at(out.T, graph.unit_of, post.T)
    return out


def frame_entropy(post, eps=0.0):
    """Per-frame Shannon entropy (nats) of a posteriorgram."""
    p = np.asarray(post, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p + eps), 0.0)
    return -terms.sum(axis=1)
