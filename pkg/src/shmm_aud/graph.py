"""Decoding graphs built from 3-state left-to-right unit chains.

States are numbered chain-major: state ``3 * c + i`` is state i (0-based)
of chain c.  Arcs are stored sparsely, sorted by destination then source.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import N_STATES

DEFAULT_SELF_LOOP = 0.5
DEFAULT_FINAL_PROB = 0.01


def _check_prob(p, name):
    if not 0.0 < p < 1.0:
        raise ValueError(f"{name} must lie strictly between 0 and 1, got {p}")


@dataclass(frozen=True)
class DecodeGraph:
    """Weighted state graph.

    ``binding[s]`` is the column of the emission matrix used by state s
    (``3 * unit + state_in_unit`` of the inventory).  ``unit_of[s]`` is the
    inventory unit and ``entry[s]`` marks first states of a chain.
    """

    arc_src: np.ndarray
    arc_dst: np.ndarray
    arc_logp: np.ndarray
    log_start: np.ndarray
    log_final: np.ndarray
    unit_of: np.ndarray
    state_in_unit: np.ndarray
    n_units: int

    def __post_init__(self):
        order = np.lexsort((self.arc_src, self.arc_dst))
        for name in ("arc_src", "arc_dst", "arc_logp"):
            object.__setattr__(self, name, np.asarray(getattr(self, name))[order])

    @property
    def n_states(self):
        return len(self.log_start)

    @property
    def binding(self):
        return N_STATES * self.unit_of + self.state_in_unit

    @property
    def entry(self):
        return self.state_in_unit == 0

    def dense_log_transitions(self):
        A = np.full((self.n_states, self.n_states), -np.inf)
        A[self.arc_src, self.arc_dst] = self.arc_logp
        return A

    def outgoing_mass(self):
        """Probability-domain outgoing mass per state, final weight included."""
        out = np.exp(self.log_final).copy()
        np.add.at(out, self.arc_src, np.exp(self.arc_logp))
        return out


def build_unit_chain(self_loop=DEFAULT_SELF_LOOP):
    """Rows (self-loop, advance) for the three states of a unit.

    The advance mass of the last state is the unit-exit mass.
    """
    _check_prob(self_loop, "self_loop")
    return np.tile([self_loop, 1.0 - self_loop], (N_STATES, 1))


def expected_unit_duration(self_loop=DEFAULT_SELF_LOOP):
    return N_STATES / (1.0 - self_loop)


def _chain_arcs(n_chains, self_loop):
    src, dst, lp = [], [], []
    ls, la = np.log(self_loop), np.log1p(-self_loop)
    for c in range(n_chains):
        for i in range(N_STATES):
            s = N_STATES * c + i
            src.append(s); dst.append(s); lp.append(ls)
            if i < N_STATES - 1:
                src.append(s); dst.append(s + 1); lp.append(la)
    return src, dst, lp


def build_phone_loop(unit_log_weights, self_loop=DEFAULT_SELF_LOOP,
                     final_prob=DEFAULT_FINAL_PROB):
    """Pseudo-phone loop: any unit may follow any unit.

    Unit entries (utterance start and every loop-back) are weighted by
    ``unit_log_weights``.  Leaving the last state of a unit either ends the
    utterance (probability ``final_prob``) or re-enters the loop.  Expected
    log-weights from the stick posterior are sub-normalized, so the
    outgoing mass is then below one by the Jensen gap.
    """
    w = np.atleast_1d(np.asarray(unit_log_weights, dtype=np.float64))
    n = len(w)
    if n == 0:
        raise ValueError("phone loop needs at least one unit")
    _check_prob(self_loop, "self_loop")
    _check_prob(final_prob, "final_prob")
    src, dst, lp = _chain_arcs(n, self_loop)
    exit_lp = np.log1p(-self_loop) + np.log1p(-final_prob)
    for a in range(n):
        last = N_STATES * a + N_STATES - 1
        for b in range(n):
            src.append(last); dst.append(N_STATES * b); lp.append(exit_lp + w[b])
    m = N_STATES * n
    log_start = np.full(m, -np.inf)
    log_start[::N_STATES] = w
    log_final = np.full(m, -np.inf)
    log_final[N_STATES - 1::N_STATES] = np.log1p(-self_loop) + np.log(final_prob)
    return DecodeGraph(np.array(src), np.array(dst), np.array(lp), log_start,
                       log_final, np.repeat(np.arange(n), N_STATES),
                       np.tile(np.arange(N_STATES), n), n)


def build_forced_alignment(transcript, labels, self_loop=DEFAULT_SELF_LOOP):
    """Left-to-right concatenation of the transcript's unit chains.

    ``labels`` lists the inventory labels; the emission binding maps every
    chain to its inventory unit.
    """
    transcript = list(transcript)
    if not transcript:
        raise ValueError("empty transcript")
    index = {lab: i for i, lab in enumerate(labels)}
    unknown = [lab for lab in transcript if lab not in index]
    if unknown:
        raise KeyError(f"unknown unit label(s): {sorted(set(unknown))}")
    _check_prob(self_loop, "self_loop")
    n = len(transcript)
    src, dst, lp = _chain_arcs(n, self_loop)
    la = np.log1p(-self_loop)
    for c in range(n - 1):
        src.append(N_STATES * c + N_STATES - 1)
        dst.append(N_STATES * (c + 1))
        lp.append(la)
    m = N_STATES * n
    log_start = np.full(m, -np.inf)
    log_start[0] = 0.0
    log_final = np.full(m, -np.inf)
    log_final[-1] = la
    units = np.repeat([index[lab] for lab in transcript], N_STATES)
    return DecodeGraph(np.array(src), np.array(dst), np.array(lp), log_start,
                       log_final, units, np.tile(np.arange(N_STATES), n),
                       len(labels))
