"""Truncated stick-breaking posterior over unit weights.

Stick t has a Beta(gamma1_t, gamma2_t) posterior.  The last stick is
pinned to 1 so that exactly T units share the whole mass; its Beta
parameters are carried along but never used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, digamma

DEFAULT_CONCENTRATION = 50.0


@dataclass
class StickPosterior:
    gamma1: np.ndarray
    gamma2: np.ndarray
    concentration: float = DEFAULT_CONCENTRATION

    def __post_init__(self):
        self.gamma1 = np.atleast_1d(np.asarray(self.gamma1, dtype=np.float64))
        self.gamma2 = np.atleast_1d(np.asarray(self.gamma2, dtype=np.float64))
        if self.gamma1.shape != self.gamma2.shape or self.gamma1.ndim != 1:
            raise ValueError("gamma1 and gamma2 must be vectors of equal length")
        if len(self.gamma1) < 1:
            raise ValueError("truncation must be >= 1")
        if not (np.all(self.gamma1 > 0) and np.all(self.gamma2 > 0)):
            raise ValueError("Beta parameters must be positive")
        if not self.concentration > 0:
            raise ValueError("concentration must be positive")
        self.concentration = float(self.concentration)

    @property
    def truncation(self):
        return len(self.gamma1)

    @classmethod
    def prior(cls, truncation, concentration=DEFAULT_CONCENTRATION):
        return cls(np.ones(truncation), np.full(truncation, float(concentration)),
                   concentration)


def expected_log_weights(sp: StickPosterior):
    """E[ln pi_t] under the stick posterior, with v_T fixed at 1."""
    g1, g2 = sp.gamma1, sp.gamma2
    tot = digamma(g1 + g2)
    e_log_v = digamma(g1) - tot
    e_log_1mv = digamma(g2) - tot
    e_log_v[-1] = 0.0
    e_log_1mv[-1] = 0.0
    return e_log_v + np.concatenate([[0.0], np.cumsum(e_log_1mv[:-1])])


def update_sticks(expected_counts, concentration=DEFAULT_CONCENTRATION):
    n = np.atleast_1d(np.asarray(expected_counts, dtype=np.float64))
    if np.any(n < 0):
        raise ValueError("expected counts must be non-negative")
    tail = np.concatenate([np.cumsum(n[::-1])[::-1][1:], [0.0]])
    return StickPosterior(1.0 + n, concentration + tail, concentration)


def kl_sticks(sp: StickPosterior):
    """KL(q(v) || p(v)) over the free sticks, prior Beta(1, concentration)."""
    a, b = sp.gamma1[:-1], sp.gamma2[:-1]
    alpha = sp.concentration
    tot = digamma(a + b)
    kl = (betaln(1.0, alpha) - betaln(a, b)
          + (a - 1.0) * (digamma(a) - tot)
          + (b - alpha) * (digamma(b) - tot))
    return float(np.sum(kl))


def log_expected_path_prior(entry_counts, sp: StickPosterior):
    """ln E_q[prod_t pi_t^{n_t}] in closed form (Beta moments).

    Exact marginalization over the sticks; used by brute-force evidence
    checks.
    """
    n = np.asarray(entry_counts, dtype=np.float64)
    tail = np.concatenate([np.cumsum(n[::-1])[::-1][1:], [0.0]])
    a, b = sp.gamma1[:-1], sp.gamma2[:-1]
    return float(np.sum(betaln(a + n[:-1], b + tail[:-1]) - betaln(a, b)))
