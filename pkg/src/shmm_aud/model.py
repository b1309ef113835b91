"""Diagonal Gaussians, GMM emission states and 3-state unit HMMs.

A unit is described either by its constrained parameters (``UnitParams``)
or by a flat supervector in unconstrained coordinates: per state, the K*D
means, then the K*D log-variances, then K-1 weight logits measured
against the last component.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

N_STATES = 3
VAR_FLOOR = 1e-6
LOGIT_CLAMP = 30.0
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        var = np.atleast_1d(np.asarray(self.var, dtype=np.float64))
        if mean.shape != var.shape or mean.ndim != 1:
            raise ValueError(f"mean/var shape mismatch: {mean.shape} vs {var.shape}")
        if not np.all(var > 0):
            raise ValueError("variances must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self):
        return len(self.mean)


def gaussian_loglik(x, g: DiagGaussian):
    """ln N(x; mean, diag(var))."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape != g.mean.shape:
        raise ValueError(f"dimension mismatch: x has {x.shape}, "
                         f"Gaussian has {g.mean.shape}")
    diff = x - g.mean
    return float(-0.5 * np.sum(_LOG_2PI + np.log(g.var) + diff * diff / g.var))


@dataclass(frozen=True)
class GmmState:
    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        comps = tuple(self.components)
        if len(w) != len(comps) or len(w) == 0:
            raise ValueError("need one weight per component")
        if not np.all(w > 0):
            raise ValueError("mixture weights must be strictly positive")
        w = w / w.sum()
        if len({c.dim for c in comps}) != 1:
            raise ValueError("components must share the dimension")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def n_components(self):
        return len(self.components)

    @property
    def dim(self):
        return self.components[0].dim

    @classmethod
    def from_log_weights(cls, log_weights, components):
        lw = np.asarray(log_weights, dtype=np.float64)
        return cls(np.exp(lw - logsumexp(lw)), components)


def state_loglik(x, s: GmmState):
    """ln sum_j w_j N(x; mu_j, Sigma_j), accumulated with log-sum-exp."""
    terms = [np.log(w) + gaussian_loglik(x, c)
             for w, c in zip(s.weights, s.components)]
    return float(logsumexp(terms))


@dataclass(frozen=True)
class UnitParams:
    states: tuple

    def __post_init__(self):
        states = tuple(self.states)
        if len(states) != N_STATES:
            raise ValueError(f"a unit has exactly {N_STATES} states")
        if len({(s.n_components, s.dim) for s in states}) != 1:
            raise ValueError("all states of a unit must share K and D")
        object.__setattr__(self, "states", states)

    @property
    def n_components(self):
        return self.states[0].n_components

    @property
    def dim(self):
        return self.states[0].dim

    def arrays(self):
        """(means, variances, weights) with shapes (3,K,D), (3,K,D), (3,K)."""
        means = np.array([[c.mean for c in s.components] for s in self.states])
        var = np.array([[c.var for c in s.components] for s in self.states])
        w = np.array([s.weights for s in self.states])
        return means, var, w

    @classmethod
    def from_arrays(cls, means, var, weights):
        states = []
        for i in range(N_STATES):
            comps = [DiagGaussian(m, v) for m, v in zip(means[i], var[i])]
            states.append(GmmState(weights[i], comps))
        return cls(states)


@dataclass(frozen=True)
class Layout:
    """Row assignment of the supervector to weight logits, means and log-variances."""

    n_components: int
    dim: int

    def __post_init__(self):
        if self.n_components < 1 or self.dim < 1:
            raise ValueError("K and D must be positive")

    @property
    def state_size(self):
        k, d = self.n_components, self.dim
        return 2 * k * d + (k - 1)

    @property
    def size(self):
        return N_STATES * self.state_size

    @cached_property
    def mean_rows(self):
        """Index array (3, K, D) of the mean rows."""
        k, d = self.n_components, self.dim
        base = np.arange(N_STATES)[:, None, None] * self.state_size
        return base + np.arange(k * d).reshape(k, d)[None]

    @cached_property
    def logvar_rows(self):
        k, d = self.n_components, self.dim
        return self.mean_rows + k * d

    @cached_property
    def logit_rows(self):
        """Index array (3, K-1) of the weight-logit rows."""
        k, d = self.n_components, self.dim
        base = np.arange(N_STATES)[:, None] * self.state_size + 2 * k * d
        return base + np.arange(k - 1)[None]

    def slices(self):
        """Named contiguous slices; they tile [0, size) without overlap."""
        out = []
        k, d = self.n_components, self.dim
        for i in range(N_STATES):
            off = i * self.state_size
            for j in range(k):
                out.append((f"mean[{i}][{j}]", slice(off + j * d, off + (j + 1) * d)))
            for j in range(k):
                lo = off + k * d + j * d
                out.append((f"logvar[{i}][{j}]", slice(lo, lo + d)))
            lo = off + 2 * k * d
            out.append((f"logit[{i}]", slice(lo, lo + k - 1)))
        return out

    def to_dict(self):
        return {"n_components": self.n_components, "dim": self.dim}


def supervector_dim(n_components, dim):
    return Layout(n_components, dim).size


def log_weights_from_logits(logits):
    """Map (..., K-1) logits to (..., K) log-weights; the last logit is pinned at 0.

    Logits are clamped to [-LOGIT_CLAMP, LOGIT_CLAMP] before use.
    """
    logits = np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    full = np.concatenate([logits, np.zeros(logits.shape[:-1] + (1,))], axis=-1)
    return full - logsumexp(full, axis=-1, keepdims=True)


def pack_supervector(u: UnitParams):
    layout = Layout(u.n_components, u.dim)
    means, var, w = u.arrays()
    v = np.empty(layout.size)
    v[layout.mean_rows] = means
    v[layout.logvar_rows] = np.log(var)
    v[layout.logit_rows] = np.log(w[:, :-1]) - np.log(w[:, -1:])
    return v


def unpack_supervector(v, n_components, dim):
    layout = Layout(n_components, dim)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (layout.size,):
        raise ValueError(f"supervector must have dimension {layout.size} "
                         f"for K={n_components}, D={dim}; got {v.shape}")
    means = v[layout.mean_rows]
    var = np.maximum(np.exp(v[layout.logvar_rows]), VAR_FLOOR)
    w = np.exp(log_weights_from_logits(v[layout.logit_rows]))
    return UnitParams.from_arrays(means, var, w)


@dataclass(frozen=True)
class UnitInventory:
    units: tuple
    labels: tuple = ()

    def __post_init__(self):
        units = tuple(self.units)
        if not units:
            raise ValueError("inventory must not be empty")
        if len({(u.n_components, u.dim) for u in units}) != 1:
            raise ValueError("inventory units must share K and D")
        labels = tuple(self.labels) or tuple(f"u{i + 1}" for i in range(len(units)))
        if len(labels) != len(units):
            raise ValueError("one label per unit required")
        object.__setattr__(self, "units", units)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.units)

    def index(self, label):
        return self.labels.index(label)


def batch_state_logliks(x, means, var, log_weights):
    """Per-frame state log-likelihoods for a batch of units.

    x: (T, D); means, var: (U, 3, K, D); log_weights: (U, 3, K).
    Returns (T, U * 3) with column 3*u + i for state i of unit u.
    """
    x = np.asarray(x, dtype=np.float64)
    n_units = means.shape[0]
    out = np.empty((len(x), n_units * N_STATES))
    for u in range(n_units):
        diff = x[:, None, None, :] - means[u][None]
        comp = -0.5 * np.sum(_LOG_2PI + np.log(var[u])[None]
                             + diff * diff / var[u][None], axis=-1)
        out[:, N_STATES * u:N_STATES * (u + 1)] = logsumexp(
            comp + log_weights[u][None], axis=-1)
    return out


def inventory_logliks(x, inventory: UnitInventory):
    """Emission matrix (T, 3 * n_units) of an inventory."""
    arrs = [u.arrays() for u in inventory.units]
    means = np.array([a[0] for a in arrs])
    var = np.array([a[1] for a in arrs])
    logw = np.log(np.array([a[2] for a in arrs]))
    return batch_state_logliks(x, means, var, logw)
