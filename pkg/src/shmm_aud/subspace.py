"""Subspace parametrization of unit HMMs.

Every unit u has a low-dimensional embedding h_u.  Its supervector is the
affine map ``W h_u + b`` and the link function turns the supervector into
valid HMM parameters (softmax weights with the last logit pinned, raw
means, exponentiated log-variances).  W, b and every h_u carry diagonal
Gaussian variational posteriors with standard-normal priors.

Gradients are taken with the reparametrization ``z = mean + sqrt(var) * eps``
at a fixed noise draw, so they can be checked against finite differences
of the same Monte-Carlo objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .model import (LOGIT_CLAMP, N_STATES, Layout, UnitParams,
                    log_weights_from_logits)

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian; ``mean`` and ``var`` share an arbitrary shape."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.array(self.mean, dtype=np.float64)
        self.var = np.array(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape:
            raise ValueError(f"mean/var shape mismatch: {self.mean.shape} "
                             f"vs {self.var.shape}")
        if not np.all(self.var > 0):
            raise ValueError("posterior variances must be positive")

    @property
    def shape(self):
        return self.mean.shape

    def copy(self):
        return GaussianPosterior(self.mean.copy(), self.var.copy())

    @classmethod
    def standard(cls, shape):
        return cls(np.zeros(shape), np.ones(shape))


@dataclass
class SubspaceModel:
    q_W: GaussianPosterior
    q_b: GaussianPosterior
    layout: Layout

    def __post_init__(self):
        s = self.layout.size
        if self.q_W.mean.ndim != 2 or self.q_W.shape[0] != s:
            raise ValueError(f"q_W must be {s} x P, got {self.q_W.shape}")
        if self.q_b.shape != (s,):
            raise ValueError(f"q_b must have {s} entries, got {self.q_b.shape}")
        if self.q_W.shape[1] < 1:
            raise ValueError("subspace dimension must be >= 1")

    @property
    def P(self):
        return self.q_W.shape[1]

    @property
    def S(self):
        return self.layout.size

    def copy(self):
        return SubspaceModel(self.q_W.copy(), self.q_b.copy(), self.layout)


@dataclass
class Embedding:
    q_h: GaussianPosterior
    label: str = ""

    def copy(self):
        return Embedding(self.q_h.copy(), self.label)


@dataclass
class UnitStats:
    """Soft frame assignments of one unit: features (N, D), weights (N, 3)."""

    feats: np.ndarray
    frame_weights: np.ndarray


@dataclass
class NoiseBundle:
    """Standard-normal draws for one Monte-Carlo objective evaluation.

    h has shape (n_samples, n_units, P).  W and b are None when the
    posterior means of the subspace are plugged in instead of sampled.
    """

    h: np.ndarray
    W: np.ndarray | None = None
    b: np.ndarray | None = None

    @property
    def n_samples(self):
        return self.h.shape[0]

    @classmethod
    def draw(cls, rng, n_samples, n_units, S, P, sample_subspace=False):
        h = rng.standard_normal((n_samples, n_units, P))
        if not sample_subspace:
            return cls(h)
        return cls(h, rng.standard_normal((n_samples, S, P)),
                   rng.standard_normal((n_samples, S)))

    @classmethod
    def zeros(cls, n_units, P, S=None, n_samples=1):
        h = np.zeros((n_samples, n_units, P))
        if S is None:
            return cls(h)
        return cls(h, np.zeros((n_samples, S, P)), np.zeros((n_samples, S)))


def link_arrays(eta, layout: Layout):
    """Split supervector(s) (..., S) into means, log-variances, log-weights."""
    eta = np.asarray(eta, dtype=np.float64)
    means = eta[..., layout.mean_rows]
    logvar = eta[..., layout.logvar_rows]
    logw = log_weights_from_logits(eta[..., layout.logit_rows])
    return means, logvar, logw


def link_forward(W, b, h, layout: Layout):
    """UnitParams of ``f(W h + b)``."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if W.shape != (layout.size, len(h)) or b.shape != (layout.size,):
        raise ValueError(f"shape mismatch: W {W.shape}, b {b.shape}, h {h.shape} "
                         f"for supervector size {layout.size}")
    means, logvar, logw = link_arrays(W @ h + b, layout)
    var = np.maximum(np.exp(logvar), np.finfo(float).tiny)
    return UnitParams.from_arrays(means, var, np.exp(logw))


def sample_reparam(q: GaussianPosterior, noise):
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != q.shape:
        raise ValueError(f"noise shape {noise.shape} != posterior shape {q.shape}")
    return q.mean + np.sqrt(q.var) * noise


def kl_to_standard_normal(q: GaussianPosterior):
    """KL(q || N(0, I)) summed over all entries."""
    v, m = q.var, q.mean
    return float(0.5 * np.sum(v + m * m - 1.0 - np.log(v)))


def _kl_grads(q: GaussianPosterior):
    """Gradient of -KL(q || N(0, I)) with respect to (mean, var)."""
    return -q.mean, -0.5 * (1.0 - 1.0 / q.var)


def unit_objective(feats, frame_weights, eta, layout: Layout, need_grad=True):
    """Sum_t sum_i w_ti ln p(x_t | state i) for a unit with supervector eta.

    Returns the value and, if requested, its gradient with respect to eta.
    """
    x = np.asarray(feats, dtype=np.float64)
    g = np.asarray(frame_weights, dtype=np.float64)
    if g.shape != (len(x), N_STATES):
        raise ValueError(f"frame weights must be ({len(x)}, {N_STATES}), "
                         f"got {g.shape}")
    if x.shape[1] != layout.dim:
        raise ValueError(f"feature dimension {x.shape[1]} != model dimension "
                         f"{layout.dim}")
    means, logvar, logw = link_arrays(eta, layout)
    prec = np.exp(-logvar)                                  # (3, K, D)
    diff = x[:, None, None, :] - means[None]                # (T, 3, K, D)
    sq = diff * diff * prec[None]
    comp = -0.5 * np.sum(_LOG_2PI + logvar[None] + sq, axis=-1) + logw[None]
    state_ll = logsumexp(comp, axis=-1)                     # (T, 3)
    value = float(np.sum(g * state_ll))
    if not need_grad:
        return value, None
    resp = np.exp(comp - state_ll[..., None]) * g[..., None]   # (T, 3, K)
    g_mean = np.einsum("tik,tikd->ikd", resp, diff * prec[None])
    g_logvar = 0.5 * np.einsum("tik,tikd->ikd", resp, sq - 1.0)
    occ = resp.sum(axis=0)                                  # (3, K)
    w = np.exp(logw)
    g_logit = occ[:, :-1] - g.sum(axis=0)[:, None] * w[:, :-1]
    logits = eta[layout.logit_rows]
    g_logit = np.where(np.abs(logits) > LOGIT_CLAMP, 0.0, g_logit)
    grad = np.empty(layout.size)
    grad[layout.mean_rows] = g_mean
    grad[layout.logvar_rows] = g_logvar
    grad[layout.logit_rows] = g_logit
    return value, grad


def _sampled_subspace(subspace: SubspaceModel, noise: NoiseBundle, n):
    if noise.W is None:
        return subspace.q_W.mean, subspace.q_b.mean
    return (sample_reparam(subspace.q_W, noise.W[n]),
            sample_reparam(subspace.q_b, noise.b[n]))


def subspace_objective(stats, subspace: SubspaceModel, embeddings, noise: NoiseBundle,
                       need_grad=True, want_subspace_grad=True):
    """Monte-Carlo objective sum_u E[unit loglik] - sum_u KL(q_h) - KL(q_W) - KL(q_b).

    Returns ``(value, grads)`` where grads holds ``h_mean``/``h_var`` of
    shape (U, P) and, if requested, ``W_mean``, ``W_var``, ``b_mean``,
    ``b_var``.
    """
    n_units = len(embeddings)
    if len(stats) != n_units:
        raise ValueError(f"{len(stats)} unit statistics for {n_units} embeddings")
    P, S = subspace.P, subspace.S
    if noise.h.shape[1:] != (n_units, P):
        raise ValueError(f"h noise shape {noise.h.shape} does not match "
                         f"({n_units}, {P})")
    layout = subspace.layout
    n_samples = noise.n_samples
    value = 0.0
    g_hm = np.zeros((n_units, P))
    g_hv = np.zeros((n_units, P))
    g_W = np.zeros((S, P))
    g_Wv = np.zeros((S, P))
    g_b = np.zeros(S)
    g_bv = np.zeros(S)
    for n in range(n_samples):
        W, b = _sampled_subspace(subspace, noise, n)
        gW_n = np.zeros((S, P))
        for u, (st, emb) in enumerate(zip(stats, embeddings)):
            eps = noise.h[n, u]
            h = sample_reparam(emb.q_h, eps)
            val, g_eta = unit_objective(st.feats, st.frame_weights, W @ h + b,
                                        layout, need_grad)
            value += val
            if not need_grad:
                continue
            g_h = W.T @ g_eta
            g_hm[u] += g_h
            g_hv[u] += g_h * eps / (2.0 * np.sqrt(emb.q_h.var))
            if want_subspace_grad:
                gW_n += np.outer(g_eta, h)
                g_b += g_eta
                if noise.b is not None:
                    g_bv += g_eta * noise.b[n] / (2.0 * np.sqrt(subspace.q_b.var))
        if need_grad and want_subspace_grad:
            g_W += gW_n
            if noise.W is not None:
                g_Wv += gW_n * noise.W[n] / (2.0 * np.sqrt(subspace.q_W.var))
    value /= n_samples
    value -= sum(kl_to_standard_normal(e.q_h) for e in embeddings)
    if want_subspace_grad:
        value -= kl_to_standard_normal(subspace.q_W) + kl_to_standard_normal(subspace.q_b)
    if not need_grad:
        return value, None
    grads = {"h_mean": g_hm / n_samples, "h_var": g_hv / n_samples}
    for u, emb in enumerate(embeddings):
        km, kv = _kl_grads(emb.q_h)
        grads["h_mean"][u] += km
        grads["h_var"][u] += kv
    if want_subspace_grad:
        km, kv = _kl_grads(subspace.q_W)
        grads["W_mean"] = g_W / n_samples + km
        grads["W_var"] = g_Wv / n_samples + kv
        km, kv = _kl_grads(subspace.q_b)
        grads["b_mean"] = g_b / n_samples + km
        grads["b_var"] = g_bv / n_samples + kv
    return value, grads


def _single(noise: NoiseBundle):
    h = noise.h if noise.h.ndim == 3 else noise.h[:, None, :]
    return NoiseBundle(h, noise.W, noise.b)


def expected_unit_loglik(feats, frame_weights, subspace: SubspaceModel,
                         emb: Embedding, noise: NoiseBundle):
    """Monte-Carlo estimate of sum_t sum_i w_ti E[ln p(x_t | state i)].

    ``noise.h`` may be (n_samples, P) or (n_samples, 1, P).
    """
    noise = _single(noise)
    total = 0.0
    for n in range(noise.n_samples):
        W, b = _sampled_subspace(subspace, noise, n)
        h = sample_reparam(emb.q_h, noise.h[n, 0])
        total += unit_objective(feats, frame_weights, W @ h + b,
                                subspace.layout, need_grad=False)[0]
    return total / noise.n_samples


def embedding_objective(feats, frame_weights, subspace, emb, noise):
    return (expected_unit_loglik(feats, frame_weights, subspace, emb, noise)
            - kl_to_standard_normal(emb.q_h))


def grad_embedding(feats, frame_weights, subspace: SubspaceModel,
                   emb: Embedding, noise: NoiseBundle):
    """Gradient of expected_unit_loglik - KL(q_h) w.r.t. (mean, var) of q_h."""
    _, grads = subspace_objective([UnitStats(feats, frame_weights)], subspace,
                                  [emb], _single(noise), want_subspace_grad=False)
    return grads["h_mean"][0], grads["h_var"][0]


def grad_subspace(stats, subspace: SubspaceModel, embeddings, noise: NoiseBundle):
    """Gradient of sum_u expected_unit_loglik - KL(q_W) - KL(q_b) w.r.t. q_W, q_b.

    The embeddings' KL terms are constant here and do not enter.
    """
    if len(stats) == 0:
        km, kv = _kl_grads(subspace.q_W)
        bm, bv = _kl_grads(subspace.q_b)
        return {"W_mean": km, "W_var": kv, "b_mean": bm, "b_var": bv}
    _, grads = subspace_objective(stats, subspace, embeddings, noise)
    return {k: grads[k] for k in ("W_mean", "W_var", "b_mean", "b_var")}


def expected_state_logliks(feats, subspace: SubspaceModel, embeddings):
    """Lower bound on E_q(h)[ln p(x_t | state)] for every unit state.

    W and b are fixed at their posterior means; the uncertainty of each
    h is integrated in closed form.  With h variance -> 0 this reduces to
    the plug-in log-likelihood.  Returns (T, 3 * U).
    """
    x = np.asarray(feats, dtype=np.float64)
    layout = subspace.layout
    W, b = subspace.q_W.mean, subspace.q_b.mean
    m = np.array([e.q_h.mean for e in embeddings])          # (U, P)
    v = np.array([e.q_h.var for e in embeddings])
    a = m @ W.T + b                                          # (U, S)
    V = v @ (W * W).T
    Wm, Ws = W[layout.mean_rows], W[layout.logvar_rows]      # (3, K, D, P)
    C = np.einsum("ikdp,ikdp,up->uikd", Wm, Ws, v)
    lr = layout.logit_rows
    al = np.clip(a[:, lr], -LOGIT_CLAMP, LOGIT_CLAMP)        # (U, 3, K-1)
    lse = np.log1p(np.sum(np.exp(al + 0.5 * V[:, lr]), axis=-1, keepdims=True))
    elogw = np.concatenate([al, np.zeros(al.shape[:-1] + (1,))], axis=-1) - lse
    out = np.empty((len(x), len(embeddings) * N_STATES))
    for u in range(len(embeddings)):
        a_mu, v_mu = a[u][layout.mean_rows], V[u][layout.mean_rows]
        a_s, v_s = a[u][layout.logvar_rows], V[u][layout.logvar_rows]
        scale = np.exp(-a_s + 0.5 * v_s)
        diff = x[:, None, None, :] - (a_mu - C[u])[None]
        comp = -0.5 * np.sum(_LOG_2PI + a_s[None]
                             + scale[None] * (diff * diff + v_mu[None]), axis=-1)
        out[:, N_STATES * u:N_STATES * (u + 1)] = logsumexp(
            comp + elogw[u][None], axis=-1)
    return out


def init_subspace(rng, layout: Layout, P, w_std=0.1, init_var=1e-2):
    S = layout.size
    q_W = GaussianPosterior(w_std * rng.standard_normal((S, P)),
                            np.full((S, P), init_var))
    q_b = GaussianPosterior(np.zeros(S), np.full(S, init_var))
    return SubspaceModel(q_W, q_b, layout)


def init_embeddings(rng, labels, P, mean_std=0.1, init_var=1e-2):
    return [Embedding(GaussianPosterior(mean_std * rng.standard_normal(P),
                                        np.full(P, init_var)), label)
            for label in labels]
