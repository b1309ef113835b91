"""Two-phase variational training of the subspace HMM.

Phase 1 (``train_subspace``) fits q(W), q(b) and one embedding per phone
of every labeled source language, aligning each utterance against its
transcript.  Phase 2 (``discover_units``) keeps q(W), q(b) fixed and
learns the embeddings of a truncated unit inventory on unlabeled target
speech through a pseudo-phone loop.

Each epoch alternates an E-step (forward-backward under the current
posteriors, giving soft state assignments) with a few adaptive gradient
steps on the reparametrized Monte-Carlo objective.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dp
from .graph import (DEFAULT_FINAL_PROB, DEFAULT_SELF_LOOP, build_forced_alignment,
                    build_phone_loop, expected_unit_duration)
from .inference import (forward_backward, path_to_units, unit_posteriorgram,
                        viterbi)
from .model import N_STATES, Layout, batch_state_logliks
from .subspace import (Embedding, GaussianPosterior, NoiseBundle, SubspaceModel,
                       UnitStats, expected_state_logliks, init_embeddings,
                       init_subspace, kl_to_standard_normal, subspace_objective)

log = logging.getLogger(__name__)

SUBMITTED_TRUNCATIONS = (75, 100)
MODEL_MAGIC = b"SHMM"
MODEL_VERSION = 1
_WEIGHT_FLOOR = 1e-8


class TrainingError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    subspace_dim: int = 100
    gaussians_per_state: int = 4
    truncation: int = 100
    concentration: float = dp.DEFAULT_CONCENTRATION
    epochs: int = 50
    step_size: float = 5e-3
    mc_samples: int = 1
    seed: int = 0
    self_loop: float = DEFAULT_SELF_LOOP
    acoustic_scale: float = 1.0
    inner_steps: int = 10
    final_prob: float = DEFAULT_FINAL_PROB
    sample_subspace: bool = False
    init_embedding_std: float = 0.1
    init_var: float = 1e-2
    anneal_epochs: int = 0
    init_method: str = "pca"
    bootstrap_iters: int = 20
    jobs: int = 1

    def __post_init__(self):
        positive = ("subspace_dim", "gaussians_per_state", "truncation",
                    "concentration", "step_size", "mc_samples", "acoustic_scale",
                    "init_var", "jobs")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs", "inner_steps", "seed", "init_embedding_std",
                     "anneal_epochs", "bootstrap_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.self_loop < 1 or not 0 < self.final_prob < 1:
            raise ValueError("self_loop and final_prob must lie in (0, 1)")
        if self.init_method not in ("pca", "random"):
            raise ValueError("init_method must be 'pca' or 'random'")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def replace(self, **kw):
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return TrainConfig(**d)


@dataclass
class Utterance:
    utt_id: str
    feats: np.ndarray
    transcript: list | None = None
    duration_sec: float | None = None
    language: str | None = None


@dataclass
class ElboReport:
    loglik: float
    dp_term: float
    kl_h: float
    kl_W: float
    kl_b: float

    @property
    def total(self):
        return math.fsum([self.loglik, self.dp_term, -self.kl_h, -self.kl_W,
                          -self.kl_b])

    def to_dict(self):
        d = asdict(self)
        d["total"] = self.total
        return d


@dataclass(eq=False)
class ModelContainer:
    subspace: SubspaceModel
    embeddings: list
    config: TrainConfig
    sticks: dp.StickPosterior | None = None
    epoch_log: list = field(default_factory=list)
    phase: str = "subspace"

    @property
    def layout(self):
        return self.subspace.layout

    @property
    def labels(self):
        return [e.label for e in self.embeddings]

    def __eq__(self, other):
        if not isinstance(other, ModelContainer):
            return NotImplemented
        return to_bytes(self) == to_bytes(other)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adaptive_step(params, grads, state: AdamState, step_size, beta1=0.9,
                  beta2=0.999, eps=1e-8):
    """One Adam ascent step on a dict of arrays.  Returns (params, state)."""
    if set(params) != set(grads):
        raise ValueError("params and grads must have the same keys")
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{np.shape(p)} for {k!r}")
        m = beta1 * state.m.get(k, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(k, 0.0) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_p[k] = p + step_size * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


# ---------------------------------------------------------------------------
# Shared E-step machinery


def _map(fn, items, jobs):
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def utterance_graph(utt: Utterance, model: ModelContainer, mode, labels_of=None):
    if mode == "align":
        trans = labels_of(utt) if labels_of else utt.transcript
        return build_forced_alignment(trans, model.labels, model.config.self_loop)
    return build_phone_loop(dp.expected_log_weights(model.sticks),
                            model.config.self_loop, model.config.final_prob)


def _e_step(utts, model, mode, labels_of=None, acoustic_scale=1.0, jobs=1):
    """Forward-backward per utterance; returns [(posteriors, log_z, graph)]."""
    if mode == "loop":
        loop = utterance_graph(None, model, "loop")

    def one(utt):
        ll = expected_state_logliks(utt.feats, model.subspace, model.embeddings)
        graph = loop if mode == "loop" else utterance_graph(utt, model, mode,
                                                            labels_of)
        try:
            post, log_z = forward_backward(graph, ll[:, graph.binding],
                                           acoustic_scale)
        except ValueError as exc:
            raise TrainingError(f"utterance {utt.utt_id}: {exc}") from exc
        if not np.isfinite(log_z):
            raise TrainingError(f"non-finite log-likelihood for {utt.utt_id}")
        return post, log_z, graph

    return _map(one, utts, jobs)


def _unit_frame_weights(post, graph, n_units):
    """Soft (T, U, 3) state occupancy per inventory unit."""
    w = np.zeros((len(post), n_units, N_STATES))
    np.add.at(w, (slice(None), graph.unit_of, graph.state_in_unit), post)
    return w


def _collect_stats(utts, results, n_units):
    """Per-unit UnitStats, keeping only frames with non-negligible weight."""
    X = np.concatenate([u.feats for u in utts])
    G = np.concatenate([_unit_frame_weights(p, g, n_units) for p, _, g in results])
    stats = []
    for u in range(n_units):
        keep = G[:, u].sum(axis=1) > _WEIGHT_FLOOR
        stats.append(UnitStats(X[keep], G[keep, u]))
    return stats, G


def _kl_terms(model):
    kl_h = math.fsum(kl_to_standard_normal(e.q_h) for e in model.embeddings)
    return (kl_h, kl_to_standard_normal(model.subspace.q_W),
            kl_to_standard_normal(model.subspace.q_b))


def _report(model, results, mode):
    kl_h, kl_W, kl_b = _kl_terms(model)
    dp_term = -dp.kl_sticks(model.sticks) if mode == "loop" else 0.0
    return ElboReport(math.fsum(r[1] for r in results), dp_term, kl_h, kl_W, kl_b)


def _check_corpus(utts, dim=None):
    if not utts:
        raise TrainingError("empty corpus")
    for u in utts:
        f = np.asarray(u.feats)
        if f.ndim != 2 or len(f) == 0:
            raise TrainingError(f"utterance {u.utt_id}: features must be T x D")
        if dim is not None and f.shape[1] != dim:
            raise TrainingError(f"utterance {u.utt_id}: feature dimension "
                                f"{f.shape[1]} != model dimension {dim}")
        if not np.all(np.isfinite(f)):
            raise TrainingError(f"utterance {u.utt_id}: non-finite features")


def _emb_params(embeddings):
    return {"h_mean": np.array([e.q_h.mean for e in embeddings]),
            "h_logvar": np.log(np.array([e.q_h.var for e in embeddings]))}


def _set_embeddings(embeddings, params):
    return [Embedding(GaussianPosterior(m, np.exp(lv)), e.label)
            for e, m, lv in zip(embeddings, params["h_mean"], params["h_logvar"])]


def _m_step(model, stats, rng, adam, cfg, update_subspace):
    """Inner adaptive gradient steps; returns updated (model pieces, adam)."""
    subspace, embeddings = model.subspace, model.embeddings
    S, P, U = subspace.S, subspace.P, len(embeddings)
    sample_sub = update_subspace or cfg.sample_subspace
    for _ in range(cfg.inner_steps):
        noise = NoiseBundle.draw(rng, cfg.mc_samples, U, S, P, sample_sub)
        _, g = subspace_objective(stats, subspace, embeddings, noise,
                                  want_subspace_grad=update_subspace)
        params = _emb_params(embeddings)
        h_var = np.exp(params["h_logvar"])
        grads = {"h_mean": g["h_mean"], "h_logvar": g["h_var"] * h_var}
        if update_subspace:
            params.update(W_mean=subspace.q_W.mean,
                          W_logvar=np.log(subspace.q_W.var),
                          b_mean=subspace.q_b.mean,
                          b_logvar=np.log(subspace.q_b.var))
            grads.update(W_mean=g["W_mean"], W_logvar=g["W_var"] * subspace.q_W.var,
                         b_mean=g["b_mean"], b_logvar=g["b_var"] * subspace.q_b.var)
        params, adam = adaptive_step(params, grads, adam, cfg.step_size)
        embeddings = _set_embeddings(embeddings, params)
        if update_subspace:
            subspace = SubspaceModel(
                GaussianPosterior(params["W_mean"], np.exp(params["W_logvar"])),
                GaussianPosterior(params["b_mean"], np.exp(params["b_logvar"])),
                subspace.layout)
    return subspace, embeddings, adam


def _free_unit_em(utts, labels, K, iterations, self_loop, rng, var_floor=1e-3,
                  spread=0.1, jobs=1):
    """Maximum-likelihood HMM-GMM training with independent parameters per unit.

    Starts flat (every unit at the global statistics, components split by
    a fixed offset pattern) and returns arrays (means, var, weights) of
    shapes (U, 3, K, D), (U, 3, K, D), (U, 3, K).
    """
    X = np.concatenate([u.feats for u in utts])
    D = X.shape[1]
    g_mean, g_var = X.mean(axis=0), X.var(axis=0) + var_floor
    offsets = spread * rng.standard_normal((K, D))
    U = len(labels)
    means = np.broadcast_to(g_mean + offsets * np.sqrt(g_var), (U, N_STATES, K, D)).copy()
    var = np.broadcast_to(g_var, (U, N_STATES, K, D)).copy()
    weights = np.full((U, N_STATES, K), 1.0 / K)
    for _ in range(iterations):
        logw = np.log(weights)

        def one(utt):
            graph = build_forced_alignment(_source_labels(utt), labels, self_loop)
            ll = batch_state_logliks(utt.feats, means, var, logw)
            post, _ = forward_backward(graph, ll[:, graph.binding])
            return _unit_frame_weights(post, graph, U)

        G = np.concatenate(_map(one, utts, jobs))
        for u in range(U):
            for i in range(N_STATES):
                w = G[:, u, i]
                keep = w > _WEIGHT_FLOOR
                if not np.any(keep):
                    continue
                x, w = X[keep], w[keep]
                diff = x[:, None, :] - means[u, i][None]
                comp = -0.5 * np.sum(np.log(var[u, i])[None]
                                     + diff * diff / var[u, i][None], axis=-1)
                comp += np.log(weights[u, i])[None]
                r = np.exp(comp - comp.max(axis=1, keepdims=True))
                r /= r.sum(axis=1, keepdims=True)
                r *= w[:, None]
                occ = r.sum(axis=0) + 1e-10
                means[u, i] = r.T @ x / occ[:, None]
                var[u, i] = r.T @ (x * x) / occ[:, None] - means[u, i] ** 2 + var_floor
                var[u, i] = np.maximum(var[u, i], var_floor)
                weights[u, i] = np.maximum(occ / occ.sum(), 1e-4)
                weights[u, i] /= weights[u, i].sum()
    return means, var, weights


def _rank_residual(flat, P):
    sv = np.linalg.svd(flat - flat.mean(axis=0), compute_uv=False)
    return float(np.sum(sv[P:] ** 2))


def align_components(unit_arrays, P, rng=None, restarts=4, sweeps=10):
    """Permute mixture components per unit and state to a common ordering.

    Free EM labels components arbitrarily, which breaks the linear
    structure PCA relies on.  Coordinate descent over the per-(unit, state)
    permutations minimizes the residual of a rank-P fit to the
    standardized component means; the best of a few random restarts wins.
    """
    means, var, weights = (np.array(a, dtype=float) for a in unit_arrays)
    U, S, K, D = means.shape
    if K == 1:
        return means, var, weights
    rng = rng if rng is not None else np.random.default_rng(0)
    perms = [np.array(p) for p in itertools.permutations(range(K))]
    z = means / (means.reshape(-1, D).std(axis=0) + 1e-12)
    best_cost, best_choice = np.inf, None
    for restart in range(restarts):
        if restart == 0:
            choice = np.zeros((U, S), dtype=int)
        else:
            choice = rng.integers(0, len(perms), size=(U, S))
        cur = np.stack([[z[u, i][perms[choice[u, i]]] for i in range(S)]
                        for u in range(U)])
        cost = _rank_residual(cur.reshape(U, -1), P)
        for _ in range(sweeps):
            improved = False
            for u in range(U):
                for i in range(S):
                    keep = choice[u, i]
                    for c in range(len(perms)):
                        if c == keep:
                            continue
                        cur[u, i] = z[u, i][perms[c]]
                        trial = _rank_residual(cur.reshape(U, -1), P)
                        if trial < cost - 1e-12:
                            cost, keep, improved = trial, c, True
                    choice[u, i] = keep
                    cur[u, i] = z[u, i][perms[keep]]
            if not improved:
                break
        if cost < best_cost:
            best_cost, best_choice = cost, choice.copy()
    for u in range(U):
        for i in range(S):
            p = perms[best_choice[u, i]]
            means[u, i], var[u, i], weights[u, i] = \
                means[u, i][p], var[u, i][p], weights[u, i][p]
    return means, var, weights


def pca_initialize(model, unit_arrays, rng):
    """Subspace and embeddings from the principal components of unit supervectors.

    b is the average supervector, W and h come from the leading singular
    directions; h is scaled to unit variance across units.  Columns beyond
    the rank of the data start as small random values.
    """
    layout = model.layout
    P = model.subspace.P
    means, var, weights = unit_arrays
    n = len(means)
    eta = np.zeros((n, layout.size))
    eta[:, layout.mean_rows] = means
    eta[:, layout.logvar_rows] = np.log(var)
    eta[:, layout.logit_rows] = np.log(weights[..., :-1]) - np.log(weights[..., -1:])
    b = eta.mean(axis=0)
    U_, sv, Vt = np.linalg.svd(eta - b, full_matrices=False)
    r = min(P, len(sv))
    W = 0.01 * rng.standard_normal((layout.size, P))
    H = 0.01 * rng.standard_normal((n, P))
    W[:, :r] = Vt[:r].T * sv[:r] / np.sqrt(n)
    H[:, :r] = U_[:, :r] * np.sqrt(n)
    q_W, q_b = model.subspace.q_W, model.subspace.q_b
    subspace = SubspaceModel(GaussianPosterior(W, q_W.var),
                             GaussianPosterior(b, q_b.var), layout)
    embeddings = [Embedding(GaussianPosterior(h, e.q_h.var), e.label)
                  for h, e in zip(H, model.embeddings)]
    return subspace, embeddings


def annealed_scale(epoch, anneal_epochs):
    """E-step posterior temperature: ramps linearly up to 1."""
    if anneal_epochs <= 0:
        return 1.0
    return min(1.0, (epoch + 1) / (anneal_epochs + 1))


# ---------------------------------------------------------------------------
# Phase 1


def source_label(language, phone):
    return f"{language}/{phone}"


def _source_labels(utt):
    if utt.language is None:
        return list(utt.transcript)
    return [source_label(utt.language, p) for p in utt.transcript]


def train_subspace(corpora, cfg: TrainConfig = TrainConfig()):
    """Fit the phonetic subspace on transcribed source languages.

    ``corpora`` maps a language name to a list of Utterances whose
    transcripts are phone-label sequences of that language.
    """
    if not corpora:
        raise TrainingError("no source corpora given")
    utts, langs = [], []
    for lang, lang_utts in corpora.items():
        for u in lang_utts:
            if not u.transcript:
                raise TrainingError(f"utterance {u.utt_id} ({lang}) has no transcript")
            utts.append(u)
            langs.append(lang)
    _check_corpus(utts)
    dim = utts[0].feats.shape[1]
    _check_corpus(utts, dim)
    utts = [Utterance(u.utt_id, u.feats, list(u.transcript), u.duration_sec, lang)
            for u, lang in zip(utts, langs)]
    labels = sorted({source_label(u.language, p) for u in utts
                     for p in u.transcript})

    rng = np.random.default_rng(cfg.seed)
    layout = Layout(cfg.gaussians_per_state, dim)
    subspace = init_subspace(rng, layout, cfg.subspace_dim, init_var=cfg.init_var)
    embeddings = init_embeddings(rng, labels, cfg.subspace_dim,
                                 cfg.init_embedding_std, cfg.init_var)
    model = ModelContainer(subspace, embeddings, cfg, None, [], "subspace")
    if cfg.init_method == "pca" and cfg.epochs > 0:
        arrays = _free_unit_em(utts, labels, cfg.gaussians_per_state,
                               cfg.bootstrap_iters, cfg.self_loop, rng, jobs=cfg.jobs)
        arrays = align_components(arrays, cfg.subspace_dim, rng)
        model.subspace, model.embeddings = pca_initialize(model, arrays, rng)
    adam = AdamState()
    for epoch in range(cfg.epochs):
        scale = annealed_scale(epoch, cfg.anneal_epochs)
        results = _e_step(utts, model, "align", _source_labels, scale, cfg.jobs)
        elbo = _report(model, results, "align").total
        if not np.isfinite(elbo):
            raise TrainingError(f"non-finite ELBO at epoch {epoch}")
        model.epoch_log.append(elbo)
        log.info("subspace epoch %d: elbo %.4f", epoch + 1, elbo)
        stats, _ = _collect_stats(utts, results, len(labels))
        model.subspace, model.embeddings, adam = _m_step(
            model, stats, rng, adam, cfg, update_subspace=True)
    return model


# ---------------------------------------------------------------------------
# Phase 2


def occupancy_counts(G, self_loop):
    """Token-count estimate per unit from (T, U, 3) frame occupancies."""
    return G.sum(axis=(0, 2)) / expected_unit_duration(self_loop)


def discover_units(utts, base: ModelContainer, cfg: TrainConfig | None = None):
    """Acoustic unit discovery with the subspace of ``base`` held fixed."""
    if base is None or base.subspace is None:
        raise TrainingError("discover_units needs a model with a trained subspace")
    cfg = cfg or base.config
    _check_corpus(utts, base.layout.dim)
    if cfg.gaussians_per_state != base.layout.n_components or \
            cfg.subspace_dim != base.subspace.P:
        cfg = cfg.replace(gaussians_per_state=base.layout.n_components,
                          subspace_dim=base.subspace.P)
    rng = np.random.default_rng(cfg.seed)
    labels = [f"u{i + 1}" for i in range(cfg.truncation)]
    embeddings = init_embeddings(rng, labels, base.subspace.P,
                                 cfg.init_embedding_std, cfg.init_var)
    model = ModelContainer(base.subspace.copy(), embeddings, cfg,
                           dp.StickPosterior.prior(cfg.truncation, cfg.concentration),
                           [], "aud")
    adam = AdamState()
    for epoch in range(cfg.epochs):
        results = _e_step(utts, model, "loop", jobs=cfg.jobs)
        elbo = _report(model, results, "loop").total
        if not np.isfinite(elbo):
            raise TrainingError(f"non-finite ELBO at epoch {epoch}")
        model.epoch_log.append(elbo)
        log.info("aud epoch %d: elbo %.4f", epoch + 1, elbo)
        stats, G = _collect_stats(utts, results, cfg.truncation)
        _, model.embeddings, adam = _m_step(model, stats, rng, adam, cfg,
                                            update_subspace=False)
        model.sticks = dp.update_sticks(occupancy_counts(G, cfg.self_loop),
                                        cfg.concentration)
    return model


def compute_elbo(model: ModelContainer, utts, mode=None, jobs=1):
    """Evidence lower bound of ``utts`` under the model at acoustic scale 1.

    ``mode`` is "loop" (phone loop, needs sticks) or "align" (forced
    alignment on transcripts); by default it follows the model phase.
    """
    mode = mode or ("loop" if model.sticks is not None else "align")
    _check_corpus(utts, model.layout.dim)
    results = _e_step(utts, model, mode, _source_labels, jobs=jobs)
    for utt, (_, log_z, _) in zip(utts, results):
        if not np.isfinite(log_z):
            raise TrainingError(f"non-finite log-likelihood for {utt.utt_id}")
    return _report(model, results, mode)


def decode(model: ModelContainer, utts, acoustic_scale=1.0, jobs=1,
           posteriors=False):
    """Viterbi unit transcripts through the phone loop of a discovered model.

    Returns a list of UnitTranscripts, or (transcript, unit posteriorgram)
    pairs when ``posteriors`` is set.  The posteriorgram is computed at the
    same acoustic scale.
    """
    if model.sticks is None:
        raise TrainingError("decoding needs a model with discovered units")
    _check_corpus(utts, model.layout.dim)
    graph = utterance_graph(None, model, "loop")

    def one(utt):
        ll = expected_state_logliks(utt.feats, model.subspace, model.embeddings)
        e = ll[:, graph.binding]
        path, _ = viterbi(graph, e, acoustic_scale)
        tr = path_to_units(path, graph, model.labels, utt.utt_id)
        tr.duration_sec = utt.duration_sec
        if not posteriors:
            return tr
        post, _ = forward_backward(graph, e, acoustic_scale)
        return tr, unit_posteriorgram(post, graph)

    return _map(one, utts, jobs)


# ---------------------------------------------------------------------------
# Serialization


def _arrays(model):
    out = [("W_mean", model.subspace.q_W.mean), ("W_var", model.subspace.q_W.var),
           ("b_mean", model.subspace.q_b.mean), ("b_var", model.subspace.q_b.var),
           ("h_mean", np.array([e.q_h.mean for e in model.embeddings])),
           ("h_var", np.array([e.q_h.var for e in model.embeddings]))]
    if model.sticks is not None:
        out += [("gamma1", model.sticks.gamma1), ("gamma2", model.sticks.gamma2)]
    return out


def to_bytes(model: ModelContainer):
    arrays = _arrays(model)
    meta = {
        "phase": model.phase,
        "config": model.config.to_dict(),
        "layout": model.layout.to_dict(),
        "labels": model.labels,
        "epoch_log": [float(x) for x in model.epoch_log],
        "concentration": None if model.sticks is None else model.sticks.concentration,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = struct.pack("<I", len(meta_bytes)) + meta_bytes + b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return (MODEL_MAGIC + struct.pack("<H", MODEL_VERSION) + payload
            + struct.pack("<I", zlib.crc32(payload)))


def from_bytes(raw: bytes):
    if len(raw) < 6 or raw[:4] != MODEL_MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version} "
                               f"(this build reads version {MODEL_VERSION})")
    if len(raw) < 14:
        raise ModelFormatError("truncated model file")
    payload, (crc,) = raw[6:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise ModelFormatError("checksum mismatch: model file is corrupted")
    (meta_len,) = struct.unpack_from("<I", payload)
    try:
        meta = json.loads(payload[4:4 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable metadata: {exc}") from exc
    offset = 4 + meta_len
    arrays = {}
    for spec in meta["arrays"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        chunk = payload[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise ModelFormatError(f"truncated array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += 8 * n
    if offset != len(payload):
        raise ModelFormatError("trailing bytes after arrays")
    layout = Layout(**meta["layout"])
    subspace = SubspaceModel(GaussianPosterior(arrays["W_mean"], arrays["W_var"]),
                             GaussianPosterior(arrays["b_mean"], arrays["b_var"]),
                             layout)
    embeddings = [Embedding(GaussianPosterior(m, v), lab) for m, v, lab in
                  zip(arrays["h_mean"], arrays["h_var"], meta["labels"])]
    sticks = None
    if "gamma1" in arrays:
        sticks = dp.StickPosterior(arrays["gamma1"], arrays["gamma2"],
                                   meta["concentration"])
    return ModelContainer(subspace, embeddings, TrainConfig.from_dict(meta["config"]),
                          sticks, list(meta["epoch_log"]), meta["phase"])


def save_model(model: ModelContainer, path):
    Path(path).write_bytes(to_bytes(model))


def load_model(path):
    return from_bytes(Path(path).read_bytes())
