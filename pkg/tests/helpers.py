"""Shared builders and oracles for the test suite."""

import itertools
import json
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile
from scipy.linalg import subspace_angles
from scipy.special import logsumexp

from shmm_aud.cli import run
from shmm_aud.graph import DecodeGraph
from shmm_aud.model import Layout
from shmm_aud.subspace import (Embedding, GaussianPosterior, NoiseBundle, SubspaceModel,
                               UnitStats)
from shmm_aud.synthetic import tone_waveform


@dataclass
class TinyProblem:
    subspace: SubspaceModel
    embeddings: list
    stats: list
    noise: NoiseBundle

    def noise_for(self, u):
        n = self.noise
        return NoiseBundle(n.h[:, u:u + 1], n.W, n.b)


def tiny_problem(rng, n_units=1, K=None, D=None, P=None, T=None, sample_subspace=False,
                 n_samples=1):
    K = K or int(rng.integers(1, 3))
    D = D or int(rng.integers(1, 3))
    P = P or int(rng.integers(1, 3))
    layout = Layout(K, D)
    S = layout.size
    q_W = GaussianPosterior(0.5 * rng.standard_normal((S, P)),
                            rng.uniform(0.05, 0.5, (S, P)))
    q_b = GaussianPosterior(0.5 * rng.standard_normal(S), rng.uniform(0.05, 0.5, S))
    sub = SubspaceModel(q_W, q_b, layout)
    embs = [Embedding(GaussianPosterior(rng.standard_normal(P), rng.uniform(0.1, 1.0, P)),
                      f"u{i}") for i in range(n_units)]
    stats = []
    for _ in range(n_units):
        n = T or int(rng.integers(1, 5))
        stats.append(UnitStats(rng.standard_normal((n, D)),
                               rng.dirichlet(np.ones(3), size=n) * rng.uniform(0.2, 1, (n, 1))))
    noise = NoiseBundle.draw(rng, n_samples, n_units, S, P, sample_subspace)
    return TinyProblem(sub, embs, stats, noise)


def fd_check(f, x, grad, step=1e-5, rtol=1e-4, atol=1e-7):
    """Central finite differences of scalar f around x against ``grad``."""
    x = np.array(x, dtype=float)
    flat = x.ravel()
    g = np.asarray(grad).ravel()
    worst = 0.0
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += step
        xm[i] -= step
        fd = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * step)
        err = abs(g[i] - fd) - (atol + rtol * abs(fd))
        worst = max(worst, err)
        assert err <= 0, f"coordinate {i}: analytic {g[i]!r} vs numeric {fd!r}"
    return worst


def random_graph(rng, n_states, density=0.6, with_final=True):
    """Small DecodeGraph with random sparse arcs and weights."""
    src, dst, logp = [], [], []
    for i in range(n_states):
        for j in range(n_states):
            if rng.random() < density:
                src.append(i)
                dst.append(j)
                logp.append(np.log(rng.uniform(0.05, 1.0)))
    if not src:
        src, dst, logp = [0], [0], [np.log(0.5)]
    log_start = np.log(rng.dirichlet(np.ones(n_states)))
    log_final = np.log(rng.uniform(0.05, 1.0, n_states)) if with_final \
        else np.zeros(n_states)
    order = np.lexsort((src, dst))
    return DecodeGraph(np.array(src)[order], np.array(dst)[order], np.array(logp)[order],
                       log_start, log_final, np.zeros(n_states, dtype=int),
                       np.arange(n_states) % 3, 1)


def enumerate_paths(graph, emissions, scale=1.0):
    """Every state path with its log score (finite ones only)."""
    T, M = emissions.shape
    A = graph.dense_log_transitions()
    out = []
    for path in itertools.product(range(M), repeat=T):
        s = graph.log_start[path[0]] + graph.log_final[path[-1]]
        s += sum(A[a, b] for a, b in zip(path[:-1], path[1:]))
        s += scale * sum(emissions[t, q] for t, q in enumerate(path))
        if np.isfinite(s):
            out.append((path, s))
    return out


def brute_marginals(graph, emissions, scale=1.0):
    paths = enumerate_paths(graph, emissions, scale)
    scores = np.array([s for _, s in paths])
    log_z = logsumexp(scores)
    post = np.zeros(emissions.shape)
    for (path, s) in paths:
        w = np.exp(s - log_z)
        for t, q in enumerate(path):
            post[t, q] += w
    return post, log_z, paths


def symmetric_angles(W_hat, W_true, layout):
    """Principal angles in degrees, minimized over relabelings of mixture components.

    Swapping the components of a state in every unit leaves the model
    unchanged but permutes the mean and log-variance rows; with K=2 the
    weight logit changes sign.  Only K <= 2 is supported.
    """
    K = layout.n_components
    if K > 2:
        raise ValueError("component relabeling only implemented for K <= 2")
    best = None
    for flips in itertools.product([False, True], repeat=3 if K == 2 else 0):
        W = W_hat.copy()
        for i, flip in enumerate(flips):
            if not flip:
                continue
            for rows in (layout.mean_rows, layout.logvar_rows):
                W[rows[i].ravel()] = W_hat[rows[i][::-1].ravel()]
            W[layout.logit_rows[i]] = -W_hat[layout.logit_rows[i]]
        a = np.degrees(subspace_angles(W, W_true))
        if best is None or a.max() < best.max():
            best = a
    return best


def write_jsonl(path, lines):
    path.write_text("\n".join(json.dumps(x) if not isinstance(x, str) else x
                              for x in lines) + "\n")
    return path


UNIT_FREQS = {"a": (300, 900), "b": (700, 2100), "c": (1200, 3000), "d": (500, 2600)}


def make_wav_corpus(root, rng, names, n_utts, prefix):
    root.mkdir(parents=True, exist_ok=True)
    trans = []
    for k in range(n_utts):
        toks = list(rng.choice(names, size=rng.integers(3, 6)))
        x = tone_waveform(rng, [names.index(t) for t in toks],
                          [UNIT_FREQS[n] for n in names])
        wavfile.write(root / f"{prefix}{k:02d}.wav", 16000,
                      (x * 20000).astype(np.int16))
        trans.append({"id": f"{prefix}{k:02d}", "transcript": toks})
    write_jsonl(root / "trans.jsonl", trans)


def run_pipeline(tmp, seed=5):
    rng = np.random.default_rng(seed)
    for lang, names in (("src1", ["a", "b", "c"]), ("src2", ["b", "c", "d"])):
        make_wav_corpus(tmp / "wav" / lang, rng, names, 4, lang)
    make_wav_corpus(tmp / "wav" / "tgt", rng, ["a", "d"], 4, "tgt")
    cfg = {"subspace_dim": 2, "gaussians_per_state": 1, "epochs": 2, "inner_steps": 2,
           "truncation": 3, "step_size": 0.02, "bootstrap_iters": 2}
    (tmp / "cfg.json").write_text(json.dumps(cfg))
    for lang in ("src1", "src2", "tgt"):
        assert run(["feats", "extract", "--wav", str(tmp / "wav" / lang),
                    "--transcripts", str(tmp / "wav" / lang / "trans.jsonl"),
                    "--out", str(tmp / "feats" / lang)]) == 0
    assert run(["train-subspace", "--manifest", str(tmp / "feats/src1/manifest.jsonl"),
                "--manifest", str(tmp / "feats/src2/manifest.jsonl"),
                "--config", str(tmp / "cfg.json"), "--seed", str(seed),
                "--out", str(tmp / "base.shmm")]) == 0
    assert run(["discover", "--model", str(tmp / "base.shmm"),
                "--manifest", str(tmp / "feats/tgt/manifest.jsonl"),
                "--truncation", "3", "--concentration", "1", "--seed", str(seed),
                "--out", str(tmp / "aud.shmm")]) == 0
    assert run(["decode", "--model", str(tmp / "aud.shmm"),
                "--manifest", str(tmp / "feats/tgt/manifest.jsonl"),
                "--out", str(tmp / "units.jsonl"),
                "--posteriors-dir", str(tmp / "post")]) == 0
    return tmp / "units.jsonl"


