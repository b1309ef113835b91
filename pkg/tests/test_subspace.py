import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shmm_aud.model import Layout, gaussian_loglik, state_loglik
from shmm_aud.subspace import (Embedding, GaussianPosterior, NoiseBundle, SubspaceModel,
                               UnitStats, embedding_objective, expected_state_logliks,
                               expected_unit_loglik, grad_embedding, grad_subspace,
                               kl_to_standard_normal, link_forward, sample_reparam,
                               subspace_objective)

from helpers import fd_check, tiny_problem


def test_link_at_zero():
    layout = Layout(2, 3)
    u = link_forward(np.zeros((layout.size, 2)), np.zeros(layout.size), [0.7, -2.0], layout)
    for s in u.states:
        np.testing.assert_array_equal(s.weights, [0.5, 0.5])
        for c in s.components:
            np.testing.assert_array_equal(c.mean, 0.0)
            np.testing.assert_array_equal(c.var, 1.0)


def test_single_component_weight_is_one():
    rng = np.random.default_rng(0)
    layout = Layout(1, 2)
    u = link_forward(rng.standard_normal((layout.size, 3)), rng.standard_normal(layout.size),
                     rng.standard_normal(3), layout)
    for s in u.states:
        assert s.weights.tolist() == [1.0]


def _scalar_link(eta, K, D):
    """Independent loop evaluation of the three link formulas.

    Each state owns a contiguous block: K*D means, K*D log-variances,
    then K-1 weight logits.
    """
    out = []
    block = 2 * K * D + K - 1
    for i in range(3):
        o = i * block
        means = [[eta[o + k * D + d] for d in range(D)] for k in range(K)]
        var = [[math.exp(eta[o + K * D + k * D + d]) for d in range(D)] for k in range(K)]
        logits = [eta[o + 2 * K * D + j] for j in range(K - 1)]
        den = 1.0 + sum(math.exp(z) for z in logits)
        w = [math.exp(z) / den for z in logits] + [1.0 / den]
        out.append((means, var, w))
    return out


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 10 ** 5))
@settings(max_examples=40)
def test_link_matches_scalar_formulas(K, D, P, seed):
    rng = np.random.default_rng(seed)
    layout = Layout(K, D)
    W, b, h = (rng.standard_normal((layout.size, P)), rng.standard_normal(layout.size),
               rng.standard_normal(P))
    u = link_forward(W, b, h, layout)
    ref = _scalar_link(W @ h + b, K, D)
    for s, (means, var, w) in zip(u.states, ref):
        assert abs(s.weights.sum() - 1.0) <= 1e-10
        np.testing.assert_allclose(s.weights, w, rtol=1e-12, atol=1e-15)
        for k, c in enumerate(s.components):
            np.testing.assert_allclose(c.mean, means[k], rtol=1e-12, atol=1e-15)
            np.testing.assert_allclose(c.var, var[k], rtol=1e-12)
            assert np.all(c.var > 0)


def test_link_extreme_logits_stay_normalized():
    layout = Layout(3, 1)
    b = np.zeros(layout.size)
    b[layout.logit_rows[0]] = [1e4, -1e4]
    u = link_forward(np.zeros((layout.size, 1)), b, [0.0], layout)
    assert abs(u.states[0].weights.sum() - 1.0) <= 1e-10


def test_link_shape_mismatch():
    layout = Layout(1, 1)
    with pytest.raises(ValueError, match="shape"):
        link_forward(np.zeros((5, 1)), np.zeros(6), [0.0], layout)


def test_sample_reparam_examples():
    q = GaussianPosterior(np.array([0.0]), np.array([4.0]))
    assert sample_reparam(q, [1.0])[0] == 2.0
    q = GaussianPosterior(np.array([1.5, -2.0]), np.array([0.3, 2.0]))
    np.testing.assert_array_equal(sample_reparam(q, np.zeros(2)), q.mean)
    with pytest.raises(ValueError):
        sample_reparam(q, np.zeros(3))


def test_sample_reparam_tiny_variance():
    q = GaussianPosterior(np.array([3.0]), np.array([1e-14]))
    for z in (-3.0, 0.5, 2.0):
        assert abs(sample_reparam(q, [z])[0] - 3.0) <= 1e-6 * abs(z)


@given(st.integers(0, 10 ** 5))
@settings(max_examples=30)
def test_antithetic_pairs_average_to_mean(seed):
    rng = np.random.default_rng(seed)
    q = GaussianPosterior(rng.standard_normal(5), np.exp(rng.standard_normal(5)))
    z = rng.standard_normal(5)
    avg = 0.5 * (sample_reparam(q, z) + sample_reparam(q, -z))
    np.testing.assert_allclose(avg, q.mean, rtol=1e-15, atol=1e-15)


@pytest.mark.parametrize("mean, var, expected", [
    (0.0, 1.0, 0.0),
    (1.0, 1.0, 0.5),
    (0.0, 0.5, 0.5 * (0.5 - 1 - math.log(0.5))),
])
def test_kl_examples(mean, var, expected):
    q = GaussianPosterior(np.array([mean]), np.array([var]))
    assert kl_to_standard_normal(q) == pytest.approx(expected, abs=1e-15)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=5),
       st.lists(st.floats(1e-3, 10), min_size=5, max_size=5))
def test_kl_nonnegative(means, variances):
    q = GaussianPosterior(np.array(means), np.array(variances[:len(means)]))
    assert kl_to_standard_normal(q) >= 0.0


def test_unit_loglik_zero_weights():
    rng = np.random.default_rng(1)
    prob = tiny_problem(rng, n_units=1)
    st_ = prob.stats[0]
    val = expected_unit_loglik(st_.feats, np.zeros_like(st_.frame_weights),
                               prob.subspace, prob.embeddings[0], prob.noise_for(0))
    assert val == 0.0


def test_unit_loglik_zero_subspace_single_frame():
    layout = Layout(1, 2)
    sub = SubspaceModel(GaussianPosterior.standard((layout.size, 2)),
                        GaussianPosterior.standard((layout.size,)), layout)
    sub.q_W.mean[:] = 0.0
    emb = Embedding(GaussianPosterior(np.array([0.3, -0.1]), np.array([0.5, 0.5])), "a")
    x = np.array([[0.4, -1.2]])
    w = np.array([[1.0, 0.0, 0.0]])
    val = expected_unit_loglik(x, w, sub, emb, NoiseBundle.zeros(1, 2))
    ref = gaussian_loglik(x[0], link_forward(np.zeros((layout.size, 2)), np.zeros(layout.size),
                                             [0, 0], layout).states[0].components[0])
    assert val == pytest.approx(ref, abs=1e-12)


def test_unit_loglik_matches_recomputation():
    rng = np.random.default_rng(7)
    prob = tiny_problem(rng, n_units=1, K=2, D=2, P=2, T=4, sample_subspace=True)
    st_, emb, noise = prob.stats[0], prob.embeddings[0], prob.noise_for(0)
    sub = prob.subspace
    W = sub.q_W.mean + np.sqrt(sub.q_W.var) * noise.W[0]
    b = sub.q_b.mean + np.sqrt(sub.q_b.var) * noise.b[0]
    h = emb.q_h.mean + np.sqrt(emb.q_h.var) * noise.h[0, 0]
    unit = link_forward(W, b, h, sub.layout)
    ref = sum(st_.frame_weights[t, i] * state_loglik(st_.feats[t], unit.states[i])
              for t in range(len(st_.feats)) for i in range(3))
    got = expected_unit_loglik(st_.feats, st_.frame_weights, sub, emb, noise)
    assert got == pytest.approx(ref, rel=1e-12)


def test_grad_embedding_zero_weights_standard_prior():
    rng = np.random.default_rng(2)
    prob = tiny_problem(rng, n_units=1)
    emb = Embedding(GaussianPosterior.standard((prob.subspace.P,)), "a")
    st_ = prob.stats[0]
    gm, gv = grad_embedding(st_.feats, np.zeros_like(st_.frame_weights), prob.subspace,
                            emb, prob.noise_for(0))
    assert np.all(gm == 0.0) and np.all(gv == 0.0)


def test_grad_embedding_zero_weights_is_minus_mean():
    rng = np.random.default_rng(3)
    prob = tiny_problem(rng, n_units=1)
    emb = prob.embeddings[0]
    st_ = prob.stats[0]
    gm, _ = grad_embedding(st_.feats, np.zeros_like(st_.frame_weights), prob.subspace,
                           emb, prob.noise_for(0))
    np.testing.assert_allclose(gm, -emb.q_h.mean, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_grad_embedding_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    prob = tiny_problem(rng, n_units=1, sample_subspace=bool(seed % 2))
    st_, emb, noise = prob.stats[0], prob.embeddings[0], prob.noise_for(0)
    gm, gv = grad_embedding(st_.feats, st_.frame_weights, prob.subspace, emb, noise)

    def f(mean, var):
        e = Embedding(GaussianPosterior(mean, var), emb.label)
        return embedding_objective(st_.feats, st_.frame_weights, prob.subspace, e, noise)

    fd_check(lambda m: f(m, emb.q_h.var), emb.q_h.mean, gm)
    fd_check(lambda v: f(emb.q_h.mean, v), emb.q_h.var, gv)


@pytest.mark.parametrize("seed", range(5))
def test_grad_subspace_finite_differences(seed):
    rng = np.random.default_rng(200 + seed)
    prob = tiny_problem(rng, n_units=2, sample_subspace=bool(seed % 2))
    g = grad_subspace(prob.stats, prob.subspace, prob.embeddings, prob.noise)
    sub = prob.subspace

    def f(Wm=None, Wv=None, bm=None, bv=None):
        s = SubspaceModel(GaussianPosterior(sub.q_W.mean if Wm is None else Wm,
                                            sub.q_W.var if Wv is None else Wv),
                          GaussianPosterior(sub.q_b.mean if bm is None else bm,
                                            sub.q_b.var if bv is None else bv),
                          sub.layout)
        val, _ = subspace_objective(prob.stats, s, prob.embeddings, prob.noise,
                                    need_grad=False)
        return val

    fd_check(lambda x: f(Wm=x), sub.q_W.mean, g["W_mean"])
    fd_check(lambda x: f(bm=x), sub.q_b.mean, g["b_mean"])
    if prob.noise.W is not None:
        fd_check(lambda x: f(Wv=x), sub.q_W.var, g["W_var"])
        fd_check(lambda x: f(bv=x), sub.q_b.var, g["b_var"])


def test_grad_subspace_empty_batch_is_kl_only():
    rng = np.random.default_rng(4)
    prob = tiny_problem(rng, n_units=1)
    g = grad_subspace([], prob.subspace, [], prob.noise)
    np.testing.assert_array_equal(g["W_mean"], -prob.subspace.q_W.mean)
    np.testing.assert_array_equal(g["b_var"], -0.5 * (1 - 1 / prob.subspace.q_b.var))


def test_grad_subspace_duplicated_batch_doubles_likelihood_part():
    rng = np.random.default_rng(5)
    prob = tiny_problem(rng, n_units=1)
    kl = grad_subspace([], prob.subspace, [], prob.noise)
    one = grad_subspace(prob.stats, prob.subspace, prob.embeddings, prob.noise)
    st_ = prob.stats[0]
    doubled = UnitStats(np.concatenate([st_.feats, st_.feats]),
                        np.concatenate([st_.frame_weights, st_.frame_weights]))
    two = grad_subspace([doubled], prob.subspace, prob.embeddings, prob.noise)
    for k in ("W_mean", "b_mean"):
        np.testing.assert_allclose(two[k] - kl[k], 2 * (one[k] - kl[k]),
                                   rtol=1e-12, atol=1e-12)


def test_expected_state_logliks_reduce_to_plugin_at_zero_variance():
    rng = np.random.default_rng(6)
    prob = tiny_problem(rng, n_units=2, K=2, D=2, P=2, T=3)
    embs = [Embedding(GaussianPosterior(e.q_h.mean, np.full_like(e.q_h.var, 1e-300)),
                      e.label) for e in prob.embeddings]
    x = rng.standard_normal((3, 2))
    ll = expected_state_logliks(x, prob.subspace, embs)
    for u, e in enumerate(embs):
        unit = link_forward(prob.subspace.q_W.mean, prob.subspace.q_b.mean, e.q_h.mean,
                            prob.subspace.layout)
        for t in range(3):
            for i in range(3):
                assert ll[t, 3 * u + i] == pytest.approx(
                    state_loglik(x[t], unit.states[i]), abs=1e-10)


def test_expected_state_logliks_bound_monte_carlo():
    rng = np.random.default_rng(8)
    prob = tiny_problem(rng, n_units=1, K=2, D=2, P=2, T=2)
    emb = prob.embeddings[0]
    x = rng.standard_normal((2, 2))
    bound = expected_state_logliks(x, prob.subspace, [emb])
    z = rng.standard_normal((4000, 2))
    z = np.concatenate([z, -z])
    sub = prob.subspace
    mc = np.zeros((2, 3))
    for eps in z:
        unit = link_forward(sub.q_W.mean, sub.q_b.mean, sample_reparam(emb.q_h, eps),
                            sub.layout)
        for t in range(2):
            for i in range(3):
                mc[t, i] += state_loglik(x[t], unit.states[i])
    mc /= len(z)
    assert np.all(bound <= mc + 0.05)
