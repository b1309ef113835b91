import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shmm_aud.graph import (build_forced_alignment, build_phone_loop, build_unit_chain,
                            expected_unit_duration)
from shmm_aud.inference import forward_backward, unit_posteriorgram


def test_unit_chain_rows():
    np.testing.assert_array_equal(build_unit_chain(0.5), [[0.5, 0.5]] * 3)


@given(st.floats(1e-6, 1 - 1e-6))
def test_unit_chain_rows_sum_to_one(p):
    np.testing.assert_allclose(build_unit_chain(p).sum(axis=1), 1.0, atol=1e-15)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_unit_chain_rejects_bad_probability(p):
    with pytest.raises(ValueError):
        build_unit_chain(p)


def test_expected_duration_by_sampling():
    rng = np.random.default_rng(0)
    durations = rng.geometric(0.5, size=(200000, 3)).sum(axis=1)
    assert expected_unit_duration(0.5) == 6.0
    assert abs(durations.mean() - 6.0) < 3 * durations.std() / np.sqrt(len(durations))


def _left_to_right_within_units(g):
    same = g.unit_of[g.arc_src] == g.unit_of[g.arc_dst]
    inner = same & ~(g.entry[g.arc_dst] & (g.arc_src != g.arc_dst))
    return np.all(g.state_in_unit[g.arc_dst][inner] >= g.state_in_unit[g.arc_src][inner])


@given(st.integers(1, 12), st.floats(0.05, 0.95), st.floats(0.001, 0.5),
       st.integers(0, 1000))
@settings(max_examples=40)
def test_phone_loop_conserves_mass_with_normalized_weights(T, p, final, seed):
    w = np.log(np.random.default_rng(seed).dirichlet(np.ones(T)))
    g = build_phone_loop(w, p, final)
    assert g.n_states == 3 * T
    np.testing.assert_allclose(g.outgoing_mass(), 1.0, atol=1e-10)
    assert _left_to_right_within_units(g)
    np.testing.assert_allclose(np.exp(g.log_start).sum(), 1.0, atol=1e-12)


def test_phone_loop_single_unit_and_full_size():
    g = build_phone_loop([0.0])
    A = g.dense_log_transitions()
    assert g.n_states == 3 and np.isfinite(A[2, 0])
    assert build_phone_loop(np.full(100, -np.log(100))).n_states == 300


def test_phone_loop_empty():
    with pytest.raises(ValueError):
        build_phone_loop([])


def test_uniform_loop_symmetric_emissions_give_uniform_marginals():
    T = 4
    g = build_phone_loop(np.full(T, -np.log(T)))
    rng = np.random.default_rng(1)
    e_state = rng.standard_normal((20, 3))
    emissions = np.tile(e_state, (1, T))
    post, _ = forward_backward(g, emissions)
    np.testing.assert_allclose(unit_posteriorgram(post, g), 1.0 / T, atol=1e-12)


def test_forced_alignment_single_label_matches_chain():
    g = build_forced_alignment(["a"], ["a", "b"], 0.3)
    A = np.exp(g.dense_log_transitions())
    np.testing.assert_allclose(np.diag(A), 0.3)
    np.testing.assert_allclose([A[0, 1], A[1, 2]], 0.7)
    assert np.exp(g.log_final[2]) == pytest.approx(0.7)
    assert np.isfinite(g.log_start).sum() == 1


@given(st.lists(st.sampled_from("abcd"), min_size=1, max_size=8), st.floats(0.05, 0.95))
def test_forced_alignment_structure(transcript, p):
    g = build_forced_alignment(transcript, list("abcd"), p)
    L = len(transcript)
    assert g.n_states == 3 * L
    assert np.isfinite(g.log_start).sum() == 1 and np.isfinite(g.log_final).sum() == 1
    np.testing.assert_allclose(g.outgoing_mass(), 1.0, atol=1e-10)
    # only self-loops and single forward steps: no skips, no backward arcs
    assert set((g.arc_dst - g.arc_src).tolist()) <= {0, 1}
    chain_units = g.unit_of[::3]
    assert [list("abcd")[u] for u in chain_units] == transcript


def test_forced_alignment_unknown_label():
    with pytest.raises(KeyError, match="zz"):
        build_forced_alignment(["a", "zz"], ["a", "b"])
