import numpy as np
import pytest

from oracles import brute_force_viterbi, hmm_viterbi, random_params, sample_from

from fhmmkit.exact import emission_probs
from fhmmkit.model import ModelParams, enumerate_realizations
from fhmmkit.viterbi import path_log_probability, viterbi_decode


def test_single_step_is_argmax_of_prior_times_emission(rng):
    p = random_params(rng, 2, 1, 3)
    y = rng.normal(size=(1, 1))
    table = enumerate_realizations(p.spec(1))
    e = emission_probs(p, y, table)[0]
    prior = np.prod([p.pi[i][table.realizations[i]] for i in range(2)], axis=0)
    states, _ = viterbi_decode(p, y, table)
    r = int(np.argmax(prior * e))
    assert [states[0, i].argmax() for i in range(2)] == list(table.realizations[:, r])


def test_noise_free_data_decodes_exactly(rng):
    W = np.array([[[0.0, 1.0]], [[0.0, 0.4]]])
    P = np.log(np.array([[[0.9, 0.2], [0.1, 0.8]]] * 2))
    p = ModelParams(W, P, [[1e-8]], [[0.5, 0.5]] * 2)
    y, s = sample_from(p, 100, rng)
    states, _ = viterbi_decode(p, y)
    np.testing.assert_array_equal(states.argmax(axis=2), s)


@pytest.mark.parametrize("seed", range(10))
def test_matches_brute_force(seed):
    r = np.random.default_rng(100 + seed)
    d, k = [(2, 2), (1, 3), (1, 2), (3, 2), (1, 8)][seed % 5]
    T = 2 + seed % 3
    p = random_params(r, d, 1, k)
    y = r.normal(size=(T, 1))
    states, _ = viterbi_decode(p, y)
    best, _ = brute_force_viterbi(p, y)
    np.testing.assert_array_equal(states.argmax(axis=2), best)


def test_single_chain_matches_textbook(rng):
    p = random_params(rng, 1, 2, 4)
    y, _ = sample_from(p, 40, rng)
    e = emission_probs(p, y, enumerate_realizations(p.spec(40)))
    states, _ = viterbi_decode(p, y)
    np.testing.assert_array_equal(states[:, 0].argmax(axis=1), hmm_viterbi(np.exp(p.A[0]), p.pi[0], e))


def test_one_hot_and_dominates_random_paths(rng):
    p = random_params(rng, 2, 1, 2)
    y, _ = sample_from(p, 12, rng)
    states, p_star = viterbi_decode(p, y)
    assert np.all(states.sum(axis=2) == 1)
    assert 0 < p_star <= 1
    best = path_log_probability(p, y, states)
    for _ in range(1000):
        s = rng.integers(0, 2, size=(12, 2))
        rand = np.zeros((12, 2, 2))
        rand[np.arange(12)[:, None], np.arange(2)[None], s] = 1
        assert path_log_probability(p, y, rand) <= best + 1e-9


def test_ties_break_to_lowest_index():
    p = ModelParams(np.zeros((1, 1, 2)), np.log(np.full((1, 2, 2), 0.5)), [[1.0]], [[0.5, 0.5]])
    states, p_star = viterbi_decode(p, np.zeros((3, 1)))
    assert np.all(states[:, 0, 0] == 1)
    assert p_star == pytest.approx(0.5)
