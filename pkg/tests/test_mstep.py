import numpy as np
import pytest

from oracles import random_params, sample_from

from fhmmkit.errors import DegenerateMoments
from fhmmkit.exact import Expectations, exact_estep
from fhmmkit.model import ModelParams, canonicalize_weights, validate_model
from fhmmkit.mstep import expected_complete_log_likelihood, m_step


def one_hot_expectations(states, k):
    """Expectations of a fully observed state path (T, d)."""
    T, d = states.shape
    s = np.zeros((T, d, k))
    s[np.arange(T)[:, None], np.arange(d)[None, :], states] = 1.0
    ss = np.einsum("tij,tal->tiajl", s, s)
    sstm1 = np.zeros((T, d, k, k))
    sstm1[1:] = np.einsum("tij,til->tijl", s[1:], s[:-1])
    return Expectations(s, ss, sstm1)


def test_recovers_known_model_from_observed_states():
    r = np.random.default_rng(1)
    P = np.array([[[0.9, 0.3], [0.1, 0.7]], [[0.8, 0.15], [0.2, 0.85]]])
    W = np.array([[[0.0, 1.0]], [[-0.2, 0.2]]])
    p = ModelParams(W, np.log(P), [[0.01]], [[0.5, 0.5], [0.5, 0.5]])
    T = 5000
    y, s = sample_from(p, T, r)
    ex = one_hot_expectations(s, 2)
    new = m_step([(ex, y)], random_params(r, 2, 1, 2))
    emp = np.zeros((2, 2, 2))
    for i in range(2):
        for t in range(1, T):
            emp[i, s[t, i], s[t - 1, i]] += 1
    emp /= emp.sum(axis=1, keepdims=True)
    assert np.all(np.abs(np.exp(new.A) - emp) < 2 / np.sqrt(T))
    # least-squares W: compare the implied configuration means
    np.testing.assert_allclose(canonicalize_weights(new.W), canonicalize_weights(W), atol=0.01)
    assert new.C[0, 0] == pytest.approx(0.01, rel=0.1)
    validate_model(new, p.spec(T))


def test_pi_update_is_identity_on_normalized_input():
    T, d, k = 4, 1, 2
    s = np.full((T, d, k), 0.5)
    s[0, 0] = [0.3, 0.7]
    ss = np.einsum("tij,tal->tiajl", s, s)
    for t in range(T):
        ss[t, 0, 0] = np.diag(s[t, 0])
    ex = Expectations(s, ss, np.full((T, d, k, k), 0.25))
    p = random_params(np.random.default_rng(0), 1, 1, 2)
    new = m_step([(ex, np.ones((T, 1)))], p)
    np.testing.assert_allclose(new.pi, [[0.3, 0.7]], atol=1e-12)


def test_all_fixed_returns_input(rng):
    p = random_params(rng, 2, 1, 2)
    y, _ = sample_from(p, 10, rng)
    ex, _ = exact_estep(p, y)
    out = m_step([(ex, y)], p, dict(W=True, A=True, C=True, pi=True))
    assert out.equals(p)
    part = m_step([(ex, y)], p, dict(W=True, C=True))
    np.testing.assert_array_equal(part.W, p.W)
    np.testing.assert_array_equal(part.C, p.C)
    assert not np.array_equal(part.A, p.A)


def test_degenerate_moments(rng):
    p = random_params(rng, 1, 1, 2)
    ex = Expectations(np.zeros((3, 1, 2)), np.zeros((3, 1, 1, 2, 2)), np.zeros((3, 1, 2, 2)))
    with pytest.raises(DegenerateMoments):
        m_step([(ex, np.zeros((3, 1)))], p)


def test_ecll_closed_form_single_state():
    T, o = 6, 2
    p = ModelParams(np.zeros((1, o, 1)), np.zeros((1, 1, 1)), np.eye(o), [[1.0]])
    y = np.zeros((T, o))
    ex = one_hot_expectations(np.zeros((T, 1), dtype=int), 1)
    assert expected_complete_log_likelihood(p, ex, y) == pytest.approx(-T / 2 * o * np.log(2 * np.pi), rel=1e-14)


def test_ecll_matches_direct_average_for_one_hot(rng):
    p = random_params(rng, 2, 2, 3)
    y, s = sample_from(p, 8, rng)
    ex = one_hot_expectations(s, 3)
    B = np.linalg.inv(p.C)
    H = 0.0
    for t in range(8):
        mu = sum(p.W[i][:, s[t, i]] for i in range(2))
        H += 0.5 * (y[t] - mu) @ B @ (y[t] - mu)
        for i in range(2):
            H -= np.log(p.pi[i, s[0, i]]) if t == 0 else p.A[i, s[t, i], s[t - 1, i]]
    lnZ = 2 * 7 * np.log(3) + 4 * (2 * np.log(2 * np.pi) + np.log(np.linalg.det(p.C)))
    assert expected_complete_log_likelihood(p, ex, y) == pytest.approx(-H - lnZ, rel=1e-12)


def test_ecll_invariant_under_canonicalization(rng):
    p = random_params(rng, 3, 1, 2)
    y, _ = sample_from(p, 15, rng)
    ex, _ = exact_estep(p, y)
    q = expected_complete_log_likelihood(p, ex, y)
    canon = p.replace(W=canonicalize_weights(p.W))
    assert expected_complete_log_likelihood(canon, ex, y) == pytest.approx(q, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_q_does_not_decrease_after_m_step(seed):
    r = np.random.default_rng(seed)
    p = random_params(r, 2, 1 + seed % 2, 2)
    ys = [sample_from(p, 30, r)[0] for _ in range(2)]
    start = random_params(r, 2, p.o, 2)
    pairs = [(exact_estep(start, y)[0], y) for y in ys]
    before = sum(expected_complete_log_likelihood(start, ex, y) for ex, y in pairs)
    new = m_step(pairs, start)
    after = sum(expected_complete_log_likelihood(new, ex, y) for ex, y in pairs)
    assert after >= before - 1e-8
    validate_model(new, p.spec(30))
    assert np.linalg.eigvalsh(new.C)[0] > 0
