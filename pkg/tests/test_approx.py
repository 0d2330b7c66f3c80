import numpy as np
import pytest

from oracles import brute_force_posterior, random_params, sample_from

from fhmmkit.approx import (
    MeanFieldState,
    gibbs_estep,
    kld,
    mean_field_estep,
    sva_estep,
)
from fhmmkit.exact import exact_estep
from fhmmkit.model import ModelParams


def _check_expectation_invariants(ex, atol=1e-8):
    T, d, k = ex.s_exp.shape
    np.testing.assert_allclose(ex.s_exp.sum(axis=2), 1.0, atol=atol)
    for i in range(d):
        diag = np.einsum("tj,jl->tjl", ex.s_exp[:, i], np.eye(k))
        np.testing.assert_allclose(ex.ss_exp[:, i, i], diag, atol=atol)
    if T > 1:
        np.testing.assert_allclose(ex.sstm1_exp[1:].sum(axis=(2, 3)), 1.0, atol=1e-6)


def _separated_model(d=2, c=1e-4):
    W = np.zeros((d, 1, 2))
    for i in range(d):
        W[i, 0, 1] = 1.0 / (3 ** i)
    P = np.array([[0.95, 0.1], [0.05, 0.9]])
    return ModelParams(W, np.log(np.stack([P] * d)), [[c]], np.full((d, 2), 0.5))


def test_mean_field_rows_and_invariants(rng):
    p = random_params(rng, 3, 2, 3)
    y, _ = sample_from(p, 40, rng)
    ex, st = mean_field_estep(p, y, max_iter=30, seed=1)
    np.testing.assert_allclose(st.m.sum(axis=2), 1.0, atol=1e-9)
    assert st.m.min() >= 1e-12
    _check_expectation_invariants(ex)


def test_mean_field_recovers_states_at_low_noise(rng):
    p = _separated_model()
    y, s = sample_from(p, 200, rng)
    _, st = mean_field_estep(p, y, max_iter=50, seed=2)
    assert np.mean(st.m.max(axis=2) > 0.99) > 0.99
    np.testing.assert_array_equal(st.m.argmax(axis=2), s)


@pytest.mark.parametrize("seed", range(4))
def test_mean_field_kld_non_increasing(seed):
    r = np.random.default_rng(seed)
    p = random_params(r, 3, 1, 2, c_scale=0.3)
    y, _ = sample_from(p, 60, r)
    _, st = mean_field_estep(p, y, max_iter=40, kld_tol=0.0, seed=seed)
    assert np.all(np.diff(st.kld_trace) <= 1e-6)


def test_kld_pure_and_matches_trace(rng):
    p = random_params(rng, 2, 1, 2)
    y, _ = sample_from(p, 30, rng)
    _, st = mean_field_estep(p, y, max_iter=5, seed=0)
    assert kld(p, y, st) == kld(p, y, st)
    assert kld(p, y, st) == pytest.approx(st.kld_trace[-1], rel=1e-12)
    _, sv = sva_estep(p, y, max_iter=5, seed=0)
    assert kld(p, y, sv) == pytest.approx(sv.kld_trace[-1], rel=1e-9, abs=1e-9)


def test_mean_field_single_sweep_decreases_kld(rng):
    p = random_params(rng, 2, 1, 3)
    y, _ = sample_from(p, 25, rng)
    start = MeanFieldState(np.full((25, 2, 3), 1.0 / 3))
    _, st = mean_field_estep(p, y, init=start, max_iter=1, seed=4)
    assert st.kld_trace[0] <= kld(p, y, start) + 1e-6


def test_kld_bounds_log_likelihood_gap(rng):
    # the true KL is non-negative, so the variational objective minus its
    # constant offset is at least -ln L
    p = random_params(rng, 2, 1, 2)
    y, _ = sample_from(p, 20, rng)
    _, ll = exact_estep(p, y)
    offset = p.d * (20 - 1) * np.log(2) - 10 * np.log(2 * np.pi * p.C[0, 0])
    for estep in (mean_field_estep, sva_estep):
        _, st = estep(p, y, max_iter=50, seed=0)
        assert st.kld_trace[-1] - offset >= -ll - 1e-8


@pytest.mark.parametrize("seed", range(4))
def test_sva_single_chain_is_exact(seed):
    r = np.random.default_rng(seed)
    p = random_params(r, 1, 1 + seed % 2, 3)
    y, _ = sample_from(p, 30, r)
    ex, st = sva_estep(p, y, max_iter=5, seed=seed)
    ex0, _ = exact_estep(p, y)
    np.testing.assert_allclose(ex.s_exp, ex0.s_exp, atol=1e-6)
    np.testing.assert_allclose(ex.ss_exp, ex0.ss_exp, atol=1e-6)
    np.testing.assert_allclose(ex.sstm1_exp, ex0.sstm1_exp, atol=1e-6)
    np.testing.assert_allclose(st.h.sum(axis=2), 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_sva_kld_non_increasing(seed):
    r = np.random.default_rng(seed)
    p = random_params(r, 3, 1, 2, c_scale=0.3)
    y, _ = sample_from(p, 60, r)
    ex, st = sva_estep(p, y, max_iter=40, kld_tol=0.0, seed=seed)
    assert np.all(np.diff(st.kld_trace) <= 1e-6)
    _check_expectation_invariants(ex)


def test_sva_beats_mean_field(rng):
    p = random_params(rng, 2, 1, 2, c_scale=0.5)
    y, _ = sample_from(p, 80, rng)
    _, mf = mean_field_estep(p, y, max_iter=200, seed=0)
    _, sv = sva_estep(p, y, max_iter=200, seed=0)
    assert sv.kld_trace[-1] <= mf.kld_trace[-1] + 1e-6


def test_gibbs_deterministic_and_well_formed(rng):
    p = random_params(rng, 2, 1, 3)
    y, _ = sample_from(p, 10, rng)
    ex1, tr1 = gibbs_estep(p, y, n_iter=50, seed=11)
    ex2, tr2 = gibbs_estep(p, y, n_iter=50, seed=11)
    np.testing.assert_array_equal(tr1.states, tr2.states)
    np.testing.assert_array_equal(ex1.s_exp, ex2.s_exp)
    assert np.all(tr1.states.sum(axis=3) == 1)
    np.testing.assert_allclose(tr1.ps.sum(axis=3), 1.0, atol=1e-9)
    _check_expectation_invariants(ex1)


def test_gibbs_burn_in_excluded(rng):
    p = random_params(rng, 2, 1, 2)
    y, _ = sample_from(p, 5, rng)
    ex, tr = gibbs_estep(p, y, n_iter=40, seed=3, burn_in=10)
    np.testing.assert_allclose(ex.s_exp, tr.states[10:].mean(axis=0))


def batch_means_error(x, n_batches=50):
    """Monte-Carlo standard error of the mean of a correlated chain."""
    b = np.array_split(x, n_batches)
    means = np.array([v.mean(axis=0) for v in b])
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


def test_gibbs_matches_exact_within_three_sigma():
    r = np.random.default_rng(5)
    p = random_params(r, 2, 1, 2, c_scale=0.5)
    y, _ = sample_from(p, 3, r)
    ex, tr = gibbs_estep(p, y, n_iter=20000, seed=9)
    _, s, _, _ = brute_force_posterior(p, y)
    err = batch_means_error(tr.states.astype(float))
    assert np.all(np.abs(ex.s_exp - s) <= 3 * err)
