"""Approximate E-steps: mean field, structured variational, Gibbs.

All three produce an :class:`~fhmmkit.exact.Expectations` so the M-step
does not care which one ran. The per-update inner loops are sequential
in (t, chain) and run in numba.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numba as nb
import numpy as np

from .exact import Expectations, _backward, _forward, covariance_factor
from .model import ZERO_PROBABILITY, ModelParams


@dataclass(eq=False)
class MeanFieldState:
    """Variational marginals ``m`` (T, d, k) and the KLD after each sweep."""

    m: np.ndarray
    kld_trace: list = field(default_factory=list)


@dataclass(eq=False)
class SVAState:
    """Per-chain emission surrogates ``h`` (T, d, k) and the KLD trace."""

    h: np.ndarray
    kld_trace: list = field(default_factory=list)
    # chain marginals from the last forward-backward, kept for kld()
    s_exp: Optional[np.ndarray] = None
    sstm1_exp: Optional[np.ndarray] = None
    log_norm: Optional[float] = None


@dataclass(eq=False)
class GibbsTrace:
    """One-hot states and conditionals for every Gibbs iteration, (N, T, d, k)."""

    states: np.ndarray
    ps: np.ndarray


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


class _ObservationTerms:
    """Quantities of the Gaussian energy that all three methods share.

    ``proj[t, i, j] = w_ij^T B y_t`` and ``G[i, j, i2, l] = w_ij^T B w_i2l``
    with ``B = C^{-1}``.
    """

    def __init__(self, params: ModelParams, y):
        y = np.asarray(y, dtype=float)
        L = covariance_factor(params.C)
        Linv = np.linalg.inv(L)
        B = Linv.T @ Linv
        d, o, k = params.W.shape
        Wf = params.W.transpose(1, 0, 2).reshape(o, d * k)  # (o, dk)
        self.B = B
        self.proj = np.ascontiguousarray((y @ B @ Wf).reshape(len(y), d, k))
        self.G = np.ascontiguousarray((Wf.T @ B @ Wf).reshape(d, k, d, k))
        self.yBy = np.einsum("to,op,tp->t", y, B, y)
        self.logdet = 2.0 * np.log(np.diag(L)).sum()


def _observation_energy(terms: _ObservationTerms, s, ss_same_t):
    """``<1/2 sum_t (y - mu)^T B (y - mu)>`` from first and second moments.

    ``ss_same_t`` is the (T, d, d, k, k) second moment at equal times.
    """
    lin = np.einsum("tij,tij->", terms.proj, s)
    quad = np.einsum("ijal,tiajl->", terms.G, ss_same_t)
    return 0.5 * terms.yBy.sum() - lin + 0.5 * quad


def _factorized_quadratic(terms: _ObservationTerms, s):
    # <mu^T B mu> for a distribution factorized over chains with marginals s
    G = terms.G
    mean_part = np.einsum("tij,ijal,tal->", s, G, s)
    d = s.shape[1]
    diag = np.einsum("ijij->ij", G)  # w_ij^T B w_ij
    own = sum(np.einsum("tj,j->", s[:, i], diag[i]) - np.einsum("tj,jl,tl->", s[:, i], G[i, :, i, :], s[:, i])
              for i in range(d))
    return mean_part + own


def _factorized_energy(terms, s):
    lin = np.einsum("tij,tij->", terms.proj, s)
    return 0.5 * terms.yBy.sum() - lin + 0.5 * _factorized_quadratic(terms, s)


def _transition_energy(params: ModelParams, s, sstm1):
    e = -np.einsum("ij,ij->", s[0], np.log(params.pi))
    if len(s) > 1:
        e -= np.einsum("ijl,tijl->", params.A, sstm1[1:])
    return e


def _xlogx(p):
    return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum()


def _kld_constant(params: ModelParams, T):
    # difference between the model normalizer (with its k^{d(T-1)} factor)
    # and the Gaussian normalizer carried by the variational family
    return params.d * (T - 1) * np.log(params.k)


def _factorized_expectations(m):
    T, d, k = m.shape
    flat = m.reshape(T, d * k)
    ss = np.einsum("ta,tb->tab", flat, flat).reshape(T, d, k, d, k)
    for i in range(d):
        ss[:, i, :, i, :] = 0.0
        idx = np.arange(k)
        ss[:, i, idx, i, idx] = m[:, i, :]
    ss_exp = np.ascontiguousarray(ss.transpose(0, 1, 3, 2, 4))
    sstm1 = np.zeros((T, d, k, k))
    if T > 1:
        sstm1[1:] = np.einsum("tij,til->tijl", m[1:], m[:-1])
    return Expectations(m.copy(), ss_exp, sstm1)


# ---------------------------------------------------------------- mean field

@nb.njit(cache=True)
def _mf_sweep(m, proj, G, A, logpi, order_t, order_d, zp):
    T, d, k = m.shape
    log_m = np.empty(k)
    for n in range(order_t.shape[0]):
        t = order_t[n]
        i = order_d[n]
        for j in range(k):
            # w_j^T B (y - yhat_{-i}) - 1/2 w_j^T B w_j
            v = proj[t, i, j] - 0.5 * G[i, j, i, j]
            for i2 in range(d):
                if i2 == i:
                    continue
                for l in range(k):
                    v -= G[i, j, i2, l] * m[t, i2, l]
            if t == 0:
                v += logpi[i, j]
            else:
                for l in range(k):
                    v += A[i, j, l] * m[t - 1, i, l]
            if t < T - 1:
                for l in range(k):
                    v += m[t + 1, i, l] * A[i, l, j]
            log_m[j] = v - 1.0
        mx = log_m.max()
        s = 0.0
        for j in range(k):
            log_m[j] = np.exp(log_m[j] - mx)
            s += log_m[j]
        s2 = 0.0
        for j in range(k):
            v = log_m[j] / s
            if v < zp:
                v = zp
            elif v > 1.0 - zp:
                v = 1.0 - zp
            log_m[j] = v
            s2 += v
        for j in range(k):
            m[t, i, j] = log_m[j] / s2


def _shuffled_pairs(rng, T, d):
    perm = rng.permutation(T * d)
    return np.ascontiguousarray(perm // d), np.ascontiguousarray(perm % d)


def _mean_field_kld(params, terms, m):
    T = m.shape[0]
    sstm1 = np.zeros((T, params.d, params.k, params.k))
    if T > 1:
        sstm1[1:] = np.einsum("tij,til->tijl", m[1:], m[:-1])
    return (_xlogx(m) + _factorized_energy(terms, m) + _transition_energy(params, m, sstm1)
            + _kld_constant(params, T))


def mean_field_estep(params: ModelParams, sample, init: Optional[MeanFieldState] = None,
                     max_iter: int = 100, kld_tol: float = 1e-8, seed=None,
                     zero_probability: float = ZERO_PROBABILITY):
    """Fully factorized variational E-step.

    Parameters
    ----------
    init : MeanFieldState, optional
        Warm start; uniform marginals otherwise.
    seed : int, Generator or None
        Drives the random (t, chain) visit order.

    Returns
    -------
    (Expectations, MeanFieldState)
    """
    y = np.asarray(sample, dtype=float)
    T, (d, k) = len(y), params.pi.shape
    rng = _rng(seed)
    terms = _ObservationTerms(params, y)
    m = np.full((T, d, k), 1.0 / k) if init is None else np.array(init.m, dtype=float)
    A = np.ascontiguousarray(params.A)
    logpi = np.log(params.pi)
    trace = []
    prev = None
    for _ in range(max(1, int(max_iter))):
        ot, od = _shuffled_pairs(rng, T, d)
        _mf_sweep(m, terms.proj, terms.G, A, logpi, ot, od, zero_probability)
        cur = _mean_field_kld(params, terms, m)
        trace.append(float(cur))
        if prev is not None and abs(prev - cur) < kld_tol:
            break
        prev = cur
    return _factorized_expectations(m), MeanFieldState(m, trace)


# ---------------------------------------------------------------- SVA

def _chain_forward_backward(h, trans, pi):
    """Single-chain scaled forward-backward with surrogate emissions ``h``."""
    T, k = h.shape
    h = np.ascontiguousarray(h)
    alpha, c = _forward(h, trans[None], pi[None], k, 0.0)
    beta, _ = _backward(h, np.ascontiguousarray(trans.T)[None], k)
    gamma = alpha * beta
    gamma /= gamma.sum(axis=1, keepdims=True)
    xi = np.zeros((T, k, k))
    if T > 1:
        xi[1:] = (h[1:] * beta[1:])[:, :, None] * trans[None] * alpha[:-1][:, None, :]
        xi[1:] /= xi[1:].sum(axis=(1, 2), keepdims=True)
    return gamma, xi, float(np.log(c).sum())


def _sva_h(terms, s, i, zp):
    # log h[t, j] = w_j^T B (y - sum_{i2 != i} W_i2 s_i2) - 1/2 w_j^T B w_j
    G = terms.G
    logh = terms.proj[:, i, :] - 0.5 * np.diag(G[i, :, i, :])[None, :]
    for i2 in range(s.shape[1]):
        if i2 != i:
            logh = logh - s[:, i2, :] @ G[i, :, i2, :].T
    logh -= logh.max(axis=1, keepdims=True)
    h = np.exp(logh)
    h /= h.sum(axis=1, keepdims=True)
    h = np.clip(h, zp, 1.0 - zp)
    return h / h.sum(axis=1, keepdims=True)


def _sva_kld(params, terms, h, s, sstm1, log_norm):
    T = s.shape[0]
    # E_q[ln q] - E_q[ln p] with the transition terms cancelling exactly
    return (np.einsum("tij,tij->", s, np.log(h)) - log_norm
            + _factorized_energy(terms, s) + _kld_constant(params, T))


def sva_estep(params: ModelParams, sample, max_iter: int = 100, kld_tol: float = 1e-8,
              seed=None, zero_probability: float = ZERO_PROBABILITY,
              init: Optional[SVAState] = None):
    """Structured variational E-step (chains decoupled, Markov structure kept).

    Each sweep visits the chains in random order; for each chain the
    surrogate emissions are refreshed from the other chains' current
    marginals and that chain's forward-backward is rerun at once.

    Returns
    -------
    (Expectations, SVAState)
    """
    y = np.asarray(sample, dtype=float)
    T, (d, k) = len(y), params.pi.shape
    rng = _rng(seed)
    terms = _ObservationTerms(params, y)
    trans = params.trans
    if init is not None and init.s_exp is not None:
        s = np.array(init.s_exp, dtype=float)
    else:
        s = np.full((T, d, k), 1.0 / k)
    h = np.full((T, d, k), 1.0 / k)
    sstm1 = np.zeros((T, d, k, k))
    chain_norm = np.zeros(d)
    trace = []
    prev = None
    for sweep in range(max(1, int(max_iter))):
        order = rng.permutation(d)
        if sweep == 0:
            order = np.sort(order)  # fill every chain once before any KLD
        for i in order:
            h[:, i] = _sva_h(terms, s, i, zero_probability)
            g, xi, ln_c = _chain_forward_backward(h[:, i], trans[i], params.pi[i])
            s[:, i] = g
            sstm1[:, i] = xi
            chain_norm[i] = ln_c
        cur = _sva_kld(params, terms, h, s, sstm1, chain_norm.sum())
        trace.append(float(cur))
        if prev is not None and abs(prev - cur) < kld_tol:
            break
        prev = cur
    ex = _factorized_expectations(s)
    ex = Expectations(ex.s_exp, ex.ss_exp, sstm1.copy())
    return ex, SVAState(h, trace, s.copy(), sstm1.copy(), float(chain_norm.sum()))


def kld(params: ModelParams, sample, state: Union[MeanFieldState, SVAState],
        zero_probability: float = ZERO_PROBABILITY) -> float:
    """Variational objective of a mean-field or SVA state.

    Includes the constant normalizer terms, so values are comparable
    across sweeps and between the two families.
    """
    y = np.asarray(sample, dtype=float)
    terms = _ObservationTerms(params, y)
    if isinstance(state, MeanFieldState):
        return float(_mean_field_kld(params, terms, np.asarray(state.m)))
    h = np.asarray(state.h)
    d = params.d
    s = np.empty_like(h)
    sstm1 = np.zeros(h.shape + (h.shape[2],))
    log_norm = 0.0
    for i in range(d):
        s[:, i], sstm1[:, i], ln_c = _chain_forward_backward(h[:, i], params.trans[i], params.pi[i])
        log_norm += ln_c
    return float(_sva_kld(params, terms, h, s, sstm1, log_norm))


# ---------------------------------------------------------------- Gibbs

@nb.njit(cache=True)
def _gibbs_run(state, proj, G, A, logpi, orders_t, orders_d, uniforms, zp, burn_in,
               states_out, ps_out, s_acc, ss_acc, sstm1_acc):
    n_iter = orders_t.shape[0]
    T, d = state.shape
    k = proj.shape[2]
    logp = np.empty(k)
    p = np.empty(k)
    for n in range(n_iter):
        for q in range(orders_t.shape[1]):
            t = orders_t[n, q]
            i = orders_d[n, q]
            for j in range(k):
                v = proj[t, i, j] - 0.5 * G[i, j, i, j]
                for i2 in range(d):
                    if i2 != i:
                        v -= G[i, j, i2, state[t, i2]]
                if t == 0:
                    v += logpi[i, j]
                else:
                    v += A[i, j, state[t - 1, i]]
                if t < T - 1:
                    v += A[i, state[t + 1, i], j]
                logp[j] = v
            mx = logp.max()
            s = 0.0
            for j in range(k):
                p[j] = np.exp(logp[j] - mx)
                s += p[j]
            s2 = 0.0
            for j in range(k):
                p[j] = p[j] / s + zp
                s2 += p[j]
            u = uniforms[n, q] * s2
            acc = 0.0
            pick = k - 1
            for j in range(k):
                acc += p[j]
                if u < acc:
                    pick = j
                    break
            for j in range(k):
                ps_out[n, t, i, j] = p[j] / s2
            state[t, i] = pick
        for t in range(T):
            for i in range(d):
                states_out[n, t, i, state[t, i]] = 1
        if n >= burn_in:
            for t in range(T):
                for i in range(d):
                    s_acc[t, i, state[t, i]] += 1.0
                    for i2 in range(d):
                        ss_acc[t, i, i2, state[t, i], state[t, i2]] += 1.0
                    if t > 0:
                        sstm1_acc[t, i, state[t, i], state[t - 1, i]] += 1.0


def gibbs_estep(params: ModelParams, sample, n_iter: int = 1000, seed=None,
                burn_in: int = 0, zero_probability: float = ZERO_PROBABILITY,
                init_states=None):
    """Gibbs-sampling E-step.

    Each sweep visits every (t, chain) pair once in a shuffled order,
    drawing from the Markov-blanket conditional and committing the draw
    immediately. Expectations average the samples kept after ``burn_in``.

    Returns
    -------
    (Expectations, GibbsTrace)
    """
    y = np.asarray(sample, dtype=float)
    T, (d, k) = len(y), params.pi.shape
    n_iter = int(n_iter)
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    burn_in = int(min(max(burn_in, 0), n_iter - 1))
    rng = _rng(seed)
    terms = _ObservationTerms(params, y)
    if init_states is None:
        state = rng.integers(0, k, size=(T, d)).astype(np.int64)
    else:
        state = np.array(init_states, dtype=np.int64)
    orders_t = np.empty((n_iter, T * d), dtype=np.int64)
    orders_d = np.empty((n_iter, T * d), dtype=np.int64)
    for n in range(n_iter):
        orders_t[n], orders_d[n] = _shuffled_pairs(rng, T, d)
    uniforms = rng.random((n_iter, T * d))

    states = np.zeros((n_iter, T, d, k), dtype=np.uint8)
    ps = np.zeros((n_iter, T, d, k))
    s_acc = np.zeros((T, d, k))
    ss_acc = np.zeros((T, d, d, k, k))
    sstm1_acc = np.zeros((T, d, k, k))
    _gibbs_run(state, terms.proj, terms.G, np.ascontiguousarray(params.A), np.log(params.pi),
               orders_t, orders_d, uniforms, zero_probability, burn_in,
               states, ps, s_acc, ss_acc, sstm1_acc)
    kept = n_iter - burn_in
    ex = Expectations(s_acc / kept, ss_acc / kept, sstm1_acc / kept)
    return ex, GibbsTrace(states, ps)
