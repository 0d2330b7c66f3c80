"""Exact E-step over the joint configuration space.

Messages live on the ``k**d`` joint configurations, but the joint
transition matrix is never formed: it factorizes over chains, so it is
applied one chain at a time at cost O(d K k) per step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba as nb
import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericalUnderflow, SingularCovariance
from .model import Dataset, ModelParams, RealizationTable, enumerate_realizations

EPS = 1e-300
EMISSION_FLOOR = 1e-300
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class ForwardResult:
    """Scaled forward messages.

    Attributes
    ----------
    alpha_hat : ndarray (T, K)
        Rows sum to one.
    c : ndarray (T,)
        Per-step normalizers of the (possibly rescaled) emissions.
    log_c : ndarray (T,)
        ``ln c`` plus any per-step emission shift, so ``log_c.sum()``
        is the log likelihood.
    """

    alpha_hat: np.ndarray
    c: np.ndarray
    log_c: np.ndarray

    @property
    def log_likelihood(self) -> float:
        return float(self.log_c.sum())


@dataclass(frozen=True, eq=False)
class Expectations:
    """Posterior moments consumed by the M-step.

    s_exp : (T, d, k)
    ss_exp : (T, d, d, k, k), same time step, ``[t, i, i']`` pairs chains
    sstm1_exp : (T, d, k, k), ``[t, i, j, l]`` is chain i in j at t and
        l at t-1; row 0 is unused and left at zero.
    """

    s_exp: np.ndarray
    ss_exp: np.ndarray
    sstm1_exp: np.ndarray

    @property
    def T(self):
        return self.s_exp.shape[0]


# ---------------------------------------------------------------- kernels

@nb.njit(cache=True)
def _apply_chain(vec, P, stride, k, out):
    # out[r] = sum_l P[j(r), l] * vec[r with digit j(r) replaced by l]
    for r in range(vec.shape[0]):
        j = (r // stride) % k
        base = r - j * stride
        acc = 0.0
        for l in range(k):
            acc += P[j, l] * vec[base + l * stride]
        out[r] = acc


@nb.njit(cache=True)
def _propagate(vec, trans, k, tmp, out):
    # joint transition applied chain by chain; trans[i] acts on digit i
    d = trans.shape[0]
    K = vec.shape[0]
    for r in range(K):
        out[r] = vec[r]
    stride = K
    for i in range(d):
        stride //= k
        _apply_chain(out, trans[i], stride, k, tmp)
        for r in range(K):
            out[r] = tmp[r]


@nb.njit(cache=True)
def _init_prior(pi, k, K):
    d = pi.shape[0]
    prior = np.ones(K)
    for r in range(K):
        stride = K
        for i in range(d):
            stride //= k
            prior[r] *= pi[i, (r // stride) % k]
    return prior


@nb.njit(cache=True)
def _forward(emission, trans, pi, k, eps):
    T, K = emission.shape
    alpha = np.empty((T, K))
    c = np.empty(T)
    prior = _init_prior(pi, k, K)
    tmp = np.empty(K)
    pred = np.empty(K)
    s = 0.0
    for r in range(K):
        alpha[0, r] = prior[r] * emission[0, r] + eps
        s += alpha[0, r]
    c[0] = s
    for r in range(K):
        alpha[0, r] /= s
    for t in range(1, T):
        _propagate(alpha[t - 1], trans, k, tmp, pred)
        s = 0.0
        for r in range(K):
            alpha[t, r] = emission[t, r] * pred[r] + eps
            s += alpha[t, r]
        c[t] = s
        for r in range(K):
            alpha[t, r] /= s
    return alpha, c


@nb.njit(cache=True)
def _backward(emission, trans_T, k):
    # trans_T[i] = trans[i].T so that the same digit kernel sums over the
    # state at t for a fixed state at t-1
    T, K = emission.shape
    beta = np.empty((T, K))
    tmp = np.empty(K)
    vec = np.empty(K)
    out = np.empty(K)
    for r in range(K):
        beta[T - 1, r] = 1.0 / K
    for t in range(T - 1, 0, -1):
        for r in range(K):
            vec[r] = emission[t, r] * beta[t, r]
        _propagate(vec, trans_T, k, tmp, out)
        s = 0.0
        for r in range(K):
            s += out[r]
        if not s > 0.0:
            return beta, t
        for r in range(K):
            beta[t - 1, r] = out[r] / s
    return beta, -1


@nb.njit(cache=True)
def _pair_marginals(alpha, beta, emission, trans, k):
    # xi[t, i, j, l] ~ sum over configurations with chain i in j at t and
    # l at t-1 of alpha_{t-1}(r') P(r | r') e_t(r) beta_t(r)
    T, K = alpha.shape
    d = trans.shape[0]
    xi = np.zeros((T, d, k, k))
    tmp = np.empty(K)
    u = np.empty(K)
    b = np.empty(K)
    for t in range(1, T):
        for r in range(K):
            b[r] = emission[t, r] * beta[t, r]
        for i in range(d):
            for r in range(K):
                u[r] = alpha[t - 1, r]
            stride = K
            stride_i = 1
            for i2 in range(d):
                stride //= k
                if i2 == i:
                    stride_i = stride
                    continue
                _apply_chain(u, trans[i2], stride, k, tmp)
                for r in range(K):
                    u[r] = tmp[r]
            # u keeps chain i at its t-1 state; b has chain i at its t state
            for r in range(K):
                l = (r // stride_i) % k
                base = r - l * stride_i
                for j in range(k):
                    xi[t, i, j, l] += u[r] * b[base + j * stride_i]
            for j in range(k):
                for l in range(k):
                    xi[t, i, j, l] *= trans[i, j, l]
    return xi


# ---------------------------------------------------------------- emissions

def configuration_means(params: ModelParams, table: RealizationTable) -> np.ndarray:
    """Mean observation of every joint configuration, shape (K, o)."""
    mu = np.zeros((table.n_configurations, params.o))
    for i in range(params.d):
        mu += params.W[i][:, table.realizations[i]].T
    return mu


def covariance_factor(C) -> np.ndarray:
    try:
        L = np.linalg.cholesky(np.asarray(C, dtype=float))
    except np.linalg.LinAlgError:
        raise SingularCovariance("covariance C cannot be Cholesky-factored") from None
    if not np.all(np.isfinite(L)) or np.any(np.diag(L) <= 0):
        raise SingularCovariance("covariance C cannot be Cholesky-factored")
    return L


def emission_log_density(params: ModelParams, sample, table: RealizationTable,
                         chol: Optional[np.ndarray] = None) -> np.ndarray:
    """Gaussian log density of every y_t under every configuration, (T, K)."""
    y = np.asarray(sample, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    L = covariance_factor(params.C) if chol is None else chol
    mu = configuration_means(params, table)
    T, o = y.shape
    K = mu.shape[0]
    resid = (y[:, None, :] - mu[None, :, :]).reshape(T * K, o)
    z = solve_triangular(L, resid.T, lower=True, check_finite=False)
    maha = np.einsum("ij,ij->j", z, z).reshape(T, K)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * (o * LOG_2PI + logdet + maha)


def emission_probs(params: ModelParams, sample, table: RealizationTable,
                   floor: float = EMISSION_FLOOR) -> np.ndarray:
    """Gaussian density of y_t under each configuration, plus ``floor``."""
    return np.exp(emission_log_density(params, sample, table)) + floor


def scaled_emissions(params, sample, table, floor=EMISSION_FLOOR):
    """Emissions divided by their per-step maximum.

    Returns ``(e, shift)`` with ``e[t] = exp(logp[t] - shift[t]) + floor``.
    Rescaling each step by a constant leaves every posterior unchanged and
    only moves ``shift[t]`` into the log normalizer.
    """
    logp = emission_log_density(params, sample, table)
    shift = logp.max(axis=1)
    return np.exp(logp - shift[:, None]) + floor, shift


# ---------------------------------------------------------------- passes

def forward_pass(params: ModelParams, emission, table: RealizationTable,
                 log_scale=None, eps: float = EPS) -> ForwardResult:
    """Scaled forward recursion.

    Parameters
    ----------
    emission : array (T, K)
        Strictly positive emission values (possibly rescaled per step).
    log_scale : array (T,), optional
        Per-step log factors removed from ``emission``; added back to
        ``log_c``.
    """
    e = np.ascontiguousarray(emission, dtype=float)
    alpha, c = _forward(e, np.ascontiguousarray(params.trans), np.ascontiguousarray(params.pi),
                        table.k, eps)
    if not np.all(c > 0) or not np.all(np.isfinite(c)):
        t = int(np.flatnonzero(~(c > 0) | ~np.isfinite(c))[0])
        raise NumericalUnderflow(f"forward normalizer c[{t}] = {c[t]!r}")
    log_c = np.log(c)
    if log_scale is not None:
        log_c = log_c + np.asarray(log_scale, dtype=float)
    return ForwardResult(alpha, c, log_c)


def backward_pass(params: ModelParams, emission, table: RealizationTable) -> np.ndarray:
    """Scaled backward recursion; each row is normalized by its own sum."""
    e = np.ascontiguousarray(emission, dtype=float)
    trans_T = np.ascontiguousarray(np.transpose(params.trans, (0, 2, 1)))
    beta, bad = _backward(e, trans_T, table.k)
    if bad >= 0:
        raise NumericalUnderflow(f"backward normalizer vanished at t={bad - 1}")
    return beta


def _outer_table(table: RealizationTable) -> np.ndarray:
    S = table.one_hot().reshape(table.n_configurations, -1)
    return np.einsum("ra,rb->rab", S, S).reshape(table.n_configurations, -1)


def expectations_from_posterior(gamma, xi, table: RealizationTable) -> Expectations:
    T, K = gamma.shape
    d, k = table.d, table.k
    S = table.one_hot().reshape(K, d * k)
    s_exp = (gamma @ S).reshape(T, d, k)
    ss = (gamma @ _outer_table(table)).reshape(T, d, k, d, k)
    ss_exp = np.ascontiguousarray(ss.transpose(0, 1, 3, 2, 4))
    return Expectations(s_exp, ss_exp, xi)


def exact_estep(params: ModelParams, sample, table: Optional[RealizationTable] = None,
                emission_floor: float = EMISSION_FLOOR):
    """Posterior expectations and log likelihood of one sample.

    Returns
    -------
    (Expectations, float)
    """
    y = np.asarray(sample, dtype=float)
    if table is None:
        table = enumerate_realizations(params.spec(len(y)))
    e, shift = scaled_emissions(params, y, table, emission_floor)
    fwd = forward_pass(params, e, table, log_scale=shift)
    beta = backward_pass(params, e, table)

    gamma = fwd.alpha_hat * beta
    gamma /= gamma.sum(axis=1, keepdims=True)

    xi = _pair_marginals(fwd.alpha_hat, beta, e, np.ascontiguousarray(params.trans), table.k)
    if len(y) > 1:
        norm = xi[1:].sum(axis=(1, 2, 3))
        per_chain = xi[1:].sum(axis=(2, 3))
        # every chain carries the same total, so the per-t sum is d times it
        assert np.allclose(per_chain, norm[:, None] / params.d, rtol=1e-8, atol=0.0)
        xi[1:] /= (norm / params.d)[:, None, None, None]
    return expectations_from_posterior(gamma, xi, table), fwd.log_likelihood


def sample_log_likelihood(params: ModelParams, sample, table: Optional[RealizationTable] = None,
                          emission_floor: float = EMISSION_FLOOR) -> float:
    y = np.asarray(sample, dtype=float)
    if table is None:
        table = enumerate_realizations(params.spec(len(y)))
    e, shift = scaled_emissions(params, y, table, emission_floor)
    return forward_pass(params, e, table, log_scale=shift).log_likelihood


def log_likelihood(params: ModelParams, dataset, table: Optional[RealizationTable] = None,
                   emission_floor: float = EMISSION_FLOOR) -> float:
    """Total log likelihood summed over samples."""
    X = dataset.X if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if table is None:
        table = enumerate_realizations(params.spec(X.shape[1]))
    return float(sum(sample_log_likelihood(params, y, table, emission_floor) for y in X))
