"""Most probable joint hidden trajectory of a factorial HMM."""

from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .exact import EMISSION_FLOOR, emission_log_density
from .model import ModelParams, RealizationTable, enumerate_realizations


def joint_log_transitions(params: ModelParams, table: RealizationTable) -> np.ndarray:
    """``logP[r, r'] = sum_i A[i, s_i(r), s_i(r')]``, shape (K, K)."""
    R = table.realizations
    logP = np.zeros((table.n_configurations,) * 2)
    for i in range(params.d):
        logP += params.A[i][R[i][:, None], R[i][None, :]]
    return logP


def joint_log_prior(params: ModelParams, table: RealizationTable) -> np.ndarray:
    return sum(np.log(params.pi[i][table.realizations[i]]) for i in range(params.d))


def viterbi_decode(params: ModelParams, sample, table: Optional[RealizationTable] = None,
                   emission_floor: float = EMISSION_FLOOR):
    """Max-product decoding over joint configurations.

    Runs in the log domain; each step's ``delta`` is normalized so the
    returned ``p_star`` is the normalized terminal maximum. It ranks
    paths but is not the path probability itself. Ties go to the lowest
    configuration index.

    Returns
    -------
    states : ndarray (T, d, k)
        One-hot decoded trajectory.
    p_star : float
    """
    y = np.asarray(sample, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if table is None:
        table = enumerate_realizations(params.spec(len(y)))
    logpy = np.logaddexp(emission_log_density(params, y, table), np.log(emission_floor))
    logP = joint_log_transitions(params, table)
    T, K = logpy.shape
    psi = np.zeros((T, K), dtype=np.int64)
    delta = joint_log_prior(params, table) + logpy[0]
    delta -= logsumexp(delta)
    for t in range(1, T):
        cand = logP + delta[None, :]
        psi[t] = np.argmax(cand, axis=1)
        delta = cand[np.arange(K), psi[t]] + logpy[t]
        delta -= logsumexp(delta)
    q = np.zeros(T, dtype=np.int64)
    q[-1] = int(np.argmax(delta))
    p_star = float(np.exp(delta[q[-1]]))
    for t in range(T - 1, 0, -1):
        q[t - 1] = psi[t, q[t]]
    states = np.zeros((T, params.d, params.k))
    for i in range(params.d):
        states[np.arange(T), i, table.realizations[i, q]] = 1.0
    return states, p_star


def path_log_probability(params: ModelParams, sample, states) -> float:
    """``ln P(states, y)`` of a one-hot trajectory (T, d, k)."""
    y = np.asarray(sample, dtype=float)
    idx = np.asarray(states).argmax(axis=2)
    T = len(y)
    mu = np.einsum("iok,tik->to", params.W, np.asarray(states, dtype=float))
    r = y - mu
    L = np.linalg.cholesky(params.C)
    z = np.linalg.solve(L, r.T)
    ll = -0.5 * (np.sum(z * z) + T * (params.o * np.log(2 * np.pi) + 2 * np.log(np.diag(L)).sum()))
    for i in range(params.d):
        ll += np.log(params.pi[i, idx[0, i]])
        ll += params.A[i, idx[1:, i], idx[:-1, i]].sum()
    return float(ll)
