"""Closed-form parameter updates and the expected complete log likelihood."""

from __future__ import annotations

from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import DegenerateMoments
from .exact import Expectations, covariance_factor
from .model import ZERO_PROBABILITY, ModelParams, floor_probabilities

PINV_RCOND = 1e-10
COV_JITTER = 1e-12
BLOCKS = ("W", "A", "C", "pi")


def _flat_second_moment(ss_exp):
    # (T, d, d, k, k) -> sum_t of the (dk, dk) matrix indexed [(i,j), (i2,l)]
    T, d, _, k, _ = ss_exp.shape
    return ss_exp.sum(axis=0).transpose(0, 2, 1, 3).reshape(d * k, d * k)


class SufficientStatistics:
    """Sums over samples and time of the moments the M-step needs."""

    def __init__(self, d, o, k):
        self.ss = np.zeros((d * k, d * k))
        self.sy = np.zeros((d * k, o))
        self.yy = np.zeros((o, o))
        self.s_sum = np.zeros(d * k)
        self.trans = np.zeros((d, k, k))
        self.s0 = np.zeros((d, k))
        self.n_steps = 0
        self.n_samples = 0

    def add(self, ex: Expectations, y):
        y = np.asarray(y, dtype=float)
        T, d, k = ex.s_exp.shape
        s = ex.s_exp.reshape(T, d * k)
        self.ss += _flat_second_moment(ex.ss_exp)
        self.sy += s.T @ y
        self.yy += y.T @ y
        self.s_sum += s.sum(axis=0)
        if T > 1:
            self.trans += ex.sstm1_exp[1:].sum(axis=0)
        self.s0 += ex.s_exp[0]
        self.n_steps += T
        self.n_samples += 1
        return self


def accumulate(pairs: Iterable) -> SufficientStatistics:
    stats = None
    for ex, y in pairs:
        if stats is None:
            y = np.asarray(y, dtype=float)
            stats = SufficientStatistics(ex.s_exp.shape[1], y.shape[1], ex.s_exp.shape[2])
        stats.add(ex, y)
    if stats is None:
        raise ValueError("m_step needs at least one sample")
    return stats


def update_W(stats: SufficientStatistics, d, o, k):
    if np.linalg.matrix_rank(stats.ss, tol=None) == 0:
        raise DegenerateMoments("second-moment accumulator has rank 0")
    flat = np.linalg.pinv(stats.ss, rcond=PINV_RCOND) @ stats.sy  # (dk, o)
    return flat.reshape(d, k, o).transpose(0, 2, 1)


def update_A(stats: SufficientStatistics, A_old, zero_probability=ZERO_PROBABILITY):
    num = stats.trans
    den = num.sum(axis=1, keepdims=True)
    tiny = np.finfo(float).tiny
    logP = np.log(np.maximum(num, tiny)) - np.log(np.maximum(den, tiny))
    P = floor_probabilities(np.exp(logP), zero_probability, axis=1)
    A = np.log(P)
    # columns never visited carry no information: keep the old ones
    empty = np.broadcast_to(den <= 0, A.shape)
    return np.where(empty, A_old, A)


def update_C(stats: SufficientStatistics, W):
    d, o, k = W.shape
    Wf = W.transpose(1, 0, 2).reshape(o, d * k)  # (o, dk)
    cross = Wf @ stats.sy
    C = stats.yy - cross - cross.T + Wf @ stats.ss @ Wf.T
    C = 0.5 * (C + C.T) / stats.n_steps
    if np.linalg.eigvalsh(C)[0] < COV_JITTER:
        C = C + np.eye(o) * COV_JITTER * max(np.trace(C), COV_JITTER) / o
    return 0.5 * (C + C.T)


def update_pi(stats: SufficientStatistics, zero_probability=ZERO_PROBABILITY):
    pi = stats.s0 / stats.n_samples
    return floor_probabilities(pi / pi.sum(axis=1, keepdims=True), zero_probability, axis=1)


def m_step(pairs, params: ModelParams, fixed_mask: Optional[Mapping[str, bool]] = None,
           zero_probability: float = ZERO_PROBABILITY) -> ModelParams:
    """Maximize the expected complete log likelihood.

    Parameters
    ----------
    pairs : iterable of (Expectations, sample)
        Statistics are summed over all samples.
    params : ModelParams
        Current parameters; blocks flagged in ``fixed_mask`` are returned
        unchanged, and a fixed W is the one used in the C update.
    fixed_mask : mapping of block name to bool, optional
        Keys among ``"W", "A", "C", "pi"``.
    """
    fixed = {b: bool((fixed_mask or {}).get(b, False)) for b in BLOCKS}
    if all(fixed.values()):
        return params
    stats = accumulate(pairs)
    d, o, k = params.W.shape
    W = params.W if fixed["W"] else update_W(stats, d, o, k)
    A = params.A if fixed["A"] else update_A(stats, params.A, zero_probability)
    C = params.C if fixed["C"] else update_C(stats, W)
    pi = params.pi if fixed["pi"] else update_pi(stats, zero_probability)
    return ModelParams(W, A, C, pi)


def log_normalizer(params: ModelParams, T: int) -> float:
    """``ln Z`` with ``Z = k^{d(T-1)} ((2 pi)^o det C)^{T/2}``."""
    L = covariance_factor(params.C)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return params.d * (T - 1) * np.log(params.k) + 0.5 * T * (params.o * np.log(2 * np.pi) + logdet)


def expected_energy(params: ModelParams, ex: Expectations, sample) -> float:
    """Posterior expectation of the model energy ``H``."""
    y = np.asarray(sample, dtype=float)
    T, d, k = ex.s_exp.shape
    o = params.o
    L = covariance_factor(params.C)
    Linv = np.linalg.inv(L)
    B = Linv.T @ Linv
    Wf = params.W.transpose(1, 0, 2).reshape(o, d * k)
    s = ex.s_exp.reshape(T, d * k)
    ss = _flat_second_moment(ex.ss_exp)
    obs = 0.5 * (np.einsum("to,op,tp->", y, B, y)
                 - 2.0 * np.einsum("to,op,pa,ta->", y, B, Wf, s)
                 + np.trace(Wf.T @ B @ Wf @ ss))
    trans = -np.einsum("ij,ij->", ex.s_exp[0], np.log(params.pi))
    if T > 1:
        trans -= np.einsum("ijl,tijl->", params.A, ex.sstm1_exp[1:])
    return float(obs + trans)


def expected_complete_log_likelihood(params: ModelParams, ex: Expectations, sample) -> float:
    """``<ln P(s, y)>`` under the given expectations, ``-<H> - ln Z``."""
    T = ex.s_exp.shape[0]
    return -expected_energy(params, ex, sample) - log_normalizer(params, T)
