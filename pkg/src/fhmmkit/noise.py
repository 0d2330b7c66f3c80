"""Thermal two-level fluctuators, FHMM sequence generation and Gaussian
power-law reference noise."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .errors import InvalidOptions
from .model import ZERO_PROBABILITY, Dataset, ModelParams, floor_probabilities

# Boltzmann constant in micro-eV per kelvin
K_B = 8.617333262e-2


def thermal_rates(E_b, dE, T_K):
    """Excitation and relaxation rates ``exp((E_b -/+ dE/2) / (k_B T))``.

    Energies are in micro-eV. The exponent is taken exactly as stated by
    the model, so both rates grow with the barrier height.
    """
    if not np.all(np.asarray(T_K) > 0):
        raise InvalidOptions(f"temperature must be positive, got {T_K}")
    kT = K_B * np.asarray(T_K, dtype=float)
    E_b = np.asarray(E_b, dtype=float)
    dE = np.asarray(dE, dtype=float)
    return np.exp((E_b - dE / 2) / kT), np.exp((E_b + dE / 2) / kT)


def build_rate_matrix(f_e, f_r) -> np.ndarray:
    """``[[-f_e, f_r], [f_e, -f_r]]``; column j holds the rates out of state j."""
    return np.array([[-f_e, f_r], [f_e, -f_r]], dtype=float)


def build_transition_matrix(M, dt) -> np.ndarray:
    """``expm(M dt)`` for a 2x2 rate matrix, in closed form.

    With ``s = f_e + f_r`` the exponential is the stationary projector
    plus ``exp(-s dt)`` times its complement.
    """
    M = np.asarray(M, dtype=float)
    f_e, f_r = M[1, 0], M[0, 1]
    s = f_e + f_r
    if s == 0 or dt == 0:
        return np.eye(2)
    stationary = np.array([[f_r, f_r], [f_e, f_e]]) / s
    return stationary + np.exp(-s * dt) * (np.eye(2) - stationary)


def stationary_distribution(f_e, f_r) -> np.ndarray:
    s = f_e + f_r
    if s == 0:
        return np.array([0.5, 0.5])
    return np.array([f_r, f_e]) / s


def tlf_psd(f_e, f_r, weight, freqs) -> np.ndarray:
    """One-sided Lorentzian PSD of a telegraph signal with step ``weight``.

    ``S(f) = 4 w^2 f_e f_r / ((f_e + f_r) ((f_e + f_r)^2 + (2 pi f)^2))``,
    whose integral over ``f >= 0`` is the signal variance.
    """
    s = f_e + f_r
    f = np.asarray(freqs, dtype=float)
    return 4.0 * weight ** 2 * f_e * f_r / (s * (s ** 2 + (2 * np.pi * f) ** 2))


@dataclass(frozen=True)
class ThermalTLFConfig:
    """Physical description of ``d`` independent thermal fluctuators.

    Parameters
    ----------
    barrier_energies, detuning_energies : sequence of float
        Micro-eV, one per fluctuator.
    temperature : float
        Kelvin.
    sigma_white_noise : float
        Standard deviation of the additive Gaussian noise.
    dt : float
        Sample period in seconds.
    """

    barrier_energies: Sequence[float]
    detuning_energies: Sequence[float]
    temperature: float
    sigma_white_noise: float = 0.0
    dt: float = 1.0

    def __post_init__(self):
        if len(self.barrier_energies) != len(self.detuning_energies):
            raise InvalidOptions("barrier and detuning energies need one entry per fluctuator")
        if not self.temperature > 0:
            raise InvalidOptions(f"temperature must be positive, got {self.temperature}")
        if not self.dt > 0:
            raise InvalidOptions(f"dt must be positive, got {self.dt}")
        if not self.sigma_white_noise >= 0:
            raise InvalidOptions(f"sigma_white_noise must be >= 0, got {self.sigma_white_noise}")

    @property
    def d(self) -> int:
        return len(self.barrier_energies)

    def rates(self):
        return thermal_rates(self.barrier_energies, self.detuning_energies, self.temperature)

    def transition_matrices(self) -> np.ndarray:
        f_e, f_r = self.rates()
        return np.stack([build_transition_matrix(build_rate_matrix(a, b), self.dt)
                         for a, b in zip(f_e, f_r)])

    def to_params(self, W, zero_probability=ZERO_PROBABILITY) -> ModelParams:
        """FHMM with these fluctuators, weights ``W`` (d, o, 2), chains
        started from their stationary distributions."""
        W = np.asarray(W, dtype=float)
        if W.shape[0] != self.d or W.shape[2] != 2:
            raise InvalidOptions(f"W must have shape ({self.d}, o, 2), got {W.shape}")
        f_e, f_r = self.rates()
        P = floor_probabilities(self.transition_matrices(), zero_probability, axis=1)
        pi = np.stack([stationary_distribution(a, b) for a, b in zip(f_e, f_r)])
        pi = floor_probabilities(pi, zero_probability, axis=1)
        C = self.sigma_white_noise ** 2 * np.eye(W.shape[1])
        return ModelParams(W, np.log(P), C, pi)

    def generate(self, W, time_steps: int, n_samples: int = 1, seed=None, return_hidden=False):
        return generate_fhmm(self.to_params(W), time_steps, n_samples, seed, return_hidden, dt=self.dt)


@njit(cache=True)
def _sample_chains(cum_trans, cum_pi, uniforms):
    """Ancestral sampling of independent chains from cumulative tables.

    ``cum_trans[i, :, l]`` is the CDF over next states given state l.
    """
    T, d = uniforms.shape
    k = cum_pi.shape[1]
    states = np.empty((T, d), dtype=np.int64)
    for i in range(d):
        s = 0
        while s < k - 1 and uniforms[0, i] >= cum_pi[i, s]:
            s += 1
        states[0, i] = s
        for t in range(1, T):
            prev = s
            s = 0
            while s < k - 1 and uniforms[t, i] >= cum_trans[i, s, prev]:
                s += 1
            states[t, i] = s
    return states


def _noise_factor(C) -> np.ndarray:
    """``L`` with ``L L^T = C`` for positive semi-definite ``C``."""
    vals, vecs = np.linalg.eigh(0.5 * (C + C.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def generate_fhmm(params: ModelParams, time_steps: int, n_samples: int = 1, seed=None,
                  return_hidden: bool = False, dt: float = 1.0):
    """Sample observation sequences from an FHMM.

    ``C`` may be singular (or zero) for noiseless output. Sample ``n``
    uses its own stream spawned from ``seed``.

    Returns
    -------
    t : ndarray (time_steps,)
    data : Dataset of shape (n_samples, time_steps, o)
    states : ndarray (n_samples, time_steps, d), only with ``return_hidden``
    """
    if int(time_steps) != time_steps or time_steps < 1:
        raise InvalidOptions(f"time_steps must be a positive integer, got {time_steps!r}")
    if int(n_samples) != n_samples or n_samples < 1:
        raise InvalidOptions(f"n_samples must be a positive integer, got {n_samples!r}")
    T, d, o = int(time_steps), params.d, params.o
    cum_trans = np.cumsum(params.trans, axis=1)
    cum_pi = np.cumsum(params.pi, axis=1)
    L = _noise_factor(np.asarray(params.C))
    X = np.empty((int(n_samples), T, o))
    S = np.empty((int(n_samples), T, d), dtype=np.int64)
    for n, ss in enumerate(np.random.SeedSequence(seed).spawn(int(n_samples))):
        rng = np.random.default_rng(ss)
        states = _sample_chains(cum_trans, cum_pi, rng.random((T, d)))
        mean = np.zeros((T, o))
        for i in range(d):
            mean += params.W[i][:, states[:, i]].T
        X[n] = mean + rng.standard_normal((T, o)) @ L.T
        S[n] = states
    t = np.arange(T) * float(dt)
    data = Dataset(X, dt)
    return (t, data, S) if return_hidden else (t, data)


def generate_powerlaw(beta: float, n: int, seed=None, dt: float = 1.0) -> np.ndarray:
    """Gaussian noise with power spectrum ``~ 1/f^beta`` by frequency-domain
    synthesis.

    Real and imaginary parts of each positive-frequency coefficient are
    independent normals scaled by ``f^(-beta/2)``; the zero-frequency bin
    is zero and the Nyquist bin (even ``n``) is real. The output is scaled
    to unit sample variance.
    """
    if int(n) != n or n < 2:
        raise InvalidOptions(f"n must be an integer >= 2, got {n!r}")
    n = int(n)
    rng = np.random.default_rng(seed)
    f = np.fft.rfftfreq(n, dt)
    amp = np.zeros_like(f)
    amp[1:] = f[1:] ** (-beta / 2.0)
    coef = (rng.standard_normal(len(f)) + 1j * rng.standard_normal(len(f))) * amp / np.sqrt(2)
    if n % 2 == 0:
        coef[-1] = rng.standard_normal() * amp[-1]
    x = np.fft.irfft(coef, n)
    x -= x.mean()
    return x / x.std()
