"""First and second spectra and a chi-square test for non-Gaussian noise."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import signal, stats
from scipy.special import gamma as gamma_fn

from .errors import BandTooNarrow, InvalidOptions, SeriesTooShort

METHODS = ("full", "amplitude", "phase", "all")
BACKGROUNDS = ("cross", "diagonal")


@dataclass(frozen=True, eq=False)
class SecondSpectrumResult:
    """Second spectrum over lag frequencies.

    ``s2`` and ``s2_std`` are the across-segment mean and standard
    deviation, ``s2_gauss`` the value expected for Gaussian noise with the
    same first spectrum.
    """

    freqs: np.ndarray
    s2: np.ndarray
    s2_std: np.ndarray
    s2_gauss: np.ndarray
    n_segments: int
    method: str
    all_samples: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        out = {"freqs": self.freqs.tolist(), "s2": self.s2.tolist(), "s2_std": self.s2_std.tolist(),
               "s2_gauss": self.s2_gauss.tolist(), "n_segments": self.n_segments, "method": self.method}
        if self.all_samples is not None:
            out["all_samples"] = self.all_samples.tolist()
        return out


def _band_edges(f_l, f_h, L, dt) -> Tuple[int, int]:
    # nearest rfft bins; bin 0 is excluded since segments are mean-removed
    b_lo = max(1, int(np.rint(f_l * L * dt)))
    b_hi = min(L // 2, int(np.rint(f_h * L * dt)))
    return b_lo, b_hi


def _lag_sums(Z, p):
    """``sum_k Z[k+p] conj(Z[k])`` per segment over the band."""
    return np.einsum("sk,sk->s", Z[:, p:], np.conj(Z[:, : Z.shape[1] - p]))


def _rayleigh_moment(power, m):
    """``E[a^m]`` for a Rayleigh amplitude with ``E[a^2] = power``."""
    return power ** (m / 2.0) * gamma_fn(1.0 + m / 2.0)


def _gaussian_background(P, lags, method):
    """Expected ``|sum_k Z[k+p] conj(Z[k])|^2`` for independent circular
    Gaussian bins with powers ``P`` (without the ``8 T`` factor)."""
    nb = len(P)
    out = np.empty(len(lags))
    for j, p in enumerate(lags):
        if method == "phase":
            out[j] = nb - p
            continue
        hi, lo = P[p:], P[: nb - p]
        if method != "amplitude":
            # only k = n survives; Z[k+p]^2 terms have zero mean
            out[j] = np.sum(hi * lo)
            continue
        m1 = _rayleigh_moment(P, 1)
        mu = m1[p:] * m1[: nb - p]
        var = hi * lo - mu ** 2
        # neighbours k and k+p share the amplitude a[k+p]
        n_pair = nb - 2 * p
        shared = 0.0
        if n_pair > 0:
            shared = np.sum(m1[2 * p:] * P[p: nb - p] * m1[: n_pair] - mu[p:] * mu[: n_pair])
        out[j] = mu.sum() ** 2 + var.sum() + 2 * shared
    return out


def _cross_background(A, lags):
    """Gaussian expectation of ``|sum_k A[k+p] conj(A[k])|^2`` from the
    segment-averaged second moments of the band coefficients.

    With ``R[a, b] = <A_a conj(A_b)>`` and ``Q[a, b] = <A_a A_b>`` the
    Gaussian fourth moment splits into three pairings,
    ``sum_{k,n} R[k+p, n+p] R[n, k] + |sum_k R[k+p, k]|^2
    + sum_{k,n} Q[k+p, n] conj(Q[k, n+p])``. ``Q`` vanishes for circular
    coefficients but not when a steep spectrum leaks through the segment
    edges. Each plug-in pairing picks up the other two divided by ``N``,
    so the sum is rescaled by ``N / (N + 2)``.
    """
    N, nb = A.shape
    R = A.T @ A.conj() / N
    Q = A.T @ A / N
    out = np.empty(len(lags))
    for j, p in enumerate(lags):
        m = nb - p
        pair = np.sum(R[p:, p:] * R[:m, :m].T).real
        mean = abs(np.trace(R, offset=-p)) ** 2
        Qp = Q[p:, :m]
        pseudo = np.sum(Qp * np.conj(Qp.T)).real
        out[j] = (pair + mean + pseudo) * N / (N + 2)
    return out


def second_spectrum(series, dt: float, segment_length: int, f_h: float, f_l: float,
                    method: str = "full", background: str = "cross") -> SecondSpectrumResult:
    """Second spectrum of a scalar series over the band ``[f_l, f_h]``.

    The series is cut into non-overlapping, mean-removed segments of
    ``segment_length`` samples. With ``A_k = FFT(segment)_k / L`` and band
    bins ``b_L..b_H``, each segment contributes
    ``8 T_seg |sum_{k=b_L}^{b_H-p} A_{k+p} conj(A_k)|^2`` at lag ``p``, for
    ``p = 1..b_H-b_L-1``, where ``T_seg`` is the segment duration.

    Parameters
    ----------
    method : {"full", "amplitude", "phase", "all"}
        ``amplitude`` replaces ``A`` by ``|A|``, ``phase`` by ``A/|A|``;
        ``all`` is ``full`` plus the per-segment samples.
    background : {"cross", "diagonal"}
        How ``s2_gauss`` is formed for ``full``/``all``. ``diagonal``
        treats the band bins as independent and uses only the first
        spectrum; ``cross`` uses the whole segment-averaged cross spectrum
        and so absorbs window leakage from steep spectra. The amplitude
        and phase variants always assume independent bins.

    Raises
    ------
    SeriesTooShort
        Fewer than two whole segments.
    BandTooNarrow
        Fewer than two lags in the band.
    """
    if method not in METHODS:
        raise InvalidOptions(f"method must be one of {METHODS}, got {method!r}")
    if background not in BACKGROUNDS:
        raise InvalidOptions(f"background must be one of {BACKGROUNDS}, got {background!r}")
    x = np.asarray(series, dtype=float).ravel()
    L = int(segment_length)
    if L < 8:
        raise InvalidOptions(f"segment_length must be >= 8, got {segment_length}")
    if not dt > 0:
        raise InvalidOptions(f"dt must be positive, got {dt}")
    nyquist = 0.5 / dt
    if not 0 < f_l < f_h <= nyquist * (1 + 1e-12):
        raise InvalidOptions(f"need 0 < f_l < f_h <= {nyquist:g}, got f_l={f_l}, f_h={f_h}")
    n_seg = len(x) // L
    if n_seg < 2:
        raise SeriesTooShort(f"{len(x)} samples give {n_seg} segments of {L}; need at least 2")
    seg = x[: n_seg * L].reshape(n_seg, L)
    seg = seg - seg.mean(axis=1, keepdims=True)
    b_lo, b_hi = _band_edges(f_l, f_h, L, dt)
    lags = np.arange(1, b_hi - b_lo)
    if len(lags) < 2:
        raise BandTooNarrow(f"band bins {b_lo}..{b_hi} leave {len(lags)} lags; need at least 2")
    A = np.fft.rfft(seg, axis=1)[:, b_lo: b_hi + 1] / L
    if method == "amplitude":
        Z = np.abs(A)
    elif method == "phase":
        mag = np.abs(A)
        Z = np.divide(A, mag, out=np.zeros_like(A), where=mag > 0)
    else:
        Z = A
    T_seg = L * dt
    samples = np.empty((n_seg, len(lags)))
    for j, p in enumerate(lags):
        samples[:, j] = 8.0 * T_seg * np.abs(_lag_sums(Z, p)) ** 2
    if method in ("full", "all") and background == "cross":
        gauss = 8.0 * T_seg * _cross_background(A, lags)
    else:
        P = np.mean(np.abs(A) ** 2, axis=0)
        gauss = 8.0 * T_seg * _gaussian_background(P, lags, method)
    return SecondSpectrumResult(
        freqs=lags / T_seg,
        s2=samples.mean(axis=0),
        s2_std=samples.std(axis=0, ddof=1),
        s2_gauss=gauss,
        n_segments=n_seg,
        method=method,
        all_samples=samples if method == "all" else None,
    )


def chi2_gaussianity(result: SecondSpectrumResult, level: float = 0.95, dof: Optional[int] = None):
    """Sum of squared standardized deviations from the Gaussian background.

    Returns
    -------
    chi_sum : float
    dof : int
        Number of lags unless given.
    reject : bool
        True when ``chi_sum`` exceeds the chi-square quantile at ``level``.
    """
    if result.n_segments < 2:
        raise SeriesTooShort("need at least 2 segments")
    sigma = result.s2_std / np.sqrt(result.n_segments)
    diff = result.s2 - result.s2_gauss
    with np.errstate(divide="ignore", invalid="ignore"):
        chi = np.where(diff == 0, 0.0, (diff / sigma) ** 2)
    chi_sum = float(np.sum(chi))
    dof = len(result.freqs) if dof is None else int(dof)
    return chi_sum, dof, bool(chi_sum > stats.chi2.ppf(level, dof))


def welch_psd(series, dt: float, segment_length: int, overlap_fraction: float = 0.5):
    """One-sided Hann-window Welch PSD, density-normalized.

    ``sum(psd) * df`` approximates the series variance.
    """
    x = np.asarray(series, dtype=float).ravel()
    L = int(segment_length)
    if len(x) < L:
        raise SeriesTooShort(f"{len(x)} samples is shorter than one segment of {L}")
    if not 0 <= overlap_fraction < 1:
        raise InvalidOptions(f"overlap_fraction must lie in [0, 1), got {overlap_fraction}")
    return signal.welch(x, fs=1.0 / dt, window="hann", nperseg=L, noverlap=int(overlap_fraction * L),
                        detrend="constant", scaling="density", return_onesided=True)
