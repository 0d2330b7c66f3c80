"""Analytic Hessian of the log likelihood and observed-information errors.

Coordinates are the independent parameters once every constraint is
substituted:

* W: all entries of chain 0; chains 1.. drop state k-1, which is minus
  the sum of the others (canonical form, zero mean along states).
* A: log transition entries of rows 0..k-2; row k-1 of each column is
  ``ln(1 - sum of the others)``.
* C: all o*o entries, treated as unconstrained matrix coordinates.
* pi: entries 0..k-2; entry k-1 is one minus the rest.

The derivatives are propagated through the scaled forward recursion for
every coordinate (and pair) at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import NonCanonicalWeights, SingularInformation
from .exact import EPS, covariance_factor, emission_log_density
from .model import (
    Dataset,
    ModelParams,
    RealizationTable,
    count_dim,
    enumerate_realizations,
    is_canonical,
)
from .runner import Task, execute_parallel


@dataclass(frozen=True, eq=False)
class HessianResult:
    """Second derivatives over the independent coordinates.

    Attributes
    ----------
    H : ndarray (dim, dim)
    index_map : list of (block, indices)
        ``block`` is one of ``"W", "A", "C", "pi"``.
    gradient : ndarray (dim,)
        First derivatives of the log likelihood, a by-product.
    """

    H: np.ndarray
    index_map: List[Tuple[str, tuple]]
    gradient: Optional[np.ndarray] = None

    @property
    def dim(self):
        return len(self.index_map)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "index_map": [[b, list(ix)] for b, ix in self.index_map],
            "H": self.H.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        imap = [(b, tuple(ix)) for b, ix in doc["index_map"]]
        return cls(np.asarray(doc["H"], dtype=float), imap)


def coordinate_index(d, o, k) -> List[Tuple[str, tuple]]:
    imap = []
    for i in range(d):
        for oo in range(o):
            for j in range(k if i == 0 else k - 1):
                imap.append(("W", (i, oo, j)))
    for i in range(d):
        for a in range(k - 1):
            for l in range(k):
                imap.append(("A", (i, a, l)))
    for a in range(o):
        for b in range(o):
            imap.append(("C", (a, b)))
    for i in range(d):
        for a in range(k - 1):
            imap.append(("pi", (i, a)))
    return imap


def pack_coordinates(params: ModelParams) -> np.ndarray:
    """Independent coordinate vector of ``params`` (W must be canonical)."""
    out = []
    for block, ix in coordinate_index(params.d, params.o, params.k):
        out.append(getattr(params, block)[ix])
    return np.array(out)


def unpack_coordinates(theta, d, o, k):
    """Rebuild (W, A, C, pi) from independent coordinates.

    The constrained entries are re-substituted; C is returned exactly as
    given, without symmetrization. The dtype of ``theta`` is kept.
    """
    dtype = np.result_type(np.asarray(theta), float)
    W = np.zeros((d, o, k), dtype)
    A = np.zeros((d, k, k), dtype)
    C = np.zeros((o, o), dtype)
    pi = np.zeros((d, k), dtype)
    for v, (block, ix) in zip(theta, coordinate_index(d, o, k)):
        {"W": W, "A": A, "C": C, "pi": pi}[block][ix] = v
    for i in range(1, d):
        W[i, :, k - 1] = -W[i, :, : k - 1].sum(axis=1)
    rest = 1.0 - np.exp(A[:, : k - 1, :]).sum(axis=1)
    A[:, k - 1, :] = np.log(rest)
    pi[:, k - 1] = 1.0 - pi[:, : k - 1].sum(axis=1)
    return W, A, C, pi


class _Layout:
    """Positions of each block inside the coordinate vector."""

    def __init__(self, d, o, k):
        self.imap = coordinate_index(d, o, k)
        self.n = len(self.imap)
        kinds = np.array([b for b, _ in self.imap])
        self.W = np.flatnonzero(kinds == "W")
        self.A = np.flatnonzero(kinds == "A")
        self.C = np.flatnonzero(kinds == "C")
        self.pi = np.flatnonzero(kinds == "pi")


def _transition_derivatives(params: ModelParams, table: RealizationTable, lay: _Layout):
    """Joint transition matrix and its derivatives over A coordinates.

    Returns P (K, K), dP (nA, K, K), d2P (nA, nA, K, K).
    """
    d, k = params.d, params.k
    R = table.realizations
    Pc = params.trans
    K = table.n_configurations
    local = [Pc[i][R[i][:, None], R[i][None, :]] for i in range(d)]  # (K, K) each

    def others(skip):
        out = np.ones((K, K))
        for i in range(d):
            if i not in skip:
                out = out * local[i]
        return out

    coords = [lay.imap[n][1] for n in lay.A]
    dloc = []
    for (i, a, l) in coords:
        to_state = (R[i] == a).astype(float) - (R[i] == k - 1).astype(float)
        from_l = (R[i] == l).astype(float)
        dloc.append(Pc[i, a, l] * to_state[:, None] * from_l[None, :])
    nA = len(coords)
    P = others(())
    dP = np.empty((nA, K, K))
    d2P = np.zeros((nA, nA, K, K))
    rest = [others((i,)) for i in range(d)]
    for m, (i, a, l) in enumerate(coords):
        dP[m] = dloc[m] * rest[i]
    for m, (i, a, l) in enumerate(coords):
        for n, (i2, a2, l2) in enumerate(coords):
            if i == i2:
                if m == n:
                    # d/dA e^A = e^A, and the constraint row is linear in e^A
                    d2P[m, n] = dP[m]
            else:
                d2P[m, n] = dloc[m] * dloc[n] * others((i, i2))
    return P, dP, d2P


def _prior_derivatives(params: ModelParams, table: RealizationTable, lay: _Layout):
    d, k = params.d, params.k
    R = table.realizations
    K = table.n_configurations
    local = [params.pi[i][R[i]] for i in range(d)]
    coords = [lay.imap[n][1] for n in lay.pi]

    def others(skip):
        out = np.ones(K)
        for i in range(d):
            if i not in skip:
                out = out * local[i]
        return out

    dloc = [(R[i] == a).astype(float) - (R[i] == k - 1).astype(float) for (i, a) in coords]
    n = len(coords)
    prior = others(())
    dprior = np.array([dloc[m] * others((coords[m][0],)) for m in range(n)]).reshape(n, K)
    d2prior = np.zeros((n, n, K))
    for m, (i, _) in enumerate(coords):
        for q, (i2, _) in enumerate(coords):
            if i != i2:
                d2prior[m, q] = dloc[m] * dloc[q] * others((i, i2))
    return prior, dprior, d2prior


def _weight_selectors(params: ModelParams, table: RealizationTable, lay: _Layout):
    """``G[m, r]`` = derivative of the configuration mean (component
    ``o_m``) with respect to W coordinate m, and the component ``o_m``."""
    k = params.k
    R = table.realizations
    G = np.empty((len(lay.W), table.n_configurations))
    comp = np.empty(len(lay.W), dtype=np.int64)
    for m, n in enumerate(lay.W):
        i, oo, j = lay.imap[n][1]
        G[m] = (R[i] == j).astype(float)
        if i > 0:
            G[m] -= (R[i] == k - 1).astype(float)
        comp[m] = oo
    return G, comp


def sample_hessian(params: ModelParams, sample, table: Optional[RealizationTable] = None,
                   seed=None):
    """Hessian and gradient of one sample's log likelihood (unsymmetrized)."""
    y = np.asarray(sample, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    T = len(y)
    if table is None:
        table = enumerate_realizations(params.spec(T))
    d, o, k = params.W.shape
    lay = _Layout(d, o, k)
    n = lay.n
    K = table.n_configurations

    L = covariance_factor(params.C)
    Linv = np.linalg.inv(L)
    B = Linv.T @ Linv
    logp = emission_log_density(params, y, table, chol=L)
    emis = np.exp(logp - logp.max(axis=1, keepdims=True))

    from .exact import configuration_means
    mu = configuration_means(params, table)  # (K, o)

    P, dPA, d2PA = _transition_derivatives(params, table, lay)
    dP = np.zeros((n, K, K))
    dP[lay.A] = dPA
    d2P = np.zeros((n, n, K, K))
    d2P[np.ix_(lay.A, lay.A)] = d2PA
    prior, dpr, d2pr = _prior_derivatives(params, table, lay)
    dprior = np.zeros((n, K))
    dprior[lay.pi] = dpr
    d2prior = np.zeros((n, n, K))
    d2prior[np.ix_(lay.pi, lay.pi)] = d2pr

    G, comp = _weight_selectors(params, table, lay)
    cab = [lay.imap[q][1] for q in lay.C]
    ca = np.array([a for a, _ in cab], dtype=np.int64)
    cb = np.array([b for _, b in cab], dtype=np.int64)
    # t-independent W-W emission curvature
    hWW = -G[:, None, :] * G[None, :, :] * B[np.ix_(comp, comp)][:, :, None]
    # C-C pieces that do not depend on the residual: 1/2 B_jl B_mi
    hCC0 = 0.5 * B[cb][:, ca][:, :, None] * B[cb][:, ca].T[:, :, None]
    Bcomp_a = B[np.ix_(comp, ca)]  # B[o_m, l]
    Bb_comp = B[np.ix_(cb, comp)].T  # B[m_idx, o_m] -> (nW, nC)

    alpha = None
    D = None
    D2 = None
    H = np.zeros((n, n))
    grad = np.zeros(n)
    g = np.zeros((n, K))
    h = np.zeros((n, n, K))
    for t in range(T):
        e = emis[t]
        u = (y[t][None, :] - mu) @ B  # (K, o), B symmetric
        g[lay.W] = G * u[:, comp].T
        g[lay.C] = 0.5 * (u[:, ca] * u[:, cb] - B[cb, ca][None, :]).T
        h[np.ix_(lay.W, lay.W)] = hWW
        # -1/2 G (B[o,l] u_m + u_l B[m,o]) for C coordinate (l, m)
        hWC = -0.5 * G[:, None, :] * (Bcomp_a[:, :, None] * u[:, cb].T[None, :, :]
                                       + u[:, ca].T[None, :, :] * Bb_comp[:, :, None])
        h[np.ix_(lay.W, lay.C)] = hWC
        h[np.ix_(lay.C, lay.W)] = hWC.transpose(1, 0, 2)
        # C_ij, C_lm: 1/2 B_jl B_mi - 1/2 (u_l B_mi u_j + u_i B_jl u_m)
        Bmi = B[np.ix_(cb, ca)].T  # [ij, lm] -> B[m, i]
        Bjl = B[np.ix_(cb, ca)]  # [ij, lm] -> B[j, l]
        hCC = (hCC0
               - 0.5 * (u[:, ca].T[None, :, :] * Bmi[:, :, None] * u[:, cb].T[:, None, :]
                        + u[:, ca].T[:, None, :] * Bjl[:, :, None] * u[:, cb].T[None, :, :]))
        h[np.ix_(lay.C, lay.C)] = hCC

        if t == 0:
            Pa, V, W2 = prior, dprior, d2prior
        else:
            Pa = P @ alpha
            PD = D @ P.T
            V = np.einsum("nrs,s->nr", dP, alpha) + PD
            dPD = np.einsum("mrs,ns->mnr", dP, D)
            W2 = (np.einsum("mnrs,s->mnr", d2P, alpha) + dPD + dPD.transpose(1, 0, 2)
                  + np.einsum("rs,mns->mnr", P, D2))
        at = e * Pa + EPS
        dat = e * (g * Pa + V)
        d2at = e * ((g[:, None, :] * g[None, :, :] + h) * Pa
                    + g[:, None, :] * V[None, :, :] + V[:, None, :] * g[None, :, :] + W2)
        c = at.sum()
        dc = dat.sum(axis=1)
        d2c = d2at.sum(axis=2)
        H += d2c / c - np.outer(dc, dc) / c ** 2
        grad += dc / c
        alpha = at / c
        D = (dat - alpha[None, :] * dc[:, None]) / c
        D2 = (d2at - D[:, None, :] * dc[None, :, None] - D[None, :, :] * dc[:, None, None]
              - alpha[None, None, :] * d2c[:, :, None]) / c
    return H, grad


def compute_hessian(params: ModelParams, dataset, table: Optional[RealizationTable] = None,
                    n_jobs: int = 1) -> HessianResult:
    """Hessian of the total log likelihood over independent coordinates.

    Raises
    ------
    NonCanonicalWeights
        If chains 1.. of W do not have zero mean along states.
    """
    if not is_canonical(params.W):
        raise NonCanonicalWeights("W must be canonical; call canonicalize_weights first")
    X = dataset.X if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if table is None:
        table = enumerate_realizations(params.spec(X.shape[1]))
    parts = execute_parallel([Task(sample_hessian, (params, y, table)) for y in X], n_jobs=n_jobs)
    H = sum(p[0] for p in parts)
    grad = sum(p[1] for p in parts)
    imap = coordinate_index(params.d, params.o, params.k)
    assert len(imap) == count_dim(params.spec(X.shape[1]))
    return HessianResult(0.5 * (H + H.T), imap, grad)


def standard_errors(hr: HessianResult, shape=None):
    """Square roots of the diagonal of ``(-H)^{-1}`` per block.

    Parameters
    ----------
    hr : HessianResult
    shape : (d, o, k), optional
        Inferred from ``index_map`` when omitted.

    Returns
    -------
    dW, dA, dC, dpi : ndarrays shaped like the parameter blocks, NaN at
        the constrained entries.

    Raises
    ------
    SingularInformation
        If ``-H`` is not positive definite.
    """
    info = -np.asarray(hr.H, dtype=float)
    eig = np.linalg.eigvalsh(0.5 * (info + info.T))
    if eig[0] <= 0:
        raise SingularInformation(
            f"observed information is not positive definite (smallest eigenvalue {eig[0]:.6g})",
            float(eig[0]))
    var = np.diag(np.linalg.inv(info))
    if shape is None:
        d = 1 + max(ix[0] for b, ix in hr.index_map if b == "W")
        o = 1 + max(ix[1] for b, ix in hr.index_map if b == "W")
        k = 1 + max(ix[2] for b, ix in hr.index_map if b == "W" and ix[0] == 0)
    else:
        d, o, k = shape
    out = {"W": np.full((d, o, k), np.nan), "A": np.full((d, k, k), np.nan),
           "C": np.full((o, o), np.nan), "pi": np.full((d, k), np.nan)}
    for v, (block, ix) in zip(var, hr.index_map):
        out[block][ix] = np.sqrt(v)
    return out["W"], out["A"], out["C"], out["pi"]
