"""Model dimensions, parameter tensors and the joint-configuration table."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Optional

import numpy as np

from .errors import (
    ConfigurationOverflow,
    NonPositiveDefiniteCovariance,
    NonStochasticColumn,
    ShapeMismatch,
)

ZERO_PROBABILITY = 1e-12
# largest joint configuration count we are willing to index
MAX_CONFIGURATIONS = np.iinfo(np.int64).max
FORMAT_VERSION = "1"


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions of a factorial HMM.

    Parameters
    ----------
    T : int
        Sequence length.
    d : int
        Number of hidden chains.
    o : int
        Dimension of the observable.
    k : int
        States per chain.
    """

    T: int
    d: int
    o: int
    k: int

    def __post_init__(self):
        for name in ("T", "d", "o", "k"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ShapeMismatch(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.k ** self.d > MAX_CONFIGURATIONS:
            raise ConfigurationOverflow(f"k^d = {self.k}^{self.d} does not fit an index")

    @property
    def n_configurations(self) -> int:
        return self.k ** self.d

    def with_T(self, T: int) -> "ModelSpec":
        return ModelSpec(T, self.d, self.o, self.k)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Learnable tensors.

    Attributes
    ----------
    W : ndarray (d, o, k)
        Observation weights.
    A : ndarray (d, k, k)
        Log transition probabilities, ``A[i, j, l] = ln P(j at t | l at t-1)``.
    C : ndarray (o, o)
        Observation noise covariance.
    pi : ndarray (d, k)
        Initial state distribution per chain.
    """

    W: np.ndarray
    A: np.ndarray
    C: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        for name in ("W", "A", "C", "pi"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def d(self):
        return self.W.shape[0]

    @property
    def o(self):
        return self.W.shape[1]

    @property
    def k(self):
        return self.W.shape[2]

    @property
    def trans(self) -> np.ndarray:
        """Transition probabilities ``exp(A)``, columns sum to one."""
        return np.exp(self.A)

    def replace(self, **blocks) -> "ModelParams":
        kw = dict(W=self.W, A=self.A, C=self.C, pi=self.pi)
        kw.update(blocks)
        return ModelParams(**kw)

    def spec(self, T: int) -> ModelSpec:
        return ModelSpec(T, self.d, self.o, self.k)

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of all four blocks."""
        return all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("W", "A", "C", "pi")
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations of shape (n_samples, T, o) with sample period ``dt``."""

    X: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3:
            raise ShapeMismatch(f"dataset must be (n_samples, T, o), got shape {X.shape}")
        if X.shape[0] < 1 or X.shape[1] < 1 or X.shape[2] < 1:
            raise ShapeMismatch(f"empty dataset of shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ShapeMismatch("dataset contains non-finite entries")
        if not self.dt > 0:
            raise ShapeMismatch(f"dt must be positive, got {self.dt}")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n_samples(self):
        return self.X.shape[0]

    @property
    def T(self):
        return self.X.shape[1]

    @property
    def o(self):
        return self.X.shape[2]

    def window(self, start: int, stop: int) -> "Dataset":
        return Dataset(self.X[:, start:stop], self.dt)


@dataclass(frozen=True, eq=False)
class RealizationTable:
    """Enumeration of the ``k**d`` joint configurations.

    ``realizations[i, r]`` is the state of chain ``i`` in configuration
    ``r`` (base-k digits of ``r``, chain 0 most significant).
    ``k_contrib[(i, j)]`` lists the configurations with chain ``i`` in
    state ``j``.
    """

    realizations: np.ndarray
    k_contrib: dict = field(repr=False)
    d: int
    k: int

    @property
    def n_configurations(self):
        return self.realizations.shape[1]

    def one_hot(self) -> np.ndarray:
        """Indicator tensor of shape (K, d, k)."""
        K = self.n_configurations
        S = np.zeros((K, self.d, self.k))
        for i in range(self.d):
            S[np.arange(K), i, self.realizations[i]] = 1.0
        return S

    def index_of(self, states) -> int:
        """Configuration index of a per-chain state vector."""
        r = 0
        for s in states:
            r = r * self.k + int(s)
        return r


def enumerate_realizations(spec: ModelSpec) -> RealizationTable:
    d, k = spec.d, spec.k
    if k ** d > MAX_CONFIGURATIONS:
        raise ConfigurationOverflow(f"k^d = {k}^{d} does not fit an index")
    K = k ** d
    r = np.arange(K, dtype=np.int64)
    real = np.empty((d, K), dtype=np.int64)
    for i in range(d):
        real[i] = (r // k ** (d - 1 - i)) % k
    real.setflags(write=False)
    contrib = {
        (i, j): [int(x) for x in np.flatnonzero(real[i] == j)]
        for i, j in product(range(d), range(k))
    }
    return RealizationTable(real, contrib, d, k)


def count_dim(spec: ModelSpec) -> int:
    """Number of independent parameters (Hessian side length)."""
    d, o, k = spec.d, spec.o, spec.k
    return d * o * k - (d - 1) * o + d * (k - 1) * k + o * o + d * (k - 1)


def floor_probabilities(p, zero_probability=ZERO_PROBABILITY, axis=-1):
    """Clamp to ``[zp, 1 - zp]`` then renormalize along ``axis``."""
    p = np.clip(np.asarray(p, dtype=float), zero_probability, 1.0 - zero_probability)
    return p / p.sum(axis=axis, keepdims=True)


def canonicalize_weights(W):
    """Move the per-state mean of chains 1..d-1 into chain 0.

    The summed mean ``sum_i W[i] @ s[i]`` is unchanged for any one-hot
    configuration, and the operation is idempotent.
    """
    W = np.array(W, dtype=float)
    if W.shape[0] > 1:
        means = W[1:].mean(axis=2, keepdims=True)  # (d-1, o, 1)
        W[1:] -= means
        W[0] += means.sum(axis=0)
    return W


def is_canonical(W, atol=1e-9) -> bool:
    W = np.asarray(W)
    if W.shape[0] == 1:
        return True
    scale = max(1.0, float(np.abs(W).max()))
    return bool(np.all(np.abs(W[1:].mean(axis=2)) <= atol * scale))


def validate_model(params: ModelParams, spec: ModelSpec) -> None:
    """Raise if ``params`` does not fit ``spec`` or breaks a constraint."""
    d, o, k = spec.d, spec.o, spec.k
    shapes = {"W": (d, o, k), "A": (d, k, k), "C": (o, o), "pi": (d, k)}
    for name, shape in shapes.items():
        got = getattr(params, name).shape
        if got != shape:
            raise ShapeMismatch(f"{name} has shape {got}, expected {shape}")
    for name in shapes:
        if not np.all(np.isfinite(getattr(params, name))):
            raise ShapeMismatch(f"{name} has non-finite entries")

    col = np.exp(params.A).sum(axis=1)
    if np.any(np.abs(col - 1.0) > 1e-9):
        i, l = np.unravel_index(np.argmax(np.abs(col - 1.0)), col.shape)
        raise NonStochasticColumn(f"exp(A[{i}]) column {l} sums to {col[i, l]:.12g}")
    if np.any(params.pi < 0) or np.any(np.abs(params.pi.sum(axis=1) - 1.0) > 1e-9):
        raise NonStochasticColumn(f"pi rows must be probability vectors, got {params.pi.tolist()}")

    C = params.C
    if np.any(np.abs(C - C.T) > 1e-12 * max(1.0, float(np.abs(C).max()))):
        raise NonPositiveDefiniteCovariance("C is not symmetric")
    eig = np.linalg.eigvalsh(C)
    if eig[0] <= 0:
        raise NonPositiveDefiniteCovariance(f"C has eigenvalue {eig[0]:.6g}")


def random_stochastic(rng, shape, zero_probability=ZERO_PROBABILITY, axis=0):
    """Random probability vectors normalized along ``axis``."""
    p = rng.uniform(size=shape) + 1e-3
    return floor_probabilities(p / p.sum(axis=axis, keepdims=True), zero_probability, axis)


def random_init(spec: ModelSpec, seed, data_scale: float = 1.0, data=None,
                zero_probability=ZERO_PROBABILITY) -> ModelParams:
    """Random starting point for EM.

    Parameters
    ----------
    spec : ModelSpec
    seed : int or sequence of int
        Anything accepted by ``numpy.random.default_rng``.
    data_scale : float
        W entries are drawn uniformly from ``[-data_scale, data_scale]``.
    data : array (n_samples, T, o), optional
        When given, C starts at the diagonal of the data variance.
    """
    rng = np.random.default_rng(seed)
    d, o, k = spec.d, spec.o, spec.k
    W = rng.uniform(-data_scale, data_scale, size=(d, o, k))
    A = np.log(random_stochastic(rng, (d, k, k), zero_probability, axis=1))
    pi = random_stochastic(rng, (d, k), zero_probability, axis=1)
    if data is not None:
        var = np.asarray(data, dtype=float).reshape(-1, o).var(axis=0)
        var = np.where(var > 0, var, 1.0)
        C = np.diag(var)
    else:
        C = np.eye(o)
    return ModelParams(W, A, C, pi)


def params_to_dict(params: ModelParams, T: Optional[int] = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "spec": {"T": T, "d": params.d, "o": params.o, "k": params.k},
        "W": params.W.tolist(),
        "A_log": params.A.tolist(),
        "C": params.C.tolist(),
        "pi": params.pi.tolist(),
    }


def params_from_dict(doc: dict) -> ModelParams:
    """Inverse of :func:`params_to_dict`. A missing ``format_version`` is
    read as the current one so hand-written documents load."""
    if not isinstance(doc, dict):
        raise ShapeMismatch(f"params must be a JSON object, got {type(doc).__name__}")
    if str(doc.get("format_version", FORMAT_VERSION)) != FORMAT_VERSION:
        raise ShapeMismatch(f"unsupported params format_version {doc.get('format_version')!r}")
    try:
        p = ModelParams(doc["W"], doc["A_log"], doc["C"], doc["pi"])
    except KeyError as e:
        raise ShapeMismatch(f"params document is missing {e}") from None
    except ValueError as e:
        raise ShapeMismatch(f"ragged params document: {e}") from None
    s = doc.get("spec") or {}
    T = s.get("T") or 1
    validate_model(p, ModelSpec(T, p.d, p.o, p.k))
    return p
