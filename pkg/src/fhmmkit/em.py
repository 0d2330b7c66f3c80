"""EM fitting with restarts, convergence detection and optional jostling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import List, Optional

import numpy as np

from .approx import MeanFieldState, SVAState, gibbs_estep, mean_field_estep, sva_estep
from .errors import InvalidOptions
from .exact import exact_estep, log_likelihood
from .model import (
    Dataset,
    ModelParams,
    ModelSpec,
    enumerate_realizations,
    floor_probabilities,
    random_init,
    validate_model,
)
from .mstep import BLOCKS, expected_complete_log_likelihood, m_step
from .runner import Task, execute_parallel

log = logging.getLogger("fhmmkit")

METHODS = ("exact", "mean_field", "sva", "gibbs")
_ARRAY_FIELDS = tuple(f"{b}_{kind}" for kind in ("init", "fixed") for b in BLOCKS)


@dataclass
class FitOptions:
    """Knobs of :func:`fit`. Names follow the configuration file keys.

    ``X_init`` arrays replace the random starting block; ``X_fixed``
    arrays pin the block for the whole fit.
    """

    method: str = "exact"
    em_max_iter: int = 100
    em_log_likelihood_tol: float = 1e-8
    em_log_likelihood_count: int = 3
    n_restarts: int = 1
    e_step_retries: int = 0
    stochastic_training: bool = False
    stochastic_lr: float = 0.01
    gibbs_max_iter: int = 200
    mean_field_max_iter: int = 50
    mean_field_kld_tol: float = 1e-8
    sva_max_iter: int = 50
    sva_kld_tol: float = 1e-8
    zero_probability: float = 1e-12
    seed: int = 0
    verbose: bool = False
    n_jobs: int = 1
    W_init: Optional[np.ndarray] = None
    A_init: Optional[np.ndarray] = None
    C_init: Optional[np.ndarray] = None
    pi_init: Optional[np.ndarray] = None
    W_fixed: Optional[np.ndarray] = None
    A_fixed: Optional[np.ndarray] = None
    C_fixed: Optional[np.ndarray] = None
    pi_fixed: Optional[np.ndarray] = None

    def replace(self, **kw) -> "FitOptions":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return FitOptions(**d)

    @property
    def fixed_mask(self):
        return {b: getattr(self, f"{b}_fixed") is not None for b in BLOCKS}

    def validate(self, spec: Optional[ModelSpec] = None) -> None:
        if self.method not in METHODS:
            raise InvalidOptions(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ("em_max_iter", "em_log_likelihood_count", "n_restarts",
                     "gibbs_max_iter", "mean_field_max_iter", "sva_max_iter"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 1:
                raise InvalidOptions(f"{name} must be a positive integer, got {v!r}")
        if int(self.e_step_retries) != self.e_step_retries or self.e_step_retries < 0:
            raise InvalidOptions(f"e_step_retries must be >= 0, got {self.e_step_retries!r}")
        for name in ("em_log_likelihood_tol", "mean_field_kld_tol", "sva_kld_tol"):
            if not getattr(self, name) > 0:
                raise InvalidOptions(f"{name} must be positive, got {getattr(self, name)!r}")
        if not self.stochastic_lr >= 0:
            raise InvalidOptions(f"stochastic_lr must be >= 0, got {self.stochastic_lr!r}")
        if not 0 < self.zero_probability < 0.5:
            raise InvalidOptions(f"zero_probability must lie in (0, 0.5), got {self.zero_probability!r}")
        if self.n_jobs != -1 and (int(self.n_jobs) != self.n_jobs or self.n_jobs < 1):
            raise InvalidOptions(f"n_jobs must be >= 1 or -1, got {self.n_jobs!r}")
        if spec is not None:
            shapes = {"W": (spec.d, spec.o, spec.k), "A": (spec.d, spec.k, spec.k),
                      "C": (spec.o, spec.o), "pi": (spec.d, spec.k)}
            for name in _ARRAY_FIELDS:
                v = getattr(self, name)
                if v is not None and np.shape(v) != shapes[name.split("_")[0]]:
                    raise InvalidOptions(f"{name} has shape {np.shape(v)}, expected "
                                         f"{shapes[name.split('_')[0]]}")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = np.asarray(v).tolist() if isinstance(v, np.ndarray) else v
        return out


@dataclass
class RestartSummary:
    index: int
    final_log_likelihood: float
    n_iter: int
    converged: bool
    trace: List[float]
    params: ModelParams = field(repr=False)


@dataclass
class FitResult:
    params: ModelParams
    log_likelihood_trace: List[float]
    best_restart_index: int
    converged: bool
    restarts: List[RestartSummary]

    @property
    def log_likelihood(self) -> float:
        return self.restarts[self.best_restart_index].final_log_likelihood


def initial_params(spec: ModelSpec, X, options: FitOptions, rng) -> ModelParams:
    """Random start, then init blocks, then fixed blocks on top."""
    flat = np.asarray(X).reshape(-1, spec.o)
    scale = float(flat.std()) or 1.0
    p = random_init(spec, rng.integers(2**63), scale, data=X, zero_probability=options.zero_probability)
    # centre the random weights on the data mean
    W = p.W + (flat.mean(axis=0) / spec.d)[None, :, None]
    blocks = dict(W=W, A=p.A, C=p.C, pi=p.pi)
    for kind in ("init", "fixed"):
        for b in BLOCKS:
            v = getattr(options, f"{b}_{kind}")
            if v is not None:
                blocks[b] = np.asarray(v, dtype=float)
    params = ModelParams(**blocks)
    try:
        validate_model(params, spec)
    except Exception as e:
        raise InvalidOptions(f"initial or fixed parameters are invalid: {e}") from None
    return params


def jostle(params: ModelParams, options: FitOptions, iteration: int, rng) -> ModelParams:
    """Random perturbation of the free blocks, halving every 10 iterations."""
    lr = options.stochastic_lr * 0.5 ** (iteration / 10.0)
    fixed = options.fixed_mask
    zp = options.zero_probability
    out = {}
    if not fixed["W"]:
        out["W"] = params.W + lr * rng.standard_normal(params.W.shape)
    if not fixed["A"]:
        # clip at the floor so a column can never sum to zero
        P = np.clip(params.trans + lr * rng.standard_normal(params.A.shape), zp, None)
        out["A"] = np.log(floor_probabilities(P / P.sum(axis=1, keepdims=True), zp, axis=1))
    if not fixed["C"]:
        D = np.diag(np.exp(0.5 * lr * rng.standard_normal(params.o)))
        C = D @ params.C @ D
        out["C"] = 0.5 * (C + C.T)
    if not fixed["pi"]:
        p = np.clip(params.pi + lr * rng.standard_normal(params.pi.shape), zp, None)
        out["pi"] = floor_probabilities(p / p.sum(axis=1, keepdims=True), zp, axis=1)
    return params.replace(**out)


class _EStep:
    """Runs the chosen E-step over all samples and keeps warm starts."""

    def __init__(self, options: FitOptions, X, table, rng):
        self.o = options
        self.X = X
        self.table = table
        self.rng = rng
        self.states = [None] * len(X)

    def _fresh_mf(self, T, d, k):
        m = self.rng.uniform(size=(T, d, k)) + 1e-3
        return MeanFieldState(m / m.sum(axis=2, keepdims=True))

    def _fresh_sva(self, T, d, k):
        s = self.rng.uniform(size=(T, d, k)) + 1e-3
        s /= s.sum(axis=2, keepdims=True)
        return SVAState(np.full((T, d, k), 1.0 / k), [], s_exp=s)

    def __call__(self, params: ModelParams):
        o = self.o
        pairs, score = [], 0.0
        d, k = params.pi.shape
        for n, y in enumerate(self.X):
            if o.method == "exact":
                ex, ll = exact_estep(params, y, self.table)
                score += ll
            elif o.method == "gibbs":
                ex, _ = gibbs_estep(params, y, o.gibbs_max_iter, seed=self.rng,
                                    zero_probability=o.zero_probability)
                score += expected_complete_log_likelihood(params, ex, y)
            else:
                if o.method == "mean_field":
                    run = lambda init: mean_field_estep(
                        params, y, init, o.mean_field_max_iter, o.mean_field_kld_tol,
                        seed=self.rng, zero_probability=o.zero_probability)
                    fresh = self._fresh_mf
                else:
                    run = lambda init: sva_estep(
                        params, y, o.sva_max_iter, o.sva_kld_tol, seed=self.rng,
                        zero_probability=o.zero_probability, init=init)
                    fresh = self._fresh_sva
                ex, st = run(self.states[n])
                for _ in range(int(o.e_step_retries)):
                    ex2, st2 = run(fresh(len(y), d, k))
                    if st2.kld_trace[-1] < st.kld_trace[-1]:
                        ex, st = ex2, st2
                self.states[n] = st
                score -= st.kld_trace[-1]
            pairs.append((ex, y))
        return pairs, float(score)


def fit_restart(X, spec: ModelSpec, options: FitOptions, restart_index: int,
                seed=None) -> RestartSummary:
    """One EM run from its own starting point.

    ``seed`` is accepted for the runner interface; the stream is always
    derived from ``(options.seed, restart_index)`` so that a restart is
    reproducible on its own.
    """
    rng = np.random.default_rng([int(options.seed), int(restart_index)])
    X = np.asarray(X, dtype=float)
    table = enumerate_realizations(spec)
    params = initial_params(spec, X, options, rng)
    estep = _EStep(options, X, table, rng)
    fixed = options.fixed_mask
    trace = []
    converged = False
    still = 0
    for it in range(int(options.em_max_iter)):
        pairs, score = estep(params)
        trace.append(score)
        if options.verbose:
            log.info("restart %d iter %d score %.10g", restart_index, it, score)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < options.em_log_likelihood_tol:
            still += 1
            if still >= options.em_log_likelihood_count:
                converged = True
                break
        else:
            still = 0
        if all(fixed.values()):
            continue
        params = m_step(pairs, params, fixed, options.zero_probability)
        if options.stochastic_training:
            params = jostle(params, options, it, rng)
    if options.method == "exact" and trace:
        # the last E-step scored exactly the params we return, unless the
        # loop ran out after an M-step
        final = trace[-1] if converged or all(fixed.values()) else log_likelihood(params, X, table)
    else:
        final = log_likelihood(params, X, table)
    return RestartSummary(restart_index, float(final), len(trace), converged, trace, params)


def fit(dataset, spec: ModelSpec, options: Optional[FitOptions] = None) -> FitResult:
    """Fit a factorial HMM by EM with random restarts.

    The restart with the highest exact log likelihood wins; ties go to
    the lowest restart index.
    """
    options = options or FitOptions()
    options.validate(spec)
    X = dataset.X if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.shape[1:] != (spec.T, spec.o):
        raise InvalidOptions(f"dataset shape {X.shape} does not match spec T={spec.T}, o={spec.o}")
    tasks = [Task(fit_restart, (X, spec, options, r)) for r in range(int(options.n_restarts))]
    restarts = execute_parallel(tasks, n_jobs=options.n_jobs)
    best = 0
    for r in restarts[1:]:
        if r.final_log_likelihood > restarts[best].final_log_likelihood:
            best = r.index
    b = restarts[best]
    return FitResult(b.params, b.trace, best, b.converged, restarts)
