"""Model selection: sliding-window cross validation, evidence ratios and
bootstrap confidence intervals."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations
from math import factorial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .em import FitOptions, fit
from .errors import DegenerateComparison, InfeasiblePlan, InvalidOptions
from .exact import log_likelihood
from .model import (
    Dataset,
    ModelParams,
    ModelSpec,
    canonicalize_weights,
    count_dim,
    enumerate_realizations,
)
from .runner import Task, execute_parallel
from .viterbi import viterbi_decode

Fold = Tuple[int, int, int, int]
QUANTILES = (2.5, 50.0, 97.5)
# chain-by-state permutation candidates we are willing to enumerate
MAX_ALIGNMENTS = 10 ** 6


@dataclass(frozen=True)
class CVPlan:
    """Sliding train/test windows.

    Each fold is ``(train_start, train_end, test_start, test_end)`` with
    half-open ranges; the test window starts where training stops.
    """

    subsequence_size: float
    test_size: float
    n_splits: int
    folds: Tuple[Fold, ...]

    @property
    def window(self) -> int:
        a, _, _, b = self.folds[0]
        return b - a


def cv_splits(T_total: int, subsequence_size: float = 1 / 3, test_size: float = 0.2,
              n_splits: int = 5) -> CVPlan:
    """Lay out ``n_splits`` evenly spaced windows over ``T_total`` steps.

    Raises
    ------
    InfeasiblePlan
        If a window is shorter than 4 steps, longer than the data, or
        leaves an empty train or test part.
    """
    if not 0 < subsequence_size <= 1 or not 0 < test_size < 1:
        raise InfeasiblePlan(f"fractions must lie in (0, 1], got subsequence_size={subsequence_size}, "
                             f"test_size={test_size}")
    if int(n_splits) != n_splits or n_splits < 1:
        raise InfeasiblePlan(f"n_splits must be a positive integer, got {n_splits!r}")
    n_splits = int(n_splits)
    w = int(np.floor(subsequence_size * T_total))
    n_test = int(np.floor(test_size * w))
    n_train = w - n_test
    if w < 4 or w > T_total:
        raise InfeasiblePlan(f"window of {w} steps does not fit {T_total} (need at least 4)")
    if n_test < 1 or n_train < 1:
        raise InfeasiblePlan(f"window of {w} splits into {n_train} train / {n_test} test steps")
    span = T_total - w
    if n_splits == 1:
        offsets = [0]
    else:
        offsets = [min(span, (j * span) // (n_splits - 1)) for j in range(n_splits)]
    folds = tuple((s, s + n_train, s + n_train, s + w) for s in offsets)
    for a, b, c, e in folds:
        assert a < b == c < e and not set(range(a, b)) & set(range(c, e))
    return CVPlan(float(subsequence_size), float(test_size), n_splits, folds)


@dataclass(frozen=True)
class EvidenceVerdict:
    e: float
    classification: str


def classify_evidence(e: float) -> str:
    if e > 2:
        return "strong"
    if e > 1:
        return "weak"
    return "none"


def evidence_ratio(lnL_i: float, N_i: int, lnL_j: float, N_j: int) -> EvidenceVerdict:
    """``e = 2 (lnL_i - lnL_j) / (N_i - N_j)`` with its strength band.

    Model i is normally the larger one; e > 2 is strong evidence that it
    is better, 1 < e <= 2 weak, otherwise none.
    """
    if N_i == N_j:
        raise DegenerateComparison(f"both models have {N_i} parameters")
    e = 2.0 * (lnL_i - lnL_j) / (N_i - N_j)
    return EvidenceVerdict(float(e), classify_evidence(e))


def viterbi_initial_distribution(params: ModelParams, train, zero_probability: float,
                                 table=None) -> np.ndarray:
    """Floor-smoothed one-hot of the Viterbi terminal state of ``train``."""
    states, _ = viterbi_decode(params, train, table)
    k = params.k
    pi = np.full((params.d, k), zero_probability)
    pi[np.arange(params.d), states[-1].argmax(axis=1)] = 1.0 - (k - 1) * zero_probability
    return pi


def score_fold(params: ModelParams, dataset: Dataset, fold: Fold, zero_probability: float) -> float:
    """Validation log likelihood of one fold under fitted ``params``.

    Each sample's test window starts from the state its own training
    window ends in.
    """
    a, b, c, e = fold
    table = enumerate_realizations(params.spec(b - a))
    total = 0.0
    for y in dataset.X:
        pi = viterbi_initial_distribution(params, y[a:b], zero_probability, table)
        total += log_likelihood(params.replace(pi=pi), y[c:e])
    return float(total)


def _fold_task(dataset: Dataset, spec: ModelSpec, options: FitOptions, fold: Fold) -> dict:
    a, b, _, _ = fold
    res = fit(dataset.window(a, b), spec.with_T(b - a), options)
    score = score_fold(res.params, dataset, fold, options.zero_probability)
    return {"score": score, "train_log_likelihood": res.log_likelihood, "params": res.params}


def _fold_seed(seed, model_index, fold_index) -> int:
    return int(np.random.SeedSequence([int(seed), model_index, fold_index]).generate_state(1)[0])


@dataclass
class CVResult:
    """Per-fold validation scores and per-model summaries."""

    plan: CVPlan
    models: List[Tuple[int, int]]  # (d, k)
    n_params: List[int]
    scores: np.ndarray  # (n_models, n_splits)
    fold_params: List[List[ModelParams]] = field(repr=False, default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        return self.scores.mean(axis=1)

    @property
    def stderr(self) -> np.ndarray:
        n = self.scores.shape[1]
        if n < 2:
            return np.zeros(len(self.models))
        return self.scores.std(axis=1, ddof=1) / np.sqrt(n)

    def evidence_table(self) -> List[dict]:
        """Evidence of each model against its predecessor in the grid."""
        out = []
        for j in range(1, len(self.models)):
            try:
                v = evidence_ratio(self.mean[j], self.n_params[j], self.mean[j - 1], self.n_params[j - 1])
            except DegenerateComparison:
                continue
            out.append({"larger": list(self.models[j]), "smaller": list(self.models[j - 1]),
                        "e": v.e, "classification": v.classification})
        return out

    def to_dict(self) -> dict:
        folds = []
        for m, (d, k) in enumerate(self.models):
            for f, fold in enumerate(self.plan.folds):
                folds.append({"d": d, "k": k, "fold": f, "window": list(fold),
                              "score": float(self.scores[m, f])})
        return {
            "plan": {"subsequence_size": self.plan.subsequence_size, "test_size": self.plan.test_size,
                     "n_splits": self.plan.n_splits, "folds": [list(f) for f in self.plan.folds]},
            "folds": folds,
            "models": [{"d": d, "k": k, "n_params": n, "mean": float(mu), "stderr": float(se)}
                       for (d, k), n, mu, se in zip(self.models, self.n_params, self.mean, self.stderr)],
            "evidence": self.evidence_table(),
        }


def cross_validate(dataset: Dataset, d_grid: Sequence[int], options: Optional[FitOptions] = None,
                   plan: Optional[CVPlan] = None, k_grid: Sequence[int] = (2,),
                   n_jobs: Optional[int] = None) -> CVResult:
    """Fit every (d, k) model on each training window and score the test
    window that follows it.

    Folds are independent: each gets its own seed derived from
    ``options.seed``, the model position in the grid and the fold index.
    """
    options = options or FitOptions()
    if plan is None:
        plan = cv_splits(dataset.T)
    if plan.folds[-1][3] > dataset.T:
        raise InfeasiblePlan(f"plan needs {plan.folds[-1][3]} steps, data has {dataset.T}")
    n_jobs = options.n_jobs if n_jobs is None else n_jobs
    models = [(int(d), int(k)) for k in k_grid for d in d_grid]
    tasks = []
    for m, (d, k) in enumerate(models):
        spec = ModelSpec(plan.window, d, dataset.o, k)
        for f, fold in enumerate(plan.folds):
            opts = options.replace(seed=_fold_seed(options.seed, m, f), n_jobs=1)
            tasks.append(Task(_fold_task, (dataset, spec, opts, fold)))
    out = execute_parallel(tasks, n_jobs=n_jobs)
    nf = len(plan.folds)
    scores = np.array([r["score"] for r in out]).reshape(len(models), nf)
    params = [[out[m * nf + f]["params"] for f in range(nf)] for m in range(len(models))]
    n_params = [count_dim(ModelSpec(plan.window, d, dataset.o, k)) for d, k in models]
    return CVResult(plan, models, n_params, scores, params)


# bootstrap -----------------------------------------------------------------

def permute_model(params: ModelParams, chain_order, state_orders) -> ModelParams:
    """Relabel chains (``chain_order[new] = old``) and states within each
    chain (``state_orders[new_chain][new] = old``), then canonicalize W."""
    W = np.array(params.W)[list(chain_order)]
    A = np.array(params.A)[list(chain_order)]
    pi = np.array(params.pi)[list(chain_order)]
    for i, s in enumerate(state_orders):
        s = list(s)
        W[i] = W[i][:, s]
        A[i] = A[i][np.ix_(s, s)]
        pi[i] = pi[i][s]
    return ModelParams(canonicalize_weights(W), A, params.C, pi)


def align_to_reference(params: ModelParams, reference: ModelParams) -> ModelParams:
    """Chain and state relabelling of ``params`` closest to ``reference``.

    Distance is the squared difference of canonical W. Chain orders are
    enumerated exhaustively; given an order, the best state labelling is
    chosen per chain since the canonical distance separates over chains.
    """
    d, k = params.d, params.k
    if factorial(d) * d * factorial(k) > MAX_ALIGNMENTS:
        raise InvalidOptions(f"alignment of d={d}, k={k} would enumerate too many labellings")
    ref = canonicalize_weights(reference.W)
    state_perms = list(permutations(range(k)))
    best, best_cost = None, np.inf
    for order in permutations(range(d)):
        Wc = canonicalize_weights(np.array(params.W)[list(order)])
        cost, chosen = 0.0, []
        for i in range(d):
            costs = [np.sum((Wc[i][:, list(s)] - ref[i]) ** 2) for s in state_perms]
            j = int(np.argmin(costs))
            cost += costs[j]
            chosen.append(state_perms[j])
        if cost < best_cost:
            best, best_cost = (order, chosen), cost
    return permute_model(params, *best)


@dataclass
class BootstrapResult:
    params: List[ModelParams]
    starts: List[int]
    quantiles: Dict[str, np.ndarray]  # block -> (3, *shape)

    def to_dict(self) -> dict:
        table = []
        for block, q in self.quantiles.items():
            for ix in np.ndindex(q.shape[1:]):
                table.append({"block": block, "index": list(ix),
                              **{f"q{p:g}": float(q[(j,) + ix]) for j, p in enumerate(QUANTILES)}})
        return {"starts": self.starts, "quantiles": table,
                "quantile_levels": list(QUANTILES), "n_bootstrap": len(self.params)}


def ensemble_quantiles(ensemble: Sequence[ModelParams]) -> Dict[str, np.ndarray]:
    return {b: np.percentile(np.stack([getattr(p, b) for p in ensemble]), QUANTILES, axis=0)
            for b in ("W", "A", "C", "pi")}


def _bootstrap_task(dataset: Dataset, spec: ModelSpec, options: FitOptions, start: int):
    return fit(dataset.window(start, start + spec.T), spec, options).params


def bootstrap_fit(dataset: Dataset, spec: ModelSpec, options: Optional[FitOptions] = None,
                  n_bootstrap: int = 100, subseq_len: Optional[int] = None, seed=0,
                  reference: Optional[ModelParams] = None, n_jobs: Optional[int] = None
                  ) -> BootstrapResult:
    """Fit randomly placed contiguous subsequences and summarize the spread.

    ``seed`` places the windows; draw ``j`` fits with ``options.seed + j``
    so draw 0 reproduces a plain :func:`fit` on its window. Every fit is
    aligned to ``reference`` (default: draw 0) before quantiles are taken.
    """
    options = options or FitOptions()
    T = dataset.T
    L = T if subseq_len is None else int(subseq_len)
    if not 1 <= L <= T:
        raise InvalidOptions(f"subseq_len must lie in [1, {T}], got {subseq_len}")
    if int(n_bootstrap) != n_bootstrap or n_bootstrap < 1:
        raise InvalidOptions(f"n_bootstrap must be a positive integer, got {n_bootstrap!r}")
    rng = np.random.default_rng(seed)
    starts = [int(s) for s in rng.integers(0, T - L + 1, size=int(n_bootstrap))]
    sub = spec.with_T(L)
    n_jobs = options.n_jobs if n_jobs is None else n_jobs
    tasks = [Task(_bootstrap_task, (dataset, sub, options.replace(seed=int(options.seed) + j, n_jobs=1), s))
             for j, s in enumerate(starts)]
    fits = execute_parallel(tasks, n_jobs=n_jobs)
    ref = fits[0] if reference is None else reference
    aligned = [align_to_reference(p, ref) for p in fits]
    return BootstrapResult(aligned, starts, ensemble_quantiles(aligned))
