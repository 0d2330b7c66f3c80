"""Deterministic parallel execution of independent tasks.

Results come back in task order and every task can receive its own RNG
seed derived from ``(master_seed, index)``, so the output never depends
on ``n_jobs`` or on how the scheduler interleaves work.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from .errors import TaskError


@dataclass
class Task:
    """A picklable call ``func(*args, **kwargs)``."""

    func: Callable
    args: tuple = ()
    kwargs: dict = field(default_factory=dict)


def task_seed(master_seed, index: int) -> np.random.SeedSequence:
    """Seed stream of task ``index`` under ``master_seed``."""
    return np.random.SeedSequence([int(master_seed), int(index)])


def _as_task(t) -> Task:
    if isinstance(t, Task):
        return t
    if callable(t):
        return Task(t)
    func, *rest = t
    args = rest[0] if rest else ()
    kwargs = rest[1] if len(rest) > 1 else {}
    return Task(func, tuple(args), dict(kwargs))


def _run_one(task: Task, seed):
    # one BLAS thread per task keeps floating-point reductions identical
    # between serial and parallel runs
    with threadpool_limits(limits=1):
        try:
            kwargs = dict(task.kwargs)
            if seed is not None:
                kwargs["seed"] = seed
            return True, task.func(*task.args, **kwargs)
        except Exception as exc:  # reported with its index by the caller
            return False, exc


def resolve_n_jobs(n_jobs) -> int:
    n_jobs = int(n_jobs)
    if n_jobs == -1:
        return os.cpu_count() or 1
    if n_jobs < 1:
        raise ValueError(f"n_jobs must be >= 1 or -1, got {n_jobs}")
    return n_jobs


def execute_parallel(tasks: Sequence[Any], n_jobs: int = 1, master_seed=None) -> list:
    """Run independent tasks and return their results in task order.

    Parameters
    ----------
    tasks : sequence
        Each entry is a :class:`Task`, a zero-argument callable or a
        ``(func, args[, kwargs])`` tuple.
    n_jobs : int
        Worker processes; ``-1`` uses every core.
    master_seed : int, optional
        When given, task ``i`` is called with an extra keyword
        ``seed=task_seed(master_seed, i)``.

    Raises
    ------
    TaskError
        If any task raises. ``index`` is the first failing task and
        ``results`` holds every completed result (``None`` elsewhere).
    """
    tasks = [_as_task(t) for t in tasks]
    if not tasks:
        return []
    seeds = [None if master_seed is None else task_seed(master_seed, i) for i in range(len(tasks))]
    n_jobs = min(resolve_n_jobs(n_jobs), len(tasks))
    if n_jobs == 1:
        outcomes = [_run_one(t, s) for t, s in zip(tasks, seeds)]
    else:
        outcomes = Parallel(n_jobs=n_jobs, backend="loky")(
            delayed(_run_one)(t, s) for t, s in zip(tasks, seeds))
    results = [r if ok else None for ok, r in outcomes]
    for i, (ok, r) in enumerate(outcomes):
        if not ok:
            raise TaskError(i, results, r)
    return results
