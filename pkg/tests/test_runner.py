import numpy as np
import pytest

from oracles import random_params, sample_from

from fhmmkit.em import FitOptions, fit_restart
from fhmmkit.errors import TaskError
from fhmmkit.model import ModelSpec
from fhmmkit.runner import Task, execute_parallel, task_seed


def _draw(n, seed=None):
    return np.random.default_rng(seed).normal(size=n)


def _maybe_fail(i):
    if i == 3:
        raise ValueError("boom")
    return i * i


def _count(i, seed=None):
    return i


def test_empty_task_list():
    assert execute_parallel([], n_jobs=4) == []


def test_results_in_order_and_seeded():
    out = execute_parallel([Task(_draw, (3,)) for _ in range(5)], master_seed=11)
    for i, r in enumerate(out):
        np.testing.assert_array_equal(r, np.random.default_rng(task_seed(11, i)).normal(size=3))


def test_serial_and_parallel_fits_identical():
    r = np.random.default_rng(0)
    p = random_params(r, 2, 1, 2, c_scale=0.05)
    X = sample_from(p, 60, r)[0][None]
    spec = ModelSpec(60, 2, 1, 2)
    tasks = [Task(fit_restart, (X, spec, FitOptions(em_max_iter=5, seed=s), 0)) for s in range(20)]
    a = execute_parallel(tasks, n_jobs=1, master_seed=5)
    b = execute_parallel(tasks, n_jobs=8, master_seed=5)
    for x, y in zip(a, b):
        assert x.params.equals(y.params) and x.trace == y.trace


def test_full_schedule_count():
    tasks = [Task(_count, (i,)) for i in range(7 * 5 * 10)]
    out = execute_parallel(tasks, n_jobs=2, master_seed=0)
    assert out == list(range(350))


@pytest.mark.parametrize("n_jobs", [1, 3])
def test_failure_reports_index_and_partial_results(n_jobs):
    with pytest.raises(TaskError) as err:
        execute_parallel([(_maybe_fail, (i,)) for i in range(6)], n_jobs=n_jobs)
    e = err.value
    assert e.index == 3 and isinstance(e.cause, ValueError)
    assert e.results[:3] == [0, 1, 4] and e.results[3] is None and e.results[4:] == [16, 25]
