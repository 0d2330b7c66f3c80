import json
from itertools import product

import numpy as np
import pytest

from fhmmkit.errors import (
    ConfigurationOverflow,
    NonPositiveDefiniteCovariance,
    NonStochasticColumn,
    ShapeMismatch,
)
from fhmmkit.model import (
    Dataset,
    ModelParams,
    ModelSpec,
    canonicalize_weights,
    count_dim,
    enumerate_realizations,
    floor_probabilities,
    params_from_dict,
    params_to_dict,
    random_init,
    validate_model,
)


def _two_state(pi=(0.5, 0.5), C=((1.0,),)):
    A = np.log(np.array([[[0.9, 0.2], [0.1, 0.8]]]))
    return ModelParams(np.zeros((1, len(C), 2)), A, C, [list(pi)])


def test_validate_accepts_valid_model():
    validate_model(_two_state(), ModelSpec(5, 1, 1, 2))


def test_validate_rejects_bad_pi():
    with pytest.raises(NonStochasticColumn):
        validate_model(_two_state(pi=(0.6, 0.6)), ModelSpec(5, 1, 1, 2))


def test_validate_rejects_indefinite_covariance():
    p = _two_state(C=((1.0, 2.0), (2.0, 1.0)))
    with pytest.raises(NonPositiveDefiniteCovariance):
        validate_model(p, ModelSpec(5, 1, 2, 2))


def test_validate_rejects_shape_and_columns():
    with pytest.raises(ShapeMismatch):
        validate_model(_two_state(), ModelSpec(5, 2, 1, 2))
    bad = _two_state().replace(A=np.log(np.array([[[0.9, 0.5], [0.2, 0.5]]])))
    with pytest.raises(NonStochasticColumn):
        validate_model(bad, ModelSpec(5, 1, 1, 2))


@pytest.mark.parametrize("d,o,k,expected", [(2, 1, 2, 10), (1, 1, 2, 6), (1, 1, 1, 2)])
def test_count_dim_values(d, o, k, expected):
    assert count_dim(ModelSpec(10, d, o, k)) == expected


def test_count_dim_monotone():
    for d, o, k in product(range(1, 5), range(1, 4), range(2, 5)):
        base = count_dim(ModelSpec(1, d, o, k))
        assert count_dim(ModelSpec(1, d + 1, o, k)) > base
        assert count_dim(ModelSpec(1, d, o + 1, k)) > base
        assert count_dim(ModelSpec(1, d, o, k + 1)) > base


def test_canonicalize_example():
    W = np.array([[[1.0, 2.0]], [[3.0, 5.0]]])
    out = canonicalize_weights(W)
    np.testing.assert_array_equal(out, [[[5.0, 6.0]], [[-1.0, 1.0]]])
    for a, b in product(range(2), range(2)):
        assert W[0, 0, a] + W[1, 0, b] == pytest.approx(out[0, 0, a] + out[1, 0, b], abs=1e-12)


def test_canonicalize_idempotent_and_preserves_means(rng):
    W = rng.normal(size=(3, 2, 3))
    once = canonicalize_weights(W)
    np.testing.assert_allclose(canonicalize_weights(once), once, atol=1e-12)
    np.testing.assert_array_equal(canonicalize_weights(np.zeros((2, 1, 2))), np.zeros((2, 1, 2)))
    for s in product(range(3), repeat=3):
        before = sum(W[i][:, s[i]] for i in range(3))
        after = sum(once[i][:, s[i]] for i in range(3))
        np.testing.assert_allclose(before, after, atol=1e-12)


def test_random_init_deterministic_and_valid():
    spec = ModelSpec(20, 3, 2, 3)
    a, b = random_init(spec, 7, 2.0), random_init(spec, 7, 2.0)
    assert a.equals(b)
    validate_model(a, spec)
    assert np.all(np.abs(a.W) <= 2.0)
    assert not np.array_equal(random_init(spec, 0).W, random_init(spec, 1).W)
    np.testing.assert_array_equal(a.C, np.eye(2))


def test_random_init_uses_data_variance(rng):
    X = rng.normal(size=(2, 50, 2)) * np.array([1.0, 3.0])
    p = random_init(ModelSpec(50, 1, 2, 2), 3, data=X)
    np.testing.assert_allclose(np.diag(p.C), X.reshape(-1, 2).var(axis=0))
    assert p.C[0, 1] == 0.0


def test_realizations_small_tables():
    t = enumerate_realizations(ModelSpec(3, 2, 1, 2))
    np.testing.assert_array_equal(t.realizations, [[0, 0, 1, 1], [0, 1, 0, 1]])
    assert t.k_contrib[(1, 1)] == [1, 3]
    np.testing.assert_array_equal(enumerate_realizations(ModelSpec(3, 1, 1, 3)).realizations, [[0, 1, 2]])


def test_realizations_round_trip_and_partition():
    t = enumerate_realizations(ModelSpec(1, 3, 1, 3))
    for r in range(27):
        assert t.index_of(t.realizations[:, r]) == r
    for i in range(3):
        merged = sorted(sum((t.k_contrib[(i, j)] for j in range(3)), []))
        assert merged == list(range(27))


def test_configuration_overflow():
    with pytest.raises(ConfigurationOverflow):
        ModelSpec(1, 70, 1, 2)


def test_floor_probabilities():
    p = floor_probabilities(np.array([0.0, 1.0]), 1e-3)
    assert p.sum() == pytest.approx(1.0)
    assert p[0] > 0


def test_params_json_round_trip():
    p = random_init(ModelSpec(10, 2, 2, 3), 5)
    doc = json.loads(json.dumps(params_to_dict(p, 10)))
    assert doc["format_version"] == "1"
    assert set(doc) == {"format_version", "spec", "W", "A_log", "C", "pi"}
    assert params_from_dict(doc).equals(p)


def test_dataset_rejects_nonfinite():
    with pytest.raises(ShapeMismatch):
        Dataset(np.array([[[np.nan]]]))
    assert Dataset(np.zeros((4, 2))).X.shape == (1, 4, 2)
