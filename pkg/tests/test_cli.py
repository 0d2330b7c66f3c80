import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fhmmkit.cli import run_command
from fhmmkit.errors import InvalidOptions, ShapeMismatch
from fhmmkit.io import (
    atomic_write_text,
    load_config,
    parse_config,
    read_csv_sample,
    read_dataset,
    sample_csv_text,
)
from fhmmkit.model import ModelParams, params_to_dict

TRUTH = ModelParams([[[0.0, 1.0]], [[-0.2, 0.2]]],
                    np.log([[[0.9, 0.15], [0.1, 0.85]], [[0.8, 0.1], [0.2, 0.9]]]),
                    [[0.01]], [[0.5, 0.5], [0.4, 0.6]])


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def _run(capsys, *argv):
    code = run_command([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


@pytest.fixture
def generated(tmp_path, capsys):
    cfg = _write(tmp_path / "gen.json", {"kind": "fhmm", "seed": 3, "time_steps": 200, "n_samples": 2,
                                         "params": params_to_dict(TRUTH)})
    code, summary, _ = _run(capsys, "generate", "-c", cfg, "-o", tmp_path / "data")
    assert code == 0 and summary["n_samples"] == 2
    return tmp_path / "data" / "data.json"


def test_generate_is_reproducible_and_has_manifest(tmp_path, capsys, generated):
    cfg = tmp_path / "gen.json"
    _run(capsys, "generate", "-c", cfg, "-o", tmp_path / "again")
    assert generated.read_bytes() == (tmp_path / "again" / "data.json").read_bytes()
    man = json.loads((tmp_path / "data" / "manifest.json").read_text())
    assert man["command"] == "generate" and man["seed"] == 3
    assert man["output_paths"] == [str(generated)]
    assert str(cfg) in man["input_digests"]


def test_fit_with_everything_fixed_returns_input(tmp_path, capsys, generated):
    cfg = _write(tmp_path / "fit.json", {"seed": 1, "d": 2, "k": 2, "em_max_iter": 5,
                                         "W_fixed": TRUTH.W.tolist(), "A_fixed": TRUTH.A.tolist(),
                                         "C_fixed": TRUTH.C.tolist(), "pi_fixed": TRUTH.pi.tolist()})
    code, summary, _ = _run(capsys, "fit", generated, "-c", cfg, "-o", tmp_path / "fit")
    assert code == 0
    doc = json.loads((tmp_path / "fit" / "params.json").read_text())
    assert doc["W"] == TRUTH.W.tolist() and doc["A_log"] == TRUTH.A.tolist()
    assert (tmp_path / "fit" / "trace.csv").read_text().startswith("iteration,score\n")


def test_fit_then_hessian(tmp_path, capsys, generated):
    cfg = _write(tmp_path / "fit.json", {"seed": 1, "d": 2, "k": 2, "em_max_iter": 30, "n_restarts": 2})
    assert _run(capsys, "fit", generated, "-c", cfg, "-o", tmp_path / "fit")[0] == 0
    code, summary, err = _run(capsys, "hessian", generated, "--params", tmp_path / "fit" / "params.json",
                              "-o", tmp_path / "h")
    doc = json.loads((tmp_path / "h" / "hessian.json").read_text())
    assert doc["dim"] == len(doc["index_map"]) == 10
    assert code in (0, 4)
    if code == 4:
        assert err.startswith("SingularInformation")
    else:
        se = json.loads((tmp_path / "h" / "standard_errors.json").read_text())
        assert se["W"][1][0][1] is None


def test_cv_fold_records(tmp_path, capsys, generated):
    cfg = _write(tmp_path / "cv.json", {"seed": 2, "d_grid": [1, 2], "n_splits": 2, "subsequence_size": 0.5,
                                        "test_size": 0.25, "em_max_iter": 10})
    code, summary, _ = _run(capsys, "cv", generated, "-c", cfg, "-o", tmp_path / "cv")
    assert code == 0
    doc = json.loads((tmp_path / "cv" / "cv.json").read_text())
    assert len(doc["folds"]) == 4 and len(summary["models"]) == 2


def test_bootstrap_command(tmp_path, capsys, generated):
    cfg = _write(tmp_path / "b.json", {"seed": 2, "d": 2, "k": 2, "n_bootstrap": 2, "subseq_len": 100,
                                       "em_max_iter": 5})
    code, summary, _ = _run(capsys, "bootstrap", generated, "-c", cfg, "-o", tmp_path / "b")
    assert code == 0 and summary["n_bootstrap"] == 2


def test_spectrum_and_csv_data(tmp_path, capsys):
    gen = _write(tmp_path / "g.json", {"kind": "powerlaw", "seed": 1, "beta": 1.0, "n": 20000})
    assert _run(capsys, "generate", "-c", gen, "-o", tmp_path / "d", "--format", "csv")[0] == 0
    cfg = _write(tmp_path / "s.json", {"segment_length": 200, "f_h": 0.3, "f_l": 0.05})
    code, summary, _ = _run(capsys, "spectrum", tmp_path / "d" / "sample_0.csv", "-c", cfg, "-o", tmp_path / "s")
    assert code == 0 and set(summary) >= {"chi_sum", "dof", "reject_gaussian"}
    head = (tmp_path / "s" / "second_spectrum.csv").read_text().splitlines()[0]
    assert head == "freq,s2,s2_std,s2_gauss"


def test_exit_codes(tmp_path, capsys, generated):
    bad_key = _write(tmp_path / "bad.json", {"seed": 1, "d": 2, "k": 2, "em_maxiter": 3})
    code, _, err = _run(capsys, "fit", generated, "-c", bad_key, "-o", tmp_path / "x")
    assert code == 2 and "em_maxiter" in err
    no_seed = _write(tmp_path / "ns.json", {"d": 2, "k": 2})
    assert _run(capsys, "fit", generated, "-c", no_seed, "-o", tmp_path / "x")[0] == 2
    (tmp_path / "bad.csv").write_text("time,y0\n0,1\n")
    ok = _write(tmp_path / "ok.json", {"seed": 1, "d": 1, "k": 2})
    code, _, err = _run(capsys, "fit", tmp_path / "bad.csv", "-c", ok, "-o", tmp_path / "x")
    assert code == 3 and err.startswith("ShapeMismatch")
    spec = _write(tmp_path / "sp.json", {"segment_length": 8, "f_h": 0.3, "f_l": 0.05})
    code, _, err = _run(capsys, "spectrum", generated, "-c", spec, "-o", tmp_path / "x")
    assert code == 2 and err.startswith("BandTooNarrow")
    code, _, err = _run(capsys, "fit", tmp_path / "nowhere.json", "-c", ok, "-o", tmp_path / "x")
    assert code == 3 and err.startswith("ShapeMismatch")
    singular = dict(params_to_dict(TRUTH), W=[[[0.0, 0.0]], [[0.0, 0.0]]])
    code, _, err = _run(capsys, "hessian", generated, "--params", _write(tmp_path / "p.json", singular),
                        "-o", tmp_path / "x")
    assert code == 4 and err.startswith("SingularInformation")


def test_verbose_goes_to_stderr(tmp_path, capsys, generated):
    cfg = _write(tmp_path / "fit.json", {"seed": 1, "d": 1, "k": 2, "em_max_iter": 3, "verbose": True})
    code, summary, err = _run(capsys, "fit", generated, "-c", cfg, "-o", tmp_path / "f")
    assert code == 0 and "iter" in err and summary["command"] == "fit"


_scalars = (st.none() | st.booleans() | st.integers(-10 ** 6, 10 ** 6)
            | st.floats(allow_nan=False, allow_infinity=False) | st.text(max_size=5))
_values = _scalars | st.lists(_scalars, max_size=3)


@given(st.dictionaries(st.sampled_from(sorted({"em_max_iter", "method", "n_restarts", "W_init", "stochastic_lr",
                                               "d", "k", "verbose", "zero_probability"})), _values))
def test_config_round_trip(doc):
    doc = dict(doc, seed=7, d=2, k=2)
    cfg = parse_config(doc, "fit")
    again = parse_config(json.loads(cfg.to_json()), "fit")
    assert again == cfg and again.digest == cfg.digest


def test_config_file_errors(tmp_path):
    with pytest.raises(InvalidOptions):
        load_config(tmp_path / "missing.json", "fit")
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(InvalidOptions):
        load_config(tmp_path / "x.json", "fit")
    with pytest.raises(InvalidOptions):
        parse_config([1, 2], "fit")
    with pytest.raises(InvalidOptions):
        parse_config({"seed": -1, "d": 1, "k": 2}, "fit")


def test_csv_round_trip_and_multi_file_dataset(tmp_path):
    t = np.arange(5) * 0.5
    y = np.arange(10.0).reshape(5, 2) / 3
    for i in range(2):
        atomic_write_text(tmp_path / f"s{i}.csv", sample_csv_text(t, y + i))
    t2, y2 = read_csv_sample(tmp_path / "s0.csv")
    np.testing.assert_array_equal(y2, y)
    data = read_dataset([tmp_path / "s0.csv", tmp_path / "s1.csv"])
    assert data.X.shape == (2, 5, 2) and data.dt == 0.5
    atomic_write_text(tmp_path / "short.csv", sample_csv_text(t[:3], y[:3]))
    with pytest.raises(ShapeMismatch):
        read_dataset([tmp_path / "s0.csv", tmp_path / "short.csv"])
    assert not [p for p in tmp_path.iterdir() if p.name.endswith(".tmp")]
