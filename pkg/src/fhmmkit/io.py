"""Files in and out: datasets, strict JSON configs, atomic writes and run
manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import __version__
from .em import FitOptions
from .errors import InvalidOptions, ShapeMismatch
from .model import Dataset

FIT_KEYS = frozenset(f.name for f in fields(FitOptions))
_ARRAY_KEYS = frozenset(k for k in FIT_KEYS if k.endswith(("_init", "_fixed")))

COMMAND_KEYS: Dict[str, frozenset] = {
    "fit": FIT_KEYS | {"d", "k"},
    "cv": FIT_KEYS | {"d_grid", "k_grid", "test_size", "subsequence_size", "n_splits"},
    "bootstrap": FIT_KEYS | {"d", "k", "n_bootstrap", "subseq_len"},
    "generate": frozenset({"kind", "seed", "time_steps", "n_samples", "dt", "params", "W",
                           "barrier_energies", "detuning_energies", "temperature",
                           "sigma_white_noise", "beta", "n"}),
    "hessian": frozenset({"n_jobs"}),
    "spectrum": frozenset({"segment_length", "f_h", "f_l", "method", "background", "level", "dof",
                           "psd_segment_length", "overlap_fraction", "sample", "component"}),
}
REQUIRED_KEYS: Dict[str, frozenset] = {
    "fit": frozenset({"seed", "d", "k"}),
    "cv": frozenset({"seed", "d_grid"}),
    "bootstrap": frozenset({"seed", "d", "k", "n_bootstrap"}),
    "generate": frozenset({"seed", "kind"}),
    "hessian": frozenset(),
    "spectrum": frozenset({"segment_length", "f_h", "f_l"}),
}


def _plain(v):
    """JSON-native copy of ``v`` (arrays become nested lists)."""
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class Config:
    """Validated settings of one command.

    ``values`` only holds keys that were given; defaults stay with the
    library so a round trip through JSON is the identity.
    """

    command: str
    values: dict

    def to_json(self) -> str:
        return canonical_json(self.values)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def get(self, key, default=None):
        return self.values.get(key, default)

    def fit_options(self, **overrides) -> FitOptions:
        kw = {k: v for k, v in self.values.items() if k in FIT_KEYS}
        for k in _ARRAY_KEYS & kw.keys():
            kw[k] = np.asarray(kw[k], dtype=float)
        kw.update(overrides)
        return FitOptions(**kw)


def parse_config(doc, command: str) -> Config:
    """Check a config mapping against the keys ``command`` accepts.

    Raises
    ------
    InvalidOptions
        Unknown keys, missing required keys or a non-object document.
    """
    if command not in COMMAND_KEYS:
        raise InvalidOptions(f"unknown command {command!r}")
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise InvalidOptions(f"config must be a JSON object, got {type(doc).__name__}")
    unknown = sorted(set(doc) - COMMAND_KEYS[command])
    if unknown:
        raise InvalidOptions(f"unknown config keys for {command}: {', '.join(unknown)}")
    missing = sorted(REQUIRED_KEYS[command] - set(doc))
    if missing:
        raise InvalidOptions(f"missing config keys for {command}: {', '.join(missing)}")
    values = json.loads(canonical_json(doc))
    if "seed" in values and (isinstance(values["seed"], bool) or not isinstance(values["seed"], int)
                             or values["seed"] < 0):
        raise InvalidOptions(f"seed must be a non-negative integer, got {values['seed']!r}")
    return Config(command, values)


def load_config(path, command: str) -> Config:
    if path is None:
        return parse_config({}, command)
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise InvalidOptions(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise InvalidOptions(f"config {path} is not valid JSON: {e}") from None
    return parse_config(doc, command)


# data ----------------------------------------------------------------------

def read_csv_sample(path):
    """One sample from a CSV with header ``t,y0,...``; returns (t, y)."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise ShapeMismatch(f"cannot read {path}: {e.strerror}") from None
    if not rows:
        raise ShapeMismatch(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    o = len(header) - 1
    if o < 1 or header != ["t"] + [f"y{i}" for i in range(o)]:
        raise ShapeMismatch(f"{path}: header must be t,y0,...,y(o-1), got {','.join(header)}")
    try:
        arr = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float)
    except ValueError as e:
        raise ShapeMismatch(f"{path}: {e}") from None
    if arr.ndim != 2 or arr.shape[1] != o + 1 or len(arr) == 0:
        raise ShapeMismatch(f"{path}: ragged or empty table")
    return arr[:, 0], arr[:, 1:]


def _sample_period(t, path) -> float:
    if len(t) < 2:
        return 1.0
    steps = np.diff(t)
    if not np.allclose(steps, steps[0], rtol=1e-6, atol=0) or steps[0] <= 0:
        raise ShapeMismatch(f"{path}: time column is not evenly spaced")
    return float(steps[0])


def read_dataset(paths: Sequence) -> Dataset:
    """A JSON container ``{dt, samples}`` or one CSV file per sample."""
    paths = [Path(p) for p in paths]
    if not paths:
        raise ShapeMismatch("no data files given")
    if len(paths) == 1 and paths[0].suffix.lower() == ".json":
        try:
            doc = json.loads(paths[0].read_text())
        except OSError as e:
            raise ShapeMismatch(f"cannot read {paths[0]}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ShapeMismatch(f"{paths[0]} is not valid JSON: {e}") from None
        if not isinstance(doc, dict) or "samples" not in doc:
            raise ShapeMismatch(f"{paths[0]}: expected an object with 'samples'")
        try:
            X = np.array(doc["samples"], dtype=float)
        except (TypeError, ValueError) as e:
            raise ShapeMismatch(f"{paths[0]}: ragged samples ({e})") from None
        return Dataset(X, float(doc.get("dt", 1.0)))
    samples, dts = [], []
    for p in paths:
        t, y = read_csv_sample(p)
        samples.append(y)
        dts.append(_sample_period(t, p))
    if len({s.shape for s in samples}) != 1:
        raise ShapeMismatch("all sample files must have the same length and columns")
    if not np.allclose(dts, dts[0], rtol=1e-9):
        raise ShapeMismatch("sample files disagree on the sample period")
    return Dataset(np.stack(samples), dts[0])


def dataset_to_dict(data: Dataset) -> dict:
    return {"dt": data.dt, "samples": data.X.tolist()}


def csv_text(header: Sequence[str], columns: Iterable) -> str:
    cols = [np.asarray(c, dtype=float).ravel() for c in columns]
    lines = [",".join(header)]
    for row in zip(*cols):
        lines.append(",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def sample_csv_text(t, y) -> str:
    y = np.asarray(y, dtype=float).reshape(len(t), -1)
    return csv_text(["t"] + [f"y{i}" for i in range(y.shape[1])], [t] + [y[:, i] for i in range(y.shape[1])])


# output ----------------------------------------------------------------------

def atomic_write_text(path, text: str) -> Path:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


def file_digest(path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    except OSError as e:
        raise ShapeMismatch(f"cannot read {path}: {e.strerror}") from None
    return h.hexdigest()


@dataclass
class RunManifest:
    """What produced a set of outputs, written next to them."""

    command: str
    config_hash: str
    seed: Optional[int]
    input_digests: Dict[str, str]
    output_paths: List[str] = field(default_factory=list)
    library_version: str = __version__

    @classmethod
    def for_run(cls, config: Config, inputs: Sequence) -> "RunManifest":
        return cls(config.command, config.digest, config.get("seed"),
                   {str(p): file_digest(p) for p in inputs})

    def write(self, out_dir) -> Path:
        return write_json(Path(out_dir) / "manifest.json", asdict(self))
