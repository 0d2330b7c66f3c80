"""Command line front end.

Every subcommand writes its outputs plus ``manifest.json`` into
``--out-dir`` and prints a one-line JSON summary on stdout. Logs and
errors go to stderr. Exit codes: 0 success, 2 configuration error,
3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .em import fit
from .errors import ConfigError, DataError, FHMMError, InvalidOptions, NumericalError, TaskError
from .hessian import compute_hessian, standard_errors
from .io import (
    RunManifest,
    atomic_write_text,
    csv_text,
    dataset_to_dict,
    load_config,
    read_dataset,
    sample_csv_text,
    write_json,
)
from .model import Dataset, ModelSpec, canonicalize_weights, params_from_dict, params_to_dict
from .noise import ThermalTLFConfig, generate_fhmm, generate_powerlaw
from .selection import bootstrap_fit, cross_validate, cv_splits
from .spectral import chi2_gaussianity, second_spectrum, welch_psd

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
log = logging.getLogger("fhmmkit")


def _load_params(ref):
    """Params from an inline document or a path to a params JSON file."""
    if isinstance(ref, dict):
        return params_from_dict(ref)
    try:
        doc = json.loads(Path(ref).read_text())
    except OSError as e:
        raise InvalidOptions(f"cannot read params {ref}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise InvalidOptions(f"params {ref} is not valid JSON: {e}") from None
    return params_from_dict(doc)


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise InvalidOptions(f"{cfg.command} needs config keys: {', '.join(missing)}")


def cmd_generate(args, cfg):
    kind = cfg.get("kind")
    seed = cfg.get("seed")
    dt = float(cfg.get("dt", 1.0))
    n_samples = int(cfg.get("n_samples", 1))
    if kind == "fhmm":
        _require(cfg, "params", "time_steps")
        t, data = generate_fhmm(_load_params(cfg.get("params")), cfg.get("time_steps"), n_samples, seed, dt=dt)
    elif kind == "tlf":
        _require(cfg, "W", "barrier_energies", "detuning_energies", "temperature", "time_steps")
        tlf = ThermalTLFConfig(cfg.get("barrier_energies"), cfg.get("detuning_energies"),
                               float(cfg.get("temperature")), float(cfg.get("sigma_white_noise", 0.0)), dt)
        t, data = tlf.generate(np.asarray(cfg.get("W"), dtype=float), cfg.get("time_steps"), n_samples, seed)
    elif kind == "powerlaw":
        _require(cfg, "beta")
        n = cfg.get("n", cfg.get("time_steps"))
        if n is None:
            raise InvalidOptions("powerlaw needs config key n (or time_steps)")
        x = generate_powerlaw(float(cfg.get("beta")), n, seed, dt)
        t, data = np.arange(len(x)) * dt, Dataset(x[:, None], dt)
    else:
        raise InvalidOptions(f"kind must be fhmm, tlf or powerlaw, got {kind!r}")
    out = Path(args.out_dir)
    if args.format == "csv":
        paths = [atomic_write_text(out / f"sample_{i}.csv", sample_csv_text(t, y)) for i, y in enumerate(data.X)]
    else:
        paths = [write_json(out / "data.json", dataset_to_dict(data))]
    return paths, {"n_samples": data.n_samples, "T": data.T, "o": data.o}


def cmd_fit(args, cfg):
    data = read_dataset(args.data)
    spec = ModelSpec(data.T, cfg.get("d"), data.o, cfg.get("k"))
    res = fit(data, spec, cfg.fit_options(verbose=args.verbose))
    out = Path(args.out_dir)
    paths = [
        write_json(out / "params.json", params_to_dict(res.params, data.T)),
        atomic_write_text(out / "trace.csv", csv_text(
            ["iteration", "score"], [np.arange(len(res.log_likelihood_trace)), res.log_likelihood_trace])),
        write_json(out / "fit.json", {
            "log_likelihood": res.log_likelihood, "best_restart_index": res.best_restart_index,
            "converged": res.converged,
            "restarts": [{"index": r.index, "final_log_likelihood": r.final_log_likelihood,
                          "n_iter": r.n_iter, "converged": r.converged} for r in res.restarts]}),
    ]
    return paths, {"log_likelihood": res.log_likelihood, "converged": res.converged,
                   "best_restart_index": res.best_restart_index}


def cmd_cv(args, cfg):
    data = read_dataset(args.data)
    plan = cv_splits(data.T, cfg.get("subsequence_size", 1 / 3), cfg.get("test_size", 0.2),
                     cfg.get("n_splits", 5))
    res = cross_validate(data, cfg.get("d_grid"), cfg.fit_options(verbose=args.verbose), plan,
                         k_grid=cfg.get("k_grid", [2]))
    doc = res.to_dict()
    return [write_json(Path(args.out_dir) / "cv.json", doc)], {"models": doc["models"], "evidence": doc["evidence"]}


def _with_nulls(a):
    return np.where(np.isnan(a), None, a).tolist()


def cmd_hessian(args, cfg):
    data = read_dataset(args.data)
    if not args.params:
        raise InvalidOptions("hessian needs --params")
    params = _load_params(args.params)
    params = params.replace(W=canonicalize_weights(params.W))
    hr = compute_hessian(params, data, n_jobs=cfg.get("n_jobs", 1))
    out = Path(args.out_dir)
    doc = hr.to_dict()
    doc["gradient"] = hr.gradient.tolist()
    doc["params"] = params_to_dict(params, data.T)
    # written before the standard errors so a singular H is still inspectable
    paths = [write_json(out / "hessian.json", doc)]
    eig = float(np.linalg.eigvalsh(-hr.H)[0])
    dW, dA, dC, dpi = standard_errors(hr, (params.d, params.o, params.k))
    paths.append(write_json(out / "standard_errors.json", {
        "W": _with_nulls(dW), "A_log": _with_nulls(dA), "C": _with_nulls(dC), "pi": _with_nulls(dpi),
        "min_information_eigenvalue": eig}))
    return paths, {"dim": hr.dim, "min_information_eigenvalue": eig}


def cmd_bootstrap(args, cfg):
    data = read_dataset(args.data)
    spec = ModelSpec(data.T, cfg.get("d"), data.o, cfg.get("k"))
    res = bootstrap_fit(data, spec, cfg.fit_options(verbose=args.verbose), cfg.get("n_bootstrap"),
                        cfg.get("subseq_len"), seed=cfg.get("seed"))
    doc = res.to_dict()
    doc["params"] = [params_to_dict(p) for p in res.params]
    return [write_json(Path(args.out_dir) / "bootstrap.json", doc)], {"n_bootstrap": len(res.params)}


def cmd_spectrum(args, cfg):
    data = read_dataset(args.data)
    y = data.X[int(cfg.get("sample", 0)), :, int(cfg.get("component", 0))]
    res = second_spectrum(y, data.dt, cfg.get("segment_length"), cfg.get("f_h"), cfg.get("f_l"),
                          method=cfg.get("method", "full"), background=cfg.get("background", "cross"))
    chi_sum, dof, reject = chi2_gaussianity(res, cfg.get("level", 0.95), cfg.get("dof"))
    f, psd = welch_psd(y, data.dt, cfg.get("psd_segment_length", cfg.get("segment_length")),
                       cfg.get("overlap_fraction", 0.5))
    out = Path(args.out_dir)
    verdict = {"chi_sum": chi_sum, "dof": dof, "reject_gaussian": reject, "level": cfg.get("level", 0.95)}
    paths = [
        atomic_write_text(out / "second_spectrum.csv", csv_text(
            ["freq", "s2", "s2_std", "s2_gauss"], [res.freqs, res.s2, res.s2_std, res.s2_gauss])),
        atomic_write_text(out / "psd.csv", csv_text(["freq", "psd"], [f, psd])),
        write_json(out / "spectrum.json", {**res.to_dict(), "chi2": verdict}),
    ]
    return paths, verdict


COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "cv": cmd_cv,
    "hessian": cmd_hessian,
    "bootstrap": cmd_bootstrap,
    "spectrum": cmd_spectrum,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fhmmkit", description="Factorial HMM noise modelling.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name != "generate":
            p.add_argument("data", nargs="+", help="one JSON container or one CSV per sample")
        p.add_argument("-c", "--config", help="JSON config file")
        p.add_argument("-o", "--out-dir", required=True)
        p.add_argument("-v", "--verbose", action="store_true", help="progress lines on stderr")
        if name == "generate":
            p.add_argument("--format", choices=("json", "csv"), default="json")
        if name == "hessian":
            p.add_argument("--params", help="params JSON written by fit")
    return parser


def _root_cause(exc):
    while isinstance(exc, TaskError) and exc.cause is not None:
        exc = exc.cause
    return exc


def _exit_code(exc) -> int:
    exc = _root_cause(exc)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return 1


def run_command(argv) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.command)
        args.verbose = bool(args.verbose or cfg.get("verbose"))
        if args.verbose:
            handler = logging.StreamHandler(sys.stderr)
            handler.setFormatter(logging.Formatter("%(message)s"))
            log.addHandler(handler)
            log.setLevel(logging.INFO)
        inputs = [args.config] if args.config else []
        inputs += list(getattr(args, "data", []) or [])
        if getattr(args, "params", None):
            inputs.append(args.params)
        manifest = RunManifest.for_run(cfg, inputs)
        paths, summary = COMMANDS[args.command](args, cfg)
        manifest.output_paths = [str(p) for p in paths]
        manifest.write(args.out_dir)
    except FHMMError as exc:
        root = _root_cause(exc)
        print(f"{type(root).__name__}: {root}", file=sys.stderr)
        return _exit_code(exc)
    except (TypeError, ValueError) as exc:
        # wrongly typed config values surface here
        print(f"InvalidOptions: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"command": args.command, **summary}, default=float))
    return EXIT_OK


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
