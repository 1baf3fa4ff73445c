"""Command-line front door: ``mbsma simulate | fit | predict | weights | evaluate``.

Exit codes: 0 success, 2 configuration error, 3 data or identifiability
error, 4 capability error, 5 numerical failure.  All randomness flows from
``--seed``.  Every output directory receives one ``manifest.json``; wall-clock
times live only there, so all other outputs are byte-identical across runs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CAPABILITY, EXIT_NUMERICAL = 0, 2, 3, 4, 5
log = logging.getLogger("mbsma")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _files(path) -> list[str]:
    if os.path.isdir(path):
        return sorted(os.path.join(d, f) for d, _, fs in os.walk(path) for f in fs if f != "manifest.json")
    return [path] if os.path.exists(path) else []


def config_hash(inputs, settings: dict) -> str:
    """Hash of the input file contents plus every setting that changes results."""
    h = hashlib.sha256()
    for p in inputs:
        for f in _files(p):
            h.update(os.path.relpath(f, p if os.path.isdir(p) else os.path.dirname(p)).encode())
            h.update(_sha256(f).encode())
    h.update(json.dumps(settings, sort_keys=True, default=str).encode())
    return h.hexdigest()


def write_manifest(directory, command: str, inputs, outputs, settings: dict, started: float,
                   extra: dict | None = None, name: str = "manifest.json") -> str:
    import scipy

    finished = time.time()
    man = {
        "command": command,
        "argv": sys.argv[1:],
        "config_hash": config_hash(inputs, settings),
        "settings": settings,
        "seeds": {"seed": settings.get("seed")},
        "versions": {"mbsma": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "inputs": [{"path": os.path.abspath(p), "files": {os.path.basename(f): _sha256(f) for f in _files(p)}}
                   for p in inputs],
        "outputs": [{"path": os.path.relpath(p, directory), "sha256": _sha256(p)} for p in sorted(outputs)],
        "wall_clock": {
            "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "finished": datetime.fromtimestamp(finished, timezone.utc).isoformat(),
            "seconds": finished - started,
        },
    }
    if extra:
        man.update(extra)
    path = os.path.join(directory, name)
    with open(path, "w") as fh:
        json.dump(man, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _read_json(path, what: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read {what}: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"malformed {what} JSON: {exc}") from None


def _load_dataset(path):
    from .dataset import read_dataset
    return read_dataset(path)


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    from .simulation import ScenarioConfig, generate_dataset, replicate_config, scenario, write_simulation

    started = time.time()
    d = _read_json(args.config, "scenario config")
    if not isinstance(d, dict):
        raise CliError(EXIT_CONFIG, "scenario config must be a JSON object")
    d = dict(d)
    reps = int(d.pop("replicates", d.pop("replicate", 1)) if args.replicates is None else args.replicates)
    if reps < 1:
        raise CliError(EXIT_CONFIG, "replicates must be >= 1")
    if args.seed is not None:
        d["seed"] = args.seed
    if "scenario" in d:
        name = d.pop("scenario")
        cfg = scenario(name, **d)
    else:
        cfg = ScenarioConfig.from_dict(d)
    os.makedirs(args.out, exist_ok=True)
    settings = {"seed": cfg.seed, "replicates": reps}
    outputs = []
    for r in range(reps):
        rc = cfg if reps == 1 else replicate_config(cfg, r)
        target = args.out if reps == 1 else os.path.join(args.out, f"replicate_{r + 1:03d}")
        os.makedirs(target, exist_ok=True)
        t0 = time.time()
        sim = generate_dataset(rc)
        write_simulation(sim, target)
        files = [os.path.join(target, f) for f in ("longitudinal.csv", "survival.csv", "markers.json",
                                                     "true_effects.csv", "scenario.json")]
        if reps > 1:
            write_manifest(target, "simulate", [args.config], files, dict(settings, replicate=r + 1, seed=rc.seed), t0)
        outputs += files
        log.info("replicate %d: %d subjects, %d events", r + 1, sim.dataset.n_subjects, int(sim.dataset.event.sum()))
    write_manifest(args.out, "simulate", [args.config], outputs, settings, started)
    return EXIT_OK


def _spec_from_args(args, dataset):
    from .joint_model import ModelSpec

    d = _read_json(args.spec, "model spec")
    if not isinstance(d, dict) or "marker_ids" not in d:
        raise CliError(EXIT_CONFIG, "model spec must be a JSON object with marker_ids")
    if args.knots is not None:
        d["n_pieces"] = args.knots
        d["knots"] = None
    try:
        spec = ModelSpec.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid model spec: {exc}") from None
    return spec.resolve(dataset)


def cmd_fit(args) -> int:
    from .joint_model import FitOptions, fit

    started = time.time()
    ds = _load_dataset(args.data)
    spec = _spec_from_args(args, ds)
    f = fit(ds, spec, FitOptions(quad_points=args.quad_points))
    to_file = args.out.endswith(".json")
    out = args.out if to_file else os.path.join(args.out, "fitted_model.json")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    f.save(out)
    # several models may share a directory: their manifests are named after them
    name = os.path.basename(out)[:-5] + ".manifest.json" if to_file else "manifest.json"
    write_manifest(os.path.dirname(os.path.abspath(out)), "fit", [args.data, args.spec], [out],
                   {"quad_points": args.quad_points, "knots": args.knots, "seed": None}, started, name=name)
    log.info("%s: log-likelihood %.6f after %d iterations", f.model_id, f.log_likelihood, f.iterations)
    if not f.converged:
        raise CliError(EXIT_NUMERICAL, f"fit did not converge ({f.message}); model written to {out}")
    return EXIT_OK


def _load_models(paths):
    from .joint_model import FittedJointModel

    out = []
    for p in paths:
        d = _read_json(p, "fitted model")
        out.append(FittedJointModel.from_dict(d))
    return out


def cmd_predict(args) -> int:
    from .dataset import histories_at
    from .prediction import PredictionQuery, predict_risks, write_predictions

    started = time.time()
    (model,) = _load_models([args.model])
    ds = _load_dataset(args.data)
    q = PredictionQuery(args.landmark, args.window, args.mc_draws, args.seed, args.n_mh)
    preds = predict_risks(model, histories_at(ds, args.landmark), q)[0]
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "predictions.csv")
    write_predictions(out, preds)
    write_manifest(args.out, "predict", [args.model, args.data], [out],
                   {"seed": args.seed, "mc_draws": args.mc_draws, "n_mh": args.n_mh,
                    "landmark": args.landmark, "window": args.window}, started)
    return EXIT_OK


def cmd_weights(args) -> int:
    from .averaging import build_prediction_matrix, ma_standard_errors, solve_weights, write_ma_predictions, write_weights
    from .metrics import ipcw_frame
    from .prediction import PredictionQuery

    started = time.time()
    models = _load_models(args.models)
    ds = _load_dataset(args.data)
    q = PredictionQuery(args.landmark, args.window, args.mc_draws, args.seed, args.n_mh)
    mode = "drop" if args.drop_unconverged else "refuse"
    frame = ipcw_frame(ds, args.landmark, args.window)
    mat = build_prediction_matrix(models, ds, args.landmark, args.window, q, on_unconverged=mode)
    sol = solve_weights(mat, frame)
    os.makedirs(args.out, exist_ok=True)
    outs = [os.path.join(args.out, "weights.json"), os.path.join(args.out, "ma_predictions.csv")]
    write_weights(outs[0], [(args.landmark, args.window, sol)])
    target = ds if args.apply is None else _load_dataset(args.apply)
    tmat = mat if args.apply is None else build_prediction_matrix(models, target, args.landmark, args.window, q,
                                                                   on_unconverged=mode)
    if tmat.model_ids != mat.model_ids:
        raise CliError(EXIT_NUMERICAL, "candidate models differ between weight and target datasets")
    write_ma_predictions(outs[1], [(args.landmark, args.window, ma_standard_errors(tmat, sol))])
    inputs = [args.data, *args.models] + ([args.apply] if args.apply else [])
    write_manifest(args.out, "weights", inputs, outs,
                   {"seed": args.seed, "mc_draws": args.mc_draws, "n_mh": args.n_mh,
                    "landmark": args.landmark, "window": args.window}, started)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .harness import ExperimentPlan, run_experiment, write_report

    started = time.time()
    plan = ExperimentPlan.load(args.plan)
    over = {k: v for k, v in (("seed", args.seed), ("mc_draws", args.mc_draws), ("n_pieces", args.knots),
                              ("quad_points", args.quad_points)) if v is not None}
    if over:
        d = plan.to_dict()
        d.update(over)
        plan = ExperimentPlan.from_dict(d, base_dir=plan.base_dir)
    report = run_experiment(plan, jobs=args.jobs, log=log.info)
    paths = write_report(report, args.out)
    failed = sum(c["status"] == "failed" for c in report.cells)
    write_manifest(args.out, "evaluate", [args.plan], paths, dict(plan.to_dict(), jobs=None), started,
                   extra={"timings": report.timings, "plan_hash": plan.digest(), "failed_cells": failed})
    if failed:
        log.warning("%d cell(s) failed; see report.json", failed)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mbsma", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mbsma {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, mc=False, model=False):
        sp.add_argument("--out", required=True, help="output directory (or .json path for fit)")
        if seed:
            sp.add_argument("--seed", type=int, default=None if sp.prog.endswith(("simulate", "evaluate")) else 0)
        if mc:
            sp.add_argument("--mc-draws", type=int, default=None if sp.prog.endswith("evaluate") else 500)
            sp.add_argument("--n-mh", type=int, default=200)
        if model:
            sp.add_argument("--knots", type=int, default=None, help="number of baseline hazard pieces")
            sp.add_argument("--quad-points", type=int, default=None, help="quadrature points per dimension")

    s = sub.add_parser("simulate", help="generate a scenario dataset")
    s.add_argument("config", help="scenario.json")
    s.add_argument("--replicates", type=int, default=None)
    common(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="fit one joint model")
    s.add_argument("data")
    s.add_argument("spec", help="model spec JSON")
    common(s, seed=False, model=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", help="dynamic risk predictions from a fitted model")
    s.add_argument("model")
    s.add_argument("data")
    s.add_argument("--landmark", type=float, required=True)
    s.add_argument("--window", type=float, required=True)
    common(s, mc=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("weights", help="model-averaging weights at one (s, t)")
    s.add_argument("data")
    s.add_argument("models", nargs="+")
    s.add_argument("--landmark", type=float, required=True)
    s.add_argument("--window", type=float, required=True)
    s.add_argument("--apply", default=None, help="dataset whose subjects receive averaged predictions")
    s.add_argument("--drop-unconverged", action="store_true")
    common(s, mc=True)
    s.set_defaults(func=cmd_weights)

    s = sub.add_parser("evaluate", help="run an experiment plan")
    s.add_argument("plan")
    s.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    common(s, mc=True, model=True)
    s.set_defaults(func=cmd_evaluate)
    return p


def _exit_code(exc: BaseException) -> int | None:
    from .dataset import DatasetError
    from .harness import PlanError
    from .joint_model import CapabilityError, FitError, ModelError, NoEventsError, QuadratureError
    from .metrics import MetricError
    from .averaging import AveragingError
    from .simulation import ScenarioError

    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, CapabilityError):
        return EXIT_CAPABILITY
    if isinstance(exc, (NoEventsError, DatasetError, MetricError)):
        return EXIT_DATA
    if isinstance(exc, (FitError, QuadratureError, AveragingError, np.linalg.LinAlgError, ArithmeticError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (PlanError, ScenarioError, ModelError, ValueError, TypeError, KeyError)):
        return EXIT_CONFIG
    return None


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("MBSMA_LOG", "WARNING").upper(), None)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:            # mapped to the documented exit codes
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"mbsma {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
