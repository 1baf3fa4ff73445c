"""Experimental protocol: splits, per-fold fitting, weight estimation and validation scoring.

The run is a graph of pure tasks.  Model fits are keyed by
``(replicate, fold, model)`` and predictions by ``(replicate, fold, model, s)``;
both may run in a process pool.  Weighting and scoring are cheap and run in
the calling process.  Results are merged by sorted keys, so the report does
not depend on scheduling or on ``jobs``.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from .averaging import AveragingError, PredictionMatrix, ma_predict, solve_weights
from .dataset import Dataset, DatasetError, histories_at, holdout_split, kfold_split, read_dataset
from .joint_model import FitOptions, ModelSpec, fit
from .joint_model.model import MAX_RE_DIM, CapabilityError, ModelError
from .metrics import MetricError, auc, brier, ipcw_frame, mse
from .prediction import PredictionQuery, derive_seed, predict_risks
from .simulation import (ScenarioConfig, bootstrap_indices, generate_dataset, read_true_effects,
                         replicate_config, scenario, true_risk)

INDIVIDUAL_SETS = ("one_marker_models", "two_marker_models", "all_marker_model")
MA_METHODS = {"one_marker_ma": "ma_one", "two_marker_ma": "ma_two"}
METHOD_SETS = INDIVIDUAL_SETS + tuple(MA_METHODS)
CELL_COLUMNS = ("replicate", "fold", "method", "s", "t", "auc", "brier", "mse",
                "n_at_risk", "n_events", "status", "reason")
STAGES = ("fit", "predict", "weight", "score")


class PlanError(ValueError):
    """Invalid experiment plan."""


class ExperimentError(RuntimeError):
    """Raised when a failure aborts the run (``on_failure = "abort"``)."""


@dataclass(frozen=True)
class ExperimentPlan:
    """Everything that determines a run.

    ``source`` is ``{"scenario": name, **overrides}`` or ``{"data": dir}``,
    optionally with ``"bootstrap": true`` to resample subjects per replicate.
    ``split`` is ``"holdout"`` (``learning_fraction``) or ``"kfold"``
    (``folds``).  With ``inner_fraction`` set, models are fitted on that
    fraction of the learning set and weights estimated on the rest.
    """

    source: dict
    methods: tuple = ("one_marker_models", "one_marker_ma", "two_marker_ma")
    landmarks: tuple = (0.0, 0.5, 1.0, 1.5)
    window: float = 0.5
    split: str = "holdout"
    learning_fraction: float = 0.8
    folds: int = 5
    replicates: int = 1
    seed: int = 0
    mc_draws: int = 500
    n_mh: int = 200
    quad_points: int | None = None
    n_pieces: int = 5
    survival_covariates: tuple = ()
    markers: tuple | None = None
    inner_fraction: float | None = None
    on_failure: str = "mark"
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(str(m) for m in self.methods))
        object.__setattr__(self, "landmarks", tuple(float(s) for s in self.landmarks))
        object.__setattr__(self, "survival_covariates", tuple(self.survival_covariates))
        if self.markers is not None:
            object.__setattr__(self, "markers", tuple(int(k) for k in self.markers))
        if not isinstance(self.source, dict) or not ({"scenario", "data"} & set(self.source)):
            raise PlanError("source must name a 'scenario' or a 'data' directory")
        if not self.methods or any(m not in METHOD_SETS for m in self.methods):
            raise PlanError(f"methods must be a nonempty subset of {METHOD_SETS}")
        s = np.array(self.landmarks)
        if s.size < 1 or np.any(s < 0) or np.any(np.diff(s) <= 0):
            raise PlanError("landmarks must be nonempty, nonnegative and increasing")
        if not self.window > 0:
            raise PlanError("window must be > 0")
        if self.split not in ("holdout", "kfold"):
            raise PlanError("split must be 'holdout' or 'kfold'")
        if not 0 < self.learning_fraction < 1:
            raise PlanError("learning fraction must lie in (0, 1)")
        if self.split == "kfold" and self.folds < 2:
            raise PlanError("folds must be >= 2")
        if self.replicates < 1:
            raise PlanError("replicates must be >= 1")
        if self.mc_draws < 1 or self.n_mh < 0 or self.n_pieces < 1:
            raise PlanError("mc_draws and n_pieces must be >= 1, n_mh >= 0")
        if self.inner_fraction is not None and not 0 < self.inner_fraction < 1:
            raise PlanError("inner fraction must lie in (0, 1)")
        if self.on_failure not in ("mark", "abort"):
            raise PlanError("on_failure must be 'mark' or 'abort'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "ExperimentPlan":
        if not isinstance(d, dict):
            raise PlanError("plan must be a JSON object")
        try:
            return cls(**d, base_dir=base_dir)
        except TypeError as exc:
            raise PlanError(f"invalid plan: {exc}") from None

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, ValueError) as exc:
            raise PlanError(f"cannot read plan: {exc}") from None
        return cls.from_dict(d, base_dir=os.path.dirname(os.path.abspath(path)))

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# data sources

@dataclass(frozen=True, eq=False)
class Truth:
    """True random effects of simulated subjects, for MSE against the true risk."""

    config: ScenarioConfig
    effects: dict

    def risk(self, subject_ids, s: float, t: float) -> np.ndarray:
        if not len(subject_ids):
            return np.zeros(0)
        b = np.array([self.effects[i] for i in subject_ids])
        return true_risk(self.config, b, s, t)


def _base_source(plan: ExperimentPlan, replicate: int):
    src = plan.source
    if "scenario" in src:
        over = {k: v for k, v in src.items() if k not in ("scenario", "bootstrap")}
        try:
            cfg = scenario(src["scenario"], **over)
        except TypeError as exc:
            raise PlanError(f"invalid scenario override: {exc}") from None
        if not src.get("bootstrap"):
            cfg = replicate_config(cfg, replicate)
        sim = generate_dataset(cfg)
        return sim.dataset, Truth(cfg, dict(zip(sim.dataset.subject_ids, sim.effects)))
    path = os.path.join(plan.base_dir, src["data"])
    ds = read_dataset(path)
    truth = None
    if os.path.exists(os.path.join(path, "true_effects.csv")) and os.path.exists(os.path.join(path, "scenario.json")):
        truth = Truth(ScenarioConfig.load(os.path.join(path, "scenario.json")), read_true_effects(path))
    return ds, truth


def load_source(plan: ExperimentPlan, replicate: int) -> tuple[Dataset, Truth | None]:
    """Dataset of replicate ``r`` and, for simulated data, its true effects."""
    ds, truth = _base_source(plan, replicate)
    if plan.source.get("bootstrap"):
        idx = bootstrap_indices(ds.n_subjects, derive_seed(plan.seed, "bootstrap", replicate))
        new = [f"b{i + 1}" for i in range(idx.size)]
        if truth is not None:
            truth = Truth(truth.config, {n: truth.effects[ds.subject_ids[j]] for n, j in zip(new, idx)})
        ds = ds.subset(idx, new_ids=new)
    return ds, truth


def source_markers(plan: ExperimentPlan) -> int:
    """Number of markers in the source, without generating or reading the data."""
    src = plan.source
    if "scenario" in src:
        return scenario(src["scenario"]).n_markers
    try:
        with open(os.path.join(plan.base_dir, src["data"], "markers.json")) as fh:
            return len(json.load(fh))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read markers.json: {exc}") from None


def model_specs(plan: ExperimentPlan, n_markers: int) -> dict:
    """Specs of every model the methods need, keyed by model id, plus the id lists per method set."""
    ks = plan.markers or tuple(range(1, n_markers + 1))
    if any(not 1 <= k <= n_markers for k in ks):
        raise PlanError(f"marker ids must lie in 1..{n_markers}")
    groups = {
        "one_marker_models": [(k,) for k in ks],
        "two_marker_models": list(combinations(ks, 2)),
        "all_marker_model": [tuple(ks)],
    }
    groups["one_marker_ma"] = groups["one_marker_models"]
    groups["two_marker_ma"] = groups["two_marker_models"]
    need = {}
    ids = {}
    for m in plan.methods:
        if m == "all_marker_model" and 2 * len(ks) > MAX_RE_DIM:
            raise CapabilityError(f"random-effect dimension cap: all-marker model needs {2 * len(ks)} > {MAX_RE_DIM}")
        if not groups[m]:
            raise PlanError(f"method {m} needs at least two markers")
        ids[m] = []
        for mk in groups[m]:
            spec = ModelSpec.linear(mk, plan.survival_covariates, plan.n_pieces)
            need[spec.model_id] = spec
            ids[m].append(spec.model_id)
    return need, ids


# ---------------------------------------------------------------------------
# tasks (top level so they pickle)

_FIT_ERRORS = (ModelError, DatasetError, ArithmeticError, np.linalg.LinAlgError, RuntimeError, ValueError)


def _fit_task(args):
    key, dataset, spec, quad_points = args
    t0 = time.perf_counter()
    try:
        f = fit(dataset, spec, FitOptions(quad_points=quad_points))
        out = (f, None if f.converged else f"did not converge: {f.message}")
    except _FIT_ERRORS as exc:
        out = (None, f"{type(exc).__name__}: {exc}")
    return key, out, time.perf_counter() - t0


def _predict_task(args):
    key, fitted, histories, query = args
    t0 = time.perf_counter()
    try:
        preds = predict_risks(fitted, histories, query, warn=False)[0]
        out = ({p.subject_id: (p.point, p.draw_variance, p.flags) for p in preds}, None)
    except _FIT_ERRORS as exc:
        out = (None, f"{type(exc).__name__}: {exc}")
    return key, out, time.perf_counter() - t0


def _map(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, tasks, chunksize=1))


# ---------------------------------------------------------------------------
# report

@dataclass(eq=False)
class EvaluationReport:
    plan: ExperimentPlan
    cells: list
    weights: list
    weights_mean: list
    fits: list
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Deterministic content; wall-clock timings are kept out (they go to the run manifest)."""
        return {"plan": self.plan.to_dict(), "plan_hash": self.plan.digest(), "cells": self.cells,
                "weights": self.weights, "weights_mean": self.weights_mean, "fits": self.fits}

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), sort_keys=True, indent=1, allow_nan=False) + "\n"

    def cell(self, method, s, replicate=0, fold=0) -> dict:
        for c in self.cells:
            if (c["method"], c["s"], c["replicate"], c["fold"]) == (method, float(s), replicate, fold):
                return c
        raise KeyError((method, s, replicate, fold))


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(x) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def _units(plan: ExperimentPlan):
    """(replicate, fold, fit set, weight set, validation set, truth) for every unit of work."""
    for r in range(plan.replicates):
        ds, truth = load_source(plan, r)
        split_seed = derive_seed(plan.seed, "split", r)
        if plan.split == "holdout":
            pairs = [holdout_split(ds, plan.learning_fraction, split_seed)]
        else:
            pairs = kfold_split(ds, plan.folds, split_seed)
        for f, (learn, val) in enumerate(pairs):
            if plan.inner_fraction is None:
                fit_set = weight_set = learn
            else:
                fit_set, weight_set = holdout_split(learn, plan.inner_fraction, derive_seed(plan.seed, "inner", r, f))
            yield r, f, fit_set, weight_set, val, truth


def run_experiment(plan: ExperimentPlan, jobs: int = 1, log=None) -> EvaluationReport:
    """Fit, weight and score every method at every landmark of every replicate and fold."""
    log = log or (lambda msg: None)
    timings = {k: 0.0 for k in STAGES}
    specs, method_models = model_specs(plan, source_markers(plan))
    units = list(_units(plan))

    # fits
    tasks = [((r, f, mid), fs, spec, plan.quad_points)
             for r, f, fs, _, _, _ in units for mid, spec in sorted(specs.items())]
    log(f"fitting {len(tasks)} models")
    fitted, fits, fit_err = {}, [], {}
    for key, (model, err), sec in _map(_fit_task, tasks, jobs):
        timings["fit"] += sec
        if err and plan.on_failure == "abort":
            raise ExperimentError(f"fit {key} failed: {err}")
        if err:
            fit_err[key] = err
        else:
            fitted[key] = model
        fits.append({"replicate": key[0], "fold": key[1], "model": key[2], "status": "failed" if err else "ok",
                     "reason": err or "", "log_likelihood": None if model is None else model.log_likelihood,
                     "iterations": None if model is None else model.iterations})

    # predictions for weight-set and validation subjects in one batch per (model, s)
    tasks = []
    for r, f, _, ws, val, _ in units:
        for s in plan.landmarks:
            hs = histories_at(ws, s) + histories_at(val, s)
            q = PredictionQuery(s, plan.window, plan.mc_draws, derive_seed(plan.seed, "predict", r, f), plan.n_mh)
            for mid in sorted(specs):
                if (r, f, mid) in fitted and hs:
                    tasks.append(((r, f, mid, s), fitted[(r, f, mid)], hs, q))
    log(f"predicting {len(tasks)} (model, landmark) batches")
    preds = {}
    pred_err = {}
    for key, (out, err), sec in _map(_predict_task, tasks, jobs):
        timings["predict"] += sec
        if err:
            if plan.on_failure == "abort":
                raise ExperimentError(f"prediction {key} failed: {err}")
            pred_err[key] = err
        else:
            preds[key] = out

    cells, weights = [], []
    for r, f, fs, ws, val, truth in units:
        val_ids = set(val.subject_ids)
        for s in plan.landmarks:
            c, w = _score_landmark(plan, r, f, s, ws, val, val_ids, truth, method_models,
                                   fit_err, preds, pred_err, timings)
            cells += c
            weights += w
    return EvaluationReport(plan, cells, weights, _weights_mean(weights), fits, timings)


def _cell(r, f, method, s, t, **kw):
    out = {"replicate": r, "fold": f, "method": method, "s": float(s), "t": float(t), "auc": None,
           "brier": None, "mse": None, "n_at_risk": None, "n_events": None, "status": "ok", "reason": "",
           "weights_hash": None, "flags": []}
    out.update(kw)
    return out


def _column(preds, key, ids):
    d = preds[key]
    return (np.array([d[i][0] for i in ids]), np.array([d[i][1] for i in ids]),
            sorted({fl for i in ids for fl in d[i][2]}))


def _missing(r, f, mid, s, fit_err, pred_err):
    if (r, f, mid) in fit_err:
        return f"fit failed: {fit_err[(r, f, mid)]}"
    return f"prediction failed: {pred_err.get((r, f, mid, s), 'no subject at risk')}"


def _score_landmark(plan, r, f, s, ws, val, val_ids, truth, method_models, fit_err, preds, pred_err, timings):
    t = plan.window
    t0 = time.perf_counter()
    try:
        vf = ipcw_frame(val, s, t)
    except MetricError as exc:
        return [_cell(r, f, m, s, t, status="not_evaluable", reason=f"validation: {exc}")
                for m in _scored_methods(plan, method_models)], []
    vids = vf.subject_ids
    truths = truth.risk(vids, s, t) if truth is not None else None

    def score(method, p, **kw):
        a = auc(p, vf)
        return _cell(r, f, method, s, t, auc=None if math.isnan(a) else a, brier=brier(p, vf),
                     mse=None if truths is None else mse(p, truths), n_at_risk=vf.n_at_risk,
                     n_events=vf.n_events, reason="" if not math.isnan(a) else "auc: no case or no control",
                     **kw)

    cells, wrecs = [], []
    for method in plan.methods:
        if method in INDIVIDUAL_SETS:
            for mid in method_models[method]:
                key = (r, f, mid, s)
                if key not in preds:
                    cells.append(_cell(r, f, mid, s, t, status="failed", reason=_missing(r, f, mid, s, fit_err, pred_err)))
                    continue
                p, _, flags = _column(preds, key, vids)
                cells.append(score(mid, p, flags=flags))
    timings["score"] += time.perf_counter() - t0

    for method in plan.methods:
        if method not in MA_METHODS:
            continue
        name = MA_METHODS[method]
        t0 = time.perf_counter()
        avail = [m for m in method_models[method] if (r, f, m, s) in preds]
        dropped = [m for m in method_models[method] if m not in avail]
        flags = [f"dropped:{m}" for m in dropped]
        if not avail:
            cells.append(_cell(r, f, name, s, t, status="failed", reason="no candidate model available"))
            continue
        try:
            wf = ipcw_frame(ws, s, t)
            leak = set(wf.subject_ids) & val_ids
            assert not leak, f"validation subjects used for weights: {sorted(leak)[:3]}"
            cols = [_column(preds, (r, f, m, s), wf.subject_ids) for m in avail]
            mat = PredictionMatrix(s, t, wf.subject_ids, tuple(avail),
                                   np.column_stack([c[0] for c in cols]), np.column_stack([c[1] for c in cols]))
            sol = solve_weights(mat, wf)
        except (MetricError, AveragingError) as exc:
            timings["weight"] += time.perf_counter() - t0
            cells.append(_cell(r, f, name, s, t, status="failed", reason=f"weights: {exc}", flags=flags))
            continue
        h = sol.digest()
        wrecs.append({"replicate": r, "fold": f, "method": name, "s": float(s), "t": float(t),
                      "model_ids": list(avail), "weights": sol.weights.tolist(), "objective": sol.objective,
                      "kkt_residual": sol.kkt_residual, "iterations": sol.iterations, "hash": h,
                      "n_subjects": wf.n_at_risk})
        timings["weight"] += time.perf_counter() - t0
        t0 = time.perf_counter()
        vcols = [_column(preds, (r, f, m, s), vids) for m in avail]
        vmat = PredictionMatrix(s, t, vids, tuple(avail), np.column_stack([c[0] for c in vcols]),
                                np.column_stack([c[1] for c in vcols]))
        p = np.array([q.point for q in ma_predict(vmat, sol)])
        cells.append(score(name, p, weights_hash=h, flags=flags))
        timings["score"] += time.perf_counter() - t0
    return cells, wrecs


def _scored_methods(plan, method_models):
    out = []
    for m in plan.methods:
        out += method_models[m] if m in INDIVIDUAL_SETS else [MA_METHODS[m]]
    return out


def _weights_mean(records):
    """Mean weight vector over folds per (replicate, method, s, t), labeled as such."""
    groups = {}
    for w in records:
        groups.setdefault((w["replicate"], w["method"], w["s"], w["t"], tuple(w["model_ids"])), []).append(w)
    out = []
    for (r, m, s, t, ids), ws in sorted(groups.items()):
        out.append({"replicate": r, "method": m, "s": s, "t": t, "model_ids": list(ids),
                    "label": "mean_over_folds", "n_folds": len(ws),
                    "weights": np.mean([w["weights"] for w in ws], axis=0).tolist()})
    return out


# ---------------------------------------------------------------------------
# summaries and outputs

def summarize(report_or_cells, grouping=("method", "s", "t"), metrics=("auc", "brier", "mse"),
              rank: bool = False) -> list[dict]:
    """Mean and sample sd of each metric across replicates and folds per group.

    ``sd`` is ``None`` for groups with a single value.  With ``rank`` the rows
    of each ``(s, t)`` get a rank by decreasing mean AUC.
    """
    cells = report_or_cells.cells if isinstance(report_or_cells, EvaluationReport) else list(report_or_cells)
    if not cells:
        raise ValueError("empty group: report has no cells")
    groups = {}
    for c in cells:
        groups.setdefault(tuple(c[g] for g in grouping), []).append(c)
    rows = []
    for key in sorted(groups, key=lambda k: tuple((str(type(v)), v) for v in k)):
        cs = groups[key]
        row = dict(zip(grouping, key))
        row["n"] = sum(c["status"] == "ok" for c in cs)
        for m in metrics:
            v = np.array([c[m] for c in cs if c["status"] == "ok" and c[m] is not None], dtype=float)
            row[f"{m}_mean"] = float(v.mean()) if v.size else None
            row[f"{m}_sd"] = float(v.std(ddof=1)) if v.size > 1 else None
            row[f"{m}_n"] = int(v.size)
        rows.append(row)
    if rank and "auc" in metrics:
        by = {}
        for row in rows:
            by.setdefault((row.get("s"), row.get("t")), []).append(row)
        for rs in by.values():
            order = sorted((r for r in rs if r["auc_mean"] is not None), key=lambda r: -r["auc_mean"])
            for i, row in enumerate(order):
                row["rank"] = i + 1
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if not math.isfinite(v) else repr(v)
    return str(v)


def write_cells(path, cells) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CELL_COLUMNS)
        for c in cells:
            w.writerow([_fmt(c[k]) for k in CELL_COLUMNS])


def write_summary(path, rows) -> None:
    import csv
    keys = list(rows[0]) if rows else []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in keys])


def write_report(report: EvaluationReport, directory, charts: bool = True) -> list[str]:
    """``report.json``, ``metrics.csv``, ``summary.csv`` and ``charts/*.svg``; returns the paths written."""
    from .charts import line_chart

    os.makedirs(directory, exist_ok=True)
    paths = []
    p = os.path.join(directory, "report.json")
    with open(p, "w") as fh:
        fh.write(report.to_json())
    paths.append(p)
    p = os.path.join(directory, "metrics.csv")
    write_cells(p, report.cells)
    paths.append(p)
    rows = summarize(report)
    p = os.path.join(directory, "summary.csv")
    write_summary(p, rows)
    paths.append(p)
    if charts:
        os.makedirs(os.path.join(directory, "charts"), exist_ok=True)
        for metric, label in (("auc", "AUC"), ("brier", "Brier score")):
            series = {}
            for r in rows:
                if r[f"{metric}_mean"] is not None:
                    series.setdefault(r["method"], []).append((r["s"], r[f"{metric}_mean"]))
            p = os.path.join(directory, "charts", f"{metric}.svg")
            with open(p, "w") as fh:
                fh.write(line_chart(series, x_label="landmark s", y_label=f"mean {label}",
                                    title=f"{label} at t = {report.plan.window!r}"))
            paths.append(p)
    return paths
