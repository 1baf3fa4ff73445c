"""Censoring-robust accuracy metrics at a landmark ``s`` and window ``t``.

Weights follow inverse probability of censoring weighting with the censoring
distribution estimated by a reversed Kaplan-Meier curve on the whole sample:
survivors past ``s + t`` get ``1 / G((s + t)- | s)``, observed events inside
the window ``1 / G(T- | s)`` and subjects censored inside the window 0. A
censoring at exactly ``s + t`` shows the subject event-free over the window,
so it counts as a survivor (this matters under administrative censoring).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CensoringCurve:
    """Right-continuous step function ``G(u)`` with ``G(0) = 1``."""

    jump_times: np.ndarray
    values: np.ndarray          # G at and after each jump

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        out = np.concatenate([[1.0], self.values])[np.searchsorted(self.jump_times, u, side="right")]
        return out if out.ndim else float(out)

    def left(self, u):
        """Left limit ``G(u-)``."""
        u = np.asarray(u, dtype=float)
        out = np.concatenate([[1.0], self.values])[np.searchsorted(self.jump_times, u, side="left")]
        return out if out.ndim else float(out)


def censoring_km(dataset=None, *, obs_time=None, event=None) -> CensoringCurve:
    """Kaplan-Meier estimate of the probability of remaining uncensored.

    Censorings play the role of events; subjects with an event at ``u`` stay
    in the risk set at ``u``.
    """
    if dataset is not None:
        obs_time, event = dataset.obs_time, dataset.event
    T = np.asarray(obs_time, dtype=float)
    d = np.asarray(event, dtype=int)
    if T.size == 0:
        raise MetricError("empty sample")
    times = np.unique(T[d == 0])
    at_risk = T.size - np.searchsorted(np.sort(T), times, side="left")
    cens = np.array([np.sum((T == u) & (d == 0)) for u in times]) if times.size else np.zeros(0)
    values = np.cumprod(1.0 - cens / at_risk)
    return CensoringCurve(times, values)


@dataclass(frozen=True, eq=False)
class RiskSetFrame:
    landmark: float
    window: float
    subject_ids: tuple
    observed_time: np.ndarray
    event: np.ndarray           # delta of the at-risk subjects
    D: np.ndarray               # observed event in (s, s + t]
    weights: np.ndarray
    G_window: float             # G((s + t)- | s)

    @property
    def n_at_risk(self) -> int:
        return len(self.subject_ids)

    @property
    def n_events(self) -> int:
        return int(self.D.sum())

    @property
    def survivors(self) -> np.ndarray:
        end = self.landmark + self.window
        return (self.observed_time > end) | ((self.observed_time == end) & (self.event == 0))

    @property
    def censored_in_window(self) -> np.ndarray:
        return ~self.survivors & (self.D == 0)

    def align(self, predictions) -> np.ndarray:
        """Prediction vector in frame order from a mapping or an aligned sequence."""
        if isinstance(predictions, Mapping):
            try:
                return np.array([float(predictions[i]) for i in self.subject_ids])
            except KeyError as e:
                raise MetricError(f"no prediction for at-risk subject {e.args[0]}") from None
        p = np.asarray(predictions, dtype=float)
        if p.shape != (self.n_at_risk,):
            raise MetricError(f"expected {self.n_at_risk} predictions, got {p.shape}")
        return p


def ipcw_frame(dataset, s: float, t: float, curve: CensoringCurve | None = None) -> RiskSetFrame:
    curve = curve or censoring_km(dataset)
    T = np.asarray(dataset.obs_time, dtype=float)
    d = np.asarray(dataset.event, dtype=int)
    risk = T > s
    if not risk.any():
        raise MetricError(f"empty risk set at s = {s}")
    Ts, ds = T[risk], d[risk]
    Gs = curve(s)
    G_window = curve.left(s + t) / Gs if Gs > 0 else 0.0
    if G_window <= 0:
        raise MetricError("censoring support exhausted before s+t")
    in_window = (Ts < s + t) | ((Ts == s + t) & (ds == 1))
    D = (in_window & (ds == 1)).astype(int)
    w = np.zeros(Ts.size)
    w[~in_window] = 1.0 / G_window
    ev = D == 1
    w[ev] = Gs / curve.left(Ts[ev])
    ids = tuple(np.asarray(dataset.subject_ids, dtype=object)[risk])
    return RiskSetFrame(float(s), float(t), ids, Ts, ds, D, w, float(G_window))


def auc(predictions, frame: RiskSetFrame) -> float:
    """IPCW time-dependent AUC; ties count one half. ``nan`` when not evaluable."""
    p = frame.align(predictions)
    w = frame.weights
    case = (frame.D == 1) & (w > 0)
    ctrl = (frame.D == 0) & (w > 0)
    if not case.any() or not ctrl.any():
        return math.nan
    pc, wc = p[ctrl], w[ctrl]
    order = np.argsort(pc, kind="stable")
    pc, wc = pc[order], wc[order]
    cum = np.concatenate([[0.0], np.cumsum(wc)])
    lo = np.searchsorted(pc, p[case], side="left")
    hi = np.searchsorted(pc, p[case], side="right")
    below = cum[lo]
    ties = cum[hi] - cum[lo]
    num = np.sum(w[case] * (below + 0.5 * ties))
    den = w[case].sum() * wc.sum()
    # a ratio in [0, 1]; rounding of the two sums can step outside by an ulp
    return float(min(max(num / den, 0.0), 1.0))


def auc_pairs(predictions, frame: RiskSetFrame) -> float:
    """Brute-force double sum over (case, control) pairs; reference for :func:`auc`."""
    p = frame.align(predictions)
    w = frame.weights
    num = den = 0.0
    for i in range(p.size):
        for j in range(p.size):
            if frame.D[i] == 1 and frame.D[j] == 0:
                ww = w[i] * w[j]
                num += ww * (1.0 if p[i] > p[j] else 0.5 if p[i] == p[j] else 0.0)
                den += ww
    return num / den if den > 0 else math.nan


def brier(predictions, frame: RiskSetFrame) -> float:
    """IPCW Brier score; the weighted-residual and the two-sum forms must agree."""
    p = frame.align(predictions)
    n = frame.n_at_risk
    weighted = float(np.sum(frame.weights * (frame.D - p) ** 2) / n)
    surv = frame.survivors
    ev = frame.D == 1
    two_sum = float((np.sum(p[surv] ** 2) / frame.G_window + np.sum((1 - p[ev]) ** 2 * frame.weights[ev])) / n)
    if abs(weighted - two_sum) > 1e-12 * max(1.0, abs(weighted)):
        raise MetricError(f"Brier forms disagree: {weighted!r} vs {two_sum!r}")
    return weighted


def mse(predictions, truths) -> float:
    p = np.asarray(predictions, dtype=float)
    q = np.asarray(truths, dtype=float)
    if p.shape != q.shape:
        raise MetricError(f"length mismatch: {p.shape} vs {q.shape}")
    if not p.size:
        raise MetricError("empty prediction vector")
    return float(np.mean((p - q) ** 2))


METRIC_COLUMNS = ("method", "s", "t", "auc", "brier", "mse", "n_at_risk", "n_events")


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics(path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])
