"""Time-dependent model averaging of joint-model predictions.

At each (s, t) the weights minimize the IPCW Brier score of the averaged
prediction over the probability simplex.  With ``Q = (1/N) sum_i Psi_i p_i p_i'``
and ``c = (1/N) sum_events Psi_i p_i`` the objective is the convex quadratic
``w'Qw - 2c'w + const``; it is solved by accelerated projected gradient with
exact Euclidean projection onto the simplex, and the result is polished by
solving the stationarity system on the detected support.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .metrics import RiskSetFrame

RIDGE = 1e-12


class AveragingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PredictionMatrix:
    landmark: float
    window: float
    subject_ids: tuple
    model_ids: tuple
    P: np.ndarray               # (N, K) predicted probabilities
    V: np.ndarray               # (N, K) Monte Carlo draw variances
    flags: tuple = ()

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.ndim != 2 or P.shape != (len(self.subject_ids), len(self.model_ids)):
            raise AveragingError("prediction matrix shape does not match its labels")
        if np.any(~np.isfinite(P)) or np.any((P < 0) | (P > 1)):
            raise AveragingError("prediction cells must lie in [0, 1]")

    @property
    def n_models(self) -> int:
        return len(self.model_ids)

    def rows_for(self, frame: RiskSetFrame) -> np.ndarray:
        """Rows of ``P`` in frame order."""
        pos = {sid: i for i, sid in enumerate(self.subject_ids)}
        try:
            return np.array([pos[sid] for sid in frame.subject_ids], dtype=int)
        except KeyError as e:
            raise AveragingError(f"at-risk subject {e.args[0]} missing from the prediction matrix") from None


@dataclass(frozen=True, eq=False)
class WeightSolution:
    weights: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    model_ids: tuple = ()

    def digest(self) -> str:
        """Hash linking the weight vector to the predictions that used it."""
        payload = json.dumps({"model_ids": list(self.model_ids), "weights": [repr(float(w)) for w in self.weights]})
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class AveragedPrediction:
    subject_id: str
    point: float
    se_buckland: float | None = None
    se_burnham: float | None = None


def one_marker_model_ids(K: int) -> list[tuple[int]]:
    return [(k,) for k in range(1, K + 1)]


def two_marker_model_ids(K: int) -> list[tuple[int, int]]:
    """All marker pairs in lexicographic order."""
    return list(combinations(range(1, K + 1), 2))


def build_prediction_matrix(models: Sequence, dataset, s: float, t: float, query=None,
                            subject_ids: Sequence | None = None, on_unconverged: str = "refuse") -> PredictionMatrix:
    """One column of predicted risks per fitted model for the subjects at risk at ``s``."""
    from .dataset import histories_at
    from .prediction import PredictionQuery, predict_risks

    if on_unconverged not in ("refuse", "drop"):
        raise ValueError("on_unconverged must be 'refuse' or 'drop'")
    kept, flags = [], []
    for m in models:
        if m.converged:
            kept.append(m)
        elif on_unconverged == "refuse":
            raise AveragingError(f"model {m.model_id} did not converge")
        else:
            flags.append(f"dropped_unconverged:{m.model_id}")
    if not kept:
        raise AveragingError("no converged candidate model")
    hs = histories_at(dataset, s)
    if subject_ids is not None:
        wanted = set(subject_ids)
        hs = [h for h in hs if h.subject_id in wanted]
    if not hs:
        raise AveragingError(f"no subject at risk at s = {s}")
    q = query or PredictionQuery(s, t)
    q = PredictionQuery(s, t, q.mc_draws, q.seed, q.n_mh)
    P = np.empty((len(hs), len(kept)))
    V = np.empty_like(P)
    for k, m in enumerate(kept):
        preds = predict_risks(m, hs, q, warn=False)[0]
        P[:, k] = [p.point for p in preds]
        V[:, k] = [p.draw_variance for p in preds]
    return PredictionMatrix(float(s), float(t), tuple(h.subject_id for h in hs),
                            tuple(m.model_id for m in kept), P, V, tuple(flags))


def _quadratic(P: np.ndarray, frame: RiskSetFrame):
    n = frame.n_at_risk
    w = frame.weights
    Q = (P * w[:, None]).T @ P / n
    c = (P * (w * frame.D)[:, None]).sum(axis=0) / n
    const = float(np.sum(w * frame.D) / n)
    return 0.5 * (Q + Q.T), c, const


def weighted_brier(matrix: PredictionMatrix, w, frame: RiskSetFrame) -> float:
    """IPCW Brier score of the averaged prediction ``P w`` (two-sum form)."""
    P = matrix.P[matrix.rows_for(frame)]
    p = P @ np.asarray(w, dtype=float)
    surv = frame.survivors
    ev = frame.D == 1
    return float((np.sum(p[surv] ** 2) / frame.G_window + np.sum(frame.weights[ev] * (1 - p[ev]) ** 2))
                 / frame.n_at_risk)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{w >= 0, sum w = 1}`` (sort-based, exact)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(v - tau, 0.0)


def kkt_residual(Q: np.ndarray, c: np.ndarray, w: np.ndarray, support_tol: float = 0.0) -> tuple[float, float]:
    """Largest violation of the simplex KKT conditions and the common multiplier.

    Stationarity: the partial derivatives ``g = 2(Qw - c)`` equal a common
    multiplier on the support and are no smaller off it.
    """
    g = 2.0 * (Q @ w - c)
    S = w > support_tol
    mu = float(np.mean(g[S]))
    r = np.max(np.abs(g[S] - mu))
    if (~S).any():
        r = max(r, float(np.max(np.maximum(mu - g[~S], 0.0))))
    return float(r), mu


def _polish(Q, c, w, tol):
    """Active-set refinement: solve stationarity on the support, adjust, repeat."""
    K = w.size
    S = w > 1e-12
    best = w
    best_r = kkt_residual(Q, c, w)[0]
    for _ in range(4 * K + 4):
        idx = np.flatnonzero(S)
        m = idx.size
        A = np.zeros((m + 1, m + 1))
        A[:m, :m] = 2.0 * Q[np.ix_(idx, idx)]
        A[:m, m] = -1.0
        A[m, :m] = 1.0
        rhs = np.concatenate([2.0 * c[idx], [1.0]])
        sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
        cand = np.zeros(K)
        cand[idx] = sol[:m]
        if np.any(cand < 0):
            # step from the current feasible point toward cand until a weight hits zero
            d = cand - best
            neg = (d < 0) & S
            ratio = np.where(neg, best / np.where(neg, -d, 1.0), np.inf)
            a = min(1.0, float(ratio.min()))
            cand = np.maximum(best + a * d, 0.0)
            cand /= cand.sum()
            S = cand > 1e-15
            r, _ = kkt_residual(Q, c, cand)
            if r < best_r:
                best, best_r = cand, r
            continue
        cand /= cand.sum()
        r, mu = kkt_residual(Q, c, cand)
        if r < best_r:
            best, best_r = cand, r
        g = 2.0 * (Q @ cand - c)
        viol = (~S) & (g < mu - tol)
        if not viol.any():
            break
        S = S.copy()
        S[np.argmin(np.where(viol, g, np.inf))] = True
    return best, best_r


def solve_weights(matrix: PredictionMatrix, frame: RiskSetFrame, max_iter: int = 20000,
                  tol: float = 1e-9) -> WeightSolution:
    """Exact minimizer of the weighted Brier score over the simplex."""
    if frame.n_at_risk == 0:
        raise AveragingError("empty risk set")
    if not np.any(frame.weights > 0):
        raise AveragingError("all IPCW weights are zero")
    P = matrix.P[matrix.rows_for(frame)]
    Q, c, const = _quadratic(P, frame)
    return _solve_qp(Q, c, const, max_iter, tol, matrix.model_ids)


def _snap(Q, c, w, eps):
    w = np.where(w < eps, 0.0, w)
    return w / w.sum()


def _solve_qp(Q, c, const, max_iter=20000, tol=1e-9, model_ids=()):
    K = c.size
    Qr = Q + RIDGE * np.eye(K)
    if K == 1:
        w = np.ones(1)
        return WeightSolution(w, float(w @ Q @ w - 2 * c @ w + const), 0.0, 0, tuple(model_ids))
    L = 2.0 * max(float(np.linalg.eigvalsh(Qr).max()), 1e-300)
    w = np.full(K, 1.0 / K)
    y, t_k = w.copy(), 1.0
    it = 0
    r = kkt_residual(Qr, c, w)[0]
    while it < max_iter and r > tol:
        it += 1
        w_new = project_simplex(y - 2.0 * (Qr @ y - c) / L)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_k * t_k))
        y = w_new + ((t_k - 1.0) / t_new) * (w_new - w)
        w, t_k = w_new, t_new
        if it % 25 == 0:
            r = kkt_residual(Qr, c, w)[0]
            if r > tol:
                wp, rp = _polish(Qr, c, w, tol)
                if rp <= tol:
                    w, r = wp, rp
    if r > tol:
        w, r = _polish(Qr, c, w, tol)
    w = _snap(Qr, c, w, 1e-12)
    r = kkt_residual(Qr, c, w)[0]
    # weights of order of the ridge are artefacts of it; drop them if the certificate holds
    snapped = _snap(Qr, c, w, 1e-9)
    rs = kkt_residual(Qr, c, snapped)[0]
    if rs <= max(tol, r):
        w, r = snapped, rs
    obj = float(w @ Q @ w - 2.0 * c @ w + const)
    return WeightSolution(w, obj, r, it, tuple(model_ids))


def ma_predict(matrix: PredictionMatrix, solution: WeightSolution) -> list[AveragedPrediction]:
    pts = matrix.P @ solution.weights
    return [AveragedPrediction(sid, float(min(max(p, 0.0), 1.0))) for sid, p in zip(matrix.subject_ids, pts)]


def ma_standard_errors(matrix: PredictionMatrix, solution: WeightSolution) -> list[AveragedPrediction]:
    """Averaged predictions with the two model-averaging standard errors.

    ``se_buckland = sum_k w_k sqrt(Z_k^2 + V_k)`` and
    ``se_burnham = sqrt(sum_k w_k (Z_k^2 + V_k))`` with ``Z_k`` the deviation
    of model k from the averaged prediction and ``V_k`` its draw variance.
    """
    w = solution.weights
    V = np.asarray(matrix.V, dtype=float)
    if np.any(V < 0):
        warnings.warn("negative variance cells clamped to 0", RuntimeWarning, stacklevel=2)
        V = np.maximum(V, 0.0)
    pbar = matrix.P @ w
    Z = matrix.P - pbar[:, None]
    M2 = Z * Z + V
    # offsets from the row minimum keep the equal-model case exact
    R = np.sqrt(M2)
    r0, m0 = R.min(axis=1), M2.min(axis=1)
    buck = r0 + (R - r0[:, None]) @ w
    burn = np.sqrt(m0 + (M2 - m0[:, None]) @ w)
    return [AveragedPrediction(sid, float(min(max(p, 0.0), 1.0)), float(a), float(b))
            for sid, p, a, b in zip(matrix.subject_ids, pbar, buck, burn)]


def write_weights(path, entries: Sequence[tuple[float, float, WeightSolution]]) -> None:
    out = []
    for s, t, sol in entries:
        out.append({"s": s, "t": t, "model_ids": list(sol.model_ids), "weights": sol.weights.tolist(),
                    "objective": sol.objective, "kkt_residual": sol.kkt_residual,
                    "iterations": sol.iterations, "hash": sol.digest()})
    with open(path, "w") as fh:
        json.dump(out, fh, indent=1)
        fh.write("\n")


MA_COLUMNS = ("subject_id", "s", "t", "pi_hat", "se_buckland", "se_burnham")


def write_ma_predictions(path, entries: Sequence[tuple[float, float, Sequence[AveragedPrediction]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MA_COLUMNS)
        for s, t, preds in entries:
            for p in preds:
                w.writerow([p.subject_id, repr(float(s)), repr(float(t)), repr(p.point),
                            "" if p.se_buckland is None else repr(p.se_buckland),
                            "" if p.se_burnham is None else repr(p.se_burnham)])
