"""Dynamic risk prediction by Monte Carlo over parameter and random-effect draws.

For a subject event-free at landmark ``s`` the probability of an event in
``(s, s + t]`` is

    pi(s, t) = 1 - E[ S(s + t | b, xi) / S(s | b, xi) ],

the expectation running over the parameter distribution and the posterior of
``b`` given the history up to ``s`` and survival to ``s``.  Parameter draws
come from the asymptotic normal law of the estimate; random effects from an
independence Metropolis-Hastings sampler with a multivariate t(4) proposal.
"""

from __future__ import annotations

import csv
import hashlib
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .dataset import SubjectHistory
from .joint_model.design import DesignData, design_from_histories
from .joint_model.fitting import FittedJointModel
from .joint_model.likelihood import evaluate, find_modes
from .joint_model.model import (ModelError, ParamArrays, ParameterVector, cumulative_hazard,
                                exp_moments)

T_DF = 4.0
ACCEPTANCE_BAND = (0.1, 0.9)
BOUNDARY_LOG = -5.0


class PredictionError(ModelError):
    pass


class AcceptanceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PredictionQuery:
    landmark: float
    window: float
    mc_draws: int = 500
    seed: int = 0
    n_mh: int = 200

    def __post_init__(self):
        if not self.landmark >= 0:
            raise ValueError("landmark must be >= 0")
        if not self.window >= 0:
            raise ValueError("window must be >= 0")
        if self.mc_draws < 1:
            raise ValueError("mc_draws must be >= 1")
        if self.n_mh < 0:
            raise ValueError("n_mh must be >= 0")


@dataclass(frozen=True)
class RiskPrediction:
    subject_id: str
    model_id: str
    landmark: float
    window: float
    point: float
    mc_se: float
    draw_mean: float
    draw_variance: float
    acceptance_rate: float
    n_draws: int
    flags: tuple = ()


@dataclass(frozen=True, eq=False)
class ParameterDraws:
    thetas: np.ndarray          # (m, p) on the unconstrained scale
    diagonal_fallback: bool = False
    boundary_held: bool = False

    def vectors(self, spec) -> list[ParameterVector]:
        return [ParameterVector.from_theta(spec, th) for th in self.thetas]


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary labels (independent of PYTHONHASHSEED)."""
    h = hashlib.blake2b(repr(tuple(parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def _covariance_root(cov: np.ndarray) -> tuple[np.ndarray, bool]:
    cov = 0.5 * (cov + cov.T)
    if not cov.size:
        return cov, False
    w, V = np.linalg.eigh(cov)
    tol = 1e-10 * max(1.0, float(np.abs(w).max()))
    if w.min() < -tol:
        return np.diag(np.sqrt(np.maximum(np.diag(cov), 0.0))), True
    return V * np.sqrt(np.maximum(w, 0.0)), False


def boundary_coordinates(fitted: FittedJointModel) -> np.ndarray:
    """Log-scale variance coordinates estimated at the boundary (scale below ``exp(BOUNDARY_LOG)``).

    The normal approximation is meaningless there (the curvature is nearly
    flat toward minus infinity), so these coordinates are held at the estimate.
    """
    names = fitted.parameter_names
    return np.array([(n.startswith("log_chol") or n.startswith("log_sigma2")) and th < BOUNDARY_LOG
                     for n, th in zip(names, fitted.theta)], dtype=bool)


def draw_parameter_thetas(fitted: FittedJointModel, m: int, seed, allow_unconverged: bool = False) -> ParameterDraws:
    """``m`` draws from N(theta_hat, Sigma_hat) on the unconstrained scale.

    A covariance that is not positive semi-definite is replaced by its diagonal
    (flagged through ``diagonal_fallback``).
    """
    if not fitted.converged and not allow_unconverged:
        raise PredictionError(f"model {fitted.model_id} did not converge")
    held = boundary_coordinates(fitted)
    cov = np.array(fitted.covariance, dtype=float)
    cov[held, :] = 0.0
    cov[:, held] = 0.0
    root, fallback = _covariance_root(cov)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((m, fitted.theta.size))
    thetas = fitted.theta[None, :] + z @ root.T if root.size else np.repeat(fitted.theta[None], m, 0)
    return ParameterDraws(thetas, fallback, bool(held.any()))


def draw_parameters(fitted: FittedJointModel, m: int, seed, allow_unconverged: bool = False) -> list[ParameterVector]:
    return draw_parameter_thetas(fitted, m, seed, allow_unconverged).vectors(fitted.spec)


# ---------------------------------------------------------------------------
# independence Metropolis-Hastings

def _t_logdens(z2: np.ndarray, d: int) -> np.ndarray:
    """log multivariate t(4) density (up to the scale determinant) at squared Mahalanobis ``z2``."""
    nu = T_DF
    return (gammaln((nu + d) / 2) - gammaln(nu / 2) - 0.5 * d * math.log(nu * math.pi)
            - 0.5 * (nu + d) * np.log1p(z2 / nu))


def _proposal(data: DesignData, pa_hat: ParamArrays):
    """Mode and Cholesky factor of the inverse curvature for every subject."""
    modes, negH = find_modes(data, pa_hat)
    cov = np.linalg.inv(negH)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    return modes, np.linalg.cholesky(cov)


def _mh_chains(data: DesignData, pa: ParamArrays, modes: np.ndarray, chol: np.ndarray,
               n_mh: int, rngs: Sequence[np.random.Generator], n_chains: int, L_hat: np.ndarray):
    """Run ``n_chains`` independent chains per subject for ``n_mh`` steps.

    Chain ``r`` of subject ``i`` targets the posterior under parameter draw
    ``r`` (or the single draw when ``pa`` holds one).  The t proposal built at
    the estimate is carried to draw ``r`` by ``T_r = L_r L_hat^{-1}``, the map
    between the random-effect Cholesky factors, so the proposal follows the
    prior scale of each draw (essential when a variance component sits near
    zero).  ``T_r`` is constant within a chain and its Jacobian cancels in the
    acceptance ratio.  Random numbers come from the subject's own generator, so
    results do not depend on batch makeup.
    """
    N, d = modes.shape
    R = n_chains
    if d == 0:
        return np.zeros((N, R, 0)), np.ones(N)
    T = np.linalg.solve(np.swapaxes(L_hat, 0, 1)[None], np.swapaxes(pa.L, 1, 2))
    T = np.broadcast_to(np.swapaxes(T, 1, 2), (R, d, d))        # L_r L_hat^{-1}
    centre = np.einsum("rij,nj->nri", T, modes)
    z = np.empty((n_mh, N, R, d))
    chi = np.empty((n_mh, N, R))
    logu = np.empty((n_mh, N, R))
    for i, rng in enumerate(rngs):
        z[:, i] = rng.standard_normal((n_mh, R, d))
        chi[:, i] = rng.chisquare(T_DF, (n_mh, R))
        logu[:, i] = np.log(rng.random((n_mh, R)))
    b = centre.copy()
    cur = evaluate(data, pa, b).logf           # log q is maximal at the mode: z2 = 0
    cur_q = np.broadcast_to(_t_logdens(np.zeros(1), d), (N, R)).copy()
    accepted = np.zeros(N)
    for k in range(n_mh):
        w = z[k] * np.sqrt(T_DF / chi[k])[..., None]
        prop = centre + np.einsum("rij,nrj->nri", T, np.einsum("nij,nrj->nri", chol, w))
        new = evaluate(data, pa, prop).logf
        new_q = _t_logdens(np.sum(w * w, axis=-1), d)
        log_ratio = (new - new_q) - (cur - cur_q)
        acc = logu[k] < log_ratio
        acc &= np.isfinite(new)
        b[acc] = prop[acc]
        cur = np.where(acc, new, cur)
        cur_q = np.where(acc, new_q, cur_q)
        accepted += acc.mean(axis=1)
    rate = accepted / n_mh if n_mh else np.ones(N)
    return b, rate


def sample_random_effects(params: ParameterVector, history: SubjectHistory, n_mh: int = 200,
                          seed=0, n_draws: int | None = None):
    """Draw from ``f(b | T > s, history, xi)`` by independence MH (last state after ``n_mh`` steps).

    With ``n_draws`` the result stacks that many independent chains, shape ``(n_draws, d)``.
    """
    spec = params.spec
    data = design_from_histories(spec, [history])
    R = 1 if n_draws is None else int(n_draws)
    theta = params.to_theta()
    modes, chol = _proposal(data, ParamArrays.from_thetas(spec, theta))
    pa = ParamArrays.from_thetas(spec, np.repeat(theta[None], R, axis=0))
    b, _ = _mh_chains(data, pa, modes, chol, n_mh, [np.random.default_rng(seed)], R,
                      ParamArrays.from_thetas(spec, theta).L[0])
    return b[0, 0] if n_draws is None else b[0]


# ---------------------------------------------------------------------------
# survival ratios

def _window_cumhaz(knots, lam: np.ndarray, a: np.ndarray, c: np.ndarray, s: float, t) -> np.ndarray:
    """``Lambda(s + t) - Lambda(s)`` for exponents ``a + c u``; ``t`` may be a vector (last axis)."""
    kn = np.asarray(knots, dtype=float)
    edges = kn.copy()
    edges[-1] = np.inf
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lo = np.clip(edges[:-1][None, :], s, s + t[:, None])          # (T, J)
    hi = np.clip(edges[1:][None, :], s, s + t[:, None])
    I0 = exp_moments(c[..., None, None], lo, hi, order=0)[0]       # (N, R, T, J)
    return np.exp(a)[..., None] * np.einsum("nrtj,rj->nrt", I0, lam)


def conditional_survival_ratio(params: ParameterVector, b, x, s: float, t: float) -> float:
    """``S(s + t | b) / S(s | b)``."""
    if t == 0:
        return 1.0
    return math.exp(-(cumulative_hazard(params, b, x, s + t) - cumulative_hazard(params, b, x, s)))


# ---------------------------------------------------------------------------

def _draw_stats(p: np.ndarray):
    M = p.shape[-1]
    mean = p.mean(axis=-1)
    var = p.var(axis=-1, ddof=1) if M > 1 else np.zeros(p.shape[:-1])
    return mean, var, np.sqrt(var / M)


def predict_risks(fitted: FittedJointModel, histories: Sequence[SubjectHistory], query: PredictionQuery,
                  windows: Sequence[float] | None = None, allow_unconverged: bool = False,
                  warn: bool = True) -> list[list[RiskPrediction]]:
    """Predictions for many subjects at one landmark.

    Returns one list per window (default: ``[query.window]``), each aligned
    with ``histories``.  All windows share the same draws, so predictions are
    nondecreasing in the window length.  Parameter draws are seeded by
    ``(seed, s)`` and shared across subjects; random-effect chains are seeded
    by ``(seed, subject_id, s)``.
    """
    if not histories:
        return [[] for _ in (windows or [query.window])]
    s = float(query.landmark)
    windows = [float(query.window)] if windows is None else [float(w) for w in windows]
    if any(w < 0 for w in windows):
        raise ValueError("window must be >= 0")
    for h in histories:
        if h.landmark != s:
            raise PredictionError("history landmark differs from the query landmark")
    spec = fitted.spec
    M = query.mc_draws
    draws = draw_parameter_thetas(fitted, M, derive_seed(query.seed, "xi", s), allow_unconverged)
    data = design_from_histories(spec, histories)
    pa_hat = ParamArrays.from_thetas(spec, fitted.theta)
    modes, chol = _proposal(data, pa_hat)
    pa = ParamArrays.from_thetas(spec, draws.thetas)
    rngs = [np.random.default_rng(derive_seed(query.seed, h.subject_id, s)) for h in histories]
    b, rate = _mh_chains(data, pa, modes, chol, query.n_mh, rngs, M, pa_hat.L[0])
    ev = evaluate(data, pa, b, survival=False)
    dL = _window_cumhaz(spec.knots, pa.lam, ev.a, ev.c, s, windows)   # (N, M, W)
    ratio = np.exp(-dL)
    probs = 1.0 - ratio
    mean, var, se = _draw_stats(np.moveaxis(probs, 1, -1))                # (N, W)
    flags_common = ["asymptotic_normal_parameter_draws"]
    if draws.diagonal_fallback:
        flags_common.append("diagonal_covariance_fallback")
    if draws.boundary_held:
        flags_common.append("boundary_variance_held_fixed")
    out = []
    for w_i, w in enumerate(windows):
        row = []
        for i, h in enumerate(histories):
            flags = list(flags_common)
            if not ACCEPTANCE_BAND[0] < rate[i] < ACCEPTANCE_BAND[1] and spec.re_dim and query.n_mh:
                flags.append("mh_acceptance_outside_band")
            point = 0.0 if w == 0 else float(min(max(mean[i, w_i], 0.0), 1.0))
            row.append(RiskPrediction(h.subject_id, spec.model_id, s, w, point,
                                      0.0 if w == 0 else float(se[i, w_i]),
                                      point, 0.0 if w == 0 else float(var[i, w_i]),
                                      float(rate[i]), M, tuple(flags)))
        out.append(row)
    if warn:
        bad = [h.subject_id for i, h in enumerate(histories)
               if "mh_acceptance_outside_band" in out[0][i].flags]
        if bad:
            warnings.warn(f"MH acceptance outside {ACCEPTANCE_BAND} for {len(bad)} subject(s), e.g. {bad[0]}",
                          AcceptanceWarning, stacklevel=2)
    return out


def predict_risk(fitted: FittedJointModel, history: SubjectHistory, query: PredictionQuery,
                 allow_unconverged: bool = False) -> RiskPrediction:
    return predict_risks(fitted, [history], query, allow_unconverged=allow_unconverged)[0][0]


PREDICTION_COLUMNS = ("subject_id", "model_id", "s", "t", "pi_hat", "mc_se")


def write_predictions(path, predictions: Sequence[RiskPrediction]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_COLUMNS)
        for p in predictions:
            w.writerow([p.subject_id, p.model_id, repr(p.landmark), repr(p.window), repr(p.point), repr(p.mc_se)])


def read_predictions(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("s", "t", "pi_hat", "mc_se"):
            r[k] = float(r[k])
    return rows
