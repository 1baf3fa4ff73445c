"""Maximum-likelihood fitting of the joint model.

The optimizer works on the unconstrained vector theta (log dispersions, packed
Cholesky factor of B with log diagonal, log baseline hazards).  BFGS does the
bulk of the work; a few Newton steps on the numeric Hessian then drive the
gradient below tolerance, and the same Hessian yields the observed-information
covariance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .design import DesignData, design_from_dataset
from .likelihood import QuadratureError, joint_loglik, marginal_loglik
from .model import (ModelError, ModelSpec, ParameterVector, chol_from_theta, layout,
                    theta_from_chol)


class FitError(ModelError):
    """Estimation could not start or finish."""


class NoEventsError(FitError):
    def __init__(self):
        super().__init__("no events: survival parameters unidentifiable")


class InitializationError(FitError):
    pass


@dataclass(frozen=True)
class FitOptions:
    """Knobs of :func:`fit`.

    ``fixed`` maps parameter names (see :func:`~mbsma.joint_model.model.layout`)
    to values on the unconstrained scale that are held fixed.
    """

    quad_points: int | None = None
    gtol: float = 1e-4
    max_iter: int = 500
    newton_steps: int = 20
    hessian_step: float = 1e-4
    fixed: Mapping[str, float] = field(default_factory=dict)
    init_theta: tuple | None = None


@dataclass(eq=False)
class FittedJointModel:
    spec: ModelSpec
    theta: np.ndarray
    covariance: np.ndarray
    log_likelihood: float
    converged: bool
    iterations: int
    gradient: np.ndarray
    fixed: tuple = ()
    trace: tuple = ()
    message: str = ""
    covariance_status: str = "inverse"

    @property
    def estimate(self) -> ParameterVector:
        return ParameterVector.from_theta(self.spec, self.theta)

    @property
    def parameter_names(self) -> tuple:
        return layout(self.spec).names

    @property
    def model_id(self) -> str:
        return self.spec.model_id

    def standard_errors(self) -> np.ndarray:
        """Standard errors on the unconstrained scale (0 for fixed parameters)."""
        return np.sqrt(np.maximum(np.diag(self.covariance), 0.0))

    def natural_standard_errors(self) -> dict:
        """Delta-method standard errors of sigma2, lambda0 and the entries of B."""
        lay = layout(self.spec)
        se = self.standard_errors()
        out = {}
        for k, pos in zip(self.spec.marker_ids, lay.log_sigma2):
            if pos is not None:
                out[f"sigma2[{k}]"] = math.exp(self.theta[pos]) * se[pos]
        for j in range(self.spec.n_baseline):
            pos = lay.log_lambda.start + j
            out[f"lambda0[{j}]"] = math.exp(self.theta[pos]) * se[pos]
        d = self.spec.re_dim
        if d:
            sl = lay.chol
            J = _cov_jacobian(self.theta[sl], d)
            V = J @ self.covariance[sl, sl] @ J.T
            rows, cols = np.tril_indices(d)
            for r, (i, j) in enumerate(zip(rows, cols)):
                out[f"B[{i},{j}]"] = math.sqrt(max(V[r, r], 0.0))
        return out

    def to_dict(self) -> dict:
        est = self.estimate
        return {
            "format": "mbsma.fitted_model",
            "version": 1,
            "spec": self.spec.to_dict(),
            "parameter_names": list(self.parameter_names),
            "theta": self.theta.tolist(),
            "covariance": self.covariance.tolist(),
            "covariance_status": self.covariance_status,
            "log_likelihood": self.log_likelihood,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "gradient": self.gradient.tolist(),
            "gradient_max_norm": float(np.max(np.abs(self.gradient), initial=0.0)),
            "fixed": list(self.fixed),
            "message": self.message,
            "trace": list(self.trace),
            "natural": {
                "beta": [b.tolist() for b in est.beta],
                "sigma2": list(est.sigma2),
                "B": est.B.tolist(),
                "gamma": est.gamma.tolist(),
                "alpha": est.alpha.tolist(),
                "lambda0": est.lambda0.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FittedJointModel":
        spec = ModelSpec.from_dict(d["spec"])
        if not spec.is_resolved:
            raise ModelError("fitted model file lacks knots or marker families")
        theta = np.asarray(d["theta"], dtype=float)
        if theta.size != layout(spec).size:
            raise ModelError("theta length does not match the model spec")
        return cls(spec=spec, theta=theta,
                   covariance=np.asarray(d["covariance"], dtype=float).reshape(theta.size, theta.size),
                   log_likelihood=float(d["log_likelihood"]), converged=bool(d["converged"]),
                   iterations=int(d["iterations"]), gradient=np.asarray(d["gradient"], dtype=float),
                   fixed=tuple(d.get("fixed", ())), trace=tuple(d.get("trace", ())),
                   message=d.get("message", ""), covariance_status=d.get("covariance_status", "inverse"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "FittedJointModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _cov_jacobian(theta_chol: np.ndarray, d: int) -> np.ndarray:
    """d vech(B) / d theta_chol, by exact differentiation of ``B = L L'``."""
    L = chol_from_theta(theta_chol, d)
    rows, cols = np.tril_indices(d)
    J = np.zeros((rows.size, rows.size))
    for c, (a, b) in enumerate(zip(rows, cols)):
        dL = np.zeros((d, d))
        dL[a, b] = L[a, b] if a == b else 1.0
        dB = dL @ L.T + L @ dL.T
        J[:, c] = dB[rows, cols]
    return J


# ---------------------------------------------------------------------------
# objective plumbing

class _Objective:
    """Log-likelihood over the free coordinates, with warm-started modes."""

    def __init__(self, spec, data, theta0, free, quad_points, survival=True):
        self.spec, self.data = spec, data
        self.theta0 = np.array(theta0, dtype=float)
        self.free = free
        self.quad_points = quad_points
        self.survival = survival
        self.modes = None

    def full(self, x):
        th = self.theta0.copy()
        th[self.free] = x
        return th

    def __call__(self, x, gradient=True):
        try:
            r = marginal_loglik(self.spec, self.data, self.full(x), gradient=gradient,
                                quad_points=self.quad_points, start=self.modes, survival=self.survival)
        except (QuadratureError, FloatingPointError, np.linalg.LinAlgError):
            return -np.inf, None
        if not np.isfinite(r.value):
            return -np.inf, None
        if np.all(np.isfinite(r.modes)):
            self.modes = r.modes
        g = r.gradient[self.free] if gradient else None
        if gradient and not np.all(np.isfinite(g)):
            return -np.inf, None
        return r.value, g

    def hessian(self, x, step):
        p = x.size
        H = np.zeros((p, p))
        for j in range(p):
            h = step * max(1.0, abs(x[j]))
            e = np.zeros(p)
            e[j] = h
            fp, gp = self(x + e)
            fm, gm = self(x - e)
            if gp is None or gm is None:
                raise FitError("non-finite likelihood while differentiating the gradient")
            H[:, j] = (gp - gm) / (2.0 * h)
        return 0.5 * (H + H.T)


def _maximize(obj: _Objective, x0, gtol, max_iter, newton_steps, hessian_step):
    """BFGS then Newton polish; returns x, value, gradient, iterations, trace, message, Hessian."""
    n_scale = max(obj.data.n_subjects, 1)
    f0, g0 = obj(x0)
    if not np.isfinite(f0):
        raise InitializationError("non-finite likelihood at the starting point")
    trace = [f0]

    def negf(x):
        f, g = obj(x)
        if g is None:
            return np.inf, np.zeros_like(x)
        return -f / n_scale, -g / n_scale

    def record(intermediate_result):
        trace.append(-intermediate_result.fun * n_scale)

    x, f, g = np.array(x0, dtype=float), f0, g0
    iters = 0
    message = ""
    if x.size and np.max(np.abs(g)) > gtol:
        res = minimize(negf, x, jac=True, method="BFGS", callback=record,
                       options={"gtol": gtol / n_scale, "maxiter": max_iter, "norm": np.inf})
        iters = int(res.nit)
        message = str(res.message)
        # scipy returns the best point seen; re-evaluate for value, gradient and modes
        if -res.fun * n_scale >= f:
            x = np.array(res.x)
            f, g = obj(x)
    H = None
    for _ in range(newton_steps):
        if not x.size or np.max(np.abs(g)) <= gtol:
            break
        H = obj.hessian(x, hessian_step)
        w, V = np.linalg.eigh(-H)
        # Newton direction on the concave part; eigenvalue floor keeps it an ascent direction
        w = np.maximum(w, 1e-8 * max(1.0, np.abs(w).max()))
        step = V @ ((V.T @ g) / w)
        t = 1.0
        for _ls in range(30):
            fn, gn = obj(x + t * step)
            if gn is not None and fn >= f:
                break
            t *= 0.5
        else:
            message = "newton polish: no ascent step"
            break
        x, f, g = x + t * step, fn, gn
        trace.append(f)
        iters += 1
        H = None
    if x.size and H is None:
        H = obj.hessian(x, hessian_step)
    return x, f, g, iters, trace, message, H


# ---------------------------------------------------------------------------
# initialization

def _marker_start(spec: ModelSpec, data: DesignData, k: int) -> tuple[np.ndarray, float | None]:
    mk = data.markers[k]
    p = len(spec.fixed_design[k])
    if mk.family == "gaussian":
        WW, Wy = mk.WW.sum(axis=0), mk.Wy.sum(axis=0)
        n = mk.n.sum()
        if n == 0:
            return np.zeros(p), 1.0
        beta = np.linalg.lstsq(WW + 1e-10 * np.eye(p), Wy, rcond=None)[0]
        rss = mk.yy.sum() - 2 * beta @ Wy + beta @ WW @ beta
        return beta, max(float(rss / n), 1e-3)
    W = mk.W.reshape(-1, p)
    y = mk.y.reshape(-1)
    m = mk.mask.reshape(-1)
    beta = np.zeros(p)
    for _ in range(25):
        pr = expit(W @ beta)
        grad = W.T @ (m * (y - pr)) - 1e-4 * beta
        H = (W * (m * pr * (1 - pr))[:, None]).T @ W + 1e-4 * np.eye(p)
        step = np.linalg.solve(H, grad)
        beta += step
        if np.max(np.abs(step)) < 1e-10:
            break
    return beta, None


def initial_theta(spec: ModelSpec, data: DesignData, quad_points: int | None = None) -> np.ndarray:
    """Marker sub-models fitted one by one ignoring the event, alpha = gamma = 0,
    piecewise baseline from events / exposure."""
    lay = layout(spec)
    theta = np.zeros(lay.size)
    L = np.zeros((spec.re_dim, spec.re_dim))
    for k, mk_id in enumerate(spec.marker_ids):
        beta, s2 = _marker_start(spec, data, k)
        sub = replace(spec, marker_ids=(mk_id,), fixed_design=(spec.fixed_design[k],),
                      random_design=(spec.random_design[k],), survival_covariates=(),
                      families=(spec.families[k],), model_id="init")
        sub_lay = layout(sub)
        sub_data = replace(data, markers=(replace(data.markers[k], re_slice=sub.re_slices[0]),),
                           X=np.zeros((data.n_subjects, 0)), re_dim=sub.re_dim)
        th = np.zeros(sub_lay.size)
        th[sub_lay.beta[0]] = beta
        if s2 is not None:
            th[sub_lay.log_sigma2[0]] = math.log(0.5 * s2)
        dk = sub.re_dim
        th[sub_lay.chol] = 0.0
        if s2 is not None:
            diag = np.cumsum(np.arange(1, dk + 1)) - 1
            th[sub_lay.chol.start + diag] = 0.5 * math.log(0.5 * s2)
        free = np.concatenate([np.arange(sub_lay.beta[0].start, sub_lay.chol.stop)])
        obj = _Objective(sub, sub_data, th, free, quad_points, survival=False)
        try:
            x, *_ = _maximize(obj, th[free], gtol=1e-3, max_iter=200, newton_steps=0, hessian_step=1e-4)
            th[free] = x
        except (FitError, np.linalg.LinAlgError):
            pass
        theta[lay.beta[k]] = th[sub_lay.beta[0]]
        if lay.log_sigma2[k] is not None:
            theta[lay.log_sigma2[k]] = th[sub_lay.log_sigma2[0]]
        sl = spec.re_slices[k]
        L[sl, sl] = chol_from_theta(th[sub_lay.chol], dk)
    if spec.re_dim:
        theta[lay.chol] = theta_from_chol(L)
    exposure = (data.hi - data.lo).sum(axis=0)
    J = spec.n_baseline
    events = np.bincount(data.jT, weights=data.delta, minlength=J)
    total = events.sum() / max(exposure.sum(), 1e-12)
    if total <= 0:
        total = 1.0 / max(exposure.sum(), 1e-12)
    rate = np.where((events > 0) & (exposure > 0), events / np.maximum(exposure, 1e-12), total)
    theta[lay.log_lambda] = np.log(rate)
    return theta


# ---------------------------------------------------------------------------

def fit(dataset, spec: ModelSpec, options: FitOptions | None = None) -> FittedJointModel:
    """Maximum-likelihood fit of ``spec`` to ``dataset``."""
    options = options or FitOptions()
    if not spec.is_resolved:
        spec = spec.resolve(dataset)
    data = dataset if isinstance(dataset, DesignData) else design_from_dataset(spec, dataset)
    lay = layout(spec)
    fixed_idx = {}
    for name, value in options.fixed.items():
        if name not in lay.names:
            raise ModelError(f"unknown parameter {name!r}")
        fixed_idx[lay.names.index(name)] = float(value)
    free = np.array([j for j in range(lay.size) if j not in fixed_idx], dtype=int)
    if data.delta.sum() == 0 and np.intersect1d(free, lay.survival).size:
        raise NoEventsError()

    if options.init_theta is not None:
        theta0 = np.asarray(options.init_theta, dtype=float).copy()
        if theta0.size != lay.size:
            raise ModelError("init_theta has the wrong length")
    else:
        theta0 = initial_theta(spec, data, options.quad_points)
    for j, v in fixed_idx.items():
        theta0[j] = v

    obj = _Objective(spec, data, theta0, free, options.quad_points)
    diag = lay.chol.start + (np.cumsum(np.arange(1, spec.re_dim + 1)) - 1)
    for _ in range(10):
        if np.isfinite(obj(theta0[free], gradient=False)[0]):
            break
        # shrink random-effect scales and the baseline hazard, then retry
        theta0[np.setdiff1d(diag, list(fixed_idx))] -= math.log(2.0)
        theta0[np.setdiff1d(np.arange(lay.log_lambda.start, lay.log_lambda.stop), list(fixed_idx))] -= math.log(2.0)
        obj = _Objective(spec, data, theta0, free, options.quad_points)
    else:
        raise InitializationError("initialization failure: non-finite likelihood after 10 re-scalings")

    x, f, g, iters, trace, message, H = _maximize(
        obj, theta0[free], options.gtol, options.max_iter, options.newton_steps, options.hessian_step)
    theta = obj.full(x)
    grad = np.zeros(lay.size)
    grad[free] = g
    cov = np.zeros((lay.size, lay.size))
    status = "inverse"
    if free.size:
        w, V = np.linalg.eigh(-H)
        if w.min() > 1e-10 * max(1.0, w.max()):
            cov_free = (V / w) @ V.T
        else:
            keep = w > 1e-10 * max(1.0, w.max())
            cov_free = (V[:, keep] / w[keep]) @ V[:, keep].T
            status = "pseudo_inverse"
        cov[np.ix_(free, free)] = 0.5 * (cov_free + cov_free.T)
    converged = bool(np.max(np.abs(g), initial=0.0) <= options.gtol)
    # reported value from cold-started modes so it is reproducible from theta alone
    f = joint_loglik(theta, data, spec, quad_points=options.quad_points)
    return FittedJointModel(spec=spec, theta=theta, covariance=cov, log_likelihood=float(f),
                            converged=converged, iterations=iters, gradient=grad,
                            fixed=tuple(lay.names[j] for j in sorted(fixed_idx)),
                            trace=tuple(float(v) for v in trace), message=message,
                            covariance_status=status)

