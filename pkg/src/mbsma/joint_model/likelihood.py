"""Marginal likelihood of the shared-random-effect joint model.

The random effects are integrated out subject by subject with adaptive
Gauss-Hermite quadrature: the log-integrand is maximized by Newton's method
(it is strictly concave in ``b``), and a tensor-product rule is centred at the
mode and scaled by the Cholesky factor of the inverse curvature.

Arrays follow one convention throughout: random effects ``b`` have shape
``(N, R, d)`` and parameter arrays a leading axis of size 1 or ``R``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit, logsumexp

from .design import DesignData
from .model import (MAX_RE_DIM, CapabilityError, ModelSpec, ParamArrays,
                    exp_moments, layout)

LOG2PI = math.log(2.0 * math.pi)


class QuadratureError(RuntimeError):
    def __init__(self, subject_id, message="mode search failed to converge"):
        super().__init__(f"{message} (subject {subject_id})")
        self.subject_id = subject_id


def default_quad_points(d: int) -> int:
    """9 nodes per dimension up to 2-D; fewer beyond to keep the grid below ~10^3 nodes."""
    if d <= 2:
        return 9
    if d <= 4:
        return 5
    return 3


@lru_cache(maxsize=32)
def gh_grid(d: int, q: int):
    """Tensor-product Gauss-Hermite nodes (physicists' weight exp(-x^2)).

    Returns ``x`` of shape (q**d, d) and ``log w + |x|^2`` of shape (q**d,).
    """
    x1, w1 = np.polynomial.hermite.hermgauss(q)
    grids = np.meshgrid(*([x1] * d), indexing="ij")
    x = np.stack([g.reshape(-1) for g in grids], axis=-1)
    lw = np.zeros(x.shape[0])
    for g in np.meshgrid(*([np.log(w1)] * d), indexing="ij"):
        lw += g.reshape(-1)
    return x, lw + np.sum(x * x, axis=1)


@dataclass
class Evaluation:
    logf: np.ndarray
    eta: list
    rss: list
    prob: list
    a: np.ndarray
    c: np.ndarray
    Fj: np.ndarray
    F: np.ndarray
    Fc: np.ndarray | None
    Fcc: np.ndarray | None
    v: np.ndarray


def evaluate(data: DesignData, pa: ParamArrays, b: np.ndarray, order: int = 0,
             survival: bool = True) -> Evaluation:
    """Log of the complete-data integrand ``L_Y(b) lambda(T|b)^delta S(T|b) phi(b; 0, B)``.

    ``order`` controls how many c-derivatives of the cumulative hazard are
    returned (needed for gradients / Hessians).
    """
    N, R, d = b.shape
    logf = np.zeros((N, R))
    if pa.gamma.shape[1]:
        a = np.broadcast_to(np.einsum("nc,rc->nr", data.X, pa.gamma), (N, R)).copy()
    else:
        a = np.zeros((N, R))
    c = np.zeros((N, R))
    etas, rsss, probs = [], [], []
    for k, mk in enumerate(data.markers):
        bk = b[:, :, mk.re_slice]
        eta = pa.beta[k][None, :, :] + np.einsum("nrq,pq->nrp", bk, mk.S)
        etas.append(eta)
        if mk.family == "gaussian":
            s2 = pa.sigma2[k][None, :]
            rss = (mk.yy[:, None] - 2.0 * np.einsum("nrp,np->nr", eta, mk.Wy)
                   + np.einsum("nrp,npq,nrq->nr", eta, mk.WW, eta))
            rss = np.maximum(rss, 0.0)
            rsss.append(rss)
            probs.append(None)
            logf += -0.5 * mk.n[:, None] * (LOG2PI + np.log(s2)) - 0.5 * rss / s2
        else:
            lin = np.einsum("njp,nrp->nrj", mk.W, eta)
            probs.append(expit(lin))
            rsss.append(None)
            logf += visit_sum(mk.mask[:, None, :] * (mk.y[:, None, :] * lin - np.logaddexp(0.0, lin)), -1)
        alpha_k = pa.alpha[None, :, k]
        a = a + alpha_k * np.einsum("np,nrp->nr", mk.U, eta)
        if mk.time_col >= 0:
            c = c + alpha_k * eta[:, :, mk.time_col]

    Fj = F = Fc = Fcc = None
    if survival:
        I = exp_moments(c[:, :, None], data.lo[:, None, :], data.hi[:, None, :], order=order)
        scale = pa.lam[None, :, :] * np.exp(a)[:, :, None]
        Fj = scale * I[0]
        F = Fj.sum(axis=-1)
        if order >= 1:
            Fc = (scale * I[1]).sum(axis=-1)
        if order >= 2:
            Fcc = (scale * I[2]).sum(axis=-1)
        loglam_T = np.take_along_axis(np.broadcast_to(pa.log_lam[None], (N,) + pa.log_lam.shape),
                                      data.jT[:, None, None], axis=2)[:, :, 0]
        logf += data.delta[:, None] * (loglam_T + a + c * data.T[:, None]) - F

    v = np.einsum("rij,nrj->nri", pa.Linv, b)
    logf += -0.5 * d * LOG2PI - pa.logdetL[None, :] - 0.5 * np.sum(v * v, axis=-1)
    return Evaluation(logf, etas, rsss, probs, a, c, Fj, F, Fc, Fcc, v)


def visit_sum(x: np.ndarray, axis: int) -> np.ndarray:
    """Sequential sum over the padded visit axis.

    Trailing zero padding leaves a left-to-right sum unchanged, so a subject's
    value does not depend on the padded width of the batch it sits in.
    """
    x = np.moveaxis(x, axis, 0)
    out = np.zeros(x.shape[1:])
    for xj in x:
        out += xj
    return out


def b_derivatives(data: DesignData, pa: ParamArrays, b: np.ndarray, survival: bool = True):
    """Log-integrand, its gradient and Hessian in ``b`` at one point per subject.

    ``b`` has shape (N, d); ``pa`` holds a single parameter draw.
    """
    N, d = b.shape
    ev = evaluate(data, pa, b[:, None, :], order=2, survival=survival)
    grad = np.zeros((N, d))
    hess = np.zeros((N, d, d))
    va = np.zeros((N, d))
    vc = np.zeros((N, d))
    for k, mk in enumerate(data.markers):
        sl = mk.re_slice
        eta = ev.eta[k][:, 0, :]
        if mk.family == "gaussian":
            s2 = pa.sigma2[k][0]
            g_eta = (mk.Wy - np.einsum("npq,nq->np", mk.WW, eta)) / s2
            H_eta = -mk.WW / s2
        else:
            p = ev.prob[k][:, 0, :]
            r = mk.mask * (mk.y - p)
            g_eta = visit_sum(r[:, :, None] * mk.W, 1)
            wpq = (mk.mask * p * (1 - p))[:, :, None, None] * mk.W[:, :, :, None] * mk.W[:, :, None, :]
            H_eta = -visit_sum(wpq, 1)
        grad[:, sl] += np.einsum("np,pq->nq", g_eta, mk.S)
        hess[:, sl, sl] += np.einsum("pi,npq,qj->nij", mk.S, H_eta, mk.S)
        alpha_k = pa.alpha[0, k]
        va[:, sl] += alpha_k * np.einsum("np,pq->nq", mk.U, mk.S)
        vc[:, sl] += alpha_k * (mk.e_time @ mk.S)[None, :]
    if survival:
        F, Fc, Fcc = ev.F[:, 0], ev.Fc[:, 0], ev.Fcc[:, 0]
        grad += (data.delta - F)[:, None] * va + (data.delta * data.T - Fc)[:, None] * vc
        hess -= (F[:, None, None] * va[:, :, None] * va[:, None, :]
                 + Fc[:, None, None] * (va[:, :, None] * vc[:, None, :] + vc[:, :, None] * va[:, None, :])
                 + Fcc[:, None, None] * vc[:, :, None] * vc[:, None, :])
    Binv = pa.Linv[0].T @ pa.Linv[0]
    grad -= np.einsum("nj,jk->nk", b, Binv)
    hess -= Binv[None]
    return ev.logf[:, 0], grad, hess


def find_modes(data: DesignData, pa: ParamArrays, start: np.ndarray | None = None,
               survival: bool = True, tol: float = 1e-13, max_iter: int = 100):
    """Newton ascent on the strictly concave log-integrand, batched over subjects.

    Returns modes (N, d) and the negative Hessians at the modes (N, d, d).
    """
    N, d = data.n_subjects, data.re_dim
    b = np.zeros((N, d)) if start is None else np.array(start, dtype=float)
    f, g, H = b_derivatives(data, pa, b, survival)
    active = np.ones(N, dtype=bool)
    for _ in range(max_iter):
        negH = -H
        step = np.linalg.solve(negH[active], g[active][..., None])[..., 0]
        # dual-norm stopping rule is scale free: g' H^{-1} g
        dec = np.einsum("nd,nd->n", g[active], step)
        idx = np.flatnonzero(active)
        done = dec <= tol * np.maximum(1.0, np.abs(f[idx]))
        active[idx[done]] = False
        idx, step = idx[~done], step[~done]
        if idx.size == 0:
            break
        t = np.ones(idx.size)
        sub = _subset(data, idx)
        b_new = b[idx] + step
        f_new, g_new, H_new = b_derivatives(sub, pa, b_new, survival)
        for _ls in range(40):
            bad = ~(f_new >= f[idx] - 1e-12 * np.abs(f[idx])) | ~np.isfinite(f_new)
            if not bad.any():
                break
            t[bad] *= 0.5
            b_new[bad] = b[idx[bad]] + t[bad, None] * step[bad]
            fb, gb, Hb = b_derivatives(_subset(sub, np.flatnonzero(bad)), pa, b_new[bad], survival)
            f_new[bad], g_new[bad], H_new[bad] = fb, gb, Hb
        b[idx], f[idx], g[idx], H[idx] = b_new, f_new, g_new, H_new
    else:
        bad = np.flatnonzero(active)
        if bad.size:
            raise QuadratureError(data.subject_ids[bad[0]])
    if not np.all(np.isfinite(b)):
        raise QuadratureError(data.subject_ids[int(np.flatnonzero(~np.isfinite(b).all(1))[0])])
    return b, -H


def _subset(data: DesignData, idx: np.ndarray) -> DesignData:
    if idx.size == data.n_subjects and np.array_equal(idx, np.arange(data.n_subjects)):
        return data
    markers = []
    for mk in data.markers:
        kw = {f: (getattr(mk, f)[idx] if getattr(mk, f) is not None else None)
              for f in ("U", "n", "WW", "Wy", "yy", "W", "y", "mask")}
        markers.append(type(mk)(mk.family, mk.re_slice, mk.S, e_time=mk.e_time, time_col=mk.time_col, **kw))
    return DesignData(subject_ids=tuple(data.subject_ids[i] for i in idx), markers=tuple(markers),
                      T=data.T[idx], delta=data.delta[idx], X=data.X[idx], lo=data.lo[idx],
                      hi=data.hi[idx], jT=data.jT[idx], re_dim=data.re_dim)


def subset_design(data: DesignData, idx) -> DesignData:
    return _subset(data, np.asarray(idx, dtype=int))


def quadrature_nodes(modes: np.ndarray, negH: np.ndarray, q: int):
    """Adaptive nodes ``b = mode + sqrt(2) A x`` and per-subject log-Jacobian."""
    N, d = modes.shape
    x, lwx = gh_grid(d, q)
    cov = np.linalg.inv(negH)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    A = np.linalg.cholesky(cov)
    nodes = modes[:, None, :] + math.sqrt(2.0) * np.einsum("nij,rj->nri", A, x)
    logjac = 0.5 * d * math.log(2.0) + np.sum(np.log(np.diagonal(A, axis1=1, axis2=2)), axis=1)
    return nodes, lwx, logjac, A


@dataclass
class LikelihoodResult:
    value: float
    per_subject: np.ndarray
    gradient: np.ndarray | None
    modes: np.ndarray


def marginal_loglik(spec: ModelSpec, data: DesignData, theta: np.ndarray, *, gradient: bool = False,
                    quad_points: int | None = None, start: np.ndarray | None = None,
                    survival: bool = True) -> LikelihoodResult:
    """AGHQ marginal log-likelihood and, on request, its exact gradient in theta.

    The gradient is the derivative of the quadrature approximation itself
    (nodes move with theta), so it agrees with finite differences of ``value``
    whatever the number of quadrature points.
    """
    d = spec.re_dim
    if d > MAX_RE_DIM:
        raise CapabilityError(f"random-effect dimension cap: {d} > {MAX_RE_DIM}")
    q = quad_points or default_quad_points(d)
    pa = ParamArrays.from_thetas(spec, theta)
    modes, negH = find_modes(data, pa, start=start, survival=survival)
    nodes, lwx, logjac, A = quadrature_nodes(modes, negH, q)
    ev = evaluate(data, pa, nodes, order=1 if gradient else 0, survival=survival)
    lterms = ev.logf + lwx[None, :]
    per_subject = logjac + logsumexp(lterms, axis=1)
    value = math.fsum(per_subject.tolist())
    grad = None
    if gradient:
        omega = np.exp(lterms - logsumexp(lterms, axis=1, keepdims=True))
        grad = _score(spec, data, pa, ev, omega, survival)
        if d:
            grad += _node_shift_correction(spec, data, pa, modes, negH, A, gh_grid(d, q)[0],
                                           omega, ev, nodes, survival)
    return LikelihoodResult(value, per_subject, grad, modes)


def _score(spec, data, pa, ev, omega, survival):
    """``sum_i sum_r omega_ir * d/dtheta log f_i(b_ir)``; linear in ``omega``, which may be signed."""
    lay = layout(spec)
    g = np.zeros(lay.size)
    wsum = omega.sum(axis=1)
    if survival:
        ga = data.delta[:, None] - ev.F
        gc = (data.delta * data.T)[:, None] - ev.Fc
        Ega = np.sum(omega * ga, axis=1)
        Egc = np.sum(omega * gc, axis=1)
    for k, mk in enumerate(data.markers):
        eta = ev.eta[k]
        if mk.family == "gaussian":
            s2 = pa.sigma2[k][0]
            Eeta = np.einsum("nr,nrp->np", omega, eta)
            g[lay.beta[k]] += np.sum(wsum[:, None] * mk.Wy - np.einsum("npq,nq->np", mk.WW, Eeta), axis=0) / s2
            Erss = np.sum(omega * ev.rss[k], axis=1)
            g[lay.log_sigma2[k]] += np.sum(-0.5 * mk.n * wsum + 0.5 * Erss / s2)
        else:
            Ep = np.einsum("nr,nrj->nj", omega, ev.prob[k])
            g[lay.beta[k]] += np.einsum("nj,njp->p", mk.mask * (wsum[:, None] * mk.y - Ep), mk.W)
        if survival:
            alpha_k = pa.alpha[0, k]
            g[lay.beta[k]] += alpha_k * (Ega @ mk.U + np.sum(Egc) * mk.e_time)
            m0 = np.einsum("np,nrp->nr", mk.U, eta)
            val = ga * m0
            if mk.time_col >= 0:
                val = val + gc * eta[:, :, mk.time_col]
            g[lay.alpha.start + k] += np.sum(omega * val)
    if survival:
        if spec.survival_covariates:
            g[lay.gamma] += Ega @ data.X
        EFj = np.einsum("nr,nrj->nj", omega, ev.Fj)
        J = EFj.shape[1]
        events = np.bincount(data.jT, weights=data.delta * wsum, minlength=J)
        g[lay.log_lambda] += events - EFj.sum(axis=0)
    d = data.re_dim
    if d:
        Evv = np.einsum("nr,nri,nrj->ij", omega, ev.v, ev.v)
        L = pa.L[0]
        G = pa.Linv[0].T @ Evv - wsum.sum() * np.diag(1.0 / np.diag(L))
        rows, cols = np.tril_indices(d)
        gl = G[rows, cols]
        gl = np.where(rows == cols, gl * L[rows, cols], gl)
        g[lay.chol] += gl
    return g


def _node_gradient(data: DesignData, pa: ParamArrays, ev: Evaluation, b: np.ndarray) -> np.ndarray:
    """Gradient in ``b`` of the log-integrand at every node, shape (N, R, d)."""
    grad = np.zeros(b.shape)
    va = np.zeros((data.n_subjects, b.shape[2]))
    vc = np.zeros(b.shape[2])
    for k, mk in enumerate(data.markers):
        sl = mk.re_slice
        if mk.family == "gaussian":
            g_eta = (mk.Wy[:, None, :] - np.einsum("npq,nrq->nrp", mk.WW, ev.eta[k])) / pa.sigma2[k][0]
        else:
            r = mk.mask[:, None, :] * (mk.y[:, None, :] - ev.prob[k])
            g_eta = np.einsum("nrj,njp->nrp", r, mk.W)
        grad[:, :, sl] += np.einsum("nrp,pq->nrq", g_eta, mk.S)
        va[:, sl] += pa.alpha[0, k] * np.einsum("np,pq->nq", mk.U, mk.S)
        vc[sl] += pa.alpha[0, k] * (mk.e_time @ mk.S)
    if ev.F is not None:
        grad += (data.delta[:, None] - ev.F)[:, :, None] * va[:, None, :]
        grad += ((data.delta * data.T)[:, None] - ev.Fc)[:, :, None] * vc
    Binv = pa.Linv[0].T @ pa.Linv[0]
    return grad - np.einsum("nrj,jk->nrk", b, Binv)


# step (in posterior standard deviations) for the fourth-order difference stencils
_FD_STEP = 1e-2
_D1 = (np.array([-2.0, -1.0, 1.0, 2.0]), np.array([1.0, -8.0, 8.0, -1.0]) / 12.0)
_D2 = (np.array([-2.0, -1.0, 0.0, 1.0, 2.0]), np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0)


def _node_shift_correction(spec, data, pa, modes, negH, A, x, omega, ev, nodes, survival):
    """Part of the derivative of the AGHQ value carried by the moving nodes.

    The nodes ``mu + sqrt(2) A x`` depend on theta through the mode ``mu`` and
    the curvature ``H``.  Implicit differentiation of ``grad_b log f(mu) = 0``
    and of the Cholesky factor reduces the extra term to
    ``(a' grad_b - <C, hess_b>)`` applied to the complete-data score at the
    mode, with per-subject ``a`` and ``C``.  Derivatives in ``b`` of the
    score and the third derivatives of ``log f`` use fourth-order stencils.
    """
    N, d = modes.shape
    gb = _node_gradient(data, pa, ev, nodes)
    r = np.einsum("nr,nri->ni", omega, gb)
    M = math.sqrt(2.0) * np.einsum("nr,nri,rj->nij", omega, gb, x)
    Ainv = np.linalg.inv(A)
    K = np.tril(np.swapaxes(A, 1, 2) @ (np.swapaxes(Ainv, 1, 2) + M))
    K[:, np.arange(d), np.arange(d)] *= 0.5
    C = -(A @ K @ np.swapaxes(A, 1, 2))
    C = 0.5 * (C + np.swapaxes(C, 1, 2))

    P = np.linalg.inv(negH)
    sd = np.sqrt(np.diagonal(P, axis1=1, axis2=2))
    u = np.zeros((N, d))
    for j in range(d):
        h = _FD_STEP * sd[:, j]
        for off, wt in zip(*_D1):
            b = modes.copy()
            b[:, j] += off * h
            hess = b_derivatives(data, pa, b, survival)[2]
            u[:, j] += wt * np.einsum("nij,nij->n", C, hess) / h
    a = np.linalg.solve(negH, (r - u)[..., None])[..., 0]

    points, weights = [], []
    na = np.sqrt(np.einsum("ni,nij,nj->n", a, negH, a))
    dirn = a / np.where(na > 0, na, 1.0)[:, None]
    for off, wt in zip(*_D1):
        points.append(modes + off * _FD_STEP * dirn)
        weights.append(wt * na / _FD_STEP)
    lam, V = np.linalg.eigh(C)
    for m in range(d):
        e = V[:, :, m]
        s = np.sqrt(np.einsum("ni,nij,nj->n", e, P, e))
        for off, wt in zip(*_D2):
            points.append(modes + off * _FD_STEP * s[:, None] * e)
            weights.append(-wt * lam[:, m] / (_FD_STEP * s) ** 2)
    points = np.stack(points, axis=1)
    weights = np.stack(weights, axis=1)
    ev_pts = evaluate(data, pa, points, order=1, survival=survival)
    return _score(spec, data, pa, ev_pts, weights, survival)


def joint_loglik(theta_or_params, dataset_or_design, spec: ModelSpec | None = None, *,
                 quad_points: int | None = None) -> float:
    """Marginal log-likelihood of a dataset under the joint model.

    Accepts either a :class:`ParameterVector` (spec taken from it) or a theta
    vector with an explicit resolved ``spec``.
    """
    from .design import design_from_dataset
    from .model import ParameterVector

    if isinstance(theta_or_params, ParameterVector):
        spec = theta_or_params.spec
        theta = theta_or_params.to_theta()
    else:
        theta = np.asarray(theta_or_params, dtype=float)
        if spec is None:
            raise ValueError("spec required with a raw theta vector")
    data = dataset_or_design if isinstance(dataset_or_design, DesignData) else design_from_dataset(spec, dataset_or_design)
    return marginal_loglik(spec, data, theta, quad_points=quad_points).value
