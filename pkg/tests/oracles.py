"""Independent reference computations shared by unit and acceptance tests."""

import math
from functools import lru_cache
from types import SimpleNamespace

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_normal, norm

from mbsma.joint_model import ModelSpec, ParameterVector, layout, marginal_loglik
from mbsma.metrics import ipcw_frame


def surv(T, d):
    T = np.asarray(T, dtype=float)
    return SimpleNamespace(obs_time=T, event=np.asarray(d, dtype=int),
                           subject_ids=tuple(f"s{i}" for i in range(T.size)))


def random_instance(rng, n=40, K=3, s=0.3, t=1.5):
    """Censored risk-set frame plus an n x K matrix of predictions in [0, 1]."""
    while True:
        T = np.round(rng.exponential(2.0, n), 2) + 0.01
        C = np.round(rng.exponential(5.0, n), 2) + 0.01
        ds = surv(np.minimum(T, C), (T <= C).astype(int))
        try:
            f = ipcw_frame(ds, s, t)
        except ValueError:
            continue
        if f.n_events and f.n_events < f.n_at_risk:
            break
    P = rng.random((f.n_at_risk, K))
    if K > 2 and rng.random() < 0.3:
        P[:, -1] = P[:, 0]                       # collinear columns
    if rng.random() < 0.3:
        P[:, 0] = np.clip(f.D + 0.1 * rng.normal(size=f.n_at_risk), 0, 1)
    return f, P


def loop_weighted_brier(P, w, frame):
    """Direct per-subject loop over the weighted residual form."""
    tot = 0.0
    for i in range(P.shape[0]):
        pi = sum(P[i, k] * w[k] for k in range(P.shape[1]))
        tot += frame.weights[i] * (frame.D[i] - pi) ** 2
    return tot / P.shape[0]


@lru_cache(maxsize=None)
def _heads(k, m):
    if k == 0:
        return np.zeros((1, 0), dtype=int)
    g = np.stack(np.meshgrid(*[np.arange(m + 1)] * k, indexing="ij"), -1).reshape(-1, k)
    return g[g.sum(1) <= m]


def grid_minimum(P, frame, step=0.001):
    """Exact minimum of the weighted Brier score over the simplex grid of the given step.

    Coordinates 1..K-2 are enumerated; for each, the remaining two coordinates
    share the leftover mass and the objective is a convex quadratic in one of
    them, so its grid minimum is one of the two grid points bracketing the
    continuous minimizer.  K <= 4.
    """
    K = P.shape[1]
    m = int(round(1 / step))
    n = P.shape[0]
    Q = (P * frame.weights[:, None]).T @ P / n
    c = (P * (frame.weights * frame.D)[:, None]).sum(0) / n
    const = np.sum(frame.weights * frame.D) / n
    if K == 1:
        return float(Q[0, 0] - 2 * c[0] + const)
    heads = _heads(K - 2, m)
    r = m - heads.sum(1)
    # w = w0 + u (e_{K-1} - e_K), u in {0, step, ..., r step}
    w0 = np.zeros((heads.shape[0], K))
    w0[:, :K - 2] = heads * step
    w0[:, K - 1] = r * step
    e = np.zeros(K)
    e[K - 2], e[K - 1] = 1.0, -1.0
    a = e @ Q @ e
    b = 2 * (w0 @ (Q @ e) - c @ e)
    cands = [np.zeros_like(r), r]
    if a > 0:
        u = np.clip(-b / (2 * a) / step, 0.0, r)
        cands += [np.floor(u).astype(int), np.ceil(u).astype(int)]
    best = np.inf
    for j in cands:
        w = w0 + (j * step)[:, None] * e
        vals = np.einsum("hi,ij,hj->h", w, Q, w) - 2 * w @ c + const
        best = min(best, float(vals.min()))
    return best


def _piecewise_cumhaz(knots, lam, a, c, u):
    """``int_0^u lam0(v) exp(a + c v) dv`` with the last piece extended, vectorized over ``a``."""
    kn = np.asarray(knots, dtype=float)
    edges = list(kn[:-1]) + [np.inf]
    tot = np.zeros_like(a)
    for j in range(len(kn) - 1):
        lo, hi = edges[j], min(edges[j + 1], u)
        if hi <= lo:
            continue
        seg = (hi - lo) if c == 0 else np.exp(c * lo) * np.expm1(c * (hi - lo)) / c
        tot = tot + lam[j] * np.exp(a) * seg
    return tot


def grid_risk_intercept(p, history, t, n=20001, width=10.0):
    """Risk in ``(s, s + t]`` for a one-marker Gaussian random-intercept model by grid integration.

    ``p`` is a ParameterVector with fixed design (intercept, time), random design
    (intercept,) and survival covariates matching ``history.covariate_names``.
    """
    spec = p.spec
    sd = math.sqrt(p.B[0, 0])
    b = np.linspace(-width * sd, width * sd, n)
    s = history.landmark
    beta0, beta1 = p.beta[0]
    lf = norm.logpdf(b, 0.0, sd)
    for tj, yj in zip(history.time, history.value):
        lf = lf + norm.logpdf(yj, beta0 + beta1 * tj + b, math.sqrt(p.sigma2[0]))
    x = dict(zip(history.covariate_names, history.covariates))
    a = sum(g * x[c] for g, c in zip(p.gamma, spec.survival_covariates)) + p.alpha[0] * (beta0 + b)
    c = p.alpha[0] * beta1
    L_s = _piecewise_cumhaz(spec.knots, p.lambda0, a, c, s)
    L_st = _piecewise_cumhaz(spec.knots, p.lambda0, a, c, s + t)
    lf = lf - L_s
    w = np.exp(lf - logsumexp(lf))
    return float(1.0 - np.sum(w * np.exp(-(L_st - L_s))))


# joint-model likelihood on a brute-force grid

def oracle_logf(spec, theta, ds, i, bgrid):
    """log integrand of subject ``i`` at rows of ``bgrid``, recomputed from scratch."""
    p = ParameterVector.from_theta(spec, theta)
    s = ds.subjects[i]
    x = dict(zip(ds.covariate_names, s.baseline_covariates))
    lf = multivariate_normal(np.zeros(spec.re_dim), p.B).logpdf(bgrid)
    a = sum(g * x[c] for g, c in zip(p.gamma, spec.survival_covariates)) + np.zeros(len(bgrid))
    c = np.zeros(len(bgrid))
    for k, mk in enumerate(spec.marker_ids):
        sl = spec.re_slices[k]
        bk = bgrid[:, sl]

        def m_of(t):
            w = np.array([1.0 if col == "intercept" else t for col in spec.fixed_design[k]])
            z = np.array([1.0 if col == "intercept" else t for col in spec.random_design[k]])
            return w @ p.beta[k] + bk @ z

        for o in ds.observations:
            if o.subject_id == s.subject_id and o.marker_id == mk:
                m = m_of(o.time)
                if spec.families[k] == "gaussian":
                    lf = lf + norm.logpdf(o.value, m, math.sqrt(p.sigma2[k]))
                else:
                    lf = lf + o.value * m - np.logaddexp(0, m)
        a = a + p.alpha[k] * m_of(0.0)
        c = c + p.alpha[k] * (m_of(1.0) - m_of(0.0))
    kn = np.array(spec.knots)
    T = s.observed_time
    Lam = np.zeros(len(bgrid))
    edges = list(kn[:-1]) + [np.inf]
    for j in range(len(kn) - 1):
        lo, hi = edges[j], min(edges[j + 1], T)
        if hi <= lo:
            continue
        safe_c = np.where(c == 0, 1.0, c)
        integral = np.where(c == 0, hi - lo, np.exp(c * lo) * np.expm1(c * (hi - lo)) / safe_c)
        Lam += p.lambda0[j] * np.exp(a) * integral
    if s.event_indicator:
        j = min(max(np.searchsorted(kn, T, side="left") - 1, 0), len(kn) - 2)
        lf = lf + math.log(p.lambda0[j]) + a + c * T
    return lf - Lam


def grid_loglik(spec, theta, ds, n1=4001, n2=701):
    d = spec.re_dim
    p = ParameterVector.from_theta(spec, theta)
    sd = np.sqrt(np.diag(p.B))
    total = []
    for i in range(ds.n_subjects):
        if d == 1:
            g = np.linspace(-9 * sd[0], 9 * sd[0], n1)
            lf = oracle_logf(spec, theta, ds, i, g[:, None])
            total.append(logsumexp(lf) + math.log(g[1] - g[0]))
        else:
            g0 = np.linspace(-9 * sd[0], 9 * sd[0], n2)
            g1 = np.linspace(-9 * sd[1], 9 * sd[1], n2)
            G = np.stack(np.meshgrid(g0, g1, indexing="ij"), -1).reshape(-1, 2)
            lf = oracle_logf(spec, theta, ds, i, G)
            total.append(logsumexp(lf) + math.log((g0[1] - g0[0]) * (g1[1] - g1[0])))
    return math.fsum(total)


def spec_with_random(ds, families_random, covariates=("x",), n_pieces=3):
    K = len(families_random)
    return ModelSpec(tuple(range(1, K + 1)), (("intercept", "time"),) * K, tuple(families_random),
                     covariates, n_pieces).resolve(ds)


def theta_point(spec, rng=None, scale=0.0):
    lay = layout(spec)
    th = np.zeros(lay.size)
    th[lay.alpha] = 0.4
    th[lay.log_lambda] = math.log(0.2)
    for pos in lay.log_sigma2:
        if pos is not None:
            th[pos] = math.log(0.5)
    if rng is not None:
        th = th + scale * rng.normal(size=lay.size)
    return th


TOYS = {
    "gaussian_intercept": (("gaussian",), [("intercept",)]),
    "binary_intercept": (("binary",), [("intercept",)]),
    "gaussian_intercept_slope": (("gaussian",), [("intercept", "time")]),
    "mixed_intercepts": (("gaussian", "binary"), [("intercept",), ("intercept",)]),
}


def central_differences(spec, data, th, h=1e-5):
    fd = np.zeros_like(th)
    for j in range(th.size):
        e = np.zeros_like(th)
        e[j] = h
        fd[j] = (marginal_loglik(spec, data, th + e).value - marginal_loglik(spec, data, th - e).value) / (2 * h)
    return fd
