"""Model specification, parameter vector and single-subject model quantities."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

MAX_RE_DIM = 6
DEFAULT_PIECES = 5
RANDOM_COLUMNS = ("intercept", "time")


class ModelError(ValueError):
    """Invalid model specification or parameter vector."""


class CapabilityError(ModelError):
    """Request exceeds what the engine supports (e.g. random-effect dimension cap)."""


@dataclass(frozen=True)
class MarkerFamily:
    tag: str
    link: str
    dispersion_present: bool


GAUSSIAN = MarkerFamily("gaussian", "identity", True)
BINARY = MarkerFamily("binary", "logit", False)
_FAMILIES = {"gaussian": GAUSSIAN, "binary": BINARY}


def family(tag: str) -> MarkerFamily:
    try:
        return _FAMILIES[tag]
    except KeyError:
        raise ModelError(f"unsupported marker family {tag!r}") from None


@dataclass(frozen=True)
class ModelSpec:
    """Declarative one-, two- or multi-marker joint model.

    ``fixed_design`` / ``random_design`` hold, per marker, the column names of
    the fixed- and random-effect designs: ``"intercept"``, ``"time"`` or the
    name of a baseline covariate (fixed design only). ``families`` and
    ``knots`` are filled in by :meth:`resolve`.
    """

    marker_ids: tuple
    fixed_design: tuple
    random_design: tuple
    survival_covariates: tuple = ()
    n_pieces: int = DEFAULT_PIECES
    knots: tuple | None = None
    families: tuple | None = None
    association: str = "current_value"
    model_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "marker_ids", tuple(int(k) for k in self.marker_ids))
        object.__setattr__(self, "fixed_design", tuple(tuple(c) for c in self.fixed_design))
        object.__setattr__(self, "random_design", tuple(tuple(c) for c in self.random_design))
        object.__setattr__(self, "survival_covariates", tuple(self.survival_covariates))
        if self.knots is not None:
            object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))
        if self.families is not None:
            object.__setattr__(self, "families", tuple(self.families))
        K = len(self.marker_ids)
        if K < 1:
            raise ModelError("a model needs at least one marker")
        if len(set(self.marker_ids)) != K:
            raise ModelError("duplicate marker ids")
        if len(self.fixed_design) != K or len(self.random_design) != K:
            raise ModelError("one fixed and one random design per marker required")
        for fx, rd in zip(self.fixed_design, self.random_design):
            if len(set(fx)) != len(fx) or len(set(rd)) != len(rd):
                raise ModelError("duplicate design column")
            if not set(rd) <= set(fx):
                raise ModelError("random design columns must be a subset of the fixed design")
            if not set(rd) <= set(RANDOM_COLUMNS):
                raise ModelError("random design supports only intercept and time columns")
        if self.association != "current_value":
            raise ModelError(f"unsupported association {self.association!r}")
        if self.n_pieces < 1:
            raise ModelError("need at least one baseline hazard piece")
        if self.knots is not None:
            kn = np.asarray(self.knots)
            if kn[0] != 0.0 or np.any(np.diff(kn) <= 0):
                raise ModelError("knots must start at 0 and be strictly increasing")
        if self.re_dim > MAX_RE_DIM:
            raise CapabilityError(
                f"random-effect dimension cap: {self.re_dim} > {MAX_RE_DIM}")

    @classmethod
    def linear(cls, marker_ids: Sequence[int], covariates: Sequence[str] = (),
               n_pieces: int = DEFAULT_PIECES, model_id: str | None = None) -> "ModelSpec":
        """Random intercept + slope on time for every marker, survival adjusted for ``covariates``."""
        K = len(marker_ids)
        return cls(marker_ids=tuple(marker_ids),
                   fixed_design=(("intercept", "time"),) * K,
                   random_design=(("intercept", "time"),) * K,
                   survival_covariates=tuple(covariates),
                   n_pieces=n_pieces,
                   model_id=model_id or default_model_id(marker_ids))

    @property
    def n_markers(self) -> int:
        return len(self.marker_ids)

    @property
    def re_dim(self) -> int:
        return sum(len(r) for r in self.random_design)

    @property
    def re_slices(self) -> tuple[slice, ...]:
        out, start = [], 0
        for r in self.random_design:
            out.append(slice(start, start + len(r)))
            start += len(r)
        return tuple(out)

    @property
    def is_resolved(self) -> bool:
        return self.knots is not None and self.families is not None

    @property
    def n_baseline(self) -> int:
        return len(self.knots) - 1 if self.knots is not None else self.n_pieces

    def resolve(self, dataset) -> "ModelSpec":
        """Attach marker families and baseline knots from ``dataset``."""
        for k in self.marker_ids:
            if not 1 <= k <= dataset.n_markers:
                raise ModelError(f"marker id {k} not in dataset")
        names = set(dataset.covariate_names)
        for fx in self.fixed_design:
            for c in fx:
                if c not in RANDOM_COLUMNS and c not in names:
                    raise ModelError(f"unknown design covariate {c!r}")
        for c in self.survival_covariates:
            if c not in names:
                raise ModelError(f"unknown survival covariate {c!r}")
        fams = tuple(dataset.markers[k - 1].family for k in self.marker_ids)
        knots = self.knots
        if knots is None:
            knots = tuple(default_knots(dataset.obs_time, dataset.event, self.n_pieces))
        return replace(self, families=fams, knots=knots,
                       model_id=self.model_id or default_model_id(self.marker_ids))

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "marker_ids": list(self.marker_ids),
            "fixed_design": [list(c) for c in self.fixed_design],
            "random_design": [list(c) for c in self.random_design],
            "survival_covariates": list(self.survival_covariates),
            "n_pieces": self.n_pieces,
            "knots": None if self.knots is None else list(self.knots),
            "families": None if self.families is None else list(self.families),
            "association": self.association,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        ids = d["marker_ids"]
        K = len(ids)
        fixed = d.get("fixed_design") or [["intercept", "time"]] * K
        rnd = d.get("random_design") or [["intercept", "time"]] * K
        n_pieces = int(d.get("n_pieces", d.get("knot_count", DEFAULT_PIECES)))
        return cls(marker_ids=tuple(ids), fixed_design=fixed, random_design=rnd,
                   survival_covariates=tuple(d.get("survival_covariates", ())),
                   n_pieces=n_pieces, knots=d.get("knots"), families=d.get("families"),
                   association=d.get("association", "current_value"),
                   model_id=d.get("model_id"))


def default_model_id(marker_ids: Sequence[int]) -> str:
    return "jm_" + "_".join(str(k) for k in marker_ids)


def load_spec(path) -> ModelSpec:
    with open(path) as fh:
        return ModelSpec.from_dict(json.load(fh))


def default_knots(obs_time, event, n_pieces: int) -> np.ndarray:
    """Breakpoints ``0 = tau_0 < ... < tau_J = max T*`` with interior knots at
    event-time quantiles. Falls back to equally spaced knots without events."""
    obs_time = np.asarray(obs_time, dtype=float)
    end = float(obs_time.max())
    ev = obs_time[np.asarray(event) == 1]
    if n_pieces == 1:
        return np.array([0.0, end])
    probs = np.arange(1, n_pieces) / n_pieces
    inner = np.quantile(ev, probs) if ev.size else probs * end
    kn = np.unique(np.concatenate([[0.0], inner, [end]]))
    kn = kn[(kn >= 0) & (kn <= end)]
    if kn[0] != 0.0:
        kn = np.concatenate([[0.0], kn])
    return kn


# ---------------------------------------------------------------------------
# parameter layout

@dataclass(frozen=True)
class Layout:
    """Positions of every block inside the unconstrained vector theta."""

    beta: tuple
    log_sigma2: tuple
    chol: slice
    gamma: slice
    alpha: slice
    log_lambda: slice
    size: int
    names: tuple

    @property
    def survival(self) -> np.ndarray:
        idx = list(range(self.gamma.start, self.size))
        return np.array(idx, dtype=int)


def layout(spec: ModelSpec) -> Layout:
    names, beta, ls2 = [], [], []
    pos = 0
    for k, fx in zip(spec.marker_ids, spec.fixed_design):
        beta.append(slice(pos, pos + len(fx)))
        names += [f"beta[{k}][{c}]" for c in fx]
        pos += len(fx)
    fams = spec.families or ("gaussian",) * spec.n_markers
    for k, fam in zip(spec.marker_ids, fams):
        if fam == "gaussian":
            ls2.append(pos)
            names.append(f"log_sigma2[{k}]")
            pos += 1
        else:
            ls2.append(None)
    d = spec.re_dim
    nchol = d * (d + 1) // 2
    chol = slice(pos, pos + nchol)
    for i in range(d):
        for j in range(i + 1):
            names.append(f"log_chol[{i},{i}]" if i == j else f"chol[{i},{j}]")
    pos += nchol
    gamma = slice(pos, pos + len(spec.survival_covariates))
    names += [f"gamma[{c}]" for c in spec.survival_covariates]
    pos = gamma.stop
    alpha = slice(pos, pos + spec.n_markers)
    names += [f"alpha[{k}]" for k in spec.marker_ids]
    pos = alpha.stop
    J = spec.n_baseline
    log_lambda = slice(pos, pos + J)
    names += [f"log_lambda0[{j}]" for j in range(J)]
    pos = log_lambda.stop
    return Layout(tuple(beta), tuple(ls2), chol, gamma, alpha, log_lambda, pos, tuple(names))


def _tril_index(d: int):
    rows, cols = [], []
    for i in range(d):
        for j in range(i + 1):
            rows.append(i)
            cols.append(j)
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


def chol_from_theta(theta_chol: np.ndarray, d: int) -> np.ndarray:
    """Lower Cholesky factor(s) from the packed block; leading axes broadcast."""
    theta_chol = np.asarray(theta_chol, dtype=float)
    rows, cols = _tril_index(d)
    L = np.zeros(theta_chol.shape[:-1] + (d, d))
    vals = np.where(rows == cols, np.exp(theta_chol), theta_chol)
    L[..., rows, cols] = vals
    return L


def theta_from_chol(L: np.ndarray) -> np.ndarray:
    d = L.shape[-1]
    rows, cols = _tril_index(d)
    v = L[..., rows, cols].copy()
    diag = rows == cols
    v[..., diag] = np.log(v[..., diag])
    return v


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Natural-scale parameters of a resolved :class:`ModelSpec`."""

    spec: ModelSpec
    beta: tuple
    sigma2: tuple
    B: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray
    lambda0: np.ndarray

    def __post_init__(self):
        if not self.spec.is_resolved:
            raise ModelError("parameter vector needs a resolved model spec")
        for s2, fam in zip(self.sigma2, self.spec.families):
            if fam == "gaussian" and not (s2 is not None and s2 > 0):
                raise ModelError("gaussian dispersion must be positive")
        if np.any(np.asarray(self.lambda0) <= 0):
            raise ModelError("baseline hazard values must be positive")
        B = np.asarray(self.B)
        if B.shape != (self.spec.re_dim,) * 2 or not np.allclose(B, B.T):
            raise ModelError("random-effect covariance must be symmetric with matching dimension")
        if self.spec.re_dim and np.linalg.eigvalsh(B).min() <= 0:
            raise ModelError("random-effect covariance must be positive definite")

    @property
    def knots(self) -> np.ndarray:
        return np.asarray(self.spec.knots)

    def to_theta(self) -> np.ndarray:
        lay = layout(self.spec)
        th = np.zeros(lay.size)
        for k, sl in enumerate(lay.beta):
            th[sl] = self.beta[k]
        for k, pos in enumerate(lay.log_sigma2):
            if pos is not None:
                th[pos] = np.log(self.sigma2[k])
        if self.spec.re_dim:
            th[lay.chol] = theta_from_chol(np.linalg.cholesky(self.B))
        th[lay.gamma] = self.gamma
        th[lay.alpha] = self.alpha
        th[lay.log_lambda] = np.log(self.lambda0)
        return th

    @classmethod
    def from_theta(cls, spec: ModelSpec, theta) -> "ParameterVector":
        theta = np.asarray(theta, dtype=float)
        lay = layout(spec)
        L = chol_from_theta(theta[lay.chol], spec.re_dim)
        return cls(spec=spec,
                   beta=tuple(theta[sl].copy() for sl in lay.beta),
                   sigma2=tuple(None if p is None else float(np.exp(theta[p])) for p in lay.log_sigma2),
                   B=L @ L.T,
                   gamma=theta[lay.gamma].copy(),
                   alpha=theta[lay.alpha].copy(),
                   lambda0=np.exp(theta[lay.log_lambda]))

    @classmethod
    def create(cls, spec: ModelSpec, beta, sigma2, B, alpha, lambda0, gamma=()) -> "ParameterVector":
        return cls(spec=spec, beta=tuple(np.asarray(b, dtype=float) for b in beta),
                   sigma2=tuple(None if s is None else float(s) for s in sigma2),
                   B=np.asarray(B, dtype=float), gamma=np.asarray(gamma, dtype=float),
                   alpha=np.asarray(alpha, dtype=float),
                   lambda0=np.broadcast_to(np.asarray(lambda0, dtype=float), (spec.n_baseline,)).copy())


@dataclass(frozen=True, eq=False)
class ParamArrays:
    """Parameters stacked along a leading draw axis (size 1 for a point estimate)."""

    beta: tuple
    sigma2: tuple
    L: np.ndarray
    Linv: np.ndarray
    logdetL: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray
    lam: np.ndarray
    log_lam: np.ndarray

    @property
    def n_draws(self) -> int:
        return self.alpha.shape[0]

    @classmethod
    def from_thetas(cls, spec: ModelSpec, thetas) -> "ParamArrays":
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        lay = layout(spec)
        d = spec.re_dim
        L = chol_from_theta(thetas[:, lay.chol], d)
        Linv = np.linalg.inv(L) if d else L
        rows, cols = _tril_index(d)
        logdet = thetas[:, lay.chol][:, rows == cols].sum(axis=1)
        return cls(beta=tuple(thetas[:, sl] for sl in lay.beta),
                   sigma2=tuple(None if p is None else np.exp(thetas[:, p]) for p in lay.log_sigma2),
                   L=L, Linv=Linv, logdetL=logdet,
                   gamma=thetas[:, lay.gamma], alpha=thetas[:, lay.alpha],
                   lam=np.exp(thetas[:, lay.log_lambda]), log_lam=thetas[:, lay.log_lambda])


# ---------------------------------------------------------------------------
# exponential moments

_SERIES_TERMS = 30


def unit_exp_moments(c, h, order: int = 2):
    """``e_n(c, h) = int_0^h v**n exp(c v) dv`` for n = 0..order.

    Power series when ``|c h| < 1`` (no cancellation), integration by parts
    otherwise.
    """
    c = np.asarray(c, dtype=float)
    h = np.asarray(h, dtype=float)
    c, h = np.broadcast_arrays(c, h)
    x = c * h
    if order == 0:
        # expm1 keeps full relative accuracy as x -> 0
        nz = x != 0.0
        return [h * np.where(nz, np.expm1(x) / np.where(nz, x, 1.0), 1.0)]
    small = np.abs(x) < 1.0
    xs = np.where(small, x, 0.0)
    out = []
    # series: h^{n+1} sum_k x^k / (k! (n+k+1))
    term = np.ones_like(xs)
    sums = [np.zeros_like(xs) for _ in range(order + 1)]
    for k in range(_SERIES_TERMS):
        for n in range(order + 1):
            sums[n] = sums[n] + term / (n + k + 1)
        term = term * xs / (k + 1)
    cs = np.where(small, 1.0, c)
    ex = np.exp(np.where(small, 0.0, x))
    prev = np.expm1(np.where(small, 0.0, x)) / cs
    big = [prev]
    hp = np.ones_like(h)
    for n in range(1, order + 1):
        hp = hp * h
        prev = (hp * ex - n * prev) / cs
        big.append(prev)
    hn = h.copy()
    for n in range(order + 1):
        out.append(np.where(small, hn * sums[n], big[n]))
        hn = hn * h
    return out


def exp_moments(c, lo, hi, order: int = 2):
    """``I_n = int_lo^hi u**n exp(c u) du`` for n = 0..order (``hi >= lo``)."""
    c = np.asarray(c, dtype=float)
    lo = np.asarray(lo, dtype=float)
    h = np.asarray(hi, dtype=float) - lo
    e = unit_exp_moments(c, h, order)
    base = np.exp(c * lo)
    I = [base * e[0]]
    if order >= 1:
        I.append(base * (lo * e[0] + e[1]))
    if order >= 2:
        I.append(base * (lo * lo * e[0] + 2.0 * lo * e[1] + e[2]))
    return I


def piece_bounds(knots, t):
    """Clipped piece limits ``[lo_j, hi_j]`` covering [0, t]; the last piece extends past the final knot."""
    knots = np.asarray(knots, dtype=float)
    edges = knots.copy()
    edges[-1] = np.inf
    t = np.asarray(t, dtype=float)[..., None]
    lo = np.minimum(edges[:-1], t)
    hi = np.minimum(edges[1:], t)
    return lo, hi


def piece_index(knots, t):
    """Index j of the piece (tau_j, tau_{j+1}] containing t."""
    knots = np.asarray(knots, dtype=float)
    j = np.searchsorted(knots, t, side="left") - 1
    return np.clip(j, 0, len(knots) - 2)


# ---------------------------------------------------------------------------
# single-subject quantities

def _design_row(columns, t, covariates: Mapping | None):
    row = []
    for c in columns:
        if c == "intercept":
            row.append(1.0)
        elif c == "time":
            row.append(t)
        else:
            if covariates is None or c not in covariates:
                raise ModelError(f"missing covariate {c!r}")
            row.append(float(covariates[c]))
    return np.array(row, dtype=float)


def _marker_pos(spec: ModelSpec, marker: int) -> int:
    try:
        return spec.marker_ids.index(int(marker))
    except ValueError:
        raise ModelError(f"marker {marker} not part of the model") from None


def _check_b(params: ParameterVector, b) -> np.ndarray:
    b = np.asarray(b, dtype=float).reshape(-1)
    if b.shape[0] != params.spec.re_dim:
        raise ModelError(f"random-effect dimension mismatch: {b.shape[0]} != {params.spec.re_dim}")
    return b


def linear_predictor(params: ParameterVector, b, marker: int, covariates: Mapping | None, t: float) -> float:
    """``m_k(t) = W(t)' beta_k + Z(t)' b_k`` (a logit for binary markers)."""
    spec = params.spec
    b = _check_b(params, b)
    k = _marker_pos(spec, marker)
    w = _design_row(spec.fixed_design[k], t, covariates)
    z = _design_row(spec.random_design[k], t, covariates)
    return float(w @ params.beta[k] + z @ b[spec.re_slices[k]])


def marker_loglik(params: ParameterVector, b, marker: int, times, values, covariates: Mapping | None = None) -> float:
    """Conditional log-likelihood of one subject's measures of one marker."""
    k = _marker_pos(params.spec, marker)
    total = 0.0
    for t, y in zip(np.atleast_1d(times), np.atleast_1d(values)):
        m = linear_predictor(params, b, marker, covariates, float(t))
        if params.spec.families[k] == "gaussian":
            s2 = params.sigma2[k]
            total += -0.5 * np.log(2 * np.pi * s2) - 0.5 * (y - m) ** 2 / s2
        else:
            total += y * m - np.logaddexp(0.0, m)
    return float(total)


def hazard_exponent(params: ParameterVector, b, x: Mapping | None):
    """Intercept ``a`` and slope ``c`` of the (linear in t) log-relative-hazard."""
    spec = params.spec
    b = _check_b(params, b)
    a = sum(params.gamma[j] * float(x[c]) for j, c in enumerate(spec.survival_covariates)) if spec.survival_covariates else 0.0
    cc = 0.0
    for k, mk in enumerate(spec.marker_ids):
        m0 = linear_predictor(params, b, mk, x, 0.0)
        m1 = linear_predictor(params, b, mk, x, 1.0)
        a += params.alpha[k] * m0
        cc += params.alpha[k] * (m1 - m0)
    return float(a), float(cc)


def hazard(params: ParameterVector, b, x: Mapping | None, t: float) -> float:
    """``lambda0(t) exp(x'gamma + sum_k alpha_k m_k(t))``."""
    a, c = hazard_exponent(params, b, x)
    j = int(piece_index(params.knots, t))
    return float(params.lambda0[j] * np.exp(a + c * t))


def cumulative_hazard(params: ParameterVector, b, x: Mapping | None, t: float) -> float:
    """Closed-form integral of :func:`hazard` over [0, t], piece by piece."""
    if t <= 0:
        return 0.0
    a, c = hazard_exponent(params, b, x)
    lo, hi = piece_bounds(params.knots, t)
    I0 = exp_moments(c, lo, hi, order=0)[0]
    return float(np.exp(a) * np.sum(params.lambda0 * I0))


def survival(params: ParameterVector, b, x: Mapping | None, t: float) -> float:
    return float(np.exp(-cumulative_hazard(params, b, x, t)))
