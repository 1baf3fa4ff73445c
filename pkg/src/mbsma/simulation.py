"""Synthetic longitudinal + survival data for the simulation scenarios.

Every marker follows ``m_k(t) = beta_0k + b_0k + (beta_1k + b_1k) t``, observed
with Gaussian noise or through a logit link on a fixed visit grid.  The event
hazard is ``lambda0 exp(sum_k (alpha_0k + alpha_1k t) m_k(t))``; with constant
associations the log-hazard is linear in ``t`` and the cumulative hazard is
inverted in closed form, otherwise it is integrated by Gauss-Legendre
quadrature and inverted by bisection.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.special import expit

from .dataset import Dataset, DatasetError, MarkerMeta, validate, write_dataset

ADMIN_CUTOFF = 2.0
VISIT_GRID = tuple(round(0.2 * j, 10) for j in range(11))
BISECTION_TOL = 1e-10
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(48)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    """Generative law of one scenario.

    ``alpha0`` / ``alpha1`` give the association ``alpha0 + alpha1 t`` of each
    marker (``alpha1`` all zero for constant effects).  ``B`` orders random
    effects as ``(b_01, b_11, b_02, b_12, ...)``.  Censoring is Weibull with
    ``censoring_shape`` and ``censoring_rate`` (scale ``1 / rate``); a
    ``censoring_rate`` of ``None`` is tuned to ``censoring_target``, the
    fraction of subjects censored before the administrative cutoff.
    """

    name: str
    families: tuple
    beta: tuple
    sigma2: tuple
    B: tuple
    alpha0: tuple
    alpha1: tuple | None = None
    lambda0: float = 0.1
    censoring_shape: float = 1.0
    censoring_rate: float | None = None
    censoring_target: float = 0.25
    admin_cutoff: float = ADMIN_CUTOFF
    visit_grid: tuple = VISIT_GRID
    n_subjects: int = 1000
    seed: int = 0
    note: str = ""

    def __post_init__(self):
        K = len(self.families)
        conv = {
            "families": tuple(str(f) for f in self.families),
            "beta": tuple(tuple(float(v) for v in b) for b in self.beta),
            "sigma2": tuple(None if s is None else float(s) for s in self.sigma2),
            "B": tuple(tuple(float(v) for v in r) for r in self.B),
            "alpha0": tuple(float(a) for a in self.alpha0),
            "alpha1": tuple(0.0 for _ in range(K)) if self.alpha1 is None else tuple(float(a) for a in self.alpha1),
            "visit_grid": tuple(float(t) for t in self.visit_grid),
        }
        for k, v in conv.items():
            object.__setattr__(self, k, v)
        if K < 1:
            raise ScenarioError("at least one marker required")
        if any(f not in ("gaussian", "binary") for f in self.families):
            raise ScenarioError("families must be 'gaussian' or 'binary'")
        if len(self.beta) != K or any(len(b) != 2 for b in self.beta):
            raise ScenarioError("beta needs one (intercept, slope) pair per marker")
        if len(self.sigma2) != K or len(self.alpha0) != K or len(self.alpha1) != K:
            raise ScenarioError("sigma2, alpha0 and alpha1 need one entry per marker")
        for fam, s2 in zip(self.families, self.sigma2):
            if fam == "gaussian" and not (s2 is not None and s2 > 0):
                raise ScenarioError("gaussian markers need sigma2 > 0")
        B = np.array(self.B)
        if B.shape != (2 * K, 2 * K) or not np.allclose(B, B.T):
            raise ScenarioError("B must be a symmetric 2K x 2K matrix")
        if np.linalg.eigvalsh(B).min() < -1e-12:
            raise ScenarioError("B must be positive semi-definite")
        if not self.lambda0 > 0:
            raise ScenarioError("lambda0 must be > 0")
        g = np.array(self.visit_grid)
        if g.size < 1 or np.any(np.diff(g) <= 0) or g[0] < 0 or g[-1] != self.admin_cutoff:
            raise ScenarioError("visit grid must be increasing, start >= 0 and end at the administrative cutoff")
        if self.censoring_shape <= 0 or (self.censoring_rate is not None and self.censoring_rate < 0):
            raise ScenarioError("invalid Weibull censoring parameters")
        if not 0 <= self.censoring_target < 1:
            raise ScenarioError("censoring_target must lie in [0, 1)")
        if self.n_subjects < 1:
            raise ScenarioError("n_subjects must be >= 1")

    @property
    def n_markers(self) -> int:
        return len(self.families)

    @property
    def time_dependent(self) -> bool:
        return any(a != 0 for a in self.alpha1)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = json.loads(json.dumps(v))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ScenarioError(f"invalid scenario config: {exc}") from None

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            d = json.load(fh)
        if not isinstance(d, dict):
            raise ScenarioError("scenario config must be a JSON object")
        if "scenario" in d:
            # registry entry with overrides
            try:
                return scenario(d["scenario"], **{k: v for k, v in d.items() if k != "scenario"})
            except TypeError as exc:
                raise ScenarioError(f"invalid scenario override: {exc}") from None
        return cls.from_dict(d)


# ---------------------------------------------------------------------------
# registry

B_STAR = ((1.0, 0.5), (0.5, 1.0))
B_DAGGER = ((0.5, 0.5), (0.5, 0.5))


def block_covariance(K: int, dependent: bool) -> tuple:
    B = np.zeros((2 * K, 2 * K))
    for i in range(K):
        for j in range(K):
            if i == j:
                B[2 * i:2 * i + 2, 2 * j:2 * j + 2] = B_STAR
            elif dependent:
                B[2 * i:2 * i + 2, 2 * j:2 * j + 2] = B_DAGGER
    return tuple(tuple(r) for r in B)


ALPHAS = {1: (-0.5, -0.5, -0.5), 2: (0.0, -0.5, -0.5), 3: (0.0, -0.5, -1.0)}

# lambda0 per family of scenarios, chosen so that roughly half of the subjects
# have an event before the administrative cutoff
LAMBDA0 = {"I": 0.05, "D": 0.05, "M": 0.05, "S": 0.05, "4": 0.35, "I1": 0.15}


def _three_marker(name, families, dependent, alpha, lam):
    return ScenarioConfig(name=name, families=families, beta=((0.0, -1.0),) * 3,
                          sigma2=tuple(0.5 if f == "gaussian" else None for f in families),
                          B=block_covariance(3, dependent), alpha0=alpha, lambda0=lam)


def _registry() -> dict:
    reg = {}
    for j, alpha in ALPHAS.items():
        reg[f"I.{j}"] = _three_marker(f"I.{j}", ("gaussian",) * 3, False, alpha, LAMBDA0["I"])
        reg[f"D.{j}"] = _three_marker(f"D.{j}", ("gaussian",) * 3, True, alpha, LAMBDA0["D"])
        reg[f"M.{j}"] = _three_marker(f"M.{j}", ("gaussian", "gaussian", "binary"), True, alpha, LAMBDA0["M"])
    fam7 = ("binary",) + ("gaussian",) * 6
    for name, alpha in (("S.1", (-0.5, -0.5, -0.5, 0, 0, 0, 0)), ("S.2", (-0.5, -0.5, -1.0, 0, 0, 0, 0))):
        reg[name] = ScenarioConfig(
            name=name, families=fam7, beta=((0.0, -1.0),) * 7,
            sigma2=tuple(None if f == "binary" else 0.5 for f in fam7),
            B=block_covariance(7, True), alpha0=alpha, lambda0=LAMBDA0["S"],
            note="S.3 is the bootstrap design, see bootstrap_mimic")
    B4 = np.zeros((4, 4))
    B4[:2, :2] = ((0.69, 0.01), (0.01, 0.26))
    B4[2:, 2:] = ((0.74, -0.01), (-0.01, 0.20))
    reg["4"] = ScenarioConfig(
        name="4", families=("gaussian", "gaussian"), beta=((0.13, -0.76), (0.18, -0.62)),
        sigma2=(0.56 ** 2, 0.65 ** 2), B=tuple(tuple(r) for r in B4),
        alpha0=(-0.8, 0.0), alpha1=(0.4, -0.4), lambda0=LAMBDA0["4"])
    reg["I.1-single"] = ScenarioConfig(
        name="I.1-single", families=("gaussian",), beta=((0.0, -1.0),), sigma2=(0.5,),
        B=B_STAR, alpha0=(-0.5,), lambda0=LAMBDA0["I1"],
        note="one-marker version of I.1, for which a one-marker joint model is well specified")
    return reg


SCENARIOS = _registry()


def scenario(name: str, **overrides) -> ScenarioConfig:
    try:
        base = SCENARIOS[str(name)]
    except KeyError:
        raise ScenarioError(f"unknown scenario {name!r}; known: {', '.join(sorted(SCENARIOS))}") from None
    return replace(base, **overrides) if overrides else base


# ---------------------------------------------------------------------------
# hazard

def _exponent_coefficients(config: ScenarioConfig, b: np.ndarray):
    """log-hazard ``A + B t + C t^2`` per subject for random effects ``b`` (N, 2K)."""
    b = np.atleast_2d(np.asarray(b, dtype=float))
    beta = np.array(config.beta)
    mu0 = beta[:, 0][None, :] + b[:, 0::2]
    mu1 = beta[:, 1][None, :] + b[:, 1::2]
    a0, a1 = np.array(config.alpha0), np.array(config.alpha1)
    A = math.log(config.lambda0) + mu0 @ a0
    Bc = mu1 @ a0 + mu0 @ a1
    C = mu1 @ a1
    return A, Bc, C


def _cumhaz_linear(A, Bc, u):
    u = np.asarray(u, dtype=float)
    nz = Bc != 0
    safe = np.where(nz, Bc, 1.0)
    return np.exp(A) * np.where(nz, np.expm1(safe * u) / safe, u)


def _cumhaz_quadratic(A, Bc, C, lo, hi):
    """``int_lo^hi exp(A + B u + C u^2) du`` by 48-point Gauss-Legendre, vectorized."""
    lo = np.broadcast_to(np.asarray(lo, dtype=float), np.shape(A))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), np.shape(A))
    half = 0.5 * (hi - lo)
    u = (0.5 * (hi + lo))[..., None] + half[..., None] * _GL_NODES
    f = np.exp(A[..., None] + Bc[..., None] * u + C[..., None] * u * u)
    return half * (f @ _GL_WEIGHTS)


def cumulative_hazard(config: ScenarioConfig, b, u) -> np.ndarray:
    """``Lambda(u; b)`` under the generating law, one value per row of ``b``."""
    A, Bc, C = _exponent_coefficients(config, b)
    if not config.time_dependent:
        return _cumhaz_linear(A, Bc, u)
    return _cumhaz_quadratic(A, Bc, C, 0.0, u)


def true_risk(config: ScenarioConfig, b, s: float, t: float) -> np.ndarray:
    """``1 - exp(-(Lambda(s + t; b) - Lambda(s; b)))`` for every row of ``b``."""
    A, Bc, C = _exponent_coefficients(config, b)
    if t == 0:
        return np.zeros_like(A)
    if not config.time_dependent:
        d = np.exp(A + Bc * s) * np.where(Bc != 0, np.expm1(Bc * t) / np.where(Bc != 0, Bc, 1.0), t)
    else:
        d = _cumhaz_quadratic(A, Bc, C, s, s + t)
    return -np.expm1(-d)


def invert_cumulative_hazard(config: ScenarioConfig, b, E, upper: float) -> np.ndarray:
    """Smallest ``T <= upper`` with ``Lambda(T; b) = E``; ``inf`` when ``Lambda(upper) < E``."""
    A, Bc, C = _exponent_coefficients(config, b)
    E = np.asarray(E, dtype=float)
    if not config.time_dependent:
        x = E * np.exp(-A)
        nz = Bc != 0
        arg = np.where(nz, Bc * x, 0.0)
        ok = ~nz | (arg > -1)
        T = np.where(nz, np.log1p(np.where(ok, arg, 0.0)) / np.where(nz, Bc, 1.0), x)
        return np.where(ok & (T <= upper), T, np.inf)
    reach = _cumhaz_quadratic(A, Bc, C, 0.0, upper) >= E
    lo, hi = np.zeros_like(E), np.full_like(E, upper)
    n_iter = int(math.ceil(math.log2(upper / BISECTION_TOL))) + 1
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        below = _cumhaz_quadratic(A, Bc, C, 0.0, mid) < E
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return np.where(reach, 0.5 * (lo + hi), np.inf)


# ---------------------------------------------------------------------------
# generation

@dataclass(frozen=True, eq=False)
class SimulatedData:
    dataset: Dataset
    config: ScenarioConfig
    effects: np.ndarray          # (N, 2K) true random effects, rows in dataset order
    event_time: np.ndarray       # latent event times (inf beyond the cutoff)
    censor_time: np.ndarray      # latent Weibull censoring times

    def true_risk(self, s: float, t: float, subject_ids=None) -> np.ndarray:
        rows = (np.arange(self.dataset.n_subjects) if subject_ids is None
                else np.array([self.dataset.index_of[str(i)] for i in subject_ids], dtype=int))
        return true_risk(self.config, self.effects[rows], s, t)


def _subject_draws(config: ScenarioConfig, n: int, seed: int):
    """All random numbers, drawn subject by subject from independent streams."""
    K, V = config.n_markers, len(config.visit_grid)
    children = np.random.SeedSequence(seed).spawn(n)
    z = np.empty((n, 2 * K))
    eps = np.empty((n, V, K))
    ub = np.empty((n, V, K))
    ue = np.empty(n)
    uc = np.empty(n)
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        z[i] = rng.standard_normal(2 * K)
        eps[i] = rng.standard_normal((V, K))
        ub[i] = rng.random((V, K))
        ue[i] = rng.random()
        uc[i] = rng.random()
    return z, eps, ub, ue, uc


def _b_root(B: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(B)
    return V * np.sqrt(np.maximum(w, 0.0))


def _weibull(config: ScenarioConfig, uc: np.ndarray, rate: float) -> np.ndarray:
    if rate == 0:
        return np.full_like(uc, np.inf)
    return (-np.log1p(-uc)) ** (1.0 / config.censoring_shape) / rate


@lru_cache(maxsize=64)
def tuned_censoring_rate(config: ScenarioConfig, n_pilot: int = 20000) -> float:
    """Weibull rate giving ``censoring_target`` censoring before the cutoff on a pilot sample."""
    if config.censoring_target == 0:
        return 0.0
    pilot = replace(config, censoring_rate=0.0, n_subjects=n_pilot, seed=987654321)
    z, _, _, ue, uc = _subject_draws(pilot, n_pilot, pilot.seed)
    b = z @ _b_root(np.array(config.B)).T
    T = np.minimum(invert_cumulative_hazard(config, b, -np.log1p(-ue), config.admin_cutoff), config.admin_cutoff)
    e = (-np.log1p(-uc)) ** (1.0 / config.censoring_shape)
    # censored before T iff e / rate < T  <=>  rate > e / T
    thresholds = np.sort(e / T)
    k = int(math.ceil(config.censoring_target * n_pilot))
    return float(thresholds[min(k, n_pilot) - 1])


def generate_dataset(config: ScenarioConfig, fixed_effects=None) -> SimulatedData:
    """Draw one dataset; ``fixed_effects`` (2K,) or (N, 2K) replaces the random-effect draws."""
    K, N = config.n_markers, config.n_subjects
    grid = np.array(config.visit_grid)
    z, eps, ub, ue, uc = _subject_draws(config, N, config.seed)
    if fixed_effects is None:
        b = z @ _b_root(np.array(config.B)).T
    else:
        b = np.broadcast_to(np.asarray(fixed_effects, dtype=float), (N, 2 * K)).copy()
    rate = tuned_censoring_rate(config) if config.censoring_rate is None else config.censoring_rate
    T = invert_cumulative_hazard(config, b, -np.log1p(-ue), config.admin_cutoff)
    C = _weibull(config, uc, rate)
    obs = np.minimum(np.minimum(T, C), config.admin_cutoff)
    event = (T <= np.minimum(C, config.admin_cutoff)).astype(int)

    beta = np.array(config.beta)
    m = (beta[:, 0][None, None, :] + b[:, None, 0::2]
         + (beta[:, 1][None, None, :] + b[:, None, 1::2]) * grid[None, :, None])     # (N, V, K)
    Y = np.empty_like(m)
    for k, fam in enumerate(config.families):
        if fam == "gaussian":
            Y[..., k] = m[..., k] + math.sqrt(config.sigma2[k]) * eps[..., k]
        else:
            Y[..., k] = (ub[..., k] < expit(m[..., k])).astype(float)
    keep = grid[None, :] <= obs[:, None]                                               # (N, V)
    ii, vv = np.nonzero(keep)
    ids = tuple(str(i + 1) for i in range(N))
    raw = Dataset(
        subject_ids=ids, obs_time=obs, event=event, covariates=np.zeros((N, 0)),
        long_subject=np.repeat(ii, K), long_marker=np.tile(np.arange(1, K + 1), ii.size),
        long_time=np.repeat(grid[vv], K), long_value=Y[ii, vv].reshape(-1),
        markers=tuple(MarkerMeta(f"y{k + 1}", fam) for k, fam in enumerate(config.families)),
        metadata={"scenario": config.name, "censoring_rate": rate})
    ds = validate(raw)
    order = np.array([int(s) - 1 for s in ds.subject_ids])
    return SimulatedData(ds, config, b[order], T[order], C[order])


def replicate_config(config: ScenarioConfig, replicate: int) -> ScenarioConfig:
    """Config of replicate ``r``: same law, seed derived from ``(config.seed, r)``."""
    seed = int(np.random.SeedSequence([config.seed, replicate]).generate_state(2, np.uint32).view(np.uint64)[0])
    return replace(config, seed=seed)


def bootstrap_indices(n: int, seed) -> np.ndarray:
    if n < 1:
        raise DatasetError("empty dataset")
    return np.random.default_rng(seed).integers(0, n, size=n)


def bootstrap_mimic(dataset: Dataset, seed) -> Dataset:
    """Subject-level resample with replacement; resampled subjects get fresh ids."""
    idx = bootstrap_indices(dataset.n_subjects, seed)
    return dataset.subset(idx, new_ids=[f"b{i + 1}" for i in range(dataset.n_subjects)])


# ---------------------------------------------------------------------------
# files

def effect_names(K: int) -> list[str]:
    return [f"b{j}_{k + 1}" for k in range(K) for j in (0, 1)]


def write_simulation(sim: SimulatedData, directory) -> None:
    """``longitudinal.csv``, ``survival.csv``, ``markers.json``, ``true_effects.csv``, ``scenario.json``."""
    write_dataset(sim.dataset, directory)
    with open(os.path.join(directory, "true_effects.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", *effect_names(sim.config.n_markers)])
        for sid, row in zip(sim.dataset.subject_ids, sim.effects):
            w.writerow([sid, *(repr(float(v)) for v in row)])
    sim.config.save(os.path.join(directory, "scenario.json"))


def read_true_effects(directory) -> dict:
    with open(os.path.join(directory, "true_effects.csv"), newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return {row[0]: np.array([float(v) for v in row[1:]]) for row in r if row}
