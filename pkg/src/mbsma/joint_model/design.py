"""Per-subject design arrays for the batched likelihood / posterior evaluator.

Gaussian markers are reduced to sufficient statistics (W'W, W'y, y'y, n) so
their contribution costs O(p^2) per evaluation whatever the number of visits.
Binary markers keep padded per-visit arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ModelSpec, piece_bounds, piece_index


@dataclass(frozen=True, eq=False)
class MarkerDesign:
    family: str
    re_slice: slice
    S: np.ndarray          # (p, q) embeds random effects into fixed-effect space
    U: np.ndarray          # (N, p) design row at t = 0
    e_time: np.ndarray     # (p,) indicator of the time column
    time_col: int          # -1 when the design has no time column
    # gaussian sufficient statistics
    n: np.ndarray | None = None
    WW: np.ndarray | None = None
    Wy: np.ndarray | None = None
    yy: np.ndarray | None = None
    # binary padded arrays
    W: np.ndarray | None = None
    y: np.ndarray | None = None
    mask: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class DesignData:
    subject_ids: tuple
    markers: tuple
    T: np.ndarray
    delta: np.ndarray
    X: np.ndarray
    lo: np.ndarray         # (N, J) clipped piece limits over [0, T]
    hi: np.ndarray
    jT: np.ndarray         # piece holding T
    re_dim: int

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)


def _marker_columns(columns, n_rows, times, cov_rows, cov_index):
    W = np.empty((n_rows, len(columns)))
    for j, c in enumerate(columns):
        if c == "intercept":
            W[:, j] = 1.0
        elif c == "time":
            W[:, j] = times
        else:
            W[:, j] = cov_rows[:, cov_index[c]]
    return W


def build_design(spec: ModelSpec, subject_ids: Sequence[str], T, delta, covariates,
                 covariate_names: Sequence[str], obs_subject, obs_marker, obs_time, obs_value) -> DesignData:
    """Assemble design arrays. ``obs_subject`` indexes rows of ``T``/``covariates``."""
    N = len(subject_ids)
    T = np.asarray(T, dtype=float)
    covariates = np.asarray(covariates, dtype=float).reshape(N, len(covariate_names))
    cov_index = {c: j for j, c in enumerate(covariate_names)}
    obs_subject = np.asarray(obs_subject, dtype=int)
    obs_marker = np.asarray(obs_marker, dtype=int)
    obs_time = np.asarray(obs_time, dtype=float)
    obs_value = np.asarray(obs_value, dtype=float)

    markers = []
    for k, (mk, fx, rd) in enumerate(zip(spec.marker_ids, spec.fixed_design, spec.random_design)):
        p = len(fx)
        S = np.zeros((p, len(rd)))
        for r, c in enumerate(rd):
            S[fx.index(c), r] = 1.0
        U = _marker_columns(fx, N, np.zeros(N), covariates, cov_index)
        e_time = np.array([1.0 if c == "time" else 0.0 for c in fx])
        tcol = fx.index("time") if "time" in fx else -1
        sel = obs_marker == mk
        si, ti, yi = obs_subject[sel], obs_time[sel], obs_value[sel]
        Wr = _marker_columns(fx, si.size, ti, covariates[si], cov_index)
        fam = spec.families[k]
        if fam == "gaussian":
            n = np.bincount(si, minlength=N).astype(float)
            WW = np.zeros((N, p, p))
            np.add.at(WW, si, Wr[:, :, None] * Wr[:, None, :])
            Wy = np.zeros((N, p))
            np.add.at(Wy, si, Wr * yi[:, None])
            yy = np.bincount(si, weights=yi * yi, minlength=N)
            markers.append(MarkerDesign(fam, spec.re_slices[k], S, U, e_time, tcol,
                                        n=n, WW=WW, Wy=Wy, yy=yy))
        else:
            counts = np.bincount(si, minlength=N)
            nmax = max(int(counts.max()) if counts.size else 0, 1)
            order = np.argsort(si, kind="stable")
            si_o = si[order]
            starts = np.searchsorted(si_o, np.arange(N))
            slot = np.arange(si_o.size) - starts[si_o]
            W = np.zeros((N, nmax, p))
            y = np.zeros((N, nmax))
            mask = np.zeros((N, nmax))
            W[si_o, slot] = Wr[order]
            y[si_o, slot] = yi[order]
            mask[si_o, slot] = 1.0
            markers.append(MarkerDesign(fam, spec.re_slices[k], S, U, e_time, tcol,
                                        W=W, y=y, mask=mask))

    X = np.empty((N, len(spec.survival_covariates)))
    for j, c in enumerate(spec.survival_covariates):
        X[:, j] = covariates[:, cov_index[c]]
    lo, hi = piece_bounds(spec.knots, T)
    return DesignData(subject_ids=tuple(subject_ids), markers=tuple(markers), T=T,
                      delta=np.asarray(delta, dtype=float), X=X, lo=lo, hi=hi,
                      jT=piece_index(spec.knots, T), re_dim=spec.re_dim)


def design_from_dataset(spec: ModelSpec, dataset) -> DesignData:
    return build_design(spec, dataset.subject_ids, dataset.obs_time, dataset.event,
                        dataset.covariates, dataset.covariate_names, dataset.long_subject,
                        dataset.long_marker, dataset.long_time, dataset.long_value)


def design_from_histories(spec: ModelSpec, histories: Sequence) -> DesignData:
    """Design for the landmark posterior: follow-up ends at ``s`` without event."""
    if not histories:
        raise ValueError("no histories")
    names = histories[0].covariate_names
    subj = np.concatenate([np.full(len(h.time), i, dtype=int) for i, h in enumerate(histories)])
    return build_design(
        spec, [h.subject_id for h in histories],
        [h.landmark for h in histories], np.zeros(len(histories)),
        np.array([h.covariates for h in histories]).reshape(len(histories), len(names)), names,
        subj,
        np.concatenate([h.marker for h in histories]),
        np.concatenate([h.time for h in histories]),
        np.concatenate([h.value for h in histories]),
    )
