"""Longitudinal + survival data container, landmark truncation and splitting.

Data are stored column-wise in read-only numpy arrays. Subjects are kept in a
canonical order (natural sort of their ids) so every downstream sum is taken
in the same order regardless of how the input tables were arranged.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

FAMILIES = ("gaussian", "binary")


class DatasetError(ValueError):
    """Raised when the input tables violate the data model."""


class NotAtRiskError(DatasetError):
    """Raised when a history is requested for a subject with T* <= s."""


@dataclass(frozen=True)
class MarkerMeta:
    name: str
    family: str = "gaussian"


@dataclass(frozen=True)
class LongitudinalObservation:
    subject_id: str
    marker_id: int
    time: float
    value: float


@dataclass(frozen=True)
class SurvivalRecord:
    subject_id: str
    observed_time: float
    event_indicator: int
    baseline_covariates: tuple[float, ...] = ()


def subject_sort_key(subject_id: str):
    s = str(subject_id)
    if s.isdigit():
        return (0, int(s), s)
    return (1, 0, s)


def _frozen(a, dtype):
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable longitudinal + survival dataset.

    Use :func:`validate` or :meth:`from_records` to build one; the raw
    constructor does no checking.

    Attributes
    ----------
    subject_ids : tuple of str
    obs_time, event : (N,) arrays
        Observed time ``T*`` and event indicator ``delta``.
    covariates : (N, p) array
        Baseline covariates, columns named by ``covariate_names``.
    long_subject : (n,) int array
        Row index into the subject arrays for every longitudinal measure.
    long_marker : (n,) int array
        Marker id, 1-based.
    long_time, long_value : (n,) arrays
    markers : tuple of MarkerMeta
    """

    subject_ids: tuple
    obs_time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray
    long_subject: np.ndarray
    long_marker: np.ndarray
    long_time: np.ndarray
    long_value: np.ndarray
    markers: tuple
    covariate_names: tuple = ()
    metadata: dict = field(default_factory=dict)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_markers(self) -> int:
        return len(self.markers)

    @cached_property
    def index_of(self) -> dict:
        return {sid: i for i, sid in enumerate(self.subject_ids)}

    @property
    def subjects(self) -> tuple[SurvivalRecord, ...]:
        return tuple(
            SurvivalRecord(sid, float(self.obs_time[i]), int(self.event[i]),
                           tuple(float(v) for v in self.covariates[i]))
            for i, sid in enumerate(self.subject_ids)
        )

    @property
    def observations(self) -> tuple[LongitudinalObservation, ...]:
        return tuple(
            LongitudinalObservation(self.subject_ids[s], int(m), float(t), float(v))
            for s, m, t, v in zip(self.long_subject, self.long_marker,
                                  self.long_time, self.long_value)
        )

    def covariate_row(self, i: int) -> dict:
        return {name: float(self.covariates[i, j]) for j, name in enumerate(self.covariate_names)}

    @classmethod
    def from_records(cls, subjects: Iterable[SurvivalRecord],
                     observations: Iterable[LongitudinalObservation],
                     markers: Sequence[MarkerMeta],
                     covariate_names: Sequence[str] = ()) -> "Dataset":
        subjects = list(subjects)
        observations = list(observations)
        ids = [str(r.subject_id) for r in subjects]
        p = len(covariate_names)
        cov = np.array([list(r.baseline_covariates) for r in subjects], dtype=float).reshape(len(subjects), p)
        pos = {}
        for i, sid in enumerate(ids):
            if sid in pos:
                raise DatasetError(f"duplicate survival record for subject {sid!r}")
            pos[sid] = i
        try:
            ls = [pos[str(o.subject_id)] for o in observations]
        except KeyError as exc:
            raise DatasetError(f"orphan observation for subject {exc.args[0]!r}") from None
        raw = cls(
            subject_ids=tuple(ids),
            obs_time=np.array([r.observed_time for r in subjects], dtype=float),
            event=np.array([r.event_indicator for r in subjects], dtype=int),
            covariates=cov,
            long_subject=np.array(ls, dtype=int),
            long_marker=np.array([o.marker_id for o in observations], dtype=int),
            long_time=np.array([o.time for o in observations], dtype=float),
            long_value=np.array([o.value for o in observations], dtype=float),
            markers=tuple(markers),
            covariate_names=tuple(covariate_names),
        )
        return validate(raw)

    def subset(self, indices: Sequence[int], new_ids: Sequence[str] | None = None) -> "Dataset":
        """Dataset restricted to the subjects at ``indices`` (repeats allowed when
        ``new_ids`` supplies distinct fresh ids)."""
        indices = np.asarray(indices, dtype=int)
        ids = [self.subject_ids[i] for i in indices] if new_ids is None else [str(s) for s in new_ids]
        order = np.argsort(self.long_subject, kind="stable")
        starts = np.searchsorted(self.long_subject[order], np.arange(self.n_subjects + 1))
        rows, new_subject = [], []
        for new_i, old_i in enumerate(indices):
            r = order[starts[old_i]:starts[old_i + 1]]
            rows.append(r)
            new_subject.append(np.full(len(r), new_i, dtype=int))
        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
        new_subject = np.concatenate(new_subject) if new_subject else np.zeros(0, dtype=int)
        raw = Dataset(
            subject_ids=tuple(ids),
            obs_time=self.obs_time[indices],
            event=self.event[indices],
            covariates=self.covariates[indices],
            long_subject=new_subject,
            long_marker=self.long_marker[rows],
            long_time=self.long_time[rows],
            long_value=self.long_value[rows],
            markers=self.markers,
            covariate_names=self.covariate_names,
            metadata=dict(self.metadata),
        )
        return validate(raw)

    def select(self, subject_ids: Iterable[str]) -> "Dataset":
        return self.subset([self.index_of[str(s)] for s in subject_ids])

    def at_risk(self, s: float) -> np.ndarray:
        """Indices of subjects with T* > s."""
        return np.flatnonzero(self.obs_time > s)

    def equals(self, other: "Dataset") -> bool:
        if not isinstance(other, Dataset):
            return False
        same_arrays = all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("obs_time", "event", "covariates", "long_subject",
                      "long_marker", "long_time", "long_value")
        )
        return (same_arrays and self.subject_ids == other.subject_ids
                and self.markers == other.markers
                and self.covariate_names == other.covariate_names)


def validate(dataset: Dataset) -> Dataset:
    """Check every data-model invariant and return a canonically sorted copy.

    Subjects are sorted by id; observations by (subject, marker, time).
    """
    n = len(dataset.subject_ids)
    if n < 1:
        raise DatasetError("dataset has no subjects")
    K = len(dataset.markers)
    if K < 1:
        raise DatasetError("dataset has no markers")
    for m in dataset.markers:
        if m.family not in FAMILIES:
            raise DatasetError(f"unknown marker family {m.family!r}")
    ids = [str(s) for s in dataset.subject_ids]
    if len(set(ids)) != n:
        raise DatasetError("duplicate survival record")
    T = np.asarray(dataset.obs_time, dtype=float)
    d = np.asarray(dataset.event)
    cov = np.asarray(dataset.covariates, dtype=float).reshape(n, len(dataset.covariate_names))
    if not np.all(np.isfinite(T)) or np.any(T <= 0):
        raise DatasetError("observed times must be positive and finite")
    if not np.all(np.isin(d, (0, 1))):
        raise DatasetError("event indicator must be 0 or 1")

    ls = np.asarray(dataset.long_subject, dtype=int)
    lm = np.asarray(dataset.long_marker, dtype=int)
    lt = np.asarray(dataset.long_time, dtype=float)
    lv = np.asarray(dataset.long_value, dtype=float)
    if ls.size and (ls.min() < 0 or ls.max() >= n):
        raise DatasetError("orphan observation")
    if lm.size and (lm.min() < 1 or lm.max() > K):
        raise DatasetError("marker id out of range")
    if np.any(lt < 0) or not np.all(np.isfinite(lt)) or not np.all(np.isfinite(lv)):
        raise DatasetError("observation times must be nonnegative and values finite")
    if np.any(lt > T[ls]):
        bad = ids[int(ls[np.argmax(lt > T[ls])])]
        raise DatasetError(f"observation after event time for subject {bad!r}")
    binary = np.array([m.family == "binary" for m in dataset.markers])
    if lm.size:
        isbin = binary[lm - 1]
        if np.any(isbin & ~np.isin(lv, (0.0, 1.0))):
            raise DatasetError("non-binary value for a binary marker")

    order = sorted(range(n), key=lambda i: subject_sort_key(ids[i]))
    rank = np.empty(n, dtype=int)
    rank[order] = np.arange(n)
    ls_new = rank[ls] if ls.size else ls
    obs_order = np.lexsort((lt, lm, ls_new))
    ls_new, lm, lt, lv = ls_new[obs_order], lm[obs_order], lt[obs_order], lv[obs_order]
    if lt.size > 1:
        dup = (np.diff(ls_new) == 0) & (np.diff(lm) == 0) & (np.diff(lt) == 0)
        if np.any(dup):
            raise DatasetError("duplicate (subject, marker, time) observation")

    return Dataset(
        subject_ids=tuple(ids[i] for i in order),
        obs_time=_frozen(T[order], float),
        event=_frozen(d[order], int),
        covariates=_frozen(cov[order], float),
        long_subject=_frozen(ls_new, int),
        long_marker=_frozen(lm, int),
        long_time=_frozen(lt, float),
        long_value=_frozen(lv, float),
        markers=tuple(dataset.markers),
        covariate_names=tuple(dataset.covariate_names),
        metadata=dict(dataset.metadata),
    )


@dataclass(frozen=True, eq=False)
class SubjectHistory:
    """Marker history of one subject up to (and including) landmark ``s``."""

    subject_id: str
    landmark: float
    marker: np.ndarray
    time: np.ndarray
    value: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple = ()

    @property
    def observations(self) -> tuple[LongitudinalObservation, ...]:
        return tuple(LongitudinalObservation(self.subject_id, int(m), float(t), float(v))
                     for m, t, v in zip(self.marker, self.time, self.value))


def truncate_history(dataset: Dataset, subject: str, s: float) -> SubjectHistory:
    i = dataset.index_of.get(str(subject))
    if i is None:
        raise DatasetError(f"unknown subject {subject!r}")
    if dataset.obs_time[i] <= s:
        raise NotAtRiskError(f"subject {subject!r} not at risk at s={s}")
    rows = np.flatnonzero((dataset.long_subject == i) & (dataset.long_time <= s))
    return SubjectHistory(
        subject_id=dataset.subject_ids[i],
        landmark=float(s),
        marker=_frozen(dataset.long_marker[rows], int),
        time=_frozen(dataset.long_time[rows], float),
        value=_frozen(dataset.long_value[rows], float),
        covariates=_frozen(dataset.covariates[i], float),
        covariate_names=dataset.covariate_names,
    )


def histories_at(dataset: Dataset, s: float) -> list[SubjectHistory]:
    """Histories of every subject at risk at ``s``, in dataset order."""
    return [truncate_history(dataset, dataset.subject_ids[i], s) for i in dataset.at_risk(s)]


def kfold_split(dataset: Dataset, folds: int, seed: int) -> list[tuple[Dataset, Dataset]]:
    """Subject-level K-fold partition; returns (learning, validation) pairs."""
    n = dataset.n_subjects
    if folds < 2:
        raise DatasetError("folds must be >= 2")
    if folds > n:
        raise DatasetError(f"folds ({folds}) > number of subjects ({n})")
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(perm, folds)
    out = []
    for k in range(folds):
        val = np.sort(parts[k])
        learn = np.sort(np.concatenate([parts[j] for j in range(folds) if j != k]))
        out.append((dataset.subset(learn), dataset.subset(val)))
    return out


def holdout_split(dataset: Dataset, learning_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < learning_fraction < 1.0:
        raise DatasetError("learning fraction must lie in (0, 1)")
    n = dataset.n_subjects
    n_learn = int(round(learning_fraction * n))
    if n_learn < 1 or n_learn >= n:
        raise DatasetError("split leaves an empty learning or validation set")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[:n_learn])), dataset.subset(np.sort(perm[n_learn:]))


# ---------------------------------------------------------------------------
# CSV / JSON interface

def write_dataset(dataset: Dataset, directory: str | os.PathLike) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "longitudinal.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "marker_id", "time", "value"])
        for s, m, t, v in zip(dataset.long_subject, dataset.long_marker,
                              dataset.long_time, dataset.long_value):
            w.writerow([dataset.subject_ids[s], int(m), repr(float(t)), repr(float(v))])
    with open(os.path.join(directory, "survival.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "obs_time", "event", *dataset.covariate_names])
        for i, sid in enumerate(dataset.subject_ids):
            w.writerow([sid, repr(float(dataset.obs_time[i])), int(dataset.event[i]),
                        *(repr(float(x)) for x in dataset.covariates[i])])
    with open(os.path.join(directory, "markers.json"), "w") as fh:
        json.dump([{"name": m.name, "family": m.family} for m in dataset.markers], fh, indent=2)


def read_dataset(directory: str | os.PathLike) -> Dataset:
    try:
        with open(os.path.join(directory, "markers.json")) as fh:
            markers = [MarkerMeta(str(m["name"]), str(m.get("family", "gaussian"))) for m in json.load(fh)]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"cannot read markers.json: {exc}") from exc
    try:
        with open(os.path.join(directory, "survival.csv"), newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header[:3] != ["subject_id", "obs_time", "event"]:
                raise DatasetError("survival.csv must start with subject_id, obs_time, event")
            cov_names = tuple(header[3:])
            subjects = [SurvivalRecord(row[0], float(row[1]), int(row[2]),
                                       tuple(float(x) for x in row[3:]))
                        for row in r if row]
        with open(os.path.join(directory, "longitudinal.csv"), newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header != ["subject_id", "marker_id", "time", "value"]:
                raise DatasetError("longitudinal.csv must have columns subject_id, marker_id, time, value")
            obs = [LongitudinalObservation(row[0], int(row[1]), float(row[2]), float(row[3]))
                   for row in r if row]
    except (OSError, StopIteration, IndexError) as exc:
        raise DatasetError(f"cannot read dataset tables: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"malformed value in dataset tables: {exc}") from exc
    return Dataset.from_records(subjects, obs, markers, cov_names)
