"""In-memory representation of a randomized dose trial.

A :class:`TrialDataset` is array-backed: subjects are stored column-wise in
numpy arrays, sorted by ``(arm_index, subject_id)`` at construction so that
every downstream fit is independent of input order.  :class:`SubjectRecord`
objects are produced on demand for row-wise access.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


class OutcomeKind(str, enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


@dataclass(frozen=True)
class DoseLevel:
    arm_index: int
    dose_value: float


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    arm_index: int
    exposure: float
    outcome: float
    covariates: tuple[float, ...] = ()


@dataclass(frozen=True)
class Violation:
    message: str
    subject_id: str | None = None
    arm_index: int | None = None

    def __str__(self) -> str:
        ctx = []
        if self.subject_id is not None:
            ctx.append(f"subject {self.subject_id}")
        if self.arm_index is not None:
            ctx.append(f"arm {self.arm_index}")
        return f"{self.message} ({', '.join(ctx)})" if ctx else self.message


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Randomized dose trial, one row per subject.

    Arrays are copied, made read-only and put in canonical order on
    construction.  ``covariates`` has shape ``(n, p)`` with ``p >= 0``.
    """

    dose_levels: tuple[DoseLevel, ...]
    subject_ids: np.ndarray
    arm: np.ndarray
    exposure: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    outcome_kind: OutcomeKind = OutcomeKind.CONTINUOUS
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        ids = np.asarray([str(s) for s in self.subject_ids], dtype=object)
        arm = np.asarray(self.arm, dtype=np.int64)
        n = len(ids)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.size == 0:
            cov = np.zeros((n, 0))
        cov = cov.reshape(n, -1)
        order = sorted(range(n), key=lambda i: (int(arm[i]), ids[i]))
        order = np.asarray(order, dtype=np.intp)
        names = tuple(self.covariate_names) or tuple(f"x{j}" for j in range(cov.shape[1]))
        cols = {
            "subject_ids": ids[order],
            "arm": arm[order],
            "exposure": np.asarray(self.exposure, dtype=float)[order],
            "outcome": np.asarray(self.outcome, dtype=float)[order],
            "covariates": cov[order],
        }
        for name, value in cols.items():
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        levels = tuple(sorted(self.dose_levels, key=lambda d: d.arm_index))
        object.__setattr__(self, "dose_levels", levels)
        object.__setattr__(self, "outcome_kind", OutcomeKind(self.outcome_kind))
        object.__setattr__(self, "covariate_names", names)

    @classmethod
    def from_records(
        cls,
        dose_levels: Sequence[DoseLevel],
        subjects: Iterable[SubjectRecord],
        outcome_kind: OutcomeKind | str = OutcomeKind.CONTINUOUS,
        covariate_names: Sequence[str] = (),
    ) -> "TrialDataset":
        subjects = list(subjects)
        widths = {len(s.covariates) for s in subjects}
        p = max(widths) if widths else 0
        # ragged covariates are padded with NaN so validate() can flag them
        cov = np.full((len(subjects), p), np.nan)
        for i, s in enumerate(subjects):
            cov[i, : len(s.covariates)] = s.covariates
        ds = cls(
            dose_levels=tuple(dose_levels),
            subject_ids=np.array([s.subject_id for s in subjects], dtype=object),
            arm=np.array([s.arm_index for s in subjects], dtype=np.int64),
            exposure=np.array([s.exposure for s in subjects], dtype=float),
            outcome=np.array([s.outcome for s in subjects], dtype=float),
            covariates=cov,
            outcome_kind=outcome_kind,
            covariate_names=tuple(covariate_names),
        )
        object.__setattr__(ds, "_ragged", len(widths) > 1)
        return ds

    @property
    def n(self) -> int:
        return len(self.subject_ids)

    @property
    def n_arms(self) -> int:
        return len(self.dose_levels)

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @cached_property
    def dose_values(self) -> np.ndarray:
        return np.array([d.dose_value for d in self.dose_levels], dtype=float)

    @cached_property
    def dose(self) -> np.ndarray:
        """Numeric dose of each subject."""
        lookup = {d.arm_index: d.dose_value for d in self.dose_levels}
        out = np.array([lookup.get(int(a), np.nan) for a in self.arm], dtype=float)
        out.setflags(write=False)
        return out

    @cached_property
    def arm_indicators(self) -> np.ndarray:
        """``(n, K)`` 0/1 matrix of arm membership."""
        return (self.arm[:, None] == np.arange(self.n_arms)[None, :]).astype(float)

    @cached_property
    def arm_sizes(self) -> np.ndarray:
        return np.bincount(self.arm, minlength=self.n_arms)[: self.n_arms]

    @property
    def subjects(self) -> list[SubjectRecord]:
        return [
            SubjectRecord(
                subject_id=str(self.subject_ids[i]),
                arm_index=int(self.arm[i]),
                exposure=float(self.exposure[i]),
                outcome=float(self.outcome[i]),
                covariates=tuple(float(x) for x in self.covariates[i]),
            )
            for i in range(self.n)
        ]

    def replace(self, **changes) -> "TrialDataset":
        """Copy with some columns replaced (arrays must be in canonical order)."""
        kw = {
            "dose_levels": self.dose_levels,
            "subject_ids": self.subject_ids,
            "arm": self.arm,
            "exposure": self.exposure,
            "outcome": self.outcome,
            "covariates": self.covariates,
            "outcome_kind": self.outcome_kind,
            "covariate_names": self.covariate_names,
        }
        kw.update(changes)
        return TrialDataset(**kw)

    def subset(self, index: np.ndarray) -> "TrialDataset":
        """Rows ``index`` (used by resampling); subject ids are made unique."""
        index = np.asarray(index, dtype=np.intp)
        ids = np.array([f"{self.subject_ids[i]}#{j}" for j, i in enumerate(index)], dtype=object)
        return self.replace(
            subject_ids=ids,
            arm=self.arm[index],
            exposure=self.exposure[index],
            outcome=self.outcome[index],
            covariates=self.covariates[index],
        )


def validate(dataset: TrialDataset) -> ValidationReport:
    """Collect every invariant violation of ``dataset``; never raises."""
    out: list[Violation] = []
    levels = dataset.dose_levels
    k = len(levels)
    if k < 2:
        out.append(Violation(f"need at least 2 dose levels, found {k}"))
    if [d.arm_index for d in levels] != list(range(k)):
        out.append(Violation("arm indices must be contiguous 0..K-1"))
    for a, b in zip(levels, levels[1:]):
        if not b.dose_value > a.dose_value:
            out.append(Violation("dose_value must increase strictly with arm_index", arm_index=b.arm_index))
    for d in levels:
        if not math.isfinite(d.dose_value):
            out.append(Violation("dose_value is not finite", arm_index=d.arm_index))

    seen: set[str] = set()
    binary = dataset.outcome_kind is OutcomeKind.BINARY
    for i in range(dataset.n):
        sid = str(dataset.subject_ids[i])
        arm = int(dataset.arm[i])
        if sid in seen:
            out.append(Violation("duplicate subject_id", sid, arm))
        seen.add(sid)
        if not 0 <= arm < k:
            out.append(Violation(f"arm_index {arm} does not reference a dose level", sid, arm))
        if not math.isfinite(dataset.exposure[i]):
            out.append(Violation("exposure is missing or not finite", sid, arm))
        y = dataset.outcome[i]
        if not math.isfinite(y):
            out.append(Violation("outcome is missing or not finite", sid, arm))
        elif binary and y not in (0.0, 1.0):
            out.append(Violation(f"binary outcome must be 0 or 1, got {y!r}", sid, arm))
        if not np.all(np.isfinite(dataset.covariates[i])):
            out.append(Violation("covariate vector is missing values or not finite", sid, arm))
    if getattr(dataset, "_ragged", False):
        out.append(Violation("covariate vectors differ in length across subjects"))

    counts = np.bincount(dataset.arm[(dataset.arm >= 0)], minlength=k) if dataset.n else np.zeros(k, int)
    for arm in range(k):
        if counts[arm] == 0:
            out.append(Violation(f"empty arm {arm}", arm_index=arm))
    return ValidationReport(tuple(out))


def arm_partition(dataset: TrialDataset) -> list[np.ndarray]:
    """Row indices of each arm, ordered by arm index."""
    return [np.flatnonzero(dataset.arm == k) for k in range(dataset.n_arms)]
