"""CSV/JSON file formats.

Dataset CSV header: ``subject_id, dose_arm, dose_value, exposure, outcome``
followed by zero or more ``covariate_<name>`` columns.  Empty cells are read
as missing and rejected by validation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .control import DEModelSpec
from .data import DoseLevel, OutcomeKind, TrialDataset, validate
from .errors import ParseError, ValidationError
from .estimators import WorkingModelSpec
from .simulation import ScenarioConfig

REQUIRED = ("subject_id", "dose_arm", "dose_value", "exposure", "outcome")
COVARIATE_PREFIX = "covariate_"
MEAN_METHODS = ("unadjusted", "ancova1", "ancova2", "composite_de_er")
COEF_METHODS = ("linear_dr", "residual_inclusion", "composite_slope")


def _number(text: str, what: str, line: int) -> float:
    text = text.strip()
    if text == "" or text.upper() == "NA":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"line {line}: {what} {text!r} is not a number") from None


def parse_dataset(path, outcome_kind: OutcomeKind | str | None = None) -> TrialDataset:
    """Read and validate a trial dataset CSV.

    Outcome kind is binary when every outcome is 0 or 1, unless overridden.
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        missing = [c for c in REQUIRED if c not in header]
        if missing:
            raise ParseError(f"line 1: missing required columns {missing}")
        extra = [c for c in header if c not in REQUIRED and not c.startswith(COVARIATE_PREFIX)]
        if extra:
            raise ParseError(f"line 1: unexpected columns {extra}")
        col = {name: header.index(name) for name in header}
        cov_cols = [c for c in header if c.startswith(COVARIATE_PREFIX)]

        ids, arms, exposure, outcome, covs = [], [], [], [], []
        dose_by_arm: dict[int, tuple[float, int]] = {}
        conflicts = []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"line {line}: expected {len(header)} fields, found {len(row)}")
            arm_val = _number(row[col["dose_arm"]], "dose_arm", line)
            if not math.isfinite(arm_val) or arm_val != int(arm_val):
                raise ParseError(f"line {line}: dose_arm {row[col['dose_arm']]!r} is not an integer")
            arm = int(arm_val)
            dose = _number(row[col["dose_value"]], "dose_value", line)
            if arm in dose_by_arm and dose_by_arm[arm][0] != dose:
                conflicts.append(
                    f"arm {arm}: dose_value {dose!r} on line {line} differs from "
                    f"{dose_by_arm[arm][0]!r} on line {dose_by_arm[arm][1]}"
                )
            dose_by_arm.setdefault(arm, (dose, line))
            ids.append(row[col["subject_id"]].strip())
            arms.append(arm)
            exposure.append(_number(row[col["exposure"]], "exposure", line))
            outcome.append(_number(row[col["outcome"]], "outcome", line))
            covs.append([_number(row[col[c]], c, line) for c in cov_cols])
    if conflicts:
        raise ParseError("inconsistent dose_value within an arm: " + "; ".join(conflicts), conflicts)
    if not ids:
        raise ParseError(f"{path}: no data rows")

    if outcome_kind is None:
        binary = all(y in (0.0, 1.0) for y in outcome)
        outcome_kind = OutcomeKind.BINARY if binary else OutcomeKind.CONTINUOUS
    levels = [DoseLevel(a, dose_by_arm[a][0]) for a in sorted(dose_by_arm)]
    ds = TrialDataset(
        dose_levels=tuple(levels),
        subject_ids=ids,
        arm=arms,
        exposure=exposure,
        outcome=outcome,
        covariates=covs,
        outcome_kind=OutcomeKind(outcome_kind),
        covariate_names=tuple(c[len(COVARIATE_PREFIX) :] for c in cov_cols),
    )
    report = validate(ds)
    if not report.ok:
        raise ValidationError(f"{path}: {len(report)} validation problem(s)", report.violations)
    return ds


def write_dataset(dataset: TrialDataset, path) -> None:
    """Write the canonical CSV; floats use shortest round-trip repr."""
    header = list(REQUIRED) + [COVARIATE_PREFIX + c for c in dataset.covariate_names]
    dose = dataset.dose
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.n):
            w.writerow(
                [dataset.subject_ids[i], int(dataset.arm[i]), repr(float(dose[i])),
                 repr(float(dataset.exposure[i])), repr(float(dataset.outcome[i]))]
                + [repr(float(x)) for x in dataset.covariates[i]]
            )  # fmt: skip


def fmt(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (int,)) and not isinstance(value, bool):
        return str(value)
    if isinstance(value, str):
        return value
    try:
        x = float(value)
    except (TypeError, ValueError):
        return str(value)
    if not math.isfinite(x):
        return "NA"
    # shortest string that parses back to the same double
    return repr(x)


def write_rows(path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row.get(c)) for c in columns])


@dataclass(frozen=True)
class AnalysisConfig:
    de_spec: DEModelSpec = DEModelSpec("anova")
    working: WorkingModelSpec = WorkingModelSpec()
    methods: tuple[str, ...] = ("ancova2", "ancova1", "unadjusted")
    ci_level: float = 0.95
    bootstrap: int | None = None
    outcome_kind: str | None = None
    problems: tuple[str, ...] = field(default=(), compare=False)

    @classmethod
    def from_dict(cls, data: dict) -> "AnalysisConfig":
        known = {"de_spec", "working", "methods", "ci_level", "bootstrap", "outcome_kind"}
        problems = [f"unknown config field {k!r}" for k in data if k not in known]
        de = data.get("de_spec", {"form": "anova"})
        if isinstance(de, str):
            de = {"form": de}
        working = dict(data.get("working", {}))
        methods = tuple(data.get("methods", cls.methods))
        try:
            de_spec = DEModelSpec(**de)
            working_spec = WorkingModelSpec(**working)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"invalid model spec: {exc}") from None
        if not methods:
            problems.append("methods must be nonempty")
        for m in methods:
            if m not in MEAN_METHODS + COEF_METHODS:
                problems.append(f"unknown method {m!r}")
        ci = data.get("ci_level", 0.95)
        if ci != 0.95:
            problems.append("ci_level is fixed at 0.95")
        boot = data.get("bootstrap")
        if boot is not None and (not isinstance(boot, int) or boot < 100):
            problems.append("bootstrap must be an integer >= 100")
        kind = data.get("outcome_kind")
        if kind is not None and kind not in ("continuous", "binary"):
            problems.append("outcome_kind must be continuous or binary")
        if problems:
            raise ValidationError("; ".join(problems), problems)
        return cls(de_spec, working_spec, methods, ci, boot, kind)


def _load_json(path):
    try:
        with Path(path).open(encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot open {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None


def load_analysis_config(path) -> AnalysisConfig:
    data = _load_json(path)
    if not isinstance(data, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    return AnalysisConfig.from_dict(data)


def load_scenarios(path) -> list[ScenarioConfig]:
    """A scenario file holds one ScenarioConfig object or a list of them."""
    data = _load_json(path)
    items = data if isinstance(data, list) else [data]
    if not items or not all(isinstance(d, dict) for d in items):
        raise ParseError(f"{path}: expected a scenario object or a nonempty list of them")
    try:
        return [ScenarioConfig.from_dict(d) for d in items]
    except TypeError as exc:
        raise ValidationError(f"{path}: {exc}") from None
