"""Ingest, validate and encode long-format cervical-dystonia trial panels.

The wire format is a headed CSV with one row per patient visit::

    id,week,site,treat,age,sex,twstrs

Patients are indexed internally from 0 in order of first appearance.
"""
from __future__ import annotations

import csv
import enum
import io
import os
import warnings
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import IO, Iterable, Sequence, Union

import numpy as np

from .errors import (
    ConfigError,
    EmptySpec,
    InvariantViolation,
    MalformedRow,
    MissingBaseline,
    SchemaError,
    UnknownCovariate,
)

HEADER = ("id", "week", "site", "treat", "age", "sex", "twstrs")
SCHEDULE = (0, 2, 4, 8, 12, 16)
SCORE_RANGE = (0, 87)
SITE_RANGE = (1, 9)


class Arm(enum.Enum):
    PLACEBO = "Placebo"
    U5000 = "5000U"
    U10000 = "10000U"

    @property
    def code(self) -> int:
        return _ARM_CODES[self]

    @property
    def label(self) -> str:
        return {"PLACEBO": "Placebo", "U5000": "U5000", "U10000": "U10000"}[self.name]

    @classmethod
    def from_label(cls, label: str) -> "Arm":
        for arm in cls:
            if label in (arm.label, arm.value, arm.name):
                return arm
        raise ValueError(f"unknown arm {label!r}")


_ARM_CODES = {Arm.PLACEBO: 0, Arm.U5000: 1, Arm.U10000: 2}
ARMS = (Arm.PLACEBO, Arm.U5000, Arm.U10000)


class Sex(enum.Enum):
    FEMALE = "F"
    MALE = "M"

    @property
    def code(self) -> int:
        return 0 if self is Sex.FEMALE else 1

    @property
    def label(self) -> str:
        return "Female" if self is Sex.FEMALE else "Male"


@dataclass(frozen=True)
class ObservationRecord:
    patient_id: str
    week: int
    site: int
    arm: Arm
    age: int
    sex: Sex
    score: int


@dataclass(frozen=True)
class PanelDataset:
    """Validated collection of visit records.

    ``patient_index`` maps each patient id onto ``0..P-1`` in order of first
    appearance; ``counts`` holds the number of patients per arm.
    """

    records: tuple
    patient_index: dict
    counts: dict

    @property
    def n_patients(self) -> int:
        return len(self.patient_index)

    @property
    def n_rows(self) -> int:
        return len(self.records)

    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records], dtype=float)

    def patient_of_row(self) -> np.ndarray:
        return np.array([self.patient_index[r.patient_id] for r in self.records], dtype=np.intp)

    def patient_arms(self) -> dict:
        return {r.patient_id: r.arm for r in self.records}


def from_records(records: Iterable[ObservationRecord]) -> PanelDataset:
    """Validate records and assemble a ``PanelDataset``."""
    records = tuple(records)
    patient_index: dict = {}
    seen_visits = set()
    fixed: dict = {}
    for rec in records:
        if rec.week not in SCHEDULE:
            raise InvariantViolation(
                f"patient {rec.patient_id}: week {rec.week} is not in the visit schedule {SCHEDULE}"
            )
        if not SCORE_RANGE[0] <= rec.score <= SCORE_RANGE[1]:
            raise InvariantViolation(f"patient {rec.patient_id}: score {rec.score} outside 0-87")
        if not SITE_RANGE[0] <= rec.site <= SITE_RANGE[1]:
            raise InvariantViolation(f"patient {rec.patient_id}: site {rec.site} outside 1-9")
        if rec.age <= 0:
            raise InvariantViolation(f"patient {rec.patient_id}: age must be positive, got {rec.age}")
        key = (rec.patient_id, rec.week)
        if key in seen_visits:
            raise InvariantViolation(f"patient {rec.patient_id}: duplicate visit at week {rec.week}")
        seen_visits.add(key)
        attrs = (rec.arm, rec.sex, rec.age, rec.site)
        prev = fixed.setdefault(rec.patient_id, attrs)
        if prev != attrs:
            raise InvariantViolation(
                f"patient {rec.patient_id}: inconsistent arm/sex/age/site across visits"
            )
        if rec.patient_id not in patient_index:
            patient_index[rec.patient_id] = len(patient_index)
    counts = Counter(attrs[0] for attrs in fixed.values())
    return PanelDataset(
        records=records,
        patient_index=patient_index,
        counts={arm: counts.get(arm, 0) for arm in ARMS},
    )


def _read_text(source) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8")
    if isinstance(source, str):
        return source
    data = source.read()
    return data.decode("utf-8") if isinstance(data, bytes) else data


def _int_field(value: str, name: str, line_no: int) -> int:
    try:
        return int(value.strip())
    except ValueError:
        raise MalformedRow(line_no, f"field {name!r} is not an integer: {value!r}") from None


def parse_panel(source: Union[bytes, str, IO]) -> PanelDataset:
    """Parse a CSV panel from bytes, text or a readable stream."""
    text = _read_text(source)
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty input: expected header " + ",".join(HEADER)) from None
    header = [h.strip() for h in header]
    if tuple(header) != HEADER:
        missing = [h for h in HEADER if h not in header]
        extra = [h for h in header if h not in HEADER]
        raise SchemaError(
            f"header must be exactly {','.join(HEADER)}; missing={missing} extra={extra}"
        )
    records = []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(HEADER):
            raise MalformedRow(line_no, f"expected {len(HEADER)} fields, got {len(row)}")
        pid, week, site, treat, age, sex, score = row
        try:
            arm = Arm(treat.strip())
        except ValueError:
            raise MalformedRow(line_no, f"unknown treatment {treat!r}") from None
        try:
            sex_value = Sex(sex.strip())
        except ValueError:
            raise MalformedRow(line_no, f"unknown sex {sex!r}") from None
        if not pid.strip():
            raise MalformedRow(line_no, "empty patient id")
        records.append(
            ObservationRecord(
                patient_id=pid.strip(),
                week=_int_field(week, "week", line_no),
                site=_int_field(site, "site", line_no),
                arm=arm,
                age=_int_field(age, "age", line_no),
                sex=sex_value,
                score=_int_field(score, "twstrs", line_no),
            )
        )
    return from_records(records)


def read_panel(path: Union[str, os.PathLike]) -> PanelDataset:
    with open(path, "rb") as fh:
        return parse_panel(fh)


def serialize_panel(data: PanelDataset) -> str:
    lines = [",".join(HEADER)]
    for r in data.records:
        lines.append(f"{r.patient_id},{r.week},{r.site},{r.arm.value},{r.age},{r.sex.value},{r.score}")
    return "\n".join(lines) + "\n"


BUNDLED_PANEL = "cdystonia_surrogate.csv"


def load_bundled_panel() -> PanelDataset:
    """Load the panel shipped with the package (a simulated surrogate, see README)."""
    text = resources.files("dystonia_bayes").joinpath("data").joinpath(BUNDLED_PANEL).read_text("utf-8")
    return parse_panel(text)


# Published fingerprint of the original trial file; used to decide whether
# magnitude checks against the published estimates are meaningful.
TRIAL_BASELINE_MEANS = {Arm.PLACEBO: 41.51, Arm.U5000: 41.36, Arm.U10000: 41.56}
TRIAL_BASELINE_SDS = {Arm.PLACEBO: 12.08, Arm.U5000: 13.53, Arm.U10000: 12.55}
TRIAL_SEX_MEANS = {Sex.FEMALE: 42.26, Sex.MALE: 40.17}
TRIAL_COUNTS = {Arm.PLACEBO: 36, Arm.U5000: 36, Arm.U10000: 37}


def matches_trial_fingerprint(data: PanelDataset, tol: float = 0.05) -> bool:
    if data.n_patients != 109 or data.n_rows != 631 or data.counts != TRIAL_COUNTS:
        return False
    try:
        table = baseline_summary(data)
    except MissingBaseline:
        return False
    for arm, mean in TRIAL_BASELINE_MEANS.items():
        stats = table.by_arm.get(arm.label)
        if stats is None or abs(stats.score_mean - mean) > tol:
            return False
        if abs(stats.score_sd - TRIAL_BASELINE_SDS[arm]) > tol:
            return False
    for sex, mean in TRIAL_SEX_MEANS.items():
        stats = table.by_sex.get(sex.label)
        if stats is None or abs(stats.score_mean - mean) > tol:
            return False
    return True


# --------------------------------------------------------------------------
# Baseline summary
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupStats:
    n: int
    score_mean: float
    score_sd: float
    age_mean: float


@dataclass(frozen=True)
class BaselineTable:
    by_arm: dict
    by_sex: dict


def _group_stats(rows: Sequence[ObservationRecord]) -> GroupStats:
    scores = np.array([r.score for r in rows], dtype=float)
    ages = np.array([r.age for r in rows], dtype=float)
    sd = float(np.std(scores, ddof=1)) if len(scores) > 1 else 0.0
    return GroupStats(len(rows), float(scores.mean()), sd, float(ages.mean()))


def baseline_summary(data: PanelDataset) -> BaselineTable:
    """Week-0 score mean/SD (sample SD) and mean age, grouped by arm and by sex."""
    baseline = [r for r in data.records if r.week == 0]
    have = {r.patient_id for r in baseline}
    lacking = [pid for pid in data.patient_index if pid not in have]
    if lacking:
        raise MissingBaseline(f"patients without a week-0 visit: {', '.join(lacking[:10])}")
    by_arm = {}
    for arm in ARMS:
        rows = [r for r in baseline if r.arm is arm]
        if rows:
            by_arm[arm.label] = _group_stats(rows)
    by_sex = {}
    for sex in Sex:
        rows = [r for r in baseline if r.sex is sex]
        if rows:
            by_sex[sex.label] = _group_stats(rows)
    return BaselineTable(by_arm=by_arm, by_sex=by_sex)


# --------------------------------------------------------------------------
# Design encoding
# --------------------------------------------------------------------------

BASE_TERMS = ("intercept", "treatment", "week", "week_sq", "sex", "age", "dose_onset", "site")

FULL_TERMS = (
    "intercept", "treatment", "week", "week_sq", "sex", "age", "dose_onset", "site",
    "treatment:sex", "treatment:week", "treatment:site", "sex:age", "sex:week",
    "dose_onset:site", "age:week",
)
FINAL_TERMS = ("intercept", "treatment", "week", "week_sq", "sex", "site")


@dataclass(frozen=True)
class CovariateSpec:
    """Ordered fixed-effect terms plus coding options.

    Terms are base covariate names or ``:``-joined interactions of base names.
    ``treatment_coding`` is ``"ordinal"`` (one 0/1/2 column) or ``"dummy"``
    (U5000 and U10000 indicators); ``site_coding`` is ``"numeric"`` (1-9) or
    ``"onehot"`` (indicators for sites 2-9). ``center`` subtracts the dataset
    mean from week and age before squares and products are formed.
    """

    terms: tuple
    treatment_coding: str = "ordinal"
    site_coding: str = "numeric"
    center: bool = False

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise EmptySpec("covariate spec has no terms")
        if len(set(terms)) != len(terms):
            raise ConfigError(f"duplicate terms in covariate spec: {terms}")
        for term in terms:
            for part in term.split(":"):
                if part not in BASE_TERMS:
                    raise UnknownCovariate(f"unknown covariate {part!r} in term {term!r}")
            if ":" in term and "intercept" in term.split(":"):
                raise UnknownCovariate(f"intercept cannot appear in an interaction: {term!r}")
        if "intercept" in terms and terms[0] != "intercept":
            terms = ("intercept",) + tuple(t for t in terms if t != "intercept")
        if self.treatment_coding not in ("ordinal", "dummy"):
            raise ConfigError(f"treatment_coding must be ordinal or dummy, got {self.treatment_coding!r}")
        if self.site_coding not in ("numeric", "onehot"):
            raise ConfigError(f"site_coding must be numeric or onehot, got {self.site_coding!r}")
        object.__setattr__(self, "terms", terms)

    def without(self, term: str) -> "CovariateSpec":
        return CovariateSpec(
            tuple(t for t in self.terms if t != term),
            treatment_coding=self.treatment_coding,
            site_coding=self.site_coding,
            center=self.center,
        )

    @staticmethod
    def parents(term: str) -> tuple:
        return tuple(term.split(":")) if ":" in term else ()


FULL_SPEC = CovariateSpec(FULL_TERMS)
FINAL_SPEC = CovariateSpec(FINAL_TERMS)


def read_spec_file(path: Union[str, os.PathLike]) -> CovariateSpec:
    """Read a spec file: one term per line, ``#`` comments, ``@key=value`` options."""
    terms = []
    options = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("@"):
                key, _, value = line[1:].partition("=")
                key, value = key.strip(), value.strip()
                if key == "center":
                    options[key] = value.lower() in ("1", "true", "yes")
                elif key in ("treatment_coding", "site_coding"):
                    options[key] = value
                else:
                    raise ConfigError(f"unknown spec option {key!r}")
            else:
                terms.append(line)
    return CovariateSpec(tuple(terms), **options)


@dataclass(frozen=True)
class DesignMatrix:
    columns: tuple
    values: np.ndarray
    patient_of_row: np.ndarray
    n_patients: int
    term_of_column: tuple = field(default=())
    patient_ids: tuple = field(default=())

    @property
    def shape(self):
        return self.values.shape

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]


def _base_columns(data: PanelDataset, spec: CovariateSpec) -> dict:
    """Each base covariate as an ordered mapping of column label -> vector."""
    recs = data.records
    n = len(recs)
    week = np.array([r.week for r in recs], dtype=float)
    age = np.array([r.age for r in recs], dtype=float)
    arm_code = np.array([r.arm.code for r in recs], dtype=float)
    site = np.array([r.site for r in recs], dtype=float)
    onset = (week >= 2).astype(float)
    if spec.center and n:
        week_c = week - week.mean()
        age_c = age - age.mean()
    else:
        week_c, age_c = week, age

    cols = {
        "intercept": {"intercept": np.ones(n)},
        "week": {"week": week_c},
        "week_sq": {"week_sq": week_c**2},
        "sex": {"sex": np.array([r.sex.code for r in recs], dtype=float)},
        "age": {"age": age_c},
        "dose_onset": {"dose_onset": arm_code * onset},
    }
    if spec.treatment_coding == "ordinal":
        cols["treatment"] = {"treatment": arm_code}
    else:
        cols["treatment"] = {
            "treatment[U5000]": (arm_code == 1).astype(float),
            "treatment[U10000]": (arm_code == 2).astype(float),
        }
    if spec.site_coding == "numeric":
        cols["site"] = {"site": site}
    else:
        cols["site"] = {f"site[{s}]": (site == s).astype(float) for s in range(2, SITE_RANGE[1] + 1)}
    return cols


def encode_design(data: PanelDataset, spec: CovariateSpec) -> DesignMatrix:
    """Encode the fixed-effect design for ``data`` in the column order of ``spec``."""
    base = _base_columns(data, spec)
    names: list = []
    vectors: list = []
    terms: list = []
    for term in spec.terms:
        parts = term.split(":")
        expanded = [("", np.ones(data.n_rows))]
        for part in parts:
            expanded = [
                (f"{prefix}:{label}" if prefix else label, vec * col)
                for prefix, vec in expanded
                for label, col in base[part].items()
            ]
        for label, vec in expanded:
            names.append(label)
            vectors.append(vec)
            terms.append(term)
    values = np.column_stack(vectors) if vectors else np.zeros((data.n_rows, 0))
    if data.n_rows > 1:
        zero = [name for name, vec in zip(names, vectors) if not np.any(vec)]
        if zero:
            warnings.warn(f"constant-zero design columns: {zero}", stacklevel=2)
    return DesignMatrix(
        columns=tuple(names),
        values=values,
        patient_of_row=data.patient_of_row(),
        n_patients=data.n_patients,
        term_of_column=tuple(terms),
        patient_ids=tuple(data.patient_index),
    )
