"""Long-format CSV ingestion and export.

One row per (subject, measurement time).  Required columns are ``id``,
``time``, ``y``, ``a1``, ``r`` and ``a2``; empty fields mean missing.  Extra
columns are ignored unless requested as covariates.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .design import SmartDesign, SubjectRecord
from .errors import SchemaError, ValidationError

DEFAULT_COLUMNS = dict(id="id", time="time", y="y", a1="a1", r="r", a2="a2")


@dataclass
class IngestResult:
    subjects: List[SubjectRecord]
    covariate_means: Dict[str, float] = field(default_factory=dict)


def _parse_float(text, what, row):
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"row {row}: cannot parse {what} value {text!r} as a number") from None


def _parse_code(text, what, row, allowed):
    if text == "":
        return None
    value = _parse_float(text, what, row)
    if value not in allowed or value != int(value):
        raise ValidationError(f"row {row}: {what} must be one of {sorted(allowed)}, got {text!r}")
    return int(value)


def read_long_csv(
    path,
    covariates: Sequence[str] = (),
    center: bool = True,
    design: Optional[SmartDesign] = None,
    columns: Optional[Mapping[str, str]] = None,
) -> IngestResult:
    """Parse a long-format CSV into time-sorted SubjectRecords.

    Rows are numbered as in a spreadsheet (header is row 1).  Covariates are
    mean-centered over subjects when ``center`` is true; the subtracted
    means are returned alongside the records.
    """
    cols = dict(DEFAULT_COLUMNS, **(columns or {}))
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"data file {path} does not exist")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise ValidationError(f"data file {path} is empty")
        missing = [cols[k] for k in ("id", "time", "y", "a1", "r") if cols[k] not in header]
        missing += [c for c in covariates if c not in header]
        if missing:
            raise SchemaError(f"data file {path} lacks required columns {missing}")
        has_a2 = cols["a2"] in header
        grouped: Dict[str, dict] = {}
        order: List[str] = []
        for row_no, raw in enumerate(reader, start=2):
            row = {k: (v or "").strip() for k, v in raw.items() if k is not None}
            sid = row[cols["id"]]
            if sid == "":
                raise ValidationError(f"row {row_no}: empty id")
            t = _parse_float(row[cols["time"]], "time", row_no)
            y = np.nan if row[cols["y"]] == "" else _parse_float(row[cols["y"]], "y", row_no)
            fixed = (
                _parse_code(row[cols["a1"]], "a1", row_no, {1, -1}),
                _parse_code(row[cols["r"]], "r", row_no, {0, 1}),
                _parse_code(row[cols["a2"]], "a2", row_no, {1, -1}) if has_a2 else None,
                tuple(_parse_float(row[c], c, row_no) if row[c] != "" else np.nan for c in covariates),
            )
            if sid not in grouped:
                grouped[sid] = dict(fixed=fixed, first=row_no, rows=[])
                order.append(sid)
            entry = grouped[sid]
            if not _same_fixed(entry["fixed"], fixed):
                raise ValidationError(
                    f"rows {entry['first']} and {row_no}: subject {sid!r} has inconsistent treatment or covariate fields"
                )
            entry["rows"].append((t, y, row_no))
    if not order:
        raise ValidationError(f"data file {path} has no data rows")

    subjects = []
    for sid in order:
        entry = grouped[sid]
        a1, r, a2, cov = entry["fixed"]
        first = entry["first"]
        if a1 is None:
            raise ValidationError(f"row {first}: subject {sid!r} has no a1")
        if r is None:
            raise ValidationError(f"row {first}: subject {sid!r} has no responder status r")
        if any(np.isnan(cov)):
            raise ValidationError(f"row {first}: subject {sid!r} has a missing covariate")
        rows = sorted(entry["rows"])
        times = np.array([t for t, _, _ in rows])
        dup = np.flatnonzero(np.diff(times) == 0)
        if dup.size:
            raise ValidationError(f"row {rows[dup[0] + 1][2]}: subject {sid!r} repeats time {times[dup[0]]:g}")
        y = np.array([v for _, v, _ in rows])
        if not np.isfinite(y).any():
            raise ValidationError(f"row {first}: subject {sid!r} has no observed outcome")
        subjects.append(SubjectRecord(sid, times, y, a1, r, a2, dict(zip(covariates, cov))))

    means = {}
    if center and covariates:
        for name in covariates:
            means[name] = float(np.mean([s.covariates[name] for s in subjects]))
        for s in subjects:
            s.covariates = {k: v - means[k] for k, v in s.covariates.items()}
    if design is not None:
        for s in subjects:
            design.check_subject(s)
    return IngestResult(subjects, means)


def _same_fixed(a, b):
    return a[:3] == b[:3] and np.array_equal(np.array(a[3]), np.array(b[3]), equal_nan=True)


def ingest(path, covariates: Sequence[str] = (), center: bool = True, design: Optional[SmartDesign] = None,
           columns: Optional[Mapping[str, str]] = None) -> List[SubjectRecord]:
    return read_long_csv(path, covariates, center, design, columns).subjects


def _fmt_exact(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def export(subjects: Sequence[SubjectRecord], path) -> None:
    """Write SubjectRecords as long-format CSV at full precision.

    Unobserved times are written with an empty ``y`` so that ``ingest``
    (without centering) reproduces the records exactly.
    """
    names = sorted({k for s in subjects for k in s.covariates})
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "time", "y", "a1", "r", "a2"] + names)
        for s in subjects:
            for t, y, o in zip(s.times, s.y, s.observed):
                w.writerow(
                    [s.id, _fmt_exact(t), _fmt_exact(y) if o else "", s.a1, s.r, "" if s.a2 is None else s.a2]
                    + [_fmt_exact(s.covariates.get(k)) for k in names]
                )
