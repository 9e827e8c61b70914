"""SMART designs, embedded regimens, and known inverse-probability weights.

A two-stage SMART randomizes everyone at stage one and re-randomizes some
(first-stage treatment, responder status) cells at stage two.  Regimens are
indexed by ``(a1, a2)`` with codes +1/-1; ``a2`` is ``None`` for regimens
whose slow responders are never re-randomized.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidQueryError, PositivityError, ValidationError

Cell = Tuple[int, int]


def _check_code(value, name):
    if value not in (1, -1):
        raise ValidationError(f"{name} must be +1 or -1, got {value!r}")


@dataclass(frozen=True, order=True)
class DtrIndex:
    """An embedded regimen. ``a2=None`` means stage two is not randomized."""

    a1: int
    a2: Optional[int] = None

    def __post_init__(self):
        _check_code(self.a1, "a1")
        if self.a2 is not None:
            _check_code(self.a2, "a2")

    def label(self) -> str:
        return f"({self.a1},{'.' if self.a2 is None else self.a2})"

    @classmethod
    def parse(cls, text: str) -> "DtrIndex":
        """Parse ``"1,-1"``, ``"(-1,.)"`` or ``"-1"``."""
        parts = [p.strip() for p in text.strip().strip("()").split(",") if p.strip()]
        if not parts or len(parts) > 2:
            raise ValidationError(f"cannot parse DTR {text!r}")
        try:
            a1 = int(parts[0])
            a2 = None if len(parts) == 1 or parts[1] in (".", "", "None", "none") else int(parts[1])
        except ValueError as exc:
            raise ValidationError(f"cannot parse DTR {text!r}") from exc
        return cls(a1, a2)


@dataclass
class SubjectRecord:
    """Observed data for one participant.

    ``y`` holds NaN wherever ``observed`` is False.
    """

    id: str
    times: np.ndarray
    y: np.ndarray
    a1: int
    r: int
    a2: Optional[int] = None
    covariates: Dict[str, float] = field(default_factory=dict)
    observed: Optional[np.ndarray] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.observed is None:
            self.observed = np.isfinite(self.y)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.times.ndim != 1 or self.y.shape != self.times.shape or self.observed.shape != self.times.shape:
            raise ValidationError(f"subject {self.id}: times, y and observed must be equal-length vectors")
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError(f"subject {self.id}: times must be strictly increasing")
        if np.any(~np.isfinite(self.y[self.observed])):
            raise ValidationError(f"subject {self.id}: observed outcomes must be finite")
        self.y = np.where(self.observed, self.y, np.nan)
        _check_code(self.a1, "a1")
        if self.r not in (0, 1):
            raise ValidationError(f"subject {self.id}: r must be 0 or 1")
        if self.a2 is not None:
            _check_code(self.a2, "a2")
        self.covariates = {str(k): float(v) for k, v in self.covariates.items()}

    @property
    def cell(self) -> Cell:
        return (self.a1, self.r)

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())

    def same_as(self, other: "SubjectRecord") -> bool:
        """Exact equality, treating NaN outcomes at unobserved times as equal."""
        return (
            self.id == other.id
            and self.a1 == other.a1
            and self.r == other.r
            and self.a2 == other.a2
            and self.covariates == other.covariates
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.observed, other.observed)
            and np.array_equal(self.y, other.y, equal_nan=True)
        )


@dataclass(frozen=True)
class SmartDesign:
    """Two-stage SMART.

    Parameters
    ----------
    dtrs : embedded regimens.
    p_a1 : probability that A1 = +1.
    p_a2_given : probability that A2 = +1 for each re-randomized ``(a1, r)`` cell.
    """

    dtrs: Tuple[DtrIndex, ...]
    p_a1: float
    p_a2_given: Mapping[Cell, float]
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "dtrs", tuple(self.dtrs))
        object.__setattr__(self, "p_a2_given", {tuple(k): float(v) for k, v in dict(self.p_a2_given).items()})
        if len(set(self.dtrs)) != len(self.dtrs):
            raise ValidationError("duplicate DTRs in design")
        if not 0.0 < self.p_a1 < 1.0:
            raise PositivityError(f"P(A1=+1) must lie in (0,1), got {self.p_a1}")
        for cell, p in self.p_a2_given.items():
            _check_code(cell[0], "a1")
            if cell[1] not in (0, 1):
                raise ValidationError(f"responder status in cell {cell} must be 0 or 1")
            if not 0.0 < p < 1.0:
                raise PositivityError(f"P(A2=+1 | A1={cell[0]}, R={cell[1]}) must lie in (0,1), got {p}")
        for d in self.dtrs:
            cells = [c for c in self.p_a2_given if c[0] == d.a1]
            if d.a2 is None and cells:
                raise ValidationError(f"DTR {d.label()} leaves a2 undefined but cells {cells} are re-randomized")
            if d.a2 is not None and not cells:
                raise ValidationError(f"DTR {d.label()} sets a2 but no cell with a1={d.a1} is re-randomized")

    @property
    def rerandomized_cells(self) -> FrozenSet[Cell]:
        return frozenset(self.p_a2_given)

    @property
    def n_dtrs(self) -> int:
        return len(self.dtrs)

    def prob_a1(self, a1: int) -> float:
        return self.p_a1 if a1 == 1 else 1.0 - self.p_a1

    def prob_a2(self, a1: int, r: int, a2: int) -> float:
        p = self.p_a2_given[(a1, r)]
        return p if a2 == 1 else 1.0 - p

    def check_subject(self, subject: SubjectRecord) -> None:
        rerand = subject.cell in self.p_a2_given
        if rerand and subject.a2 is None:
            raise InvalidQueryError(f"subject {subject.id}: cell {subject.cell} is re-randomized but a2 is missing")
        if not rerand and subject.a2 is not None:
            raise InvalidQueryError(
                f"subject {subject.id}: a2 given for cell {subject.cell}, which has no second randomization"
            )


def autism_design() -> SmartDesign:
    """Only slow responders to A1=+1 are re-randomized; three embedded DTRs."""
    return SmartDesign(
        dtrs=(DtrIndex(1, 1), DtrIndex(1, -1), DtrIndex(-1, None)),
        p_a1=0.5,
        p_a2_given={(1, 0): 0.5},
        name="autism",
    )


def symmetric_design() -> SmartDesign:
    """All slow responders re-randomized; four embedded DTRs."""
    return SmartDesign(
        dtrs=(DtrIndex(1, 1), DtrIndex(1, -1), DtrIndex(-1, 1), DtrIndex(-1, -1)),
        p_a1=0.5,
        p_a2_given={(1, 0): 0.5, (-1, 0): 0.5},
        name="symmetric",
    )


def _indicator(a1, r, a2, dtr: DtrIndex, design: SmartDesign) -> int:
    if dtr not in design.dtrs:
        raise InvalidQueryError(f"DTR {dtr.label()} is not embedded in design {design.name!r}")
    if a1 != dtr.a1:
        return 0
    if (a1, r) in design.p_a2_given:
        return int(a2 == dtr.a2)
    return 1


def consistency_indicator(subject: SubjectRecord, dtr: DtrIndex, design: SmartDesign) -> int:
    """1 iff the subject's (A1, R, A2) sequence is observable under ``dtr``."""
    design.check_subject(subject)
    return _indicator(subject.a1, subject.r, subject.a2, dtr, design)


def design_weight(subject: SubjectRecord, dtr: DtrIndex, design: SmartDesign) -> float:
    """Combined weight I * W for ``subject`` under ``dtr`` (0 when inconsistent)."""
    if not consistency_indicator(subject, dtr, design):
        return 0.0
    return _weight(subject.a1, subject.r, dtr, design)


def _weight(a1, r, dtr, design):
    p = design.prob_a1(a1)
    if (a1, r) in design.p_a2_given:
        p *= design.prob_a2(a1, r, dtr.a2)
    if p <= 0.0:
        raise PositivityError(f"zero design probability for DTR {dtr.label()}")
    return 1.0 / p


@dataclass(frozen=True)
class Replicate:
    subject: SubjectRecord
    dtr: DtrIndex
    weight: float


def augment_dataset(subjects: Iterable[SubjectRecord], design: SmartDesign) -> List[Replicate]:
    """One replicate per (subject, consistent DTR), carrying that DTR's weight.

    Order follows subjects, then ``design.dtrs``.
    """
    out = []
    for s in subjects:
        design.check_subject(s)
        for d in design.dtrs:
            if _indicator(s.a1, s.r, s.a2, d, design):
                out.append(Replicate(s, d, _weight(s.a1, s.r, d, design)))
    return out


def weight_table(design: SmartDesign) -> List[dict]:
    """Known IPW for every (A1, R, A2) cell and DTR it is consistent with."""
    rows = []
    for a1 in (1, -1):
        for r in (1, 0):
            a2s = (1, -1) if (a1, r) in design.p_a2_given else (None,)
            for a2 in a2s:
                for d in design.dtrs:
                    if _indicator(a1, r, a2, d, design):
                        rows.append(dict(a1=a1, r=r, a2=a2, dtr=d, weight=_weight(a1, r, d, design)))
    return rows
