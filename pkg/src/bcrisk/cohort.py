"""Patient cohort data model: clinical features, outcomes, manifests, CAPRA-S.

The manifest is a UTF-8 CSV with a header row and columns
``patient_id, age, psa, isup, time_years, event, slide_ids`` plus optional
CAPRA-S columns ``psa_capra, gleason_p, gleason_s, margins, ece, svi, lni``
(flags encoded 0/1, slide ids ``;``-separated, missing optional cells empty).
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EstimationError, ParseError, ValidationError

MANIFEST_COLUMNS = ["patient_id", "age", "psa", "isup", "time_years", "event", "slide_ids"]
CAPRA_COLUMNS = ["psa_capra", "gleason_p", "gleason_s", "margins", "ece", "svi", "lni"]

# Versioned point table of the published postoperative CAPRA-S scoring tool.
# PSA bands are inclusive on their upper edge; Gleason points come from the
# pathologic primary/secondary patterns; binary findings add fixed points.
CAPRA_S_TABLE_VERSION = "capra-s-2011"
CAPRA_S_PSA_BANDS = ((6.0, 0), (10.0, 1), (20.0, 2), (float("inf"), 3))
CAPRA_S_MARGIN_POINTS = 2
CAPRA_S_ECE_POINTS = 1
CAPRA_S_SVI_POINTS = 2
CAPRA_S_LNI_POINTS = 1


class OutcomeRule(enum.Enum):
    """How biochemical recurrence is called from a postoperative PSA series."""

    TWO_CONSECUTIVE_0_2 = "two_consecutive_0.2"
    SINGLE_0_1 = "single_0.1"


class CapraGroup(enum.Enum):
    LOW = "Low"
    INTERMEDIATE = "Intermediate"
    HIGH = "High"


@dataclass(frozen=True)
class ClinicalFeatures:
    """Age (years), pretreatment PSA (ng/mL) and ISUP grade group (1-5)."""

    age_at_diagnosis: float
    psa_pretreatment: float
    isup_grade: int

    def __post_init__(self):
        if not 18.0 <= self.age_at_diagnosis <= 120.0:
            raise ValidationError(f"age_at_diagnosis {self.age_at_diagnosis} outside [18, 120]")
        if not self.psa_pretreatment > 0:
            raise ValidationError(f"psa_pretreatment must be > 0, got {self.psa_pretreatment}")
        if self.isup_grade not in (1, 2, 3, 4, 5):
            raise ValidationError(f"isup_grade must be in 1..5, got {self.isup_grade}")

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.age_at_diagnosis, self.psa_pretreatment, float(self.isup_grade)], dtype=float
        )


@dataclass(frozen=True)
class SurvivalOutcome:
    """Follow-up time in years and whether recurrence was observed."""

    time: float
    event: bool

    def __post_init__(self):
        if not self.time > 0:
            raise ValidationError(f"outcome time must be > 0, got {self.time}")


@dataclass(frozen=True)
class PsaSeries:
    """Ordered postoperative PSA measurements as (time_years, ng/mL) pairs."""

    measurements: tuple[tuple[float, float], ...]

    def __post_init__(self):
        times = [t for t, _ in self.measurements]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError("PSA measurement times must be strictly increasing")
        if any(v < 0 for _, v in self.measurements):
            raise ValidationError("PSA values must be >= 0")


@dataclass(frozen=True)
class CapraSInputs:
    psa: float
    pathologic_gleason_primary: int
    pathologic_gleason_secondary: int
    positive_surgical_margins: bool
    extracapsular_extension: bool
    seminal_vesicle_invasion: bool
    lymph_node_invasion: bool

    def __post_init__(self):
        for name in ("pathologic_gleason_primary", "pathologic_gleason_secondary"):
            if getattr(self, name) not in (1, 2, 3, 4, 5):
                raise ValidationError(f"{name} must be in 1..5")
        if not self.psa > 0:
            raise ValidationError("CAPRA-S psa must be > 0")


@dataclass(frozen=True)
class CohortRecord:
    """One patient: identifiers, covariates, outcome and slide references."""

    patient_id: str
    outcome: SurvivalOutcome
    clinical: ClinicalFeatures | None = None
    slide_ids: tuple[str, ...] = ()
    capra_s_inputs: CapraSInputs | None = None

    def __post_init__(self):
        if self.clinical is None and not self.slide_ids:
            raise ValidationError(
                f"record {self.patient_id!r} needs clinical features or slide ids"
            )


@dataclass(frozen=True)
class NormalizationStats:
    """Per-feature mean/std for (age, psa, isup), fit on a training split."""

    means: tuple[float, float, float]
    stds: tuple[float, float, float]

    def __post_init__(self):
        if any(s <= 0 for s in self.stds):
            raise ValidationError("normalization stds must be > 0")


def derive_bcr(series: PsaSeries, rule: OutcomeRule, followup_end: float) -> SurvivalOutcome:
    """Apply a recurrence rule to a PSA series.

    Under the two-consecutive rule the event time is the time of the first
    of the two qualifying measurements; a series with no qualifying pattern
    is censored at ``followup_end``.
    """
    if not series.measurements:
        raise ValidationError("PSA series is empty")
    last_time = series.measurements[-1][0]
    if followup_end < last_time:
        raise ValidationError(
            f"followup_end {followup_end} precedes last measurement at {last_time}"
        )
    if rule is OutcomeRule.TWO_CONSECUTIVE_0_2:
        pairs = zip(series.measurements, series.measurements[1:])
        for (t1, v1), (_, v2) in pairs:
            if v1 >= 0.2 and v2 >= 0.2:
                return SurvivalOutcome(time=t1, event=True)
    elif rule is OutcomeRule.SINGLE_0_1:
        for t, v in series.measurements:
            if v >= 0.1:
                return SurvivalOutcome(time=t, event=True)
    else:  # pragma: no cover - enum is closed
        raise ValidationError(f"unknown outcome rule {rule}")
    return SurvivalOutcome(time=followup_end, event=False)


def fit_normalization(records: Sequence[CohortRecord]) -> NormalizationStats:
    """Sample-std Z-score statistics over records that carry clinical features."""
    rows = [r.clinical.as_vector() for r in records if r.clinical is not None]
    if len(rows) < 2:
        raise ValidationError("need >= 2 records with clinical features")
    x = np.stack(rows)
    means = x.mean(axis=0)
    stds = x.std(axis=0, ddof=1)
    for name, s in zip(("age", "psa", "isup"), stds):
        if s <= 0:
            raise EstimationError(f"degenerate clinical feature {name!r}: zero variance")
    return NormalizationStats(means=tuple(means), stds=tuple(stds))


def normalize_clinical(c: ClinicalFeatures, stats: NormalizationStats) -> np.ndarray:
    """Standardize (age, psa, isup) to Z-scores."""
    return (c.as_vector() - np.asarray(stats.means)) / np.asarray(stats.stds)


def denormalize_clinical(z: np.ndarray, stats: NormalizationStats) -> ClinicalFeatures:
    x = np.asarray(z, dtype=float) * np.asarray(stats.stds) + np.asarray(stats.means)
    return ClinicalFeatures(
        age_at_diagnosis=float(x[0]),
        psa_pretreatment=float(x[1]),
        isup_grade=int(round(x[2])),
    )


def capra_s_score(inputs: CapraSInputs) -> tuple[int, CapraGroup]:
    """Integer CAPRA-S score (0..12) and its Low/Intermediate/High group."""
    score = 0
    for upper, points in CAPRA_S_PSA_BANDS:
        if inputs.psa <= upper:
            score += points
            break
    if inputs.pathologic_gleason_primary >= 4:
        score += 3
    elif inputs.pathologic_gleason_secondary >= 4:
        score += 1
    if inputs.positive_surgical_margins:
        score += CAPRA_S_MARGIN_POINTS
    if inputs.extracapsular_extension:
        score += CAPRA_S_ECE_POINTS
    if inputs.seminal_vesicle_invasion:
        score += CAPRA_S_SVI_POINTS
    if inputs.lymph_node_invasion:
        score += CAPRA_S_LNI_POINTS
    if score <= 2:
        group = CapraGroup.LOW
    elif score <= 5:
        group = CapraGroup.INTERMEDIATE
    else:
        group = CapraGroup.HIGH
    return score, group


def _fmt(value: float) -> str:
    # repr round-trips doubles exactly, keeping save->load->save byte-stable
    return repr(float(value))


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"row {row}: column {column!r} is not a number: {cell!r}") from None


def _parse_int(cell: str, row: int, column: str) -> int:
    try:
        return int(cell)
    except ValueError:
        raise ParseError(f"row {row}: column {column!r} is not an integer: {cell!r}") from None


def _parse_flag(cell: str, row: int, column: str) -> bool:
    if cell not in ("0", "1"):
        raise ParseError(f"row {row}: column {column!r} must be 0 or 1: {cell!r}")
    return cell == "1"


def load_manifest(path: str | Path) -> list[CohortRecord]:
    """Read a cohort manifest CSV; raises ParseError naming row and column."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        return _read_manifest(fh)


def _read_manifest(fh: Iterable[str]) -> list[CohortRecord]:
    reader = csv.DictReader(fh)
    header = reader.fieldnames or []
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise ParseError(f"manifest is missing required columns: {missing}")
    has_capra = all(c in header for c in CAPRA_COLUMNS)
    records: list[CohortRecord] = []
    seen: set[str] = set()
    for i, row in enumerate(reader, start=2):  # header is line 1
        pid = (row.get("patient_id") or "").strip()
        if not pid:
            raise ParseError(f"row {i}: column 'patient_id' is empty")
        if pid in seen:
            raise ValidationError(f"duplicate patient_id {pid!r} in manifest (row {i})")
        seen.add(pid)

        clin_cells = [(row.get(c) or "").strip() for c in ("age", "psa", "isup")]
        clinical = None
        if all(clin_cells):
            isup = _parse_int(clin_cells[2], i, "isup")
            if isup not in (1, 2, 3, 4, 5):
                raise ParseError(f"row {i}: column 'isup' out of range 1..5: {isup}")
            try:
                clinical = ClinicalFeatures(
                    age_at_diagnosis=_parse_float(clin_cells[0], i, "age"),
                    psa_pretreatment=_parse_float(clin_cells[1], i, "psa"),
                    isup_grade=isup,
                )
            except ValidationError as exc:
                raise ParseError(f"row {i}: {exc}") from None

        try:
            outcome = SurvivalOutcome(
                time=_parse_float((row.get("time_years") or "").strip(), i, "time_years"),
                event=_parse_flag((row.get("event") or "").strip(), i, "event"),
            )
        except ValidationError as exc:
            raise ParseError(f"row {i}: {exc}") from None

        slide_cell = (row.get("slide_ids") or "").strip()
        slide_ids = tuple(s for s in slide_cell.split(";") if s) if slide_cell else ()

        capra = None
        if has_capra:
            capra_cells = [(row.get(c) or "").strip() for c in CAPRA_COLUMNS]
            if all(capra_cells):
                try:
                    capra = CapraSInputs(
                        psa=_parse_float(capra_cells[0], i, "psa_capra"),
                        pathologic_gleason_primary=_parse_int(capra_cells[1], i, "gleason_p"),
                        pathologic_gleason_secondary=_parse_int(capra_cells[2], i, "gleason_s"),
                        positive_surgical_margins=_parse_flag(capra_cells[3], i, "margins"),
                        extracapsular_extension=_parse_flag(capra_cells[4], i, "ece"),
                        seminal_vesicle_invasion=_parse_flag(capra_cells[5], i, "svi"),
                        lymph_node_invasion=_parse_flag(capra_cells[6], i, "lni"),
                    )
                except ValidationError as exc:
                    raise ParseError(f"row {i}: {exc}") from None

        try:
            records.append(
                CohortRecord(
                    patient_id=pid,
                    outcome=outcome,
                    clinical=clinical,
                    slide_ids=slide_ids,
                    capra_s_inputs=capra,
                )
            )
        except ValidationError as exc:
            raise ParseError(f"row {i}: {exc}") from None
    return records


def save_manifest(records: Sequence[CohortRecord], path: str | Path) -> None:
    """Write records back to the manifest CSV format (lossless round-trip)."""
    has_capra = any(r.capra_s_inputs is not None for r in records)
    columns = MANIFEST_COLUMNS + (CAPRA_COLUMNS if has_capra else [])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in records:
        row = [r.patient_id]
        if r.clinical is not None:
            row += [
                _fmt(r.clinical.age_at_diagnosis),
                _fmt(r.clinical.psa_pretreatment),
                str(r.clinical.isup_grade),
            ]
        else:
            row += ["", "", ""]
        row += [_fmt(r.outcome.time), "1" if r.outcome.event else "0", ";".join(r.slide_ids)]
        if has_capra:
            c = r.capra_s_inputs
            if c is not None:
                row += [
                    _fmt(c.psa),
                    str(c.pathologic_gleason_primary),
                    str(c.pathologic_gleason_secondary),
                    "1" if c.positive_surgical_margins else "0",
                    "1" if c.extracapsular_extension else "0",
                    "1" if c.seminal_vesicle_invasion else "0",
                    "1" if c.lymph_node_invasion else "0",
                ]
            else:
                row += [""] * len(CAPRA_COLUMNS)
        writer.writerow(row)
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def load_psa_series(path: str | Path) -> dict[str, PsaSeries]:
    """Read the long-format PSA CSV ``patient_id, time_years, psa``."""
    path = Path(path)
    rows: dict[str, list[tuple[float, float]]] = {}
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = ["patient_id", "time_years", "psa"]
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ParseError(f"PSA series file is missing columns: {missing}")
        for i, row in enumerate(reader, start=2):
            pid = (row.get("patient_id") or "").strip()
            if not pid:
                raise ParseError(f"row {i}: column 'patient_id' is empty")
            t = _parse_float((row.get("time_years") or "").strip(), i, "time_years")
            v = _parse_float((row.get("psa") or "").strip(), i, "psa")
            rows.setdefault(pid, []).append((t, v))
    out: dict[str, PsaSeries] = {}
    for pid, pairs in rows.items():
        try:
            out[pid] = PsaSeries(measurements=tuple(sorted(pairs)))
        except ValidationError as exc:
            raise ParseError(f"patient {pid!r}: {exc}") from None
    return out
