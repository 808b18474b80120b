"""Longitudinal trial data: parsing, validation, missingness patterns, rescaling.

A trial records a utility u_ij and a cost c_ij at times j = 0..J for each
subject i in one of two arms. Any component may be unrecorded; a pair of
response indicators (r_u, r_c) per subject-time marks what was seen. Utilities
live on a bounded instrument scale (EQ-5D: [-0.594, 1]); the modelling code
works on utilities rescaled to [0, 1].

Usage:
    ds = parse_trial_csv("trial.csv")
    tables = classify_patterns(ds)
    rds = rescale_utilities(ds)
    groups = split_by_completion(rds)
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import ParseError, SchemaError, ValidationError

EQ5D_BOUNDS = (-0.594, 1.0)
DEFAULT_SENTINELS = ("NA", "", "NaN", "nan", "na")
DEFAULT_TIME_FRACTIONS = (0.5, 0.5)


# ---------------------------------------------------------------------------
# core containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrialSchema:
    """Column naming for the wide CSV layout (id, arm, u0..uJ, c0..cJ)."""

    id_col: str = "id"
    arm_col: str = "arm"
    utility_prefix: str = "u"
    cost_prefix: str = "c"
    sentinels: tuple[str, ...] = DEFAULT_SENTINELS

    def utility_col(self, j: int) -> str:
        return f"{self.utility_prefix}{j}"

    def cost_col(self, j: int) -> str:
        return f"{self.cost_prefix}{j}"


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's trajectory; unobserved components hold NaN."""

    subject_id: str
    arm: int
    u: np.ndarray
    c: np.ndarray
    r_u: np.ndarray
    r_c: np.ndarray

    @property
    def J(self) -> int:
        return len(self.u) - 1

    def pattern_signature(self) -> tuple[int, ...]:
        """Response-indicator tuple interleaved as (r_u0, r_c0, r_u1, r_c1, ...)."""
        sig = []
        for j in range(self.J + 1):
            sig.append(int(self.r_u[j]))
            sig.append(int(self.r_c[j]))
        return tuple(sig)

    def is_completer(self) -> bool:
        return bool(np.all(self.r_u) and np.all(self.r_c))


@dataclass(frozen=True)
class TrialDataset:
    """Validated trial; `delta` gives follow-up interval lengths in time units."""

    subjects: tuple[SubjectRecord, ...]
    J: int
    delta: tuple[float, ...]
    bounds: tuple[float, float] = EQ5D_BOUNDS

    def __post_init__(self):
        _validate_dataset(self)

    @property
    def n(self) -> int:
        return len(self.subjects)

    def arms(self) -> tuple[int, ...]:
        return tuple(sorted({s.arm for s in self.subjects}))

    def arm_subjects(self, arm: int) -> tuple[SubjectRecord, ...]:
        return tuple(s for s in self.subjects if s.arm == arm)

    def arm_arrays(self, arm: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Stack one arm as (u, c, r_u, r_c) with shape (n_arm, J+1)."""
        subs = self.arm_subjects(arm)
        if not subs:
            raise ValidationError(f"no subjects in arm {arm}")
        u = np.stack([s.u for s in subs])
        c = np.stack([s.c for s in subs])
        r_u = np.stack([s.r_u for s in subs])
        r_c = np.stack([s.r_c for s in subs])
        return u, c, r_u, r_c


def _validate_dataset(ds: TrialDataset) -> None:
    if ds.J < 1:
        raise ValidationError(f"J must be >= 1, got {ds.J}")
    if len(ds.delta) != ds.J:
        raise ValidationError(
            f"delta must have one entry per follow-up time: expected {ds.J}, got {len(ds.delta)}")
    if any(not (d > 0) for d in ds.delta):
        raise ValidationError(f"time fractions must be positive, got {ds.delta}")
    lo, hi = ds.bounds
    if not lo < hi:
        raise ValidationError(f"instrument bounds must satisfy min < max, got {ds.bounds}")
    seen: set[str] = set()
    for s in ds.subjects:
        if s.subject_id in seen:
            raise ValidationError(f"duplicate subject id {s.subject_id!r}")
        seen.add(s.subject_id)
        if s.arm not in (1, 2):
            raise ValidationError(f"subject {s.subject_id!r}: arm must be 1 or 2, got {s.arm}")
        for arr, r, kind in ((s.u, s.r_u, "utility"), (s.c, s.r_c, "cost")):
            if len(arr) != ds.J + 1 or len(r) != ds.J + 1:
                raise ValidationError(
                    f"subject {s.subject_id!r}: expected {ds.J + 1} {kind} entries")
            for j in range(ds.J + 1):
                if r[j]:
                    v = arr[j]
                    if not math.isfinite(v):
                        raise ValidationError(
                            f"subject {s.subject_id!r}, {kind} time {j}: observed value not finite")
                    if kind == "utility" and not (lo <= v <= hi):
                        raise ValidationError(
                            f"subject {s.subject_id!r}, utility time {j}: value {v} outside "
                            f"instrument bounds [{lo}, {hi}]")
                    if kind == "cost" and v < 0:
                        raise ValidationError(
                            f"subject {s.subject_id!r}, cost time {j}: negative value {v}")
                elif not math.isnan(arr[j]):
                    raise ValidationError(
                        f"subject {s.subject_id!r}, {kind} time {j}: unobserved entry must be NaN")


# ---------------------------------------------------------------------------
# CSV parsing / writing
# ---------------------------------------------------------------------------

def _open_source(source):
    if hasattr(source, "read"):
        return source, False
    return open(source, "r", newline=""), True


def parse_trial_csv(source, J: int | None = None, schema: TrialSchema | None = None,
                    delta: Sequence[float] | None = None,
                    bounds: tuple[float, float] = EQ5D_BOUNDS) -> TrialDataset:
    """Parse a wide-format trial CSV into a validated TrialDataset.

    Lines starting with '#' are treated as metadata comments and skipped.
    Missing responses use a sentinel string (default "NA" or empty). When J is
    None it is inferred from the contiguous u0..uJ / c0..cJ columns present.
    """
    schema = schema or TrialSchema()
    fh, should_close = _open_source(source)
    try:
        lines = [ln for ln in fh if not ln.lstrip().startswith("#")]
    finally:
        if should_close:
            fh.close()
    reader = csv.DictReader(io.StringIO("".join(lines)))
    if reader.fieldnames is None:
        raise SchemaError("empty CSV: no header row found")
    cols = [c.strip() for c in reader.fieldnames]
    for required in (schema.id_col, schema.arm_col):
        if required not in cols:
            raise SchemaError(f"missing required column {required!r}")
    if J is None:
        J = -1
        while (schema.utility_col(J + 1) in cols) and (schema.cost_col(J + 1) in cols):
            J += 1
        if J < 1:
            raise SchemaError(
                "could not infer J: need contiguous utility/cost columns "
                f"{schema.utility_col(0)}..{schema.utility_col(1)} and "
                f"{schema.cost_col(0)}..{schema.cost_col(1)} at minimum")
    for j in range(J + 1):
        for col in (schema.utility_col(j), schema.cost_col(j)):
            if col not in cols:
                raise SchemaError(f"missing required column {col!r}")

    sentinels = set(schema.sentinels)

    def cell(row, rownum, col):
        raw = (row.get(col) or "").strip()
        if raw in sentinels:
            return math.nan, False
        try:
            return float(raw), True
        except ValueError:
            raise ParseError(f"row {rownum}, column {col}: cannot parse {raw!r} as a number") from None

    subjects = []
    for rownum, row in enumerate(reader, start=1):
        sid = (row.get(schema.id_col) or "").strip()
        if not sid:
            raise ParseError(f"row {rownum}, column {schema.id_col}: empty subject id")
        arm_raw = (row.get(schema.arm_col) or "").strip()
        try:
            arm = int(arm_raw)
        except ValueError:
            raise ParseError(
                f"row {rownum}, column {schema.arm_col}: cannot parse {arm_raw!r} as an arm label") from None
        u = np.full(J + 1, np.nan)
        c = np.full(J + 1, np.nan)
        r_u = np.zeros(J + 1, dtype=bool)
        r_c = np.zeros(J + 1, dtype=bool)
        for j in range(J + 1):
            u[j], r_u[j] = cell(row, rownum, schema.utility_col(j))
            c[j], r_c[j] = cell(row, rownum, schema.cost_col(j))
        subjects.append(SubjectRecord(sid, arm, u, c, r_u, r_c))
    if not subjects:
        raise ValidationError("CSV contains a header but no subject rows")
    delta = tuple(delta) if delta is not None else _default_delta(J)
    return TrialDataset(tuple(subjects), J, delta, tuple(bounds))


def _default_delta(J: int) -> tuple[float, ...]:
    if J == len(DEFAULT_TIME_FRACTIONS):
        return DEFAULT_TIME_FRACTIONS
    return tuple(1.0 / J for _ in range(J))


def format_float(x: float) -> str:
    """Shortest exact decimal representation; round-trips bit-for-bit."""
    if math.isnan(x):
        return "NA"
    return repr(float(x))


def write_trial_csv(ds: TrialDataset, path, meta: Mapping[str, object] | None = None,
                    schema: TrialSchema | None = None) -> None:
    """Write a dataset back to the wide CSV layout with an optional '#' metadata line."""
    schema = schema or TrialSchema()
    with open(path, "w", newline="") as fh:
        if meta:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        writer = csv.writer(fh)
        header = [schema.id_col, schema.arm_col]
        for j in range(ds.J + 1):
            header += [schema.utility_col(j), schema.cost_col(j)]
        writer.writerow(header)
        for s in ds.subjects:
            row = [s.subject_id, s.arm]
            for j in range(ds.J + 1):
                row.append(format_float(s.u[j]) if s.r_u[j] else "NA")
                row.append(format_float(s.c[j]) if s.r_c[j] else "NA")
            writer.writerow(row)


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------

def dataset_to_json(ds: TrialDataset) -> str:
    """Serialize; floats use repr so numeric content round-trips exactly."""
    payload = {
        "J": ds.J,
        "delta": list(ds.delta),
        "bounds": list(ds.bounds),
        "subjects": [
            {
                "id": s.subject_id,
                "arm": s.arm,
                "u": [s.u[j] if s.r_u[j] else None for j in range(ds.J + 1)],
                "c": [s.c[j] if s.r_c[j] else None for j in range(ds.J + 1)],
            }
            for s in ds.subjects
        ],
    }
    return json.dumps(payload, indent=1, sort_keys=True)


def dataset_from_json(text: str) -> TrialDataset:
    payload = json.loads(text)
    J = payload["J"]
    subjects = []
    for rec in payload["subjects"]:
        u = np.array([math.nan if v is None else float(v) for v in rec["u"]])
        c = np.array([math.nan if v is None else float(v) for v in rec["c"]])
        r_u = np.array([v is not None for v in rec["u"]])
        r_c = np.array([v is not None for v in rec["c"]])
        subjects.append(SubjectRecord(rec["id"], int(rec["arm"]), u, c, r_u, r_c))
    return TrialDataset(tuple(subjects), J, tuple(payload["delta"]), tuple(payload["bounds"]))


# ---------------------------------------------------------------------------
# missingness patterns
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatternRow:
    signature: tuple[int, ...]
    count: int
    mean_u: tuple[float | None, ...]
    mean_c: tuple[float | None, ...]
    is_completer: bool


@dataclass(frozen=True)
class PatternTable:
    """Observed missingness patterns of one arm, completer pattern first."""

    arm: int
    J: int
    rows: tuple[PatternRow, ...]
    n_subjects: int

    @property
    def n_patterns(self) -> int:
        return len(self.rows)

    @property
    def completer_count(self) -> int:
        return sum(r.count for r in self.rows if r.is_completer)

    @property
    def noncompleter_count(self) -> int:
        return self.n_subjects - self.completer_count

    def counts(self) -> tuple[int, ...]:
        return tuple(r.count for r in self.rows)


def classify_patterns(ds: TrialDataset) -> dict[int, PatternTable]:
    """Group each arm's subjects by response signature.

    Rows sort in descending signature order, so the completer pattern (all
    ones) leads whenever present. Per-time means cover the components the
    pattern observes; unobserved slots are None.
    """
    tables = {}
    for arm in ds.arms():
        groups: dict[tuple[int, ...], list[SubjectRecord]] = {}
        for s in ds.arm_subjects(arm):
            groups.setdefault(s.pattern_signature(), []).append(s)
        rows = []
        for sig in sorted(groups, reverse=True):
            members = groups[sig]
            mean_u, mean_c = [], []
            for j in range(ds.J + 1):
                mean_u.append(float(np.mean([m.u[j] for m in members])) if sig[2 * j] else None)
                mean_c.append(float(np.mean([m.c[j] for m in members])) if sig[2 * j + 1] else None)
            rows.append(PatternRow(sig, len(members), tuple(mean_u), tuple(mean_c),
                                   all(b == 1 for b in sig)))
        tables[arm] = PatternTable(arm, ds.J, tuple(rows), len(ds.arm_subjects(arm)))
    return tables


# ---------------------------------------------------------------------------
# utility rescaling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RescaledDataset:
    """Dataset with utilities mapped onto [0, 1] plus the constants that did it."""

    dataset: TrialDataset
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    mode: str
    structural_top: tuple[bool, ...]

    @property
    def J(self) -> int:
        return self.dataset.J

    def to_original(self, ustar, j: int):
        """Invert the rescaling for time j (works on scalars or arrays)."""
        return ustar * (self.hi[j] - self.lo[j]) + self.lo[j]


def rescale_utilities(ds: TrialDataset, mode: str = "theoretical") -> RescaledDataset:
    """Map utilities onto [0, 1].

    "theoretical" divides by the fixed instrument bounds at every time, so the
    instrument maximum maps to exactly 1 and the point mass there survives
    rescaling. "observed-minmax" uses the per-time observed range pooled over
    arms; a per-time flag records whether the observed maximum reached the
    instrument maximum (if not, no response maps to the structural value 1
    and a warning is issued).
    """
    if mode not in ("theoretical", "observed-minmax"):
        raise ValidationError(f"unknown rescale mode {mode!r}")
    J = ds.J
    lo = np.empty(J + 1)
    hi = np.empty(J + 1)
    obs_max = np.empty(J + 1)
    for j in range(J + 1):
        vals = [s.u[j] for s in ds.subjects if s.r_u[j]]
        if not vals:
            raise ValidationError(f"no observed utilities at time {j}; cannot rescale")
        obs_max[j] = max(vals)
        if mode == "theoretical":
            lo[j], hi[j] = ds.bounds
        else:
            lo[j], hi[j] = min(vals), max(vals)
            if lo[j] == hi[j]:
                raise ValidationError(
                    f"degenerate utility range at time {j}: all observed values equal {lo[j]}")
    structural_top = tuple(bool(obs_max[j] == ds.bounds[1]) for j in range(J + 1))
    if not all(structural_top):
        bad = [j for j, ok in enumerate(structural_top) if not ok]
        warnings.warn(
            f"observed maximum below the instrument maximum at times {bad}; "
            "no response maps to the structural value 1 there", stacklevel=2)
    subjects = []
    for s in ds.subjects:
        u = s.u.copy()
        for j in range(J + 1):
            if s.r_u[j]:
                u[j] = (s.u[j] - lo[j]) / (hi[j] - lo[j])
        subjects.append(replace(s, u=u))
    scaled = TrialDataset(tuple(subjects), J, ds.delta, bounds=(0.0, 1.0))
    return RescaledDataset(scaled, tuple(lo), tuple(hi), mode, structural_top)


# ---------------------------------------------------------------------------
# completion split
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupData:
    """One arm-by-completion cell ready for fitting (utilities on [0, 1])."""

    arm: int
    label: str
    u: np.ndarray
    c: np.ndarray
    r_u: np.ndarray
    r_c: np.ndarray
    subject_ids: tuple[str, ...]

    @property
    def n(self) -> int:
        return self.u.shape[0]

    @property
    def J(self) -> int:
        return self.u.shape[1] - 1

    def fully_observed(self) -> bool:
        return bool(np.all(self.r_u) and np.all(self.r_c))


def _group_from_subjects(arm: int, label: str, subs: Sequence[SubjectRecord]) -> GroupData:
    return GroupData(
        arm, label,
        np.stack([s.u for s in subs]),
        np.stack([s.c for s in subs]),
        np.stack([s.r_u for s in subs]),
        np.stack([s.r_c for s in subs]),
        tuple(s.subject_id for s in subs),
    )


def split_by_completion(rds: RescaledDataset) -> dict[int, dict[str, GroupData | None]]:
    """Per arm, split into completers and non-completers.

    Returns {arm: {"completers": GroupData | None, "noncompleters": GroupData | None}};
    a cell is None when empty.
    """
    out: dict[int, dict[str, GroupData | None]] = {}
    ds = rds.dataset
    for arm in ds.arms():
        comp = [s for s in ds.arm_subjects(arm) if s.is_completer()]
        nonc = [s for s in ds.arm_subjects(arm) if not s.is_completer()]
        out[arm] = {
            "completers": _group_from_subjects(arm, "completers", comp) if comp else None,
            "noncompleters": _group_from_subjects(arm, "noncompleters", nonc) if nonc else None,
        }
    return out
