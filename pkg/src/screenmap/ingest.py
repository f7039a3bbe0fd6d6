"""Unit and facility tables: schema, CSV parsing/validation, eligibility, response."""

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geo import COUNT_FEATURE, NEAREST_FEATURE, GeoPoint

REQUIRED_COLUMNS = ("id", "lat", "lon", "rate_y1", "rate_y2")
RATE_COLUMNS = ("rate_y1", "rate_y2")
NUMERIC = "numeric"
BINARY = "binary"


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str = NUMERIC
    description: str = ""

    def __post_init__(self):
        if self.kind not in (NUMERIC, BINARY):
            raise ValueError(f"feature {self.name!r}: kind must be 'numeric' or 'binary', got {self.kind!r}")
        if not self.name or self.name in REQUIRED_COLUMNS:
            raise ValueError(f"invalid feature name {self.name!r}")

    @property
    def is_binary(self):
        return self.kind == BINARY


INPUT_SCHEMA = (
    FeatureSpec("urban", BINARY, "Urban (1) or rural (0) location"),
    FeatureSpec("population_density", NUMERIC, "People per square mile"),
    FeatureSpec("women_55_plus_pct", NUMERIC, "Percent of the female population aged 55 or above"),
    FeatureSpec("poverty_pct", NUMERIC, "Percent of people living in poverty"),
    FeatureSpec("uninsured_pct", NUMERIC, "Percent of the population without health insurance"),
    FeatureSpec("higher_education_pct", NUMERIC, "Percent of adults 25+ with a bachelor's degree or higher"),
    FeatureSpec("black_pct", NUMERIC, "Percent of the population that is Black or African American"),
    FeatureSpec("hispanic_pct", NUMERIC, "Percent of the population that is Hispanic or Latino"),
    FeatureSpec("home_value", NUMERIC, "Median value of owner-occupied housing, dollars"),
    FeatureSpec("social_vulnerability", NUMERIC, "Social vulnerability index"),
    FeatureSpec("primary_care_shortage", BINARY, "Primary care shortage area (1) or not (0)"),
)

ACCESSIBILITY_SCHEMA = (
    FeatureSpec(NEAREST_FEATURE, NUMERIC, "Miles from the unit centroid to the nearest facility"),
    FeatureSpec(COUNT_FEATURE, NUMERIC, "Facilities within the 10-mile catchment"),
)

DEFAULT_SCHEMA = INPUT_SCHEMA + ACCESSIBILITY_SCHEMA


def check_schema(schema):
    schema = tuple(schema)
    names = [f.name for f in schema]
    if len(set(names)) != len(names):
        raise ValueError("feature names must be unique within a schema")
    return schema


def schema_from_config(entries):
    """Build a schema from ``[{"name": ..., "kind": ...}, ...]``."""
    return check_schema(FeatureSpec(e["name"], e.get("kind", NUMERIC), e.get("description", "")) for e in entries)


def schema_to_config(schema):
    return [{"name": f.name, "kind": f.kind, "description": f.description} for f in schema]


@dataclass(frozen=True)
class UnitRecord:
    id: str
    centroid: GeoPoint
    rate_y1: float  # NaN when missing
    rate_y2: float
    features: tuple


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Columnar table of analysis units. Missing values are NaN in memory."""

    schema: tuple
    ids: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    rate_y1: np.ndarray
    rate_y2: np.ndarray
    X: np.ndarray
    response: np.ndarray = None
    geometry: dict = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.ids)
        object.__setattr__(self, "schema", check_schema(self.schema))
        object.__setattr__(self, "ids", _frozen(self.ids, dtype=object))
        for name in ("lat", "lon", "rate_y1", "rate_y2"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        X = np.array(self.X, dtype=float).reshape(n, len(self.schema))
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        if any(len(getattr(self, c)) != n for c in ("lat", "lon", "rate_y1", "rate_y2")):
            raise ValueError("column lengths differ")
        if len(set(self.ids.tolist())) != n:
            raise ValueError("unit ids must be unique")
        if self.response is not None:
            r = _frozen(self.response)
            if r.shape != (n,) or not np.all(np.isfinite(r)):
                raise ValueError("response must hold one finite value per unit")
            object.__setattr__(self, "response", r)

    def __len__(self):
        return len(self.ids)

    @property
    def feature_names(self):
        return [f.name for f in self.schema]

    @property
    def binary_mask(self):
        return np.array([f.is_binary for f in self.schema], dtype=bool)

    @property
    def coords(self):
        return np.column_stack((self.lat, self.lon))

    @property
    def units(self):
        return [self.unit(i) for i in range(len(self))]

    def unit(self, i):
        return UnitRecord(
            str(self.ids[i]),
            GeoPoint(self.lat[i], self.lon[i]),
            float(self.rate_y1[i]),
            float(self.rate_y2[i]),
            tuple(float(v) for v in self.X[i]),
        )

    def column(self, name):
        if name in RATE_COLUMNS or name in ("lat", "lon"):
            return getattr(self, name)
        if name == "response":
            if self.response is None:
                raise ValueError("response has not been built")
            return self.response
        return self.X[:, self.feature_names.index(name)]

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            ids=self.ids[idx],
            lat=self.lat[idx],
            lon=self.lon[idx],
            rate_y1=self.rate_y1[idx],
            rate_y2=self.rate_y2[idx],
            X=self.X[idx],
            response=None if self.response is None else self.response[idx],
        )

    def with_features(self, specs, columns):
        """Append feature columns (numeric arrays aligned with the units)."""
        specs = tuple(specs)
        cols = np.column_stack([np.asarray(c, dtype=float) for c in columns]) if specs else np.empty((len(self), 0))
        return replace(self, schema=self.schema + specs, X=np.hstack((self.X, cols)))

    def with_X(self, X):
        return replace(self, X=X)


@dataclass
class ValidationReport:
    n_rows: int = 0
    missing_counts: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    fatal: list = field(default_factory=list)
    eligible: int = 0
    ineligible: int = 0

    @property
    def ok(self):
        return not self.errors and not self.fatal

    def add_error(self, row, unit_id, column, message):
        self.errors.append({"row": row, "id": unit_id, "column": column, "message": message})

    def to_dict(self):
        return {
            "n_rows": self.n_rows,
            "eligible": self.eligible,
            "ineligible": self.ineligible,
            "missing_counts": self.missing_counts,
            "errors": self.errors,
            "warnings": self.warnings,
            "fatal": self.fatal,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class SchemaError(ValueError):
    """Input table is missing required columns; nothing can be parsed."""


def _reader(stream):
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    rows = (line for line in stream if not line.startswith("#"))
    return csv.reader(rows)


def _parse_float(cell):
    v = float(cell)
    if not math.isfinite(v):
        raise ValueError("non-finite number")
    return v


def parse_units(stream, schema=DEFAULT_SCHEMA):
    """Parse ``units.csv`` into a :class:`Dataset` and a :class:`ValidationReport`.

    Empty cells are missing. Rows with bad coordinates, out-of-range rates,
    non-binary values or unparseable numbers are reported and left out of the
    dataset. Raises :class:`SchemaError` if a required column is absent.
    """
    schema = check_schema(schema)
    report = ValidationReport()
    reader = _reader(stream)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("empty input: no header row") from None
    names = [f.name for f in schema]
    absent = [c for c in REQUIRED_COLUMNS + tuple(names) if c not in header]
    if absent:
        report.fatal.append(f"missing required columns: {', '.join(absent)}")
        raise SchemaError(report.fatal[-1])
    extra = [h for h in header if h not in REQUIRED_COLUMNS and h not in names]
    if extra:
        report.warnings.append(f"ignored columns: {', '.join(extra)}")
    pos = {h: i for i, h in enumerate(header)}

    ids, lat, lon, r1, r2, X = [], [], [], [], [], []
    seen = set()
    missing = dict.fromkeys(list(RATE_COLUMNS) + names, 0)
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        report.n_rows += 1
        if len(row) != len(header):
            report.add_error(rowno, row[0] if row else "", None, f"expected {len(header)} cells, found {len(row)}")
            continue
        cell = {h: row[i].strip() for h, i in pos.items()}
        uid = cell["id"]
        bad = False
        if not uid:
            report.add_error(rowno, uid, "id", "empty id")
            bad = True
        elif uid in seen:
            report.add_error(rowno, uid, "id", "duplicate id")
            bad = True
        try:
            p = GeoPoint(_parse_float(cell["lat"]), _parse_float(cell["lon"]))
        except ValueError:
            report.add_error(rowno, uid, "lat/lon", "bad coordinate")
            bad = True
        rates = []
        for c in RATE_COLUMNS:
            if cell[c] == "":
                rates.append(math.nan)
                continue
            try:
                v = _parse_float(cell[c])
            except ValueError:
                report.add_error(rowno, uid, c, f"unparseable number {cell[c]!r}")
                bad = True
                continue
            if not 0.0 <= v <= 100.0:
                report.add_error(rowno, uid, c, f"out-of-range rate {cell[c]}")
                bad = True
            rates.append(v)
        values = []
        for f in schema:
            raw = cell[f.name]
            if raw == "":
                values.append(math.nan)
                continue
            try:
                v = _parse_float(raw)
            except ValueError:
                report.add_error(rowno, uid, f.name, f"unparseable number {raw!r}")
                bad = True
                continue
            if f.is_binary and v not in (0.0, 1.0):
                report.add_error(rowno, uid, f.name, f"non-binary value {raw!r}")
                bad = True
            values.append(v)
        if bad:
            continue
        seen.add(uid)
        for c, v in zip(RATE_COLUMNS, rates):
            missing[c] += math.isnan(v)
        for f, v in zip(schema, values):
            missing[f.name] += math.isnan(v)
        ids.append(uid)
        lat.append(p.lat)
        lon.append(p.lon)
        r1.append(rates[0])
        r2.append(rates[1])
        X.append(values)

    ds = Dataset(schema, ids, lat, lon, r1, r2, np.array(X, dtype=float).reshape(len(ids), len(schema)))
    report.missing_counts = missing
    elig = eligible_mask(ds)
    report.eligible = int(elig.sum())
    report.ineligible = int(len(ds) - elig.sum())
    return ds, report


def _fmt(v):
    return "" if math.isnan(v) else repr(float(v))


def serialize_units(dataset, stream=None, comment=None):
    """Write a dataset as ``units.csv``; floats use shortest round-trip repr."""
    out = stream if stream is not None else io.StringIO()
    if comment:
        out.write(f"# {comment}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(list(REQUIRED_COLUMNS) + dataset.feature_names)
    for i in range(len(dataset)):
        w.writerow(
            [dataset.ids[i], _fmt(dataset.lat[i]), _fmt(dataset.lon[i]), _fmt(dataset.rate_y1[i]), _fmt(dataset.rate_y2[i])]
            + [_fmt(v) for v in dataset.X[i]]
        )
    return out.getvalue() if stream is None else None


@dataclass(frozen=True, eq=False)
class FacilitySet:
    ids: np.ndarray
    lat: np.ndarray
    lon: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ids", _frozen(self.ids, dtype=object))
        object.__setattr__(self, "lat", _frozen(self.lat))
        object.__setattr__(self, "lon", _frozen(self.lon))
        if len(set(self.ids.tolist())) != len(self.ids):
            raise ValueError("facility ids must be unique")
        for la, lo in zip(self.lat, self.lon):
            GeoPoint(la, lo)

    def __len__(self):
        return len(self.ids)

    @property
    def coords(self):
        return np.column_stack((self.lat, self.lon))


def parse_facilities(stream):
    """Parse ``facilities.csv`` (``id,lat,lon``). Returns (FacilitySet, ValidationReport)."""
    report = ValidationReport()
    reader = _reader(stream)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("empty input: no header row") from None
    absent = [c for c in ("id", "lat", "lon") if c not in header]
    if absent:
        report.fatal.append(f"missing required columns: {', '.join(absent)}")
        raise SchemaError(report.fatal[-1])
    pos = {h: i for i, h in enumerate(header)}
    ids, lat, lon, seen = [], [], [], set()
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        report.n_rows += 1
        if len(row) != len(header):
            report.add_error(rowno, row[0], None, f"expected {len(header)} cells, found {len(row)}")
            continue
        uid = row[pos["id"]].strip()
        if not uid or uid in seen:
            report.add_error(rowno, uid, "id", "empty id" if not uid else "duplicate id")
            continue
        try:
            p = GeoPoint(_parse_float(row[pos["lat"]]), _parse_float(row[pos["lon"]]))
        except ValueError:
            report.add_error(rowno, uid, "lat/lon", "bad coordinate")
            continue
        seen.add(uid)
        ids.append(uid)
        lat.append(p.lat)
        lon.append(p.lon)
    return FacilitySet(ids, lat, lon), report


def serialize_facilities(facilities, stream=None):
    out = stream if stream is not None else io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["id", "lat", "lon"])
    for i in range(len(facilities)):
        w.writerow([facilities.ids[i], _fmt(facilities.lat[i]), _fmt(facilities.lon[i])])
    return out.getvalue() if stream is None else None


def eligible_mask(dataset):
    return np.isfinite(dataset.rate_y1) & np.isfinite(dataset.rate_y2)


def filter_eligible(dataset):
    """Keep the units that have both yearly rates, in their original order."""
    return dataset.take(np.flatnonzero(eligible_mask(dataset)))


def build_response(dataset):
    """Set ``response`` to the mean of the two yearly rates."""
    bad = ~eligible_mask(dataset)
    if bad.any():
        uid = dataset.ids[np.flatnonzero(bad)[0]]
        raise ValueError(f"unit {uid!r} lacks a yearly rate; apply filter_eligible first")
    return replace(dataset, response=(dataset.rate_y1 + dataset.rate_y2) / 2.0)


def summary_stats(dataset, missing_counts=None):
    """Per-variable summary in the shape of a descriptive-statistics table.

    Rates and numeric features get mean, SD (n - 1), and missing count; binary
    features get category counts and percentages. ``missing_counts`` overrides
    the counts (e.g. pre-imputation counts for an imputed dataset).
    """
    n = len(dataset)
    missing_counts = missing_counts or {}

    def numeric(name, col):
        present = col[np.isfinite(col)]
        return {
            "kind": NUMERIC,
            "n": int(len(present)),
            "missing": int(missing_counts.get(name, n - len(present))),
            "mean": float(np.mean(present)) if len(present) else None,
            "sd": float(np.std(present, ddof=1)) if len(present) > 1 else None,
            "min": float(np.min(present)) if len(present) else None,
            "max": float(np.max(present)) if len(present) else None,
        }

    variables = {}
    for c in RATE_COLUMNS:
        variables[c] = numeric(c, getattr(dataset, c))
    if dataset.response is not None:
        variables["response"] = numeric("response", dataset.response)
    for j, f in enumerate(dataset.schema):
        col = dataset.X[:, j]
        if f.is_binary:
            present = col[np.isfinite(col)]
            counts = {}
            for level in (0, 1):
                k = int(np.sum(present == level))
                counts[str(level)] = {"n": k, "pct": 100.0 * k / len(present) if len(present) else None}
            variables[f.name] = {
                "kind": BINARY,
                "n": int(len(present)),
                "missing": int(missing_counts.get(f.name, n - len(present))),
                "categories": counts,
            }
        else:
            variables[f.name] = numeric(f.name, col)
    return {"n_units": n, "variables": variables}
