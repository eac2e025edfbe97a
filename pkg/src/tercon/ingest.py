"""Event CSV parsing, inclusion filters, and per-(cell, year) aggregation.

The reader is source-agnostic: a column mapping adapts any CSV carrying
point events to the internal record layout, and a filter policy reproduces
the standard inclusion rules (location precision at admin-2 or better,
state-based conventional events only, no terror attacks on military
targets) while staying fully configurable.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class EventSource(enum.Enum):
    GED_LIKE = "ged"
    GTD_LIKE = "gtd"


@dataclass(frozen=True)
class EventRecord:
    """One point-located, dated, categorized conflict event."""

    lon: float
    lat: float
    year: int
    source: EventSource
    category: str = ""
    target_type: str = ""
    geo_precision: int = 1


@dataclass(frozen=True)
class FilterPolicy:
    """Inclusion rules applied before aggregation.

    Defaults: precision codes {1, 2, 3} (admin-2 or better) pass; GED-like
    events coded violence-against-civilians or non-state are dropped;
    GTD-like events against military targets are dropped.
    """

    max_precision: int = 3
    ged_excluded_categories: frozenset[str] = frozenset(
        {"violence-against-civilians", "non-state"}
    )
    gtd_excluded_target_types: frozenset[str] = frozenset({"military"})


def _norm(text: str) -> str:
    return text.strip().lower().replace(" ", "-").replace("_", "-")


@dataclass
class ParseReport:
    """Row-level outcome of a parse; malformed rows are listed, not dropped silently."""

    n_rows: int = 0
    n_parsed: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)  # (data row 1-based, msg)


class SchemaError(ValueError):
    """A column required by the schema mapping is missing from the CSV header."""


#: Internal field -> default CSV column name.
DEFAULT_SCHEMA = {
    "lon": "lon",
    "lat": "lat",
    "year": "year",
    "source": "source",
    "category": "category",
    "target_type": "target_type",
    "geo_precision": "geo_precision",
}

_REQUIRED_FIELDS = ("lon", "lat", "year", "source")


def _parse_source(raw: str) -> EventSource:
    t = _norm(raw)
    if t.startswith("ged"):
        return EventSource.GED_LIKE
    if t.startswith("gtd"):
        return EventSource.GTD_LIKE
    raise ValueError(f"unrecognized source {raw!r} (expected ged*/gtd*)")


def parse_events(
    path: str | Path, schema: dict[str, str] | None = None
) -> tuple[list[EventRecord], ParseReport]:
    """Read events from a headered CSV using a field->column mapping.

    Explicitly mapped columns must exist in the header (SchemaError
    otherwise). Without a schema the default column names apply, and the
    optional fields category/target_type/geo_precision fall back to ""/""/1
    when their columns are absent. Rows that fail to parse are recorded in
    the report with their 1-based data-row number.
    """
    default_used = schema is None
    schema = dict(schema) if schema is not None else dict(DEFAULT_SCHEMA)
    for f in _REQUIRED_FIELDS:
        if f not in schema:
            raise SchemaError(f"schema mapping lacks required field {f!r}")
    events: list[EventRecord] = []
    report = ParseReport()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, no CSV header")
        header = set(reader.fieldnames)
        if default_used:
            schema = {
                f: col
                for f, col in schema.items()
                if f in _REQUIRED_FIELDS or col in header
            }
        missing = [col for col in schema.values() if col not in header]
        if missing:
            raise SchemaError(f"{path}: missing required column(s) {missing}")
        for rownum, row in enumerate(reader, start=1):
            report.n_rows += 1
            try:
                events.append(_parse_row(row, schema))
                report.n_parsed += 1
            except (ValueError, TypeError) as exc:
                report.errors.append((rownum, str(exc)))
    return events, report


def _parse_row(row: dict[str, str], schema: dict[str, str]) -> EventRecord:
    def get(fieldname: str, default: str | None = None) -> str:
        col = schema.get(fieldname)
        if col is None:
            if default is None:
                raise ValueError(f"missing field {fieldname}")
            return default
        value = row[col]
        if value is None or value == "":
            if default is None:
                raise ValueError(f"empty value for {fieldname!r}")
            return default
        return value

    lon = float(get("lon"))
    lat = float(get("lat"))
    if not (math.isfinite(lon) and math.isfinite(lat)):
        raise ValueError(f"non-finite coordinates ({lon}, {lat})")
    year = int(get("year"))
    source = _parse_source(get("source"))
    precision_raw = get("geo_precision", "1")
    return EventRecord(
        lon=lon,
        lat=lat,
        year=year,
        source=source,
        category=get("category", ""),
        target_type=get("target_type", ""),
        geo_precision=int(precision_raw),
    )


def filter_events(events: list[EventRecord], policy: FilterPolicy) -> list[EventRecord]:
    """Keep events satisfying every policy predicate; order preserved."""
    ged_excl = {_norm(c) for c in policy.ged_excluded_categories}
    gtd_excl = {_norm(t) for t in policy.gtd_excluded_target_types}
    out = []
    for ev in events:
        if ev.geo_precision > policy.max_precision:
            continue
        if ev.source is EventSource.GED_LIKE and _norm(ev.category) in ged_excl:
            continue
        if ev.source is EventSource.GTD_LIKE and _norm(ev.target_type) in gtd_excl:
            continue
        out.append(ev)
    return out


@dataclass
class CountPanel:
    """Dense per-(cell, year) counts of terror (T) and conventional (C) events."""

    n_cells: int
    year_start: int
    year_end: int  # inclusive
    t: np.ndarray  # (n_cells, n_years) nonnegative ints
    c: np.ndarray

    @property
    def n_years(self) -> int:
        return self.year_end - self.year_start + 1

    @property
    def years(self) -> list[int]:
        return list(range(self.year_start, self.year_end + 1))

    def validate(self) -> None:
        shape = (self.n_cells, self.n_years)
        if self.t.shape != shape or self.c.shape != shape:
            raise ValueError(f"panel arrays must have shape {shape}")
        if (self.t < 0).any() or (self.c < 0).any():
            raise ValueError("panel counts must be nonnegative")

    @classmethod
    def zeros(cls, n_cells: int, year_start: int, year_end: int) -> "CountPanel":
        n_years = year_end - year_start + 1
        return cls(
            n_cells,
            year_start,
            year_end,
            np.zeros((n_cells, n_years), dtype=np.int64),
            np.zeros((n_cells, n_years), dtype=np.int64),
        )


@dataclass
class SkipReport:
    """Events excluded from a panel because they fell outside grid or years."""

    out_of_grid_t: int = 0
    out_of_grid_c: int = 0
    out_of_years_t: int = 0
    out_of_years_c: int = 0

    @property
    def total(self) -> int:
        return (
            self.out_of_grid_t
            + self.out_of_grid_c
            + self.out_of_years_t
            + self.out_of_years_c
        )


def aggregate(
    events: list[EventRecord], grid, year_start: int, year_end: int
) -> tuple[CountPanel, SkipReport]:
    """Count events per (cell, year): GTD-like into T, GED-like into C.

    Events outside the grid domain or the year window are tallied in the
    skip report, so panel totals plus skips always equal the input count.
    """
    if year_end < year_start:
        raise ValueError("year_end must be >= year_start")
    panel = CountPanel.zeros(grid.n_cells, year_start, year_end)
    skip = SkipReport()
    for ev in events:
        is_t = ev.source is EventSource.GTD_LIKE
        if not (year_start <= ev.year <= year_end):
            if is_t:
                skip.out_of_years_t += 1
            else:
                skip.out_of_years_c += 1
            continue
        cell = grid.locate(ev.lon, ev.lat)
        if cell is None:
            if is_t:
                skip.out_of_grid_t += 1
            else:
                skip.out_of_grid_c += 1
            continue
        (panel.t if is_t else panel.c)[cell, ev.year - year_start] += 1
    return panel, skip


# ---- panel CSV round trip ----


def write_panel_csv(panel: CountPanel, path: str | Path) -> None:
    """Canonical bytes: header then rows sorted by (cell_id, year)."""
    panel.validate()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("cell_id,year,t_count,c_count\n")
        for cell in range(panel.n_cells):
            for yi, year in enumerate(panel.years):
                fh.write(f"{cell},{year},{panel.t[cell, yi]},{panel.c[cell, yi]}\n")


def read_panel_csv(path: str | Path) -> CountPanel:
    """Inverse of write_panel_csv; insists on a dense, consistent panel."""
    cells, years, ts, cs = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["cell_id", "year", "t_count", "c_count"]
        if reader.fieldnames != expected:
            raise SchemaError(f"{path}: expected header {expected}, got {reader.fieldnames}")
        for row in reader:
            cells.append(int(row["cell_id"]))
            years.append(int(row["year"]))
            ts.append(int(row["t_count"]))
            cs.append(int(row["c_count"]))
    if not cells:
        raise ValueError(f"{path}: empty panel")
    n_cells = max(cells) + 1
    year_start, year_end = min(years), max(years)
    panel = CountPanel.zeros(n_cells, year_start, year_end)
    seen = np.zeros((n_cells, panel.n_years), dtype=bool)
    for cell, year, t, c in zip(cells, years, ts, cs):
        yi = year - year_start
        if seen[cell, yi]:
            raise ValueError(f"{path}: duplicate row for cell {cell}, year {year}")
        seen[cell, yi] = True
        panel.t[cell, yi] = t
        panel.c[cell, yi] = c
    if not seen.all():
        raise ValueError(f"{path}: panel is not dense")
    panel.validate()
    return panel


def write_events_csv(events: list[EventRecord], path: str | Path) -> None:
    """Write events with the default schema columns (re-ingestable as-is)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(DEFAULT_SCHEMA.values()))
        for ev in events:
            writer.writerow(
                [
                    repr(ev.lon),
                    repr(ev.lat),
                    ev.year,
                    ev.source.value,
                    ev.category,
                    ev.target_type,
                    ev.geo_precision,
                ]
            )
