"""Synthetic ground truth: spatially coherent control fields and event data.

The generator encodes the tactical-choice theory directly: states are
ordered from government-held (high terror rate, low conventional rate)
to rebel-held, and adjacent cells are pushed toward the same state by a
Potts coupling. The first year is a draw from the pure Potts prior
(Gibbs burn-in); each later year applies the per-cell Markov transition
and then a few within-year Potts sweeps, which is this generator's
definition of spatially correlated evolution. With beta = 0 everything
reduces to independent per-cell chains.

Counts are Poisson given states. In point-event mode each count becomes
individual events scattered uniformly inside their (fine, square) source
cell, so the same underlying incidents can be re-aggregated at any
coarser resolution or shape for the sweep experiment.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import rng
from .grid import Grid, GridShape, GridSpec, build_grid
from .hmm import HmmParams
from .hmrf import _neighbor_state_counts, _padded_neighbors, _softmax_rows
from .ingest import CountPanel, EventRecord, EventSource, aggregate

BURN_IN_SWEEPS = 500
DEFAULT_COHERENCE_SWEEPS = 20


def default_sim_params() -> HmmParams:
    """Three-regime fixture encoding the theory's monotone tactic mix.

    State 0 government-held (terror-dominant), state 1 contested, state 2
    rebel-held (conventional-war-dominant). Fixture values, not estimates.
    """
    return HmmParams(
        pi=np.full(3, 1.0 / 3.0),
        trans=np.array(
            [[0.85, 0.10, 0.05], [0.075, 0.85, 0.075], [0.05, 0.10, 0.85]]
        ),
        lambda_t=np.array([6.0, 2.0, 0.3]),
        lambda_c=np.array([0.3, 3.0, 6.0]),
    )


@dataclass(frozen=True)
class SimConfig:
    """Everything the generator needs; identical config + seed => identical output."""

    grid_spec: GridSpec
    years: int
    params: HmmParams
    beta: float = 0.0
    point_events: bool = False
    coherence_sweeps: int = DEFAULT_COHERENCE_SWEEPS
    year_start: int = 2000
    seed: int = 0

    def validate(self) -> None:
        self.grid_spec.validate()
        self.params.validate()
        if self.years < 1:
            raise ValueError("years must be >= 1")
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")
        if self.coherence_sweeps < 0:
            raise ValueError("coherence_sweeps must be >= 0")
        k = self.params.n_states
        if k >= 2:
            lam_t = self.params.lambda_t
            if (np.diff(lam_t) > 0).any() or not lam_t[0] > lam_t[-1]:
                raise ValueError(
                    "theory ordering violated: lambda_t must decrease from "
                    "state 0 (government-held) to state K-1 (rebel-held)"
                )


@dataclass(frozen=True)
class GroundTruth:
    """True states, the emitted panel, and (optionally) point events."""

    field: np.ndarray  # (n_cells, years) int
    panel: CountPanel
    events: list[EventRecord] | None = None


# ---- field generation ----


class _PottsSampler:
    """Chromatic Gibbs over a single year's field with optional chain term."""

    def __init__(self, grid: Grid, k: int, beta: float):
        self.k = k
        self.beta = beta
        self.nbr, self.mask = _padded_neighbors(grid.graph)
        self.colors = [np.asarray(c, dtype=np.int64) for c in grid.graph.greedy_coloring()]

    def sweep(
        self, states: np.ndarray, u: np.ndarray, log_row: np.ndarray | None
    ) -> None:
        """One in-place sweep; log_row (n_cells, K) adds a per-cell base term."""
        for cells in self.colors:
            counts = _neighbor_state_counts(states, self.nbr[cells], self.mask[cells], self.k)
            logits = self.beta * counts.astype(float)
            if log_row is not None:
                logits = logits + log_row[cells]
            p = _softmax_rows(logits)
            cum = np.cumsum(p, axis=1)
            states[cells] = np.minimum((cum < u[cells, None]).sum(axis=1), self.k - 1)


def simulate_field(config: SimConfig, grid: Grid | None = None) -> np.ndarray:
    """True control states, shape (n_cells, years).

    Year 0 is a pure-Potts draw at the true beta via 500 burn-in sweeps
    (uniform iid when beta = 0). Each later year draws per-cell
    transitions from A and, when beta > 0, runs coherence_sweeps Gibbs
    sweeps targeting A[s_prev, k] * exp(beta * n_same) to restore spatial
    coherence. Deterministic given config.seed, regardless of threading.
    """
    config.validate()
    if grid is None:
        grid = build_grid(config.grid_spec)
    k = config.params.n_states
    n = grid.n_cells
    field = np.empty((n, config.years), dtype=np.int64)

    states = rng.stream(config.seed, "field", "year0-init").integers(0, k, size=n)
    if config.beta > 0.0:
        sampler = _PottsSampler(grid, k, config.beta)
        for sweep in range(BURN_IN_SWEEPS):
            u = rng.stream(config.seed, "field", "year0", sweep).random(n)
            sampler.sweep(states, u, log_row=None)
    field[:, 0] = states

    with np.errstate(divide="ignore"):
        log_a = np.log(config.params.trans)
    cum_a = np.cumsum(config.params.trans, axis=1)
    for year in range(1, config.years):
        u = rng.stream(config.seed, "field", "trans", year).random(n)
        states = np.minimum(
            (cum_a[field[:, year - 1]] < u[:, None]).sum(axis=1), k - 1
        )
        if config.beta > 0.0 and config.coherence_sweeps > 0:
            log_row = log_a[field[:, year - 1]]
            for sweep in range(config.coherence_sweeps):
                u = rng.stream(config.seed, "field", "coh", year, sweep).random(n)
                sampler.sweep(states, u, log_row=log_row)
        field[:, year] = states
    return field


def simulate_counts(
    field: np.ndarray, params: HmmParams, seed: int, year_start: int = 2000
) -> CountPanel:
    """Poisson counts given states: T ~ Pois(lambda_t[s]), C ~ Pois(lambda_c[s])."""
    params.validate()
    field = np.asarray(field, dtype=np.int64)
    if field.ndim != 2:
        raise ValueError("field must be (n_cells, years)")
    if field.min() < 0 or field.max() >= params.n_states:
        raise ValueError("field contains out-of-range states")
    t = rng.stream(seed, "counts", "t").poisson(params.lambda_t[field])
    c = rng.stream(seed, "counts", "c").poisson(params.lambda_c[field])
    n_cells, n_years = field.shape
    return CountPanel(
        n_cells=n_cells,
        year_start=year_start,
        year_end=year_start + n_years - 1,
        t=t.astype(np.int64),
        c=c.astype(np.int64),
    )


# ---- point-event mode ----


@dataclass(frozen=True)
class PointEvents:
    """Scattered events plus their aggregations: fine panel and per-spec panels."""

    events: list[EventRecord]
    fine_panel: CountPanel
    panels: list[CountPanel] = dc_field(default_factory=list)


def _require_fine_square(grid: Grid) -> None:
    spec = grid.spec
    if spec.shape is not GridShape.SQUARE:
        raise ValueError("reference grid must be SQUARE")
    width = spec.max_lon - spec.min_lon
    height = spec.max_lat - spec.min_lat
    for extent in (width, height):
        ratio = extent / spec.cell_size
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("reference cell_size must divide the box exactly")


def simulate_point_events(
    field: np.ndarray,
    params: HmmParams,
    fine_grid: Grid,
    target_specs: list[GridSpec],
    seed: int,
    year_start: int = 2000,
) -> PointEvents:
    """Counts on the fine grid become points, re-aggregated at every target.

    Each event is placed uniformly inside its fine cell (nudged off the
    upper edges so it locates back into the same half-open cell), terror
    events as GTD-like and conventional events as GED-like records. All
    target specs therefore see the same underlying incidents: totals are
    conserved exactly across resolutions and shapes.
    """
    _require_fine_square(fine_grid)
    for spec in target_specs:
        spec.validate()
        if spec.cell_size <= fine_grid.spec.cell_size:
            raise ValueError(
                f"target cell_size {spec.cell_size} not strictly coarser than "
                f"reference {fine_grid.spec.cell_size}"
            )
    fine_panel = simulate_counts(field, params, seed, year_start)
    if fine_panel.n_cells != fine_grid.n_cells:
        raise ValueError("field does not match the reference grid")
    size = fine_grid.spec.cell_size
    events: list[EventRecord] = []
    for cell in range(fine_panel.n_cells):
        ring = fine_grid.polygon(cell)
        lon0 = min(p[0] for p in ring)
        lat0 = min(p[1] for p in ring)
        lon_hi = math.nextafter(lon0 + size, -math.inf)
        lat_hi = math.nextafter(lat0 + size, -math.inf)
        for yi, year in enumerate(fine_panel.years):
            n_t = int(fine_panel.t[cell, yi])
            n_c = int(fine_panel.c[cell, yi])
            if n_t == 0 and n_c == 0:
                continue
            u = rng.stream(seed, "scatter", cell, yi).random((n_t + n_c, 2))
            lons = np.minimum(lon0 + u[:, 0] * size, lon_hi)
            lats = np.minimum(lat0 + u[:, 1] * size, lat_hi)
            for idx in range(n_t + n_c):
                source = EventSource.GTD_LIKE if idx < n_t else EventSource.GED_LIKE
                events.append(
                    EventRecord(
                        lon=float(lons[idx]),
                        lat=float(lats[idx]),
                        year=year,
                        source=source,
                    )
                )
    panels = []
    for spec in target_specs:
        panel, skip = aggregate(events, build_grid(spec), year_start, fine_panel.year_end)
        if skip.total:
            raise AssertionError(
                f"scattered events escaped target grid {spec}: {skip}"
            )
        panels.append(panel)
    return PointEvents(events=events, fine_panel=fine_panel, panels=panels)


def simulate(config: SimConfig) -> GroundTruth:
    """Field plus counts (plus scattered events in point-event mode)."""
    config.validate()
    grid = build_grid(config.grid_spec)
    field = simulate_field(config, grid)
    if config.point_events:
        scattered = simulate_point_events(
            field, config.params, grid, [], config.seed, config.year_start
        )
        return GroundTruth(field=field, panel=scattered.fine_panel, events=scattered.events)
    panel = simulate_counts(field, config.params, config.seed, config.year_start)
    return GroundTruth(field=field, panel=panel, events=None)


# ---- state field CSV round trip ----


def write_field_csv(field: np.ndarray, year_start: int, path: str | Path) -> None:
    """Rows (cell_id, year, state) sorted by cell then year; canonical bytes."""
    field = np.asarray(field, dtype=np.int64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("cell_id,year,state\n")
        for cell in range(field.shape[0]):
            for yi in range(field.shape[1]):
                fh.write(f"{cell},{year_start + yi},{field[cell, yi]}\n")


def read_field_csv(path: str | Path) -> tuple[np.ndarray, int]:
    """Inverse of write_field_csv; insists on a dense field."""
    cells, years, states = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["cell_id", "year", "state"]
        if reader.fieldnames != expected:
            raise ValueError(f"{path}: expected header {expected}, got {reader.fieldnames}")
        for row in reader:
            cells.append(int(row["cell_id"]))
            years.append(int(row["year"]))
            states.append(int(row["state"]))
    if not cells:
        raise ValueError(f"{path}: empty field")
    n_cells = max(cells) + 1
    year_start, year_end = min(years), max(years)
    field = np.full((n_cells, year_end - year_start + 1), -1, dtype=np.int64)
    for cell, year, state in zip(cells, years, states):
        if field[cell, year - year_start] != -1:
            raise ValueError(f"{path}: duplicate row for cell {cell}, year {year}")
        field[cell, year - year_start] = state
    if (field < 0).any():
        raise ValueError(f"{path}: field is not dense")
    return field, year_start
