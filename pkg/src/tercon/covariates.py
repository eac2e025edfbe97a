"""Per-cell transition perturbation from bounded covariates.

A covariate in [0, 1] (say forest cover) dampens one configured
transition A[i][j] by delta * f(x) and returns that mass to the diagonal
A[i][i], so switching out of a regime gets harder where the covariate is
high while rows stay stochastic. Perturbation applies at decode and
sample time only; the fitted transition matrix stays shared.
"""

from __future__ import annotations

import csv
import enum
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EPSILON = 1e-9


class LinkShape(enum.Enum):
    LINEAR = "linear"
    LOGISTIC = "logistic"


_LOGISTIC_MIDPOINT = 0.5
_LOGISTIC_STEEPNESS = 10.0


def link_value(shape: LinkShape, x: float) -> float:
    """Monotone increasing f with f(0) = 0 and f(1) = 1.

    LINEAR is the identity; LOGISTIC is a sigmoid with midpoint 0.5 and
    steepness 10, rescaled to pin the endpoints exactly.
    """
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"covariate value {x} outside [0, 1]")
    if shape is LinkShape.LINEAR:
        return x
    def g(v: float) -> float:
        return 1.0 / (1.0 + math.exp(-_LOGISTIC_STEEPNESS * (v - _LOGISTIC_MIDPOINT)))
    return (g(x) - g(0.0)) / (g(1.0) - g(0.0))


@dataclass(frozen=True)
class PerturbationSpec:
    """Which transition a covariate dampens, how strongly, and its shape."""

    covariate: str
    source: int
    target: int
    delta: float
    shape: LinkShape = LinkShape.LINEAR

    def validate(self, n_states: int | None = None) -> None:
        if self.source == self.target:
            raise ValueError("source and target state must differ")
        if self.source < 0 or self.target < 0:
            raise ValueError("state indices must be nonnegative")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError(f"delta must be in [0, 1), got {self.delta}")
        if n_states is not None and (self.source >= n_states or self.target >= n_states):
            raise ValueError(f"state index out of range for {n_states} states")


@dataclass(frozen=True)
class CovariateTable:
    """Named covariate vectors over cells, each value in [0, 1].

    Values are clamped into [0, 1] on construction.
    """

    n_cells: int
    values: dict[str, np.ndarray]

    def __post_init__(self):
        clamped = {}
        for name, x in self.values.items():
            x = np.asarray(x, dtype=float)
            if x.shape != (self.n_cells,):
                raise ValueError(f"covariate {name!r} must have one value per cell")
            if not np.isfinite(x).all():
                raise ValueError(f"covariate {name!r} has non-finite values")
            clamped[name] = np.clip(x, 0.0, 1.0)
        object.__setattr__(self, "values", clamped)

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in self.values:
            raise KeyError(f"unknown covariate {name!r}")
        return self.values[name]


def perturb_transition(A: np.ndarray, spec: PerturbationSpec, x: float) -> np.ndarray:
    """One dampened transition matrix: A[i][j] loses delta*f(x) to A[i][i].

    The dampened entry is floored at 1e-9 (with a warning) rather than
    going nonpositive; whatever was actually subtracted moves to the
    diagonal, so the row sum is preserved exactly. x = 0 returns A
    unchanged.
    """
    A = np.asarray(A, dtype=float)
    spec.validate(n_states=A.shape[0])
    amount = spec.delta * link_value(spec.shape, x)
    out = A.copy()
    if amount == 0.0:
        return out
    i, j = spec.source, spec.target
    dampened = A[i, j] - amount
    if dampened < EPSILON:
        warnings.warn(
            f"transition ({i}->{j}) floored at {EPSILON} "
            f"(wanted to subtract {amount:.6g} from {A[i, j]:.6g})",
            RuntimeWarning,
            stacklevel=2,
        )
        dampened = EPSILON
    out[i, j] = dampened
    out[i, i] += A[i, j] - dampened
    return out


def build_cell_transitions(
    A: np.ndarray, table: CovariateTable, specs: list[PerturbationSpec]
) -> np.ndarray:
    """Per-cell transition matrices, specs applied in declared order.

    Specs on disjoint entries commute; specs on the same entry compose in
    order (each sees the previous result). Unknown covariate names raise.
    """
    A = np.asarray(A, dtype=float)
    k = A.shape[0]
    for spec in specs:
        spec.validate(n_states=k)
        if spec.covariate not in table.values:
            raise ValueError(f"unknown covariate {spec.covariate!r}")
    out = np.empty((table.n_cells, k, k))
    for cell in range(table.n_cells):
        m = A
        for spec in specs:
            m = perturb_transition(m, spec, float(table[spec.covariate][cell]))
        out[cell] = m
    return out


def read_covariates(path: str | Path, n_cells: int) -> CovariateTable:
    """Read a (cell_id, name, value) CSV into a CovariateTable.

    Cells absent for a named covariate default to 0 with a warning;
    duplicate (cell_id, name) rows and out-of-range cell ids are errors.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["cell_id", "name", "value"]
        if reader.fieldnames is None or list(reader.fieldnames) != expected:
            raise ValueError(f"{path}: expected header {','.join(expected)}")
        seen: dict[str, np.ndarray] = {}
        filled: dict[str, np.ndarray] = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                cell = int(row["cell_id"])
                name = row["name"].strip()
                value = float(row["value"])
            except (TypeError, ValueError, AttributeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad row ({exc})") from exc
            if not name:
                raise ValueError(f"{path}:{lineno}: empty covariate name")
            if not 0 <= cell < n_cells:
                raise ValueError(f"{path}:{lineno}: cell_id {cell} out of range")
            if name not in seen:
                seen[name] = np.zeros(n_cells)
                filled[name] = np.zeros(n_cells, dtype=bool)
            if filled[name][cell]:
                raise ValueError(f"{path}:{lineno}: duplicate value for cell {cell}, {name!r}")
            seen[name][cell] = value
            filled[name][cell] = True
    for name, got in filled.items():
        missing = int((~got).sum())
        if missing:
            warnings.warn(
                f"covariate {name!r}: {missing} cell(s) missing, defaulted to 0",
                RuntimeWarning,
                stacklevel=2,
            )
    return CovariateTable(n_cells=n_cells, values=seen)


def write_covariates(table: CovariateTable, path: str | Path) -> None:
    """Inverse of read_covariates (dense rows, names then cells in order)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cell_id", "name", "value"])
        for name in sorted(table.values):
            x = table.values[name]
            for cell in range(table.n_cells):
                writer.writerow([cell, name, repr(float(x[cell]))])
