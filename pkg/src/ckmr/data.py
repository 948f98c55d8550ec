"""Tabular exposure data: loading, validation, standardization and grouping."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


class GroupingError(DataError):
    pass


class DegenerateColumnError(DataError):
    pass


def standardize_column(v):
    """Center and scale a column to sample mean 0 and sample sd 1.

    Returns ``(standardized, mean, sd)``; the sd uses the N-1 denominator.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size < 2:
        raise DataError("standardize_column needs a 1-d vector with at least two entries")
    mean = float(v.mean())
    sd = float(v.std(ddof=1))
    if not sd > 0.0 or not math.isfinite(sd):
        raise DegenerateColumnError("column is constant (sd = 0)")
    out = (v - mean) / sd
    return out, mean, sd


def destandardize_column(v, mean, sd):
    return np.asarray(v, dtype=float) * sd + mean


@dataclass(frozen=True)
class GroupingSpec:
    """Ordered assignment of exposure components to named groups."""

    components: tuple
    groups: tuple

    def __post_init__(self):
        if len(self.components) != len(self.groups):
            raise GroupingError("components and groups must have equal length")
        seen = set()
        for c in self.components:
            if c in seen:
                raise GroupingError(f"duplicate component name {c!r}")
            seen.add(c)

    @classmethod
    def from_pairs(cls, pairs):
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @classmethod
    def singletons(cls, names):
        return cls(tuple(names), tuple(names))

    @property
    def group_order(self):
        order = []
        for g in self.groups:
            if g not in order:
                order.append(g)
        return order

    def members(self, group):
        return [c for c, g in zip(self.components, self.groups) if g == group]


def load_grouping(path) -> GroupingSpec:
    """Read a two-column ``component,group`` CSV."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["component", "group"]:
            raise GroupingError(f"{path}: header must be 'component,group'")
        pairs = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2 or not row[0].strip() or not row[1].strip():
                raise GroupingError(f"{path}: line {lineno} needs a component and a group")
            pairs.append((row[0].strip(), row[1].strip()))
    if not pairs:
        raise GroupingError(f"{path}: no components listed")
    return GroupingSpec.from_pairs(pairs)


@dataclass
class ExposureDataset:
    """Outcome, grouped standardized exposures and confounders.

    ``Z`` always carries an intercept in its first column. ``scaling`` maps
    column names to the ``(mean, sd)`` used for standardization.
    """

    y: np.ndarray
    groups: list
    Z: np.ndarray
    group_names: list
    component_names: list
    confounder_names: list = field(default_factory=list)
    scaling: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.groups = [np.atleast_2d(np.asarray(g, dtype=float)) for g in self.groups]
        self.Z = np.asarray(self.Z, dtype=float)
        n = self.y.shape[0]
        if self.Z.ndim != 2 or self.Z.shape[0] != n:
            raise DataError("Z must be an N x q matrix")
        for m, g in enumerate(self.groups):
            if g.shape[0] != n:
                raise DataError(f"group {m} has {g.shape[0]} rows, expected {n}")
            if g.shape[1] < 1:
                raise GroupingError(f"group {m} is empty")
        if len(self.group_names) != len(self.groups):
            raise DataError("group_names must have one entry per group")
        if len(self.component_names) != len(self.groups):
            raise DataError("component_names must have one list per group")
        if n < max(self.p, self.q) + 1:
            warnings.warn(f"N={n} is small relative to p={self.p}, q={self.q}", stacklevel=2)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def M(self):
        return len(self.groups)

    @property
    def sizes(self):
        return [g.shape[1] for g in self.groups]

    @property
    def p(self):
        return sum(self.sizes)

    @property
    def q(self):
        return self.Z.shape[1]

    @property
    def X(self):
        """All exposures concatenated in group order (N x p)."""
        return np.hstack(self.groups)

    @property
    def group_slices(self):
        out, start = [], 0
        for L in self.sizes:
            out.append(slice(start, start + L))
            start += L
        return out


def _parse_cell(text, row, col, path):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{path}: row {row}, column {col!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"{path}: row {row}, column {col!r}: non-finite value {text!r}")
    return value


def read_numeric_columns(path, columns):
    """Read the named columns of a CSV into a dict of float arrays.

    Rows are numbered from 1 for the first data line (header excluded).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file, header row required")
        header = [h.strip() for h in header]
        index = {}
        for col in columns:
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
            index[col] = header.index(col)
        values = {col: [] for col in columns}
        for rowno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            for col, j in index.items():
                cell = row[j].strip() if j < len(row) else ""
                values[col].append(_parse_cell(cell, rowno, col, path))
    return {col: np.asarray(v, dtype=float) for col, v in values.items()}


def load_dataset(data_path, grouping: GroupingSpec, outcome_col, confounder_cols=()) -> ExposureDataset:
    """Load a CSV into an :class:`ExposureDataset`.

    Exposures and non-intercept confounders are standardized; the outcome is
    left on its original scale. An intercept column is prepended to ``Z``.
    """
    confounder_cols = list(confounder_cols)
    columns = [outcome_col, *grouping.components, *confounder_cols]
    raw = read_numeric_columns(data_path, list(dict.fromkeys(columns)))
    n = raw[outcome_col].shape[0]
    if n < 2:
        raise DataError(f"{data_path}: need at least two data rows")

    scaling = {}

    def _std(name):
        try:
            out, mean, sd = standardize_column(raw[name])
        except DegenerateColumnError:
            raise DegenerateColumnError(f"{data_path}: column {name!r} is constant") from None
        scaling[name] = (mean, sd)
        return out

    groups, group_names, component_names = [], [], []
    for g in grouping.group_order:
        members = grouping.members(g)
        if not members:
            raise GroupingError(f"group {g!r} has no components")
        groups.append(np.column_stack([_std(c) for c in members]))
        group_names.append(g)
        component_names.append(members)

    zcols = [np.ones(n)] + [_std(c) for c in confounder_cols]
    return ExposureDataset(
        y=raw[outcome_col].copy(),
        groups=groups,
        Z=np.column_stack(zcols),
        group_names=group_names,
        component_names=component_names,
        confounder_names=["(Intercept)", *confounder_cols],
        scaling=scaling,
    )
