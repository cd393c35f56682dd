"""Tabular study data: loading, missingness encoding, imputation, box restriction.

Units carry a binary treatment flag, a binary outcome, numeric covariates,
and an optional categorical key used for exact matching. Missing covariate
cells are represented by ``None`` until :func:`impute_with_indicators` runs;
``None`` never participates in arithmetic, so nothing can be computed from a
dataset that skipped imputation by accident.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_TIER_THRESHOLDS = {1: 0.05, 2: 0.10, 3: 0.15}

MISSING_SUFFIX = "_missing"


class LoadError(ValueError):
    """A CSV file or schema description could not be interpreted."""


@dataclass(frozen=True)
class Schema:
    """Column layout of a study table.

    ``tiers`` maps every covariate to an importance tier; each tier must have
    a balance threshold in ``tier_thresholds``. ``box_covariates`` is the
    ordered subset of covariates the box search runs on; these must be
    non-binary columns. Missingness indicator columns created by imputation
    are assigned ``indicator_tier``.
    """

    covariate_names: tuple[str, ...]
    tiers: Mapping[str, int]
    box_covariates: tuple[str, ...] = ()
    id_column: str = "id"
    treatment_column: str = "z"
    outcome_column: str = "r"
    exact_match_column: str | None = None
    indicator_tier: int = 3
    tier_thresholds: Mapping[int, float] = field(
        default_factory=lambda: dict(DEFAULT_TIER_THRESHOLDS)
    )

    def __post_init__(self):
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise LoadError("duplicate covariate names in schema")
        for name in self.covariate_names:
            if name not in self.tiers:
                raise LoadError(f"covariate '{name}' has no tier assigned")
            tier = self.tiers[name]
            if tier not in self.tier_thresholds:
                raise LoadError(
                    f"covariate '{name}' has tier {tier} with no threshold configured"
                )
        if self.indicator_tier not in self.tier_thresholds:
            raise LoadError(f"indicator tier {self.indicator_tier} has no threshold")
        for name in self.box_covariates:
            if name not in self.covariate_names:
                raise LoadError(f"box covariate '{name}' is not a schema covariate")

    def threshold_for(self, name: str) -> float:
        return self.tier_thresholds[self.tiers[name]]


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable table of study units in row order.

    Row order is canonical: every downstream artifact (support flags, strata
    indices, reports) is deterministic relative to it. ``rows`` holds raw
    covariate values with ``None`` marking a missing cell.
    """

    schema: Schema
    ids: tuple[str, ...]
    z: np.ndarray
    r: np.ndarray
    rows: tuple[tuple[float | None, ...], ...]
    exact_keys: tuple[str, ...] | None = None
    imputed: bool = False
    missingness_indicator_names: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.ids)
        if not (len(self.z) == len(self.r) == len(self.rows) == n):
            raise ValueError("dataset columns have inconsistent lengths")
        if self.exact_keys is not None and len(self.exact_keys) != n:
            raise ValueError("exact-match keys have inconsistent length")
        width = len(self.schema.covariate_names)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise ValueError(f"row {i} has {len(row)} covariates, expected {width}")

    @property
    def n_units(self) -> int:
        return len(self.ids)

    @property
    def n_treated(self) -> int:
        return int(self.z.sum())

    @property
    def n_control(self) -> int:
        return self.n_units - self.n_treated

    def covariate_index(self, name: str) -> int:
        try:
            return self.schema.covariate_names.index(name)
        except ValueError:
            raise KeyError(f"unknown covariate '{name}'") from None

    def column(self, name: str) -> list[float | None]:
        j = self.covariate_index(name)
        return [row[j] for row in self.rows]

    def covariate_matrix(self, names: Sequence[str] | None = None) -> np.ndarray:
        """Float matrix of the requested covariates; requires imputed data."""
        if names is None:
            names = self.schema.covariate_names
        cols = [self.covariate_index(name) for name in names]
        out = np.empty((self.n_units, len(cols)), dtype=float)
        for i, row in enumerate(self.rows):
            for jj, j in enumerate(cols):
                v = row[j]
                if v is None:
                    raise ValueError(
                        f"covariate '{names[jj]}' is missing for unit '{self.ids[i]}'; "
                        "impute before requesting a matrix"
                    )
                out[i, jj] = v
        return out

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = list(indices)
        return replace(
            self,
            ids=tuple(self.ids[i] for i in idx),
            z=self.z[idx].copy(),
            r=self.r[idx].copy(),
            rows=tuple(self.rows[i] for i in idx),
            exact_keys=None
            if self.exact_keys is None
            else tuple(self.exact_keys[i] for i in idx),
        )


def _parse_binary(value: str, column: str, row_number: int) -> int:
    v = value.strip()
    if v not in ("0", "1"):
        raise LoadError(
            f"row {row_number}: column '{column}' must be 0 or 1, got '{value}'"
        )
    return int(v)


def load_csv(path: str | Path, schema: Schema) -> Dataset:
    """Read a UTF-8 CSV with a header row into a :class:`Dataset`.

    Empty cells in covariate columns become missing markers. Treatment and
    outcome cells must be exactly 0 or 1. Errors carry the row and column of
    the first offending cell.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"{path}: file is empty") from None
        positions = {name: i for i, name in enumerate(header)}
        needed = [schema.id_column, schema.treatment_column, schema.outcome_column]
        needed += list(schema.covariate_names)
        if schema.exact_match_column is not None:
            needed.append(schema.exact_match_column)
        for name in needed:
            if name not in positions:
                raise LoadError(f"{path}: column '{name}' not found in header")

        ids: list[str] = []
        z: list[int] = []
        r: list[int] = []
        rows: list[tuple[float | None, ...]] = []
        keys: list[str] = []
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise LoadError(f"{path}: row {lineno} has {len(record)} fields, expected {len(header)}")
            ids.append(record[positions[schema.id_column]])
            z.append(_parse_binary(record[positions[schema.treatment_column]], schema.treatment_column, lineno))
            r.append(_parse_binary(record[positions[schema.outcome_column]], schema.outcome_column, lineno))
            values: list[float | None] = []
            for name in schema.covariate_names:
                cell = record[positions[name]].strip()
                if cell == "":
                    values.append(None)
                else:
                    try:
                        values.append(float(cell))
                    except ValueError:
                        raise LoadError(
                            f"{path}: row {lineno}, column '{name}': cannot parse '{cell}' as a number"
                        ) from None
            rows.append(tuple(values))
            if schema.exact_match_column is not None:
                keys.append(record[positions[schema.exact_match_column]])

    return Dataset(
        schema=schema,
        ids=tuple(ids),
        z=np.asarray(z, dtype=np.int8),
        r=np.asarray(r, dtype=np.int8),
        rows=tuple(rows),
        exact_keys=tuple(keys) if schema.exact_match_column is not None else None,
        imputed=False,
    )


def impute_with_indicators(ds: Dataset) -> Dataset:
    """Mean-impute missing cells and append one 0/1 indicator per affected covariate.

    The indicator is 1 where the original value was missing, so the pattern of
    missingness itself can be balanced by matching. Indicator columns take the
    schema's ``indicator_tier``. Imputing a complete dataset adds no columns
    and changes no values.
    """
    if ds.imputed:
        raise ValueError("dataset is already imputed")
    width = len(ds.schema.covariate_names)
    missing_cols: list[int] = []
    means: dict[int, float] = {}
    for j in range(width):
        observed = [row[j] for row in ds.rows if row[j] is not None]
        n_missing = ds.n_units - len(observed)
        if n_missing == 0:
            continue
        if not observed:
            raise ValueError(
                f"covariate '{ds.schema.covariate_names[j]}' has no observed values"
            )
        missing_cols.append(j)
        means[j] = float(np.mean(observed))

    indicator_names = tuple(
        ds.schema.covariate_names[j] + MISSING_SUFFIX for j in missing_cols
    )
    for name in indicator_names:
        if name in ds.schema.covariate_names:
            raise ValueError(f"indicator column '{name}' collides with an existing covariate")

    new_rows = []
    for row in ds.rows:
        filled = [means[j] if (row[j] is None and j in means) else row[j] for j in range(width)]
        flags = [1.0 if row[j] is None else 0.0 for j in missing_cols]
        new_rows.append(tuple(filled + flags))

    tiers = dict(ds.schema.tiers)
    for name in indicator_names:
        tiers[name] = ds.schema.indicator_tier
    schema = replace(
        ds.schema,
        covariate_names=ds.schema.covariate_names + indicator_names,
        tiers=tiers,
    )
    return replace(
        ds,
        schema=schema,
        rows=tuple(new_rows),
        imputed=True,
        missingness_indicator_names=indicator_names,
    )


def filter_to_box(ds: Dataset, box) -> Dataset:
    """Restrict to units whose box covariates fall inside a closed box.

    Bounds are inclusive on both ends; a unit sitting exactly on a face is
    retained.
    """
    if not ds.imputed:
        raise ValueError("filter_to_box requires an imputed dataset")
    names = tuple(box.dimension_names)
    if names != tuple(ds.schema.box_covariates):
        raise ValueError(
            f"box dimensions {names} do not match schema box covariates "
            f"{tuple(ds.schema.box_covariates)}"
        )
    coords = ds.covariate_matrix(names)
    inside = np.all((coords >= box.lower) & (coords <= box.upper), axis=1)
    return ds.subset(np.flatnonzero(inside))
