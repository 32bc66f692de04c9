"""Cohort ingestion, greedy pair matching, and covariate balance tables.

A cohort is a flat table of units: an id, a treated flag, an outcome, and
covariates typed as numeric, binary, or categorical. Categorical columns are
interned to integer level codes (sorted label order) at construction so the
matcher and the balance table can work on plain float arrays throughout.

Matching is nearest-available greedy within exact strata: treated units are
visited in sorted id order and each takes the closest unmatched control by
Euclidean distance on sd-scaled covariates. Treated units that cannot be
paired are dropped and reported, never imputed.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError, MatchingWarning, SchemaError
from .model import MatchedPairSet, ObservationRecord, _frozen, _infer_kind

import warnings

RESERVED_COLUMNS = ("id", "z", "y")


class CohortTable:
    """Immutable unit-level table: ids, treated flags, outcomes, covariates.

    Categorical covariates are stored as integer level codes; the original
    labels stay available through `covariate_labels` and `levels`.
    """

    def __init__(self, unit_ids, treated, outcome, covariates, kinds=None):
        self._ids = _frozen(np.asarray(unit_ids, dtype=object))
        n = self._ids.shape[0]
        dup = [u for u, c in Counter(self._ids.tolist()).items() if c > 1]
        if dup:
            raise DataError(f"duplicate unit ids: {dup[:5]}")
        self._z = _frozen(np.asarray(treated, dtype=bool))
        self._y = _frozen(np.asarray(outcome, dtype=float))
        if self._z.shape[0] != n or self._y.shape[0] != n:
            raise DataError("treated and outcome arrays must match unit count")
        if not self._z.any() or self._z.all():
            raise DataError("cohort needs at least one treated and one control unit")
        kinds = dict(kinds) if kinds else {}
        self._values: dict = {}
        self._labels: dict = {}
        self._levels: dict = {}
        self._kinds: dict = {}
        for name, col in covariates.items():
            arr = np.asarray(col)
            if arr.shape[0] != n:
                raise DataError(f"covariate {name!r} has wrong length")
            kind = kinds.get(name) or _infer_kind(arr)
            if kind == "categorical":
                labels = np.array([str(v) for v in arr.tolist()], dtype=object)
                levels = tuple(sorted(set(labels.tolist())))
                code = {lab: float(i) for i, lab in enumerate(levels)}
                self._values[name] = _frozen(np.array([code[v] for v in labels]))
                self._labels[name] = _frozen(labels)
                self._levels[name] = levels
            else:
                values = arr.astype(float)
                if not np.all(np.isfinite(values)):
                    raise DataError(f"covariate {name!r} has non-finite values")
                self._values[name] = _frozen(values)
            self._kinds[name] = kind

    @property
    def n_units(self) -> int:
        return self._ids.shape[0]

    @property
    def n_treated(self) -> int:
        return int(self._z.sum())

    @property
    def n_control(self) -> int:
        return self.n_units - self.n_treated

    @property
    def unit_ids(self) -> np.ndarray:
        return self._ids

    @property
    def treated(self) -> np.ndarray:
        return self._z

    @property
    def outcome(self) -> np.ndarray:
        return self._y

    @property
    def covariate_names(self) -> tuple:
        return tuple(sorted(self._values))

    @property
    def kinds(self) -> dict:
        return dict(self._kinds)

    @property
    def levels(self) -> dict:
        return dict(self._levels)

    def covariate(self, name: str) -> np.ndarray:
        """Covariate values; level codes for categorical columns."""
        if name not in self._values:
            raise SchemaError(f"unknown covariate {name!r}")
        return self._values[name]

    def covariate_labels(self, name: str) -> np.ndarray:
        """Original labels for categorical columns, values otherwise."""
        if name in self._labels:
            return self._labels[name]
        return self.covariate(name)

    def row_index(self) -> dict:
        return {u: i for i, u in enumerate(self._ids.tolist())}


def load_cohort(
    path,
    *,
    delimiter: str = ",",
    id_col: str = "id",
    treated_col: str = "z",
    outcome_col: str = "y",
) -> CohortTable:
    """Read a delimited unit table; every non-reserved column is a covariate.

    Malformed rows are rejected with their 1-based file line number. A
    covariate column that mixes numeric and non-numeric values cannot be
    typed and is a schema error.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for col in (id_col, treated_col, outcome_col):
            if col not in header:
                raise SchemaError(f"missing required column {col!r}")
        pos = {name: i for i, name in enumerate(header)}
        if len(pos) != len(header):
            raise SchemaError("duplicate column names in header")
        cov_names = [c for c in header if c not in (id_col, treated_col, outcome_col)]

        ids, z, y = [], [], []
        raw: dict = {name: [] for name in cov_names}
        for ln, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(
                    f"line {ln}: expected {len(header)} fields, got {len(row)}"
                )
            ids.append(row[pos[id_col]])
            flag = row[pos[treated_col]].strip()
            if flag not in ("0", "1"):
                raise DataError(f"line {ln}: treated flag must be 0 or 1, got {flag!r}")
            z.append(flag == "1")
            try:
                y.append(float(row[pos[outcome_col]]))
            except ValueError:
                raise DataError(
                    f"line {ln}: outcome {row[pos[outcome_col]]!r} is not numeric"
                ) from None
            for name in cov_names:
                cell = row[pos[name]].strip()
                if cell == "":
                    raise DataError(f"line {ln}: empty value for covariate {name!r}")
                raw[name].append(cell)

    covariates = {}
    for name, cells in raw.items():
        parsed = []
        numeric = 0
        for cell in cells:
            try:
                parsed.append(float(cell))
                numeric += 1
            except ValueError:
                parsed.append(cell)
        if numeric == len(cells):
            covariates[name] = np.array(parsed, dtype=float)
        elif numeric == 0:
            covariates[name] = np.array(cells, dtype=object)
        else:
            raise SchemaError(
                f"covariate {name!r} mixes numeric and non-numeric values"
            )
    return CohortTable(ids, z, y, covariates)


def save_cohort(cohort: CohortTable, path, *, delimiter: str = ",") -> None:
    """Write a cohort back to a delimited file that `load_cohort` accepts."""
    names = cohort.covariate_names
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(["id", "z", "y"] + list(names))
        labels = {name: cohort.covariate_labels(name) for name in names}
        kinds = cohort.kinds
        for i in range(cohort.n_units):
            row = [
                cohort.unit_ids[i],
                int(cohort.treated[i]),
                repr(float(cohort.outcome[i])),
            ]
            for name in names:
                v = labels[name][i]
                row.append(v if kinds[name] == "categorical" else repr(float(v)))
            writer.writerow(row)


@dataclass(frozen=True)
class MatchReport:
    """What the matcher had to drop, for the run log."""

    dropped_caliper: tuple
    dropped_no_control: tuple
    empty_strata: tuple
    n_pairs: int


def _stratum_keys(cohort: CohortTable, exact_on) -> list:
    cols = [cohort.covariate_labels(name) for name in exact_on]
    return [tuple(col[i] for col in cols) for i in range(cohort.n_units)]


def greedy_match_report(
    cohort: CohortTable,
    exact_on=(),
    distance_on=(),
    caliper: float | None = None,
):
    """Greedy nearest-control matching; returns the pairs and a drop report."""
    kinds = cohort.kinds
    for name in exact_on:
        if cohort.kinds.get(name) is None:
            raise SchemaError(f"unknown covariate {name!r}")
        if kinds[name] == "numeric":
            raise ConfigError(
                f"exact_on covariate {name!r} is numeric; use binary or categorical"
            )
    for name in distance_on:
        if cohort.kinds.get(name) is None:
            raise SchemaError(f"unknown covariate {name!r}")
        if kinds[name] == "categorical":
            raise ConfigError(
                f"distance_on covariate {name!r} is categorical; use numeric"
            )
    if caliper is not None and caliper < 0:
        raise ConfigError("caliper must be nonnegative")

    # sd-scaled covariate matrix for distances (whole cohort, before matching)
    if distance_on:
        mat = np.column_stack([cohort.covariate(n) for n in distance_on])
        scale = np.ones(mat.shape[1])
        for j in range(mat.shape[1]):
            if mat.shape[0] > 1:
                s = float(np.std(mat[:, j], ddof=1))
                if np.isfinite(s) and s > 0:
                    scale[j] = s
        mat = mat / scale
    else:
        mat = np.zeros((cohort.n_units, 0))

    keys = _stratum_keys(cohort, exact_on)
    order = np.argsort(cohort.unit_ids)
    treated_rows = [i for i in order if cohort.treated[i]]
    control_rows = [i for i in order if not cohort.treated[i]]
    ids = cohort.unit_ids

    by_stratum: dict = {}
    for i in control_rows:
        by_stratum.setdefault(keys[i], []).append(i)
    empty = sorted({keys[i] for i in treated_rows if keys[i] not in by_stratum})

    matches = []
    dropped_cal, dropped_none = [], []
    for t in treated_rows:
        pool = by_stratum.get(keys[t], [])
        if not pool:
            dropped_none.append(ids[t])
            continue
        cand = np.array(pool)
        dist = np.sqrt(((mat[cand] - mat[t]) ** 2).sum(axis=1))
        j = int(np.argmin(dist))
        if caliper is not None and dist[j] > caliper:
            dropped_cal.append(ids[t])
            continue
        matches.append((t, pool.pop(j)))

    if dropped_none:
        warnings.warn(
            f"dropped {len(dropped_none)} treated unit(s) with no available "
            f"control: {', '.join(dropped_none)}",
            MatchingWarning,
            stacklevel=3,
        )
    if dropped_cal:
        warnings.warn(
            f"dropped {len(dropped_cal)} treated unit(s) outside caliper: "
            f"{', '.join(dropped_cal)}",
            MatchingWarning,
            stacklevel=3,
        )

    t_idx = np.array([t for t, _ in matches], dtype=int)
    c_idx = np.array([c for _, c in matches], dtype=int)
    names = cohort.covariate_names
    cols_t = {n: cohort.covariate_labels(n)[t_idx] for n in names}
    cols_c = {n: cohort.covariate_labels(n)[c_idx] for n in names}
    pairs = MatchedPairSet(
        outcome_t=cohort.outcome[t_idx],
        outcome_c=cohort.outcome[c_idx],
        cols_t=cols_t,
        cols_c=cols_c,
        pair_ids=ids[t_idx],
        unit_ids_t=ids[t_idx],
        unit_ids_c=ids[c_idx],
        kinds=kinds,
    )
    report = MatchReport(
        dropped_caliper=tuple(dropped_cal),
        dropped_no_control=tuple(dropped_none),
        empty_strata=tuple(empty),
        n_pairs=len(matches),
    )
    return pairs, report


def greedy_match(
    cohort: CohortTable,
    exact_on=(),
    distance_on=(),
    caliper: float | None = None,
) -> MatchedPairSet:
    pairs, _ = greedy_match_report(cohort, exact_on, distance_on, caliper)
    return pairs


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    kind: str
    treated_before: float
    control_before: float
    treated_after: float
    control_after: float
    std_before: float
    std_after: float
    degenerate: bool


@dataclass(frozen=True)
class BalanceReport:
    """Per-covariate group means and standardized differences.

    Both columns are scaled by the same denominator: the root mean of the two
    before-matching within-group variances, so pre/post values are directly
    comparable.
    """

    rows: tuple
    n_pairs: int
    n_treated_before: int
    n_control_before: int

    def row(self, name: str) -> BalanceRow:
        for r in self.rows:
            if r.covariate == name:
                return r
        raise SchemaError(f"unknown covariate {name!r}")

    def write_csv(self, path, *, delimiter: str = ",") -> None:
        fields = list(BalanceRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, delimiter=delimiter)
            writer.writerow(fields)
            for r in self.rows:
                d = asdict(r)
                writer.writerow([d[f] for f in fields])

    def write_json(self, path) -> None:
        def clean(v):
            if isinstance(v, float) and not np.isfinite(v):
                return None
            return v

        payload = {
            "n_pairs": self.n_pairs,
            "n_treated_before": self.n_treated_before,
            "n_control_before": self.n_control_before,
            "rows": [{k: clean(v) for k, v in asdict(r).items()} for r in self.rows],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")


def _group_var(values: np.ndarray) -> float:
    if values.size < 2:
        return float("nan")
    return float(np.var(values, ddof=1))


def _std_diff(diff: float, s: float):
    """Standardized difference with the equal-means and zero-sd conventions."""
    if diff == 0.0:
        return 0.0, False
    if not np.isfinite(s) or s == 0.0:
        return float(np.copysign(np.inf, diff)), True
    return diff / s, False


def balance(cohort: CohortTable, pairs: MatchedPairSet) -> BalanceReport:
    """Covariate balance before and after matching.

    After-matching means use only the matched units; the after-matching mean
    difference is computed pairwise so exactly matched covariates report a
    standardized difference of exactly zero.
    """
    where = cohort.row_index()
    t_idx, c_idx = [], []
    for t, c in pairs.pairs:
        try:
            t_idx.append(where[t.unit_id])
            c_idx.append(where[c.unit_id])
        except KeyError as missing:
            raise DataError(f"pair unit {missing} is not in the cohort") from None
    t_idx = np.array(t_idx, dtype=int)
    c_idx = np.array(c_idx, dtype=int)
    z = cohort.treated

    rows = []
    for name in cohort.covariate_names:
        x = cohort.covariate(name)
        mt, mc = float(x[z].mean()), float(x[~z].mean())
        s = float(np.sqrt((_group_var(x[z]) + _group_var(x[~z])) / 2.0))
        sd_before, deg_before = _std_diff(mt - mc, s)
        if t_idx.size:
            mta, mca = float(x[t_idx].mean()), float(x[c_idx].mean())
            diff_after = float((x[t_idx] - x[c_idx]).mean())
        else:
            mta = mca = diff_after = float("nan")
        sd_after, deg_after = _std_diff(diff_after, s)
        rows.append(
            BalanceRow(
                covariate=name,
                kind=cohort.kinds[name],
                treated_before=mt,
                control_before=mc,
                treated_after=mta,
                control_after=mca,
                std_before=sd_before,
                std_after=sd_after,
                degenerate=deg_before or deg_after,
            )
        )
    return BalanceReport(
        rows=tuple(rows),
        n_pairs=pairs.n_pairs,
        n_treated_before=cohort.n_treated,
        n_control_before=cohort.n_control,
    )


PAIR_FILE_HEADER = ("pair_id", "role", "unit_id")


def save_pairs(pairs: MatchedPairSet, path, *, delimiter: str = ",") -> None:
    """Write pair membership as (pair_id, role, unit_id) rows, T before C."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(PAIR_FILE_HEADER)
        for t, c in pairs.pairs:
            writer.writerow([t.pair_id, "T", t.unit_id])
            writer.writerow([c.pair_id, "C", c.unit_id])


def load_pairs(path, cohort: CohortTable, *, delimiter: str = ",") -> MatchedPairSet:
    """Rebuild a pair set from a membership file, joined against a cohort."""
    where = cohort.row_index()
    names = cohort.covariate_names
    labels = {n: cohort.covariate_labels(n) for n in names}
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None or tuple(header) != PAIR_FILE_HEADER:
            raise SchemaError(
                f"pair file must start with header {','.join(PAIR_FILE_HEADER)}"
            )
        for ln, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataError(f"line {ln}: expected 3 fields, got {len(row)}")
            pid, role, unit = row
            if role not in ("T", "C"):
                raise DataError(f"line {ln}: role must be T or C, got {role!r}")
            if unit not in where:
                raise DataError(f"line {ln}: unknown unit id {unit!r}")
            i = where[unit]
            expect = role == "T"
            if bool(cohort.treated[i]) != expect:
                raise DataError(
                    f"line {ln}: unit {unit!r} is marked {role} but the cohort "
                    "disagrees"
                )
            records.append(
                ObservationRecord(
                    unit_id=unit,
                    pair_id=pid,
                    treated=expect,
                    outcome=float(cohort.outcome[i]),
                    covariates={n: labels[n][i] for n in names},
                )
            )
    return MatchedPairSet.from_records(records, kinds=cohort.kinds)
