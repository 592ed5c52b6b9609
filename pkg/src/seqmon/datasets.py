"""Long-format longitudinal datasets and their CSV representation.

A dataset is a stack of observation rows, grouped by subject (group), each
row carrying an observation time, an optional calendar arrival time, an
outcome, and named covariates. Missing outcome or covariate cells are NaN
with the row's ``observed`` flag cleared. Interim membership is a boolean
matrix ``xi`` with one row per group and one column per analysis: ``xi[i, m]``
says group ``i`` has arrived by analysis ``m + 1``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import DataError

CSV_FIXED_COLUMNS = ("group_id", "obs_time", "arrival_time", "outcome")


@dataclass
class LongitudinalDataset:
    """Grouped observation rows in long format.

    Rows must be contiguous per group; groups are kept in arrival order.
    ``covariates`` is an (n_rows, n_covariates) float matrix aligned with
    ``covariate_names``. ``observed`` marks rows whose outcome and covariate
    cells are all present.
    """

    group_id: np.ndarray
    obs_time: np.ndarray
    arrival_time: np.ndarray
    outcome: np.ndarray
    covariate_names: tuple[str, ...]
    covariates: np.ndarray
    observed: np.ndarray
    membership: np.ndarray | None = None
    group_labels: tuple[str, ...] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.group_id = np.asarray(self.group_id, dtype=int)
        self.obs_time = np.asarray(self.obs_time, dtype=float)
        self.arrival_time = np.asarray(self.arrival_time, dtype=float)
        self.outcome = np.asarray(self.outcome, dtype=float)
        self.covariates = np.asarray(self.covariates, dtype=float)
        if self.covariates.ndim == 1:
            self.covariates = self.covariates[:, None]
        self.observed = np.asarray(self.observed, dtype=bool)
        self.covariate_names = tuple(self.covariate_names)
        n = self.group_id.shape[0]
        for name, arr in (
            ("obs_time", self.obs_time),
            ("arrival_time", self.arrival_time),
            ("outcome", self.outcome),
            ("observed", self.observed),
        ):
            if arr.shape[0] != n:
                raise DataError(f"column {name} has {arr.shape[0]} rows, expected {n}")
        if self.covariates.shape != (n, len(self.covariate_names)):
            raise DataError(
                f"covariate matrix has shape {self.covariates.shape}, expected "
                f"({n}, {len(self.covariate_names)})"
            )
        self._validate_grouping()
        if self.membership is not None:
            self.membership = np.asarray(self.membership, dtype=bool)
            self.validate_membership()

    def _validate_grouping(self):
        gid = self.group_id
        if gid.size == 0:
            raise DataError("dataset has no rows")
        changes = np.flatnonzero(np.diff(gid) != 0)
        starts = np.concatenate(([0], changes + 1))
        ids_in_order = gid[starts]
        if np.unique(ids_in_order).size != ids_in_order.size:
            raise DataError("group rows are not contiguous")
        if not np.array_equal(ids_in_order, np.arange(ids_in_order.size)):
            raise DataError("group ids must be 0..n-1 in row order; use read_dataset_csv")
        self._starts = np.concatenate((starts, [gid.size]))

    # -- structure ---------------------------------------------------------

    @property
    def n_rows(self) -> int:
        return self.group_id.shape[0]

    @property
    def n_groups(self) -> int:
        return self._starts.size - 1

    @property
    def group_sizes(self) -> np.ndarray:
        return np.diff(self._starts)

    def group_slice(self, i: int) -> slice:
        return slice(self._starts[i], self._starts[i + 1])

    @property
    def n_interims(self) -> int:
        if self.membership is None:
            raise DataError("dataset has no interim membership assigned")
        return self.membership.shape[1]

    def interim_counts(self) -> np.ndarray:
        return self.membership.sum(axis=0)

    def covariate(self, name: str) -> np.ndarray:
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise DataError(f"unknown covariate {name!r}; have {self.covariate_names}")
        return self.covariates[:, j]

    def baseline_arrival(self) -> np.ndarray:
        """Earliest calendar arrival time per group."""
        return np.array(
            [np.nanmin(self.arrival_time[self.group_slice(i)]) for i in range(self.n_groups)]
        )

    def copy(self) -> "LongitudinalDataset":
        return replace(
            self,
            group_id=self.group_id.copy(),
            obs_time=self.obs_time.copy(),
            arrival_time=self.arrival_time.copy(),
            outcome=self.outcome.copy(),
            covariates=self.covariates.copy(),
            observed=self.observed.copy(),
            membership=None if self.membership is None else self.membership.copy(),
        )

    # -- membership --------------------------------------------------------

    def validate_membership(self):
        xi = self.membership
        if xi.shape[0] != self.n_groups:
            raise DataError(
                f"membership has {xi.shape[0]} rows for {self.n_groups} groups"
            )
        if xi.shape[1] < 1:
            raise DataError("membership needs at least one analysis column")
        if not xi[:, -1].all():
            raise DataError("every group must be a member at the final analysis")
        grew = np.diff(xi.astype(int), axis=1)
        if (grew < 0).any():
            raise DataError("membership must be monotone: once arrived, always arrived")
        counts = xi.sum(axis=0)
        if (np.diff(counts) < 0).any():
            raise DataError("interim group counts must be nondecreasing")

    def subset_groups(self, keep: np.ndarray) -> "LongitudinalDataset":
        """Dataset restricted to kept groups (boolean mask or index array)."""
        keep = np.asarray(keep)
        if keep.dtype != bool:
            idx = keep
            keep = np.zeros(self.n_groups, dtype=bool)
            keep[idx] = True
        elif keep.shape != (self.n_groups,):
            raise DataError(
                f"boolean mask has shape {keep.shape}, expected ({self.n_groups},)"
            )
        row_mask = keep[self.group_id]
        old_ids = self.group_id[row_mask]
        remap = np.cumsum(keep) - 1
        return LongitudinalDataset(
            group_id=remap[old_ids],
            obs_time=self.obs_time[row_mask],
            arrival_time=self.arrival_time[row_mask],
            outcome=self.outcome[row_mask],
            covariate_names=self.covariate_names,
            covariates=self.covariates[row_mask],
            observed=self.observed[row_mask],
            membership=None if self.membership is None else self.membership[keep],
        )


def assign_membership_by_counts(
    dataset: LongitudinalDataset, counts
) -> LongitudinalDataset:
    """Membership from cumulative group counts, in arrival order.

    Groups are ranked by their baseline arrival time (stable, so file order
    breaks ties and is used when arrival times are absent).
    """
    counts = np.asarray(counts, dtype=int)
    n = dataset.n_groups
    if counts.ndim != 1 or counts.size < 1:
        raise DataError("counts must be a nonempty 1-d sequence")
    if (np.diff(counts) <= 0).any() or counts[0] <= 0:
        raise DataError("interim counts must be strictly increasing and positive")
    if counts[-1] != n:
        raise DataError(f"final count {counts[-1]} does not match {n} groups")
    base = dataset.baseline_arrival()
    order = np.argsort(base, kind="stable") if np.isfinite(base).all() else np.arange(n)
    rank = np.empty(n, dtype=int)
    rank[order] = np.arange(n)
    xi = rank[:, None] < counts[None, :]
    ds = dataset.copy()
    ds.membership = xi
    ds.validate_membership()
    return ds


def assign_membership_by_times(
    dataset: LongitudinalDataset, cut_times
) -> LongitudinalDataset:
    """Membership from calendar cut times: arrived iff baseline time <= cut."""
    cuts = np.asarray(cut_times, dtype=float)
    if cuts.ndim != 1 or cuts.size < 1:
        raise DataError("cut_times must be a nonempty 1-d sequence")
    if (np.diff(cuts) <= 0).any():
        raise DataError("cut times must be strictly increasing")
    base = dataset.baseline_arrival()
    if not np.isfinite(base).all():
        raise DataError("calendar cuts need arrival times on every group")
    xi = base[:, None] <= cuts[None, :]
    if not xi[:, -1].all():
        raise DataError("final cut time must cover every group's arrival")
    ds = dataset.copy()
    ds.membership = xi
    ds.validate_membership()
    return ds


# -- CSV -------------------------------------------------------------------


def _parse_cell(text: str) -> float:
    text = text.strip()
    if text == "":
        return np.nan
    try:
        return float(text)
    except ValueError:
        raise DataError(f"cannot parse numeric cell {text!r}")


def read_dataset_csv(path) -> LongitudinalDataset:
    """Read a long-format CSV.

    Expected header: group_id, obs_time, arrival_time, outcome, then one
    column per covariate. Empty cells mean missing; a row is marked observed
    only when its outcome and all covariates are present.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}")
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if tuple(header[:4]) != CSV_FIXED_COLUMNS:
            raise DataError(
                f"{path}: header must start with {', '.join(CSV_FIXED_COLUMNS)}; got {header[:4]}"
            )
        cov_names = tuple(header[4:])
        raw_gid, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            raw_gid.append(row[0].strip())
            rows.append([_parse_cell(c) for c in row[1:]])
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=float)
    labels: list[str] = []
    seen: dict[str, int] = {}
    gid = np.empty(len(raw_gid), dtype=int)
    for i, g in enumerate(raw_gid):
        if g not in seen:
            seen[g] = len(labels)
            labels.append(g)
        gid[i] = seen[g]
    # keep groups contiguous in first-appearance order, observations by time
    order = np.lexsort((values[:, 0], gid))
    gid, values = gid[order], values[order]
    obs_time, arrival, outcome = values[:, 0], values[:, 1], values[:, 2]
    covs = values[:, 3:]
    if np.isnan(obs_time).any():
        raise DataError(f"{path}: obs_time cells must all be present")
    observed = ~(np.isnan(outcome) | np.isnan(covs).any(axis=1))
    return LongitudinalDataset(
        group_id=gid,
        obs_time=obs_time,
        arrival_time=arrival,
        outcome=outcome,
        covariate_names=cov_names,
        covariates=covs,
        observed=observed,
        group_labels=tuple(labels),
    )


def write_dataset_csv(dataset: LongitudinalDataset, path) -> None:
    """Write a dataset back to the long CSV format (NaN cells become empty)."""

    def cell(x: float) -> str:
        return "" if np.isnan(x) else repr(float(x))

    labels = dataset.group_labels or tuple(str(i) for i in range(dataset.n_groups))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(CSV_FIXED_COLUMNS) + list(dataset.covariate_names))
        for i in range(dataset.n_rows):
            writer.writerow(
                [
                    labels[dataset.group_id[i]],
                    cell(dataset.obs_time[i]),
                    cell(dataset.arrival_time[i]),
                    cell(dataset.outcome[i]),
                ]
                + [cell(v) for v in dataset.covariates[i]]
            )
