"""Zone-specific row formatting, crash indexing and post-crash exclusion."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..datamodel import (
    APPROACH,
    APPROACH_COLUMNS,
    APPROACH_LABELS,
    N_TRAFFIC,
    WITHIN_COLUMNS,
    ZONES,
    CrashEvent,
    IntersectionGeometry,
    SnapshotFrame,
)
from ..errors import ConfigurationError, DimensionError, GapError
from ..synthgen import label_steps

log = logging.getLogger(__name__)

STEP = np.timedelta64(15, "m")
EXCLUSION = np.timedelta64(120, "m")


@dataclass
class RowTable:
    """Two-dimensional zone dataset: one row per (stream, timestep).

    A stream is one (intersection, reference approach) pair.  ``leg_present``
    flags which of the A-D blocks hold real data (within-intersection rows
    only); it never enters the model features.
    """

    values: np.ndarray
    columns: tuple
    intersection: np.ndarray
    approach: np.ndarray
    time: np.ndarray
    leg_present: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.values)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise DimensionError(f"values {self.values.shape} do not match {len(self.columns)} columns")
        if not (len(self.intersection) == len(self.approach) == len(self.time) == n):
            raise DimensionError("row table columns have different lengths")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def take(self, index) -> "RowTable":
        return RowTable(
            self.values[index],
            self.columns,
            self.intersection[index],
            self.approach[index],
            self.time[index],
            None if self.leg_present is None else self.leg_present[index],
        )

    def select_columns(self, names: Sequence[str]) -> "RowTable":
        idx = [self.columns.index(n) for n in names]
        return RowTable(self.values[:, idx], tuple(names), self.intersection, self.approach, self.time, self.leg_present)

    def stream_codes(self) -> np.ndarray:
        """Integer stream id per row, numbered in order of first appearance."""
        keys = np.char.add(np.char.add(self.intersection.astype(str), "|"), self.approach.astype(str))
        _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        order = np.argsort(np.argsort(first))
        return order[inverse]

    def sort(self) -> "RowTable":
        order = np.lexsort((self.time, self.approach, self.intersection))
        return self.take(order)


def nomenclature(geometry: IntersectionGeometry, reference: str) -> dict[str, str]:
    """Map A-D to physical legs with ``reference`` as A.

    Legs are listed clockwise on the map, so stepping backwards through the
    list gives the left-side neighbour of A as B, then C and D in turn.
    A three-legged intersection has no D.
    """
    legs = list(geometry.approaches)
    if reference not in legs:
        raise ConfigurationError(f"{reference!r} is not a leg of {geometry.intersection_id}")
    i = legs.index(reference)
    n = len(legs)
    return {APPROACH_LABELS[j]: legs[(i - j) % n] for j in range(n)}


def format_approach(snapshots: SnapshotFrame) -> RowTable:
    """Approach-zone rows: the snapshot's own 33 values, sorted by stream then time."""
    table = RowTable(
        snapshots.values.copy(),
        APPROACH_COLUMNS,
        snapshots.intersection.copy(),
        snapshots.approach.copy(),
        snapshots.time.copy(),
    )
    return table.sort()


def format_within_intersection(snapshots: SnapshotFrame, geometries: Sequence[IntersectionGeometry]) -> RowTable:
    """Within-intersection rows of width 114.

    One row per (intersection, reference approach, timestep): the 27 traffic
    values of A, B, C and D (D zero-filled on three-legged intersections)
    followed by the six weather values.
    """
    if isinstance(geometries, IntersectionGeometry):
        geometries = [geometries]
    parts = []
    for geo in geometries:
        in_int = snapshots.intersection == geo.intersection_id
        times = np.unique(snapshots.time[in_int])
        blocks = {}
        holes = []
        for leg in geo.approaches:
            rows = np.flatnonzero(in_int & (snapshots.approach == leg))
            rows = rows[np.argsort(snapshots.time[rows], kind="stable")]
            leg_times = snapshots.time[rows]
            if len(leg_times) != len(times) or np.any(leg_times != times):
                missing = np.setdiff1d(times, leg_times)
                holes.extend((geo.intersection_id, leg, str(t)) for t in missing)
                continue
            blocks[leg] = snapshots.values[rows]
        if holes:
            preview = ", ".join("/".join(h) for h in holes[:5])
            raise GapError(f"{len(holes)} missing leg snapshots, e.g. {preview}", holes)
        if not blocks:
            continue
        n = len(times)
        weather = blocks[geo.approaches[0]][:, N_TRAFFIC:]
        for ref in geo.approaches:
            names = nomenclature(geo, ref)
            values = np.zeros((n, len(WITHIN_COLUMNS)))
            present = np.zeros((n, 4), dtype=bool)
            for j, label in enumerate(APPROACH_LABELS):
                if label in names:
                    values[:, j * N_TRAFFIC : (j + 1) * N_TRAFFIC] = blocks[names[label]][:, :N_TRAFFIC]
                    present[:, j] = True
            values[:, 4 * N_TRAFFIC :] = weather
            parts.append(
                RowTable(values, WITHIN_COLUMNS, np.full(n, geo.intersection_id), np.full(n, ref), times.copy(), present)
            )
    if not parts:
        return RowTable(np.zeros((0, len(WITHIN_COLUMNS))), WITHIN_COLUMNS, np.array([], str), np.array([], str),
                        np.array([], "datetime64[m]"), np.zeros((0, 4), bool))
    return RowTable(
        np.concatenate([p.values for p in parts]),
        WITHIN_COLUMNS,
        np.concatenate([p.intersection for p in parts]),
        np.concatenate([p.approach for p in parts]),
        np.concatenate([p.time for p in parts]),
        np.concatenate([p.leg_present for p in parts]),
    ).sort()


def _check_zone(zone: str) -> None:
    if zone not in ZONES:
        raise ConfigurationError(f"unknown zone {zone!r}; expected one of {ZONES}")


def index_crashes(rows: RowTable, crashes: Sequence[CrashEvent], zone: str) -> np.ndarray:
    """Binary crash index per row.

    A crash at clock time t marks the last aligned timestep strictly before t
    and the one before that (0-15 and 15-30 minutes ahead of the crash).
    Within-intersection crashes mark every reference-approach row of their
    intersection; approach crashes mark only their own approach.  Crashes of
    the other zone are ignored; crashes whose steps fall outside the covered
    range are counted and reported in a warning.
    """
    _check_zone(zone)
    labels = np.zeros(len(rows), dtype=np.int8)
    if len(rows) == 0:
        return labels
    t0, t1 = rows.time.min(), rows.time.max()
    by_key: dict[tuple, list[int]] = {}
    for i, (iid, app) in enumerate(zip(rows.intersection.tolist(), rows.approach.tolist())):
        by_key.setdefault((iid, app) if zone == APPROACH else (iid,), []).append(i)
    lookup = {k: (np.asarray(v), rows.time[np.asarray(v)]) for k, v in by_key.items()}

    outside = 0
    for crash in crashes:
        if crash.zone != zone:
            continue
        steps = label_steps(np.datetime64(crash.timestamp, "m"))
        if steps[1] < t0 or steps[0] > t1:
            outside += 1
            continue
        key = (crash.intersection_id, crash.approach_id) if zone == APPROACH else (crash.intersection_id,)
        if key not in lookup:
            outside += 1
            continue
        idx, times = lookup[key]
        hit = np.isin(times, np.array(steps, dtype="datetime64[m]"))
        labels[idx[hit]] = 1
    if outside:
        warnings.warn(f"{outside} crash(es) fall outside the covered rows and were ignored", stacklevel=2)
    return labels


def exclude_post_crash(rows: RowTable, labels: np.ndarray) -> tuple[RowTable, np.ndarray]:
    """Drop unlabeled rows within two hours after a labeled step of the same stream.

    For each labeled step t, rows of that stream with time in (t, t + 2h] are
    removed unless they are labeled themselves.
    """
    labels = np.asarray(labels)
    if len(labels) != len(rows):
        raise DimensionError("labels and rows differ in length")
    keep = np.ones(len(rows), dtype=bool)
    codes = rows.stream_codes()
    for code in np.unique(codes[labels == 1]):
        idx = np.flatnonzero(codes == code)
        times = rows.time[idx]
        marked = np.sort(times[labels[idx] == 1])
        # latest labeled step strictly before each row
        pos = np.searchsorted(marked, times, side="left") - 1
        has_prev = pos >= 0
        prev = marked[np.clip(pos, 0, None)]
        drop = has_prev & (times - prev <= EXCLUSION) & (labels[idx] == 0)
        keep[idx[drop]] = False
    removed = int((~keep).sum())
    if removed:
        log.debug("post-crash exclusion removed %d rows", removed)
    return rows.take(keep), labels[keep]
