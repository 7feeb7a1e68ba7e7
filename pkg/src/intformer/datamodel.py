"""Domain value types and the canonical feature order.

Per movement (L/T/R) the connected-vehicle platform reports nine 15-minute
aggregates.  Flattened traffic features are ordered metric-major in the order
of :data:`METRICS`, then movement L, T, R::

    ASA_L, ASA_T, ASA_R, ASM_L, ..., POG_R          (27 values)

followed by the six weather values in :data:`WEATHER_FEATURES`.
Within-intersection rows hold four such traffic blocks (approaches A-D, see
:mod:`intformer.pipeline.formatting`) and a single weather block.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import astuple, dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import DimensionError

METRICS = ("ASA", "ASM", "TTA", "TTM", "CDA", "CDM", "SFC", "SFP", "POG")
MOVEMENTS = ("L", "T", "R")
APPROACH_LABELS = ("A", "B", "C", "D")
WEATHER_FEATURES = (
    "Temperature",
    "Relative_Humidity",
    "Wind_Speed",
    "Precipitation",
    "Visibility",
    "Conditions",
)
TRAFFIC_FEATURES = tuple(f"{m}_{mv}" for m in METRICS for mv in MOVEMENTS)
APPROACH_COLUMNS = TRAFFIC_FEATURES + WEATHER_FEATURES
WITHIN_COLUMNS = tuple(f"{f}_{a}" for a in APPROACH_LABELS for f in TRAFFIC_FEATURES) + WEATHER_FEATURES

N_TRAFFIC = len(TRAFFIC_FEATURES)  # 27
N_WEATHER = len(WEATHER_FEATURES)  # 6
N_APPROACH = len(APPROACH_COLUMNS)  # 33
N_WITHIN = len(WITHIN_COLUMNS)  # 114

WITHIN = "within_intersection"
APPROACH = "approach"
ZONES = (WITHIN, APPROACH)

INTERVAL = dt.timedelta(minutes=15)
INTERVALS_PER_DAY = 96
YEAR_START = dt.datetime(2021, 7, 1)


@dataclass(frozen=True)
class MovementStats:
    """Nine aggregates for one turning movement over one interval."""

    asa: float
    asm: float
    tta: float
    ttm: float
    cda: float
    cdm: float
    sfc: float
    sfp: float
    pog: float

    def __post_init__(self):
        if not (self.asm >= self.asa >= 0 and self.ttm >= self.tta >= 0 and self.cdm >= self.cda >= 0):
            raise ValueError(f"maximum below average (or negative) in {self}")
        if not (0 <= self.sfp <= 100 and 0 <= self.pog <= 100):
            raise ValueError(f"percentage outside [0, 100] in {self}")
        if self.sfc < 0 or self.sfc != int(self.sfc):
            raise ValueError(f"split-failure count must be a non-negative integer, got {self.sfc}")


@dataclass(frozen=True)
class ApproachFeatureVector:
    left: MovementStats
    through: MovementStats
    right: MovementStats

    def flatten(self) -> np.ndarray:
        movements = (self.left, self.through, self.right)
        return np.array([getattr(m, name.lower()) for name in METRICS for m in movements], dtype=np.float64)

    @classmethod
    def unflatten(cls, values: Sequence[float]) -> "ApproachFeatureVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (N_TRAFFIC,):
            raise DimensionError(f"expected {N_TRAFFIC} traffic values, got shape {values.shape}")
        grid = values.reshape(len(METRICS), len(MOVEMENTS))
        stats = [MovementStats(*(float(v) for v in grid[:, j])) for j in range(len(MOVEMENTS))]
        return cls(*stats)


@dataclass(frozen=True)
class WeatherRecord:
    temperature: float
    relative_humidity: float
    wind_speed: float
    precipitation: float
    visibility: float
    conditions: int

    def __post_init__(self):
        if not 0 <= self.relative_humidity <= 100:
            raise ValueError(f"relative humidity outside [0, 100]: {self.relative_humidity}")
        if self.visibility < 0:
            raise ValueError(f"negative visibility: {self.visibility}")
        if self.conditions not in (0, 1):
            raise ValueError(f"conditions must be 0 or 1, got {self.conditions}")

    def flatten(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def unflatten(cls, values: Sequence[float]) -> "WeatherRecord":
        v = [float(x) for x in values]
        if len(v) != N_WEATHER:
            raise DimensionError(f"expected {N_WEATHER} weather values, got {len(v)}")
        return cls(*v[:5], conditions=int(v[5]))


@dataclass(frozen=True)
class IntersectionSnapshot:
    """One approach of one intersection over one 15-minute interval."""

    intersection_id: str
    timestamp: dt.datetime
    approach_id: str
    traffic: ApproachFeatureVector
    weather: WeatherRecord

    def __post_init__(self):
        ts = self.timestamp
        if ts.minute % 15 or ts.second or ts.microsecond:
            raise ValueError(f"timestamp {ts} is not aligned to a 15-minute boundary")


@dataclass(frozen=True)
class CrashEvent:
    intersection_id: str
    zone: str
    timestamp: dt.datetime
    approach_id: Optional[str] = None

    def __post_init__(self):
        if self.zone not in ZONES:
            raise ValueError(f"unknown zone {self.zone!r}")
        if self.zone == WITHIN and self.approach_id is not None:
            raise ValueError("within-intersection crashes carry no approach")
        if self.zone == APPROACH and self.approach_id is None:
            raise ValueError("approach-zone crashes need an approach_id")


@dataclass(frozen=True)
class IntersectionGeometry:
    """Physical legs listed clockwise on the map (e.g. N, E, S, W)."""

    intersection_id: str
    leg_count: int
    approaches: tuple

    def __post_init__(self):
        if self.leg_count not in (3, 4) or len(self.approaches) != self.leg_count:
            raise ValueError(f"{self.intersection_id}: {self.leg_count} legs but approaches {self.approaches}")
        if len(set(self.approaches)) != len(self.approaches):
            raise ValueError(f"{self.intersection_id}: duplicate approach labels {self.approaches}")


@dataclass(frozen=True, eq=False)
class LabeledWindow:
    """T stacked 15-minute observations with the label of the final one."""

    features: np.ndarray
    label: int
    intersection_id: str
    approach_id: str
    end_time: Optional[dt.datetime]

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] not in (2, 3, 4):
            raise ValueError(f"window features must be T x F with T in (2, 3, 4), got {self.features.shape}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


def flatten_features(s: IntersectionSnapshot) -> np.ndarray:
    """Snapshot -> 33 floats (27 traffic then 6 weather)."""
    return np.concatenate([s.traffic.flatten(), s.weather.flatten()])


def unflatten_features(
    values: Sequence[float], intersection_id: str, timestamp: dt.datetime, approach_id: str
) -> IntersectionSnapshot:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (N_APPROACH,):
        raise DimensionError(f"expected {N_APPROACH} values, got shape {values.shape}")
    return IntersectionSnapshot(
        intersection_id,
        timestamp,
        approach_id,
        ApproachFeatureVector.unflatten(values[:N_TRAFFIC]),
        WeatherRecord.unflatten(values[N_TRAFFIC:]),
    )


def to_minutes(ts) -> np.ndarray:
    """datetime-like (scalar or array) -> datetime64[m]."""
    return np.asarray(ts, dtype="datetime64[m]")


def to_datetime(ts: np.datetime64) -> dt.datetime:
    return ts.astype("datetime64[m]").astype(dt.datetime)


@dataclass
class SnapshotFrame:
    """Column-oriented collection of snapshots.

    ``values`` rows follow :data:`APPROACH_COLUMNS`.  Iterating yields
    :class:`IntersectionSnapshot` objects.
    """

    intersection: np.ndarray
    approach: np.ndarray
    time: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        n = len(self.values)
        self.intersection = np.asarray(self.intersection, dtype=str)
        self.approach = np.asarray(self.approach, dtype=str)
        self.time = to_minutes(self.time)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(n, N_APPROACH)
        if not (len(self.intersection) == len(self.approach) == len(self.time) == n):
            raise DimensionError("snapshot frame columns have different lengths")

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self) -> Iterator[IntersectionSnapshot]:
        for i in range(len(self)):
            yield self.snapshot(i)

    def snapshot(self, i: int) -> IntersectionSnapshot:
        return unflatten_features(
            self.values[i], str(self.intersection[i]), to_datetime(self.time[i]), str(self.approach[i])
        )

    def select(self, mask) -> "SnapshotFrame":
        return SnapshotFrame(self.intersection[mask], self.approach[mask], self.time[mask], self.values[mask])

    @classmethod
    def from_snapshots(cls, snapshots) -> "SnapshotFrame":
        snapshots = list(snapshots)
        return cls(
            np.array([s.intersection_id for s in snapshots], dtype=str),
            np.array([s.approach_id for s in snapshots], dtype=str),
            to_minutes([s.timestamp for s in snapshots]) if snapshots else np.array([], dtype="datetime64[m]"),
            np.array([flatten_features(s) for s in snapshots]).reshape(len(snapshots), N_APPROACH),
        )

    @classmethod
    def concat(cls, frames: Sequence["SnapshotFrame"]) -> "SnapshotFrame":
        return cls(
            np.concatenate([f.intersection for f in frames]),
            np.concatenate([f.approach for f in frames]),
            np.concatenate([f.time for f in frames]),
            np.concatenate([f.values for f in frames]),
        )
