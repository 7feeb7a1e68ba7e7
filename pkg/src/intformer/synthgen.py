"""Seeded synthetic connected-vehicle year with injected crashes.

Marginals are calibrated to published per-feature moments and ranges; the
real feeds are proprietary.  Families:

* ``truncnorm``   - speeds, travel times, delays and continuous weather; the
  location is solved so the *truncated* mean hits the target.
* ``excess``      - maximum-type aggregates: average + |N(0, s)|, so that
  max >= average holds by construction.
* ``zip``         - zero-inflated Poisson split-failure counts.
* ``beta``        - split-failure percentage, Beta on [0, 100].
* ``pog``         - percent on green from simulated vehicle counts.
* ``zi_exp``      - zero-inflated exponential precipitation.
* ``bernoulli``   - abnormal-weather flag.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import optimize, stats

from .datamodel import (
    APPROACH,
    APPROACH_COLUMNS,
    INTERVALS_PER_DAY,
    MOVEMENTS,
    WITHIN,
    YEAR_START,
    CrashEvent,
    IntersectionGeometry,
    SnapshotFrame,
    to_datetime,
)
from .errors import CapacityError, ConfigurationError, UndefinedPOGError

HALF_NORMAL_MEAN = math.sqrt(2.0 / math.pi)
POG_VEHICLES_PER_INTERVAL = 20.0

# name: (mean, std, min, max, family) -- approach "A" rows of the descriptive statistics table
_TABLE = {
    "ASA_L": (30.13, 5.43, 11.0, 77.0, "truncnorm"),
    "ASA_T": (34.87, 7.2, 9.0, 103.0, "truncnorm"),
    "ASA_R": (31.89, 5.29, 6.0, 102.0, "truncnorm"),
    "ASM_L": (31.39, 5.68, 11.0, 78.0, "excess"),
    "ASM_T": (42.26, 11.85, 9.0, 147.0, "excess"),
    "ASM_R": (33.34, 5.51, 6.0, 100.0, "excess"),
    "TTA_L": (71.53, 45.85, 8.0, 532.0, "truncnorm"),
    "TTA_T": (45.32, 34.32, 5.0, 500.0, "truncnorm"),
    "TTA_R": (32.71, 21.8, 7.0, 413.0, "truncnorm"),
    "TTM_L": (82.16, 55.24, 8.0, 556.0, "excess"),
    "TTM_T": (68.59, 43.11, 5.0, 570.0, "excess"),
    "TTM_R": (37.52, 27.9, 7.0, 489.0, "excess"),
    "CDA_L": (57.94, 45.0, 1.0, 378.0, "truncnorm"),
    "CDA_T": (34.58, 32.39, 0.0, 491.0, "truncnorm"),
    "CDA_R": (17.37, 21.83, 0.0, 395.0, "truncnorm"),
    "CDM_L": (68.4, 54.3, 1.0, 543.0, "excess"),
    "CDM_T": (57.83, 43.04, 1.0, 559.0, "excess"),
    "CDM_R": (22.27, 28.01, 1.0, 473.0, "excess"),
    "SFC_L": (0.09, 0.37, 0.0, 8.0, "zip"),
    "SFC_T": (0.02, 0.19, 0.0, 9.0, "zip"),
    "SFC_R": (0.04, 0.23, 0.0, 7.0, "zip"),
    "SFP_L": (3.0, 12.0, 0.0, 100.0, "beta"),
    "SFP_T": (1.0, 5.0, 0.0, 100.0, "beta"),
    "SFP_R": (1.0, 6.0, 0.0, 100.0, "beta"),
    "POG_L": (22.0, 32.0, 0.0, 100.0, "pog"),
    "POG_T": (54.0, 36.0, 0.0, 100.0, "pog"),
    "POG_R": (69.0, 34.0, 0.0, 100.0, "pog"),
    "Temperature": (74.82, 11.19, 41.5, 95.0, "truncnorm"),
    "Relative_Humidity": (68.51, 17.56, 20.6, 100.0, "truncnorm"),
    "Wind_Speed": (5.89, 3.73, 0.0, 19.9, "truncnorm"),
    "Precipitation": (0.0, 0.04, 0.0, 0.72, "zi_exp"),
    "Visibility": (9.56, 1.11, 0.6, 9.9, "truncnorm"),
    "Conditions": (0.18, 0.38, 0.0, 1.0, "bernoulli"),
}

FAMILIES = ("truncnorm", "excess", "zip", "beta", "pog", "zi_exp", "bernoulli")

# average-type feature each maximum-type feature is built on
_EXCESS_BASE = {f"{mx}_{mv}": f"{avg}_{mv}" for mx, avg in (("ASM", "ASA"), ("TTM", "TTA"), ("CDM", "CDA")) for mv in MOVEMENTS}

# sign of the peak-hour shift applied to a feature (speeds drop, times/delays rise)
_DIURNAL_SIGN = {
    **{f"ASA_{mv}": -1.0 for mv in MOVEMENTS},
    **{f"{m}_{mv}": 1.0 for m in ("TTA", "CDA") for mv in MOVEMENTS},
    "Temperature": 1.0,
}


@dataclass(frozen=True)
class FeatureStats:
    mean: float
    std: float
    min: float
    max: float
    family: str

    def __post_init__(self):
        if not (self.min <= self.mean <= self.max) or self.std < 0:
            raise ConfigurationError(f"inconsistent calibration {self}")
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown distribution family {self.family!r}")


@dataclass(frozen=True)
class FeatureCalibration:
    """Per-feature target moments and ranges keyed by approach-level feature name."""

    features: Mapping[str, FeatureStats]

    def __post_init__(self):
        missing = set(APPROACH_COLUMNS) - set(self.features)
        if missing:
            raise ConfigurationError(f"calibration lacks features {sorted(missing)}")

    def __getitem__(self, name: str) -> FeatureStats:
        return self.features[name]

    @classmethod
    def default(cls) -> "FeatureCalibration":
        return cls({k: FeatureStats(*v) for k, v in _TABLE.items()})

    @classmethod
    def from_json(cls, text_or_doc) -> "FeatureCalibration":
        doc = json.loads(text_or_doc) if isinstance(text_or_doc, str) else text_or_doc
        base = {k: asdict(v) for k, v in cls.default().features.items()}
        for name, entry in doc.items():
            if name not in base:
                raise ConfigurationError(f"unknown feature {name!r} in calibration")
            base[name].update(entry)
        return cls({k: FeatureStats(**v) for k, v in base.items()})

    def to_json(self) -> str:
        return json.dumps({k: asdict(self.features[k]) for k in APPROACH_COLUMNS}, indent=2)

    def stds(self, names: Sequence[str]) -> np.ndarray:
        return np.array([self.features[n].std for n in names])


@dataclass(frozen=True)
class RosterEntry:
    geometry: IntersectionGeometry
    name: str
    crash_count: int


FOUR_LEGS = ("N", "E", "S", "W")
THREE_LEGS = ("N", "E", "W")

STUDY_ROSTER = (
    RosterEntry(IntersectionGeometry("INT1", 4, FOUR_LEGS), "East Hillsborough Avenue", 75),
    RosterEntry(IntersectionGeometry("INT2", 4, FOUR_LEGS), "West Brandon Boulevard & Brandon Town Center Drive", 66),
    RosterEntry(IntersectionGeometry("INT3", 4, FOUR_LEGS), "East Dr. Martin Luther King Jr Boulevard & North Marguerite Street", 60),
    RosterEntry(IntersectionGeometry("INT4", 3, THREE_LEGS), "Polk City Road & US 27", 57),
    RosterEntry(IntersectionGeometry("INT5", 4, FOUR_LEGS), "East Hillsborough Avenue & North Nebraska Avenue", 54),
    RosterEntry(IntersectionGeometry("INT6", 3, THREE_LEGS), "Glen Este Boulevard & US 27", 51),
    RosterEntry(IntersectionGeometry("INT7", 4, FOUR_LEGS), "East Dr. Martin Luther King Jr Boulevard & US 301", 50),
    RosterEntry(IntersectionGeometry("INT8", 4, FOUR_LEGS), "West Columbus Drive & North Dale Mabry Highway", 49),
)


def study_geometries() -> list[IntersectionGeometry]:
    return [e.geometry for e in STUDY_ROSTER]


@dataclass(frozen=True)
class CrashInjectionPlan:
    """How many crashes to inject, their zone split and their traffic signature.

    In the two intervals before a crash, average/maximum approach speeds are
    raised and percent-on-green lowered by ``perturbation`` standard deviations.
    """

    total: int = 462
    zone_split: tuple = (338, 124)
    perturbation: float = 1.0
    raised: tuple = ("ASA", "ASM")
    lowered: tuple = ("POG",)
    intersection_weights: Optional[Mapping[str, float]] = None

    def __post_init__(self):
        if self.total < 1:
            raise ConfigurationError("crash plan needs total >= 1")
        if len(self.zone_split) != 2 or min(self.zone_split) < 0 or sum(self.zone_split) == 0:
            raise ConfigurationError(f"bad zone split {self.zone_split}")

    def zone_counts(self) -> tuple[int, int]:
        within = round(self.total * self.zone_split[0] / sum(self.zone_split))
        return within, self.total - within


@dataclass
class GeneratorConfig:
    days: int = 365
    start: dt.datetime = YEAR_START
    diurnal_amplitude: float = 0.3  # in feature std units
    calibration: FeatureCalibration = field(default_factory=FeatureCalibration.default)


# ---------------------------------------------------------------- calibration solving


def _solve_truncnorm_loc(target_mean: float, scale: float, lo: float, hi: float) -> float:
    """Location whose [lo, hi]-truncated normal has mean ``target_mean``."""
    if scale == 0:
        return target_mean

    def gap(loc):
        return stats.truncnorm.mean((lo - loc) / scale, (hi - loc) / scale, loc=loc, scale=scale) - target_mean

    left, right = lo - 20 * scale, hi + 20 * scale
    return float(optimize.brentq(gap, left, right, xtol=1e-10))


def _beta_params(mean: float, std: float, span: float) -> tuple[float, float]:
    m, v = mean / span, (std / span) ** 2
    common = m * (1 - m) / v - 1
    if common <= 0:
        raise ConfigurationError(f"beta moments infeasible for mean={mean}, std={std}")
    return m * common, (1 - m) * common


def _zip_params(mean: float, std: float) -> tuple[float, float]:
    """(zero-inflation probability, Poisson rate) matching mean and variance."""
    ratio = std**2 / mean  # = 1 + pi * lam
    if ratio <= 1:
        return 0.0, mean
    extra = ratio - 1
    lam = mean + extra
    return extra / lam, lam


def pog_from_counts(total, stopped):
    """Percent of vehicles that passed without stopping: (total - stopped) / total * 100."""
    total = np.asarray(total)
    stopped = np.asarray(stopped)
    if np.any(total <= 0):
        raise UndefinedPOGError("percent on green is undefined for an interval with zero vehicles")
    if np.any(stopped < 0) or np.any(stopped > total):
        raise ConfigurationError("stopped count must lie in [0, total]")
    out = (total - stopped) / total * 100.0
    return float(out) if out.ndim == 0 else out


class _Sampler:
    def __init__(self, calibration: FeatureCalibration):
        self.cal = calibration
        self.loc = {}
        for name in APPROACH_COLUMNS:
            s = calibration[name]
            if s.family == "truncnorm":
                self.loc[name] = _solve_truncnorm_loc(s.mean, s.std, s.min, s.max)

    def truncnorm(self, rng, name, shift):
        s = self.cal[name]
        if s.std == 0:
            return np.full(shift.shape, s.mean)
        loc = self.loc[name] + shift
        return stats.truncnorm.rvs((s.min - loc) / s.std, (s.max - loc) / s.std, loc=loc, scale=s.std, random_state=rng)

    def excess(self, rng, name, base, base_max):
        s, b = self.cal[name], self.cal[_EXCESS_BASE[name]]
        scale = max(s.mean - b.mean, 0.0) / HALF_NORMAL_MEAN
        base = np.minimum(base, base_max)
        out = np.clip(base + np.abs(rng.normal(0.0, scale, size=base.shape)), s.min, s.max)
        return np.maximum(out, base)

    def zip(self, rng, name, n):
        s = self.cal[name]
        pi, lam = _zip_params(s.mean, s.std)
        counts = rng.poisson(lam, size=n) * (rng.random(n) >= pi)
        return np.clip(counts, s.min, s.max).astype(np.float64)

    def beta(self, rng, name, n):
        s = self.cal[name]
        a, b = _beta_params(s.mean, s.std, 100.0)
        return np.clip(rng.beta(a, b, size=n) * 100.0, s.min, s.max)

    def pog(self, rng, name, n):
        s = self.cal[name]
        a, b = _beta_params(s.mean, s.std, 100.0)
        p_green = rng.beta(a, b, size=n)
        total = rng.poisson(POG_VEHICLES_PER_INTERVAL, size=n)
        while np.any(total == 0):  # POG undefined without vehicles: re-draw
            empty = total == 0
            total[empty] = rng.poisson(POG_VEHICLES_PER_INTERVAL, size=int(empty.sum()))
        stopped = rng.binomial(total, 1.0 - p_green)
        return np.clip(pog_from_counts(total, stopped), s.min, s.max)

    def zi_exp(self, rng, name, n):
        s = self.cal[name]
        # a reported mean of exactly 0 is a rounded small positive mean
        mean = max(s.mean, 0.05 * s.std)
        scale = (s.std**2 + mean**2) / (2.0 * mean)
        wet = rng.random(n) < mean / scale
        return np.clip(np.where(wet, rng.exponential(scale, size=n), 0.0), s.min, s.max)

    def bernoulli(self, rng, name, n):
        return (rng.random(n) < self.cal[name].mean).astype(np.float64)


def _diurnal(times: np.ndarray) -> np.ndarray:
    minute_of_day = (times - times.astype("datetime64[D]")).astype(np.int64)
    # peaks near 17:00, troughs near 05:00
    return np.sin(2.0 * np.pi * (minute_of_day - 11 * 60) / 1440.0)


def _derive_seed(seed: int, *keys) -> np.random.Generator:
    material = [seed] + [int.from_bytes(str(k).encode(), "little") % (1 << 63) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(material))


def _timeline(config: GeneratorConfig) -> np.ndarray:
    n = config.days * INTERVALS_PER_DAY
    start = np.datetime64(config.start, "m")
    return start + np.arange(n) * np.timedelta64(15, "m")


def _weather(sampler: _Sampler, rng, times, amplitude):
    n = len(times)
    diurnal = _diurnal(times)
    cols = []
    for name in APPROACH_COLUMNS[27:]:
        fam = sampler.cal[name].family
        if fam == "truncnorm":
            shift = amplitude * sampler.cal[name].std * _DIURNAL_SIGN.get(name, 0.0) * diurnal
            cols.append(sampler.truncnorm(rng, name, shift))
        else:
            cols.append(getattr(sampler, fam)(rng, name, n))
    return np.column_stack(cols)


def _traffic(sampler: _Sampler, rng, times, amplitude):
    n = len(times)
    diurnal = _diurnal(times)
    cols = {}
    for name in APPROACH_COLUMNS[:27]:
        fam = sampler.cal[name].family
        if fam == "truncnorm":
            shift = amplitude * sampler.cal[name].std * _DIURNAL_SIGN.get(name, 0.0) * diurnal
            cols[name] = sampler.truncnorm(rng, name, shift)
        elif fam == "excess":
            base = _EXCESS_BASE[name]
            cols[name] = sampler.excess(rng, name, cols[base], sampler.cal[name].max)
            cols[base] = np.minimum(cols[base], cols[name])
        else:
            cols[name] = getattr(sampler, fam)(rng, name, n)
    return np.column_stack([cols[name] for name in APPROACH_COLUMNS[:27]])


def generate_snapshots(
    geometries: Sequence[IntersectionGeometry], seed: int, config: Optional[GeneratorConfig] = None
) -> SnapshotFrame:
    """Every approach of every intersection at every 15-minute step.

    Rows are ordered by intersection, then approach, then time.  Weather is
    shared by the approaches of one intersection.  Each (intersection,
    approach) stream draws from its own generator derived from ``seed``.
    """
    geometries = list(geometries)
    if not geometries:
        raise ConfigurationError("at least one intersection geometry is required")
    config = config or GeneratorConfig()
    if config.days < 1:
        raise ConfigurationError("days must be >= 1")
    sampler = _Sampler(config.calibration)
    times = _timeline(config)
    n = len(times)
    frames = []
    for geo in geometries:
        weather = _weather(sampler, _derive_seed(seed, geo.intersection_id, "weather"), times, config.diurnal_amplitude)
        for leg in geo.approaches:
            traffic = _traffic(sampler, _derive_seed(seed, geo.intersection_id, leg), times, config.diurnal_amplitude)
            frames.append(
                SnapshotFrame(
                    np.full(n, geo.intersection_id),
                    np.full(n, leg),
                    times,
                    np.hstack([traffic, weather]),
                )
            )
    return SnapshotFrame.concat(frames)


def expected_snapshot_count(geometries: Sequence[IntersectionGeometry], days: int = 365) -> int:
    return sum(g.leg_count for g in geometries) * days * INTERVALS_PER_DAY


# ---------------------------------------------------------------- crashes


def _column_indices(prefixes: Sequence[str]) -> np.ndarray:
    return np.array([i for i, c in enumerate(APPROACH_COLUMNS) if c.split("_")[0] in prefixes], dtype=int)


def label_steps(crash_time: np.datetime64) -> tuple[np.datetime64, np.datetime64]:
    """The two 15-minute steps preceding a crash: last aligned step strictly before it, and the one before."""
    minutes = int(np.datetime64(crash_time, "m").astype(np.int64))
    first = np.datetime64(((minutes - 1) // 15) * 15, "m")
    return first, first - np.timedelta64(15, "m")


def inject_crashes(
    snapshots: SnapshotFrame,
    plan: CrashInjectionPlan,
    seed: int,
    calibration: Optional[FeatureCalibration] = None,
) -> tuple[SnapshotFrame, list[CrashEvent]]:
    """Place ``plan.total`` crashes and imprint their pre-crash traffic signature.

    Returns a perturbed copy of ``snapshots`` and the crash list ordered by
    time.  Crashes occupy distinct (intersection, 15-minute step) slots.
    """
    calibration = calibration or FeatureCalibration.default()
    rng = _derive_seed(seed, "crashes")
    ids = sorted(set(snapshots.intersection.tolist()))
    legs = {i: sorted(set(snapshots.approach[snapshots.intersection == i].tolist())) for i in ids}
    times = np.unique(snapshots.time)
    n_steps = len(times)
    # a crash in step s labels s and s-1, so s starts at 1
    slots_per_int = max(n_steps - 1, 0)
    capacity = len(ids) * slots_per_int
    if plan.total > capacity:
        raise CapacityError(f"{plan.total} crashes requested but only {capacity} distinct slots exist")

    weights = np.ones(len(ids))
    if plan.intersection_weights is not None:
        weights = np.array([float(plan.intersection_weights.get(i, 0.0)) for i in ids])
    else:
        roster = {e.geometry.intersection_id: e.crash_count for e in STUDY_ROSTER}
        if all(i in roster for i in ids):
            weights = np.array([roster[i] for i in ids], dtype=float)
    slot_p = np.repeat(weights / weights.sum(), slots_per_int) / slots_per_int
    chosen = rng.choice(capacity, size=plan.total, replace=False, p=slot_p)
    int_idx, step_idx = np.divmod(chosen, slots_per_int)
    step_idx = step_idx + 1
    offsets = rng.integers(1, 15, size=plan.total)  # minutes into the following interval
    n_within, _ = plan.zone_counts()
    zone_is_within = np.zeros(plan.total, dtype=bool)
    zone_is_within[rng.permutation(plan.total)[:n_within]] = True
    leg_draw = rng.random(plan.total)

    events = []
    for j in range(plan.total):
        iid = ids[int_idx[j]]
        t = times[step_idx[j]] + np.timedelta64(int(offsets[j]), "m")
        if zone_is_within[j]:
            events.append(CrashEvent(iid, WITHIN, to_datetime(t)))
        else:
            leg = legs[iid][int(leg_draw[j] * len(legs[iid]))]
            events.append(CrashEvent(iid, APPROACH, to_datetime(t), leg))
    events.sort(key=lambda e: (e.timestamp, e.intersection_id, e.approach_id or ""))

    perturbed = apply_crash_signal(snapshots, events, plan, calibration)
    return perturbed, events


def apply_crash_signal(
    snapshots: SnapshotFrame,
    events: Sequence[CrashEvent],
    plan: CrashInjectionPlan,
    calibration: FeatureCalibration,
) -> SnapshotFrame:
    """Shift the two pre-crash intervals of every affected approach."""
    values = snapshots.values.copy()
    up, down = _column_indices(plan.raised), _column_indices(plan.lowered)
    stds = calibration.stds(APPROACH_COLUMNS)
    lo = np.array([calibration[c].min for c in APPROACH_COLUMNS])
    hi = np.array([calibration[c].max for c in APPROACH_COLUMNS])
    hit = np.zeros(len(values), dtype=bool)
    for ev in events:
        s1, s2 = label_steps(np.datetime64(ev.timestamp, "m"))
        mask = (snapshots.intersection == ev.intersection_id) & ((snapshots.time == s1) | (snapshots.time == s2))
        if ev.zone == APPROACH:
            mask &= snapshots.approach == ev.approach_id
        hit |= mask
    rows = np.flatnonzero(hit)
    values[np.ix_(rows, up)] += plan.perturbation * stds[up]
    values[np.ix_(rows, down)] -= plan.perturbation * stds[down]
    values[rows] = np.clip(values[rows], lo, hi)
    # keep maximum >= average after clipping
    for mx, avg in (("ASM", "ASA"), ("TTM", "TTA"), ("CDM", "CDA")):
        for mv in MOVEMENTS:
            i, k = APPROACH_COLUMNS.index(f"{mx}_{mv}"), APPROACH_COLUMNS.index(f"{avg}_{mv}")
            values[rows, k] = np.minimum(values[rows, k], values[rows, i])
    return SnapshotFrame(snapshots.intersection, snapshots.approach, snapshots.time, values)
