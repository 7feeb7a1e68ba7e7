"""End-to-end stages shared by the command line and the acceptance suite.

A run is described by a flat :class:`RunConfig`.  Each stage is a pure
function of its inputs and the config's seeds.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import synthgen
from .datamodel import WITHIN, ZONES, CrashEvent, IntersectionGeometry, SnapshotFrame
from .errors import ConfigurationError
from .eval_explain import ConfusionMatrix, confusion, metrics_document
from .models import FAMILIES, InTformerConfig, RecurrentConfig
from .pipeline import (
    ExtraTreesConfig,
    SelectionResult,
    WindowSet,
    correlation_matrix,
    exclude_post_crash,
    extra_trees_importance,
    format_approach,
    format_within_intersection,
    index_crashes,
    select_features,
    smote_resample,
    split_train_test,
    stack_windows,
)
from .trainer import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

ROMAN = {2: "II", 3: "III", 4: "IV"}


@dataclass(frozen=True)
class RunConfig:
    zone: str = WITHIN
    steps: int = 2
    family: str = "intformer"
    # synthetic data
    intersections: str = "INT1,INT2"  # comma-separated roster ids, or "all"
    days: int = 90
    crashes: int = 80
    zone_split_within: int = 338
    zone_split_approach: int = 124
    perturbation: float = 1.0
    # preparation
    corr_threshold: float = 0.5
    et_trees: int = 50
    et_max_samples: int = 20000
    et_max_depth: int = 12
    test_fraction: float = 0.25
    temporal_split: bool = False
    smote_k: int = 5
    # training
    lr: float = 1e-2
    batch_size: int = 256
    epochs: int = 5
    patience: Optional[int] = None
    k: int = 4
    d_model: int = 20
    heads: int = 5
    encoders: int = 1
    d_ff: int = 40
    dropout: float = 0.1
    hidden: int = 32
    channels: int = 32
    kernel: int = 2
    # evaluation and explanation
    threshold: float = 0.5
    explain_windows: int = 20
    explain_permutations: int = 32
    top_k: int = 10
    benchmark_families: str = ",".join(FAMILIES)
    # seeds
    seed_generate: int = 2021
    seed_crashes: int = 2022
    seed_selection: int = 1
    seed_split: int = 2
    seed_smote: int = 3
    seed_train: int = 4
    seed_explain: int = 5

    def __post_init__(self):
        if self.zone not in ZONES:
            raise ConfigurationError(f"zone must be one of {ZONES}, got {self.zone!r}")
        if self.steps not in ROMAN:
            raise ConfigurationError(f"steps must be 2, 3 or 4, got {self.steps}")
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}")
        for fam in self.families():
            if fam not in FAMILIES:
                raise ConfigurationError(f"unknown benchmark family {fam!r}")

    @property
    def run_name(self) -> str:
        return f"{'within' if self.zone == WITHIN else 'approach'}/{ROMAN[self.steps]}"

    def families(self) -> list[str]:
        return [f.strip() for f in self.benchmark_families.split(",") if f.strip()]

    def seeds(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if k.startswith("seed_")}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(doc) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def with_overrides(self, pairs: Sequence[str]) -> "RunConfig":
        """Apply ``seed_name=value`` overrides."""
        changes = {}
        for pair in pairs:
            key, sep, value = pair.partition("=")
            key = key.strip()
            if not sep or not key.startswith("seed_") or key not in self.seeds():
                raise ConfigurationError(f"bad seed override {pair!r}; expected one of {sorted(self.seeds())}=INT")
            try:
                changes[key] = int(value)
            except ValueError:
                raise ConfigurationError(f"seed override {pair!r} is not an integer") from None
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- generation


def roster_geometries(cfg: RunConfig) -> list[IntersectionGeometry]:
    by_id = {e.geometry.intersection_id: e.geometry for e in synthgen.STUDY_ROSTER}
    if cfg.intersections.strip().lower() == "all":
        return list(by_id.values())
    ids = [s.strip() for s in cfg.intersections.split(",") if s.strip()]
    missing = [i for i in ids if i not in by_id]
    if missing or not ids:
        raise ConfigurationError(f"unknown intersections {missing or cfg.intersections!r}")
    return [by_id[i] for i in ids]


def generate(cfg: RunConfig) -> tuple[SnapshotFrame, list[CrashEvent]]:
    """Synthetic snapshots with the configured crashes imprinted (zero crashes allowed)."""
    geos = roster_geometries(cfg)
    frame = synthgen.generate_snapshots(geos, seed=cfg.seed_generate, config=synthgen.GeneratorConfig(days=cfg.days))
    if cfg.crashes == 0:
        return frame, []
    plan = synthgen.CrashInjectionPlan(
        total=cfg.crashes,
        zone_split=(cfg.zone_split_within, cfg.zone_split_approach),
        perturbation=cfg.perturbation,
    )
    return synthgen.inject_crashes(frame, plan, seed=cfg.seed_crashes)


# ---------------------------------------------------------------- preparation


@dataclass
class Prepared:
    train: WindowSet  # SMOTE-balanced
    test: WindowSet  # untouched
    selection: SelectionResult
    stats: dict


def prepare(frame: SnapshotFrame, crashes: Sequence[CrashEvent], cfg: RunConfig) -> Prepared:
    """Format, label, exclude, select features, stack, split and balance."""
    geos = [g for g in roster_geometries(cfg) if g.intersection_id in set(frame.intersection.tolist())]
    if cfg.zone == WITHIN:
        rows = format_within_intersection(frame, geos)
    else:
        rows = format_approach(frame)
    labels = index_crashes(rows, crashes, cfg.zone)
    n_rows = len(rows)
    rows, labels = exclude_post_crash(rows, labels)
    stats = {"rows": n_rows, "rows_after_exclusion": len(rows), "positive_rows": int(labels.sum())}

    R = correlation_matrix(rows.values)
    if stats["positive_rows"] == 0:
        warnings.warn(
            f"no {cfg.zone} crashes label any row: all windows are negative, "
            "feature importance is uniform and SMOTE is skipped",
            stacklevel=2,
        )
        importance = np.full(rows.width, 1.0 / rows.width)
    else:
        et = ExtraTreesConfig(
            n_trees=cfg.et_trees, max_depth=cfg.et_max_depth, max_samples=cfg.et_max_samples, seed=cfg.seed_selection
        )
        importance = extra_trees_importance(rows.values, labels, et)
    selection = select_features(importance, R, rows.columns, cfg.corr_threshold)
    rows = rows.select_columns(selection.kept_columns)
    stats["features_in"] = len(selection.names)
    stats["features_kept"] = len(selection.kept_columns)

    windows = stack_windows(rows, labels, cfg.steps)
    train_ws, test_ws = split_train_test(windows, cfg.test_fraction, cfg.seed_split, cfg.temporal_split)
    stats.update(windows=len(windows), positive_windows=int(windows.y.sum()), test_windows=len(test_ws))
    if train_ws.y.sum() == 0:
        balanced = train_ws
    else:
        balanced = smote_resample(train_ws, cfg.smote_k, cfg.seed_smote, minority=1)
    stats["train_windows"] = len(balanced)
    stats["synthetic_windows"] = int(balanced.synthetic.sum())
    return Prepared(balanced, test_ws, selection, stats)


# ---------------------------------------------------------------- training and evaluation


def model_config(cfg: RunConfig, family: str, n_features: int):
    if family == "intformer":
        return InTformerConfig(cfg.steps, n_features, cfg.k, cfg.d_model, cfg.heads, cfg.encoders, cfg.d_ff, cfg.dropout)
    return RecurrentConfig(cfg.steps, n_features, cfg.hidden, cfg.channels, min(cfg.kernel, cfg.steps))


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(cfg.lr, cfg.batch_size, cfg.epochs, "adam", cfg.seed_train, cfg.patience)


def fit(train_ws: WindowSet, cfg: RunConfig, family: Optional[str] = None) -> TrainResult:
    family = family or cfg.family
    return train(family, train_ws.X, train_ws.y, train_config(cfg), model_config(cfg, family, train_ws.n_features))


def evaluate(result: TrainResult, test_ws: WindowSet, cfg: RunConfig, family: Optional[str] = None) -> dict:
    p = result.predict_proba(test_ws.X)
    cm = confusion(p, test_ws.y, cfg.threshold)
    return metrics_document(
        family or cfg.family, cfg.zone, cfg.steps, cm, cfg.threshold,
        run=cfg.run_name, config_hash=cfg.hash(), seeds=cfg.seeds(),
        final_train_loss=result.loss_history[-1] if result.loss_history else None,
        probabilities_valid=bool(np.all((p >= 0) & (p <= 1)) and np.all(np.isfinite(p))),
    )


def majority_class(test_ws: WindowSet, train_ws: WindowSet, cfg: RunConfig) -> dict:
    """Metrics of always predicting the training split's majority class."""
    real = ~train_ws.synthetic
    majority = int(train_ws.y[real].mean() >= 0.5) if real.any() else 0
    cm = confusion(np.full(len(test_ws), float(majority)), test_ws.y, cfg.threshold)
    return metrics_document("majority_class", cfg.zone, cfg.steps, cm, cfg.threshold, run=cfg.run_name, config_hash=cfg.hash())


def confusion_of(doc: dict) -> ConfusionMatrix:
    c = doc["counts"]
    return ConfusionMatrix(c["tp"], c["fp"], c["fn"], c["tn"])
