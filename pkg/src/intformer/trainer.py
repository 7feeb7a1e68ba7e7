"""Normalization, binary cross-entropy, Adam and the mini-batch training loop."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError, DimensionError, TrainingDivergedError
from .models import InTformerConfig, Model, RecurrentConfig, build_model
from .numcore import Tensor

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8
PROB_CLIP = 1e-12


@dataclass
class Normalizer:
    """Per-feature z-score statistics pooled over windows and timesteps."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X) -> "Normalizer":
        X = np.asarray(X, dtype=np.float64)
        flat = X.reshape(-1, X.shape[-1])
        return cls(flat.mean(axis=0), np.maximum(flat.std(axis=0), STD_FLOOR))

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def inverse(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def bce_loss(p, y) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped away from 0 and 1."""
    p = nc.clip(nc.as_tensor(p), PROB_CLIP, 1.0 - PROB_CLIP)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.shape:
        raise DimensionError(f"labels {y.shape} and probabilities {p.shape} differ in shape")
    return -nc.mean(y * nc.log(p) + (1.0 - y) * nc.log(1.0 - p))


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"gradient {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 10
    optimizer: str = "adam"
    seed: int = 0
    patience: Optional[int] = None
    min_delta: float = 0.0  # improvement needed to reset patience

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch size and epochs must be >= 1")
        if self.optimizer != "adam":
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class Preset:
    train: TrainConfig
    heads: int
    encoders: int


# tuned hyperparameters per (zone, window length); heads=5 needs d_model divisible by 5
TUNED_PRESETS = {
    ("within_intersection", 2): Preset(TrainConfig(1e-5, 500, 50), 5, 3),
    ("within_intersection", 3): Preset(TrainConfig(1e-4, 1000, 50), 5, 3),
    ("within_intersection", 4): Preset(TrainConfig(1e-4, 1000, 100), 5, 3),
    ("approach", 2): Preset(TrainConfig(1e-5, 1000, 50), 5, 3),
    ("approach", 3): Preset(TrainConfig(1e-5, 1000, 100), 5, 3),
    ("approach", 4): Preset(TrainConfig(1e-4, 1000, 100), 5, 4),
}
PRESET_D_MODEL = 80
PRESET_D_FF = 160


def preset_model_config(zone: str, steps: int, n_features: int, **overrides) -> InTformerConfig:
    p = TUNED_PRESETS[(zone, steps)]
    kw = dict(steps=steps, n_features=n_features, d_model=PRESET_D_MODEL, d_ff=PRESET_D_FF, heads=p.heads, encoders=p.encoders)
    kw.update(overrides)
    return InTformerConfig(**kw)


@dataclass
class TrainResult:
    model: Model
    normalizer: Normalizer
    config: TrainConfig

    @property
    def loss_history(self) -> list:
        return self.model.loss_history

    def predict_proba(self, X) -> np.ndarray:
        return self.model.predict_proba(self.normalizer.transform(X))

    def to_json(self, extra: Optional[dict] = None) -> str:
        doc = {"normalizer": self.normalizer.to_dict(), "train_config": dataclasses.asdict(self.config)}
        doc.update(extra or {})
        return self.model.to_json(doc)

    @classmethod
    def from_json(cls, text: str) -> "TrainResult":
        doc = json.loads(text)
        return cls(Model.from_json(text), Normalizer.from_dict(doc["normalizer"]), TrainConfig(**doc["train_config"]))


def default_model_config(family: str, steps: int, n_features: int, **overrides):
    if family == "intformer":
        return InTformerConfig(steps=steps, n_features=n_features, **overrides)
    return RecurrentConfig(steps=steps, n_features=n_features, **overrides)


def train(
    family: str,
    X,
    y,
    cfg: TrainConfig = TrainConfig(),
    model_config=None,
) -> TrainResult:
    """Fit a model family on (already balanced) training windows.

    The normalizer is fit on ``X`` only.  Mini-batches are reshuffled each
    epoch from a generator seeded by ``cfg.seed``; dropout draws from the same
    generator, so the result is a deterministic function of the inputs.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 3 or len(X) != len(y):
        raise DimensionError(f"expected (N, T, F) windows and N labels, got {X.shape} and {y.shape}")
    if len(X) == 0:
        raise ConfigurationError("no training windows")
    norm = Normalizer.fit(X)
    Z = norm.transform(X)
    if model_config is None:
        model_config = default_model_config(family, X.shape[1], X.shape[2])
    model = build_model(family, model_config, seed=cfg.seed)
    params = list(model.parameters().values())
    for p in params:
        p.requires_grad = True
    state = AdamState()
    rng = np.random.default_rng(cfg.seed + 1)
    best, stale = np.inf, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(Z))
        total = 0.0
        for b, start in enumerate(range(0, len(Z), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            with nc.GradTape() as tape:
                loss = bce_loss(model.forward(Tensor(Z[idx]), "train", rng), y[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, b, value)
            adam_step(params, tape.gradient(loss, params), state, cfg.lr)
            total += value * len(idx)
        model.loss_history.append(total / len(Z))
        log.info("%s epoch %d loss %.6f", family, epoch + 1, model.loss_history[-1])
        if cfg.patience is not None:
            if model.loss_history[-1] < best - cfg.min_delta:
                best, stale = model.loss_history[-1], 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    return TrainResult(model, norm, cfg)


def loss_csv(history: Sequence[float], config_hash: Optional[str] = None) -> str:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean_train_loss"])
    for i, v in enumerate(history, 1):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()
