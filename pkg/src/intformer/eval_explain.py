"""Confusion-matrix metrics and Shapley attributions over (timestep, feature) cells."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, SizeError, UndefinedMetricError

MAX_EXACT_PLAYERS = 12

Predictor = Callable[[np.ndarray], np.ndarray]  # (B, T, F) -> (B,) probabilities


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion(probabilities, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Tally predictions (crash iff p >= threshold) against binary labels."""
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if len(p) != len(y):
        raise DimensionError(f"{len(p)} predictions but {len(y)} labels")
    pred = p >= threshold
    pos = y == 1
    return ConfusionMatrix(
        int(np.sum(pred & pos)), int(np.sum(pred & ~pos)), int(np.sum(~pred & pos)), int(np.sum(~pred & ~pos))
    )


def sensitivity(cm: ConfusionMatrix) -> float:
    """TP / (TP + FN)."""
    if cm.tp + cm.fn == 0:
        raise UndefinedMetricError("sensitivity is undefined without positive labels")
    return cm.tp / (cm.tp + cm.fn)


def false_alarm_rate(cm: ConfusionMatrix) -> float:
    """FP / (FP + TN)."""
    if cm.fp + cm.tn == 0:
        raise UndefinedMetricError("false alarm rate is undefined without negative labels")
    return cm.fp / (cm.fp + cm.tn)


def metrics_document(model: str, zone: str, stacking: int, cm: ConfusionMatrix, threshold: float = 0.5, **extra) -> dict:
    def rate(fn):
        try:
            return fn(cm)
        except UndefinedMetricError:
            return None

    doc = {
        "model": model,
        "zone": zone,
        "stacking": stacking,
        "sensitivity": rate(sensitivity),
        "false_alarm_rate": rate(false_alarm_rate),
        "threshold": threshold,
        "counts": cm.to_dict(),
    }
    doc.update(extra)
    return doc


def metrics_json(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------- Shapley values


def _players(window: np.ndarray, players) -> list[tuple[int, int]]:
    if players is None:
        T, F = window.shape
        return [(t, f) for t in range(T) for f in range(F)]
    out = [(int(t), int(f)) for t, f in players]
    if len(set(out)) != len(out):
        raise ConfigurationError("duplicate players")
    return out


def _prepare(window, baseline):
    x = np.asarray(window, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"explain one (T, F) window at a time, got {x.shape}")
    b = np.broadcast_to(b, x.shape)
    return x, b


def _coalition_inputs(x, b, players, masks) -> np.ndarray:
    """Batch of windows where player j takes x if masks[:, j] else the baseline."""
    batch = np.broadcast_to(b, (len(masks),) + x.shape).copy()
    for j, (t, f) in enumerate(players):
        batch[masks[:, j], t, f] = x[t, f]
    return batch


def shapley_exact(predict: Predictor, window, baseline, players=None) -> np.ndarray:
    """Shapley values by enumerating every coalition of players.

    Players absent from a coalition take their baseline value; cells that are
    not players keep the window's value throughout.
    """
    x, b = _prepare(window, baseline)
    players = _players(x, players)
    n = len(players)
    if n > MAX_EXACT_PLAYERS:
        raise SizeError(f"{n} players exceed the exact limit of {MAX_EXACT_PLAYERS}; use shapley_sampled")
    codes = np.arange(2**n)
    masks = ((codes[:, None] >> np.arange(n)) & 1).astype(bool)
    values = np.asarray(predict(_coalition_inputs(x, b, players, masks)), dtype=np.float64)
    sizes = masks.sum(axis=1)
    weight = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)])
    phi = np.zeros(n)
    for j in range(n):
        without = codes[~masks[:, j]]
        phi[j] = np.sum(weight[sizes[without]] * (values[without | (1 << j)] - values[without]))
    return phi


@dataclass
class SampledShapley:
    values: np.ndarray
    stderr: np.ndarray
    efficiency_residual: float
    n_permutations: int


def shapley_sampled(
    predict: Predictor, window, baseline, n_permutations: int = 64, seed: int = 0, players=None
) -> SampledShapley:
    """Permutation-sampling estimate of the Shapley values.

    Each sampled ordering switches players from baseline to their window value
    one at a time and credits each with its marginal change.
    """
    if n_permutations < 1:
        raise ConfigurationError("n_permutations must be >= 1")
    x, b = _prepare(window, baseline)
    players = _players(x, players)
    n = len(players)
    rng = np.random.default_rng(seed)
    orders = np.array([rng.permutation(n) for _ in range(n_permutations)])
    # masks[p, s, j]: player j switched on after s steps of ordering p
    rank = np.argsort(orders, axis=1)
    steps = np.arange(n + 1)
    masks = rank[:, None, :] < steps[None, :, None]
    values = np.asarray(predict(_coalition_inputs(x, b, players, masks.reshape(-1, n))), dtype=np.float64)
    values = values.reshape(n_permutations, n + 1)
    gains = np.diff(values, axis=1)  # gains[p, s] belongs to player orders[p, s]
    contrib = np.zeros((n_permutations, n))
    np.put_along_axis(contrib, orders, gains, axis=1)
    phi = contrib.mean(axis=0)
    if n_permutations > 1:
        stderr = contrib.std(axis=0, ddof=1) / np.sqrt(n_permutations)
    else:
        stderr = np.zeros(n)
    fx, fb = values[0, -1], values[0, 0]
    return SampledShapley(phi, stderr, float(abs(phi.sum() - (fx - fb))), n_permutations)


# ---------------------------------------------------------------- reports


@dataclass
class AttributionReport:
    """Shapley values for a set of explained windows.

    ``phi`` and ``values`` are (W, T, F); ``lags[t]`` counts 15-minute steps
    back from the final interval (0 = the interval just before the horizon).
    """

    phi: np.ndarray
    values: np.ndarray
    feature_names: tuple
    window_ids: np.ndarray

    @property
    def steps(self) -> int:
        return self.phi.shape[1]

    @property
    def lags(self) -> np.ndarray:
        return np.arange(self.steps)[::-1]

    def importance(self) -> np.ndarray:
        """Mean |phi| per (timestep, feature)."""
        return np.abs(self.phi).mean(axis=0)

    def top_features(self, k: int = 10) -> dict[int, list[tuple[str, float]]]:
        """Top-k features per lag by mean |phi| (ties keep column order)."""
        imp = self.importance()
        out = {}
        for t, lag in enumerate(self.lags):
            order = np.argsort(-imp[t], kind="stable")[:k]
            out[int(lag)] = [(self.feature_names[i], float(imp[t, i])) for i in order]
        return out


def explain_windows(
    predict: Predictor,
    windows,
    baseline,
    feature_names: Sequence[str],
    method: str = "sampled",
    n_permutations: int = 64,
    seed: int = 0,
    window_ids=None,
) -> AttributionReport:
    """Attribute every cell of each window; ``method`` is ``exact`` or ``sampled``."""
    X = np.asarray(windows, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != len(feature_names):
        raise DimensionError(f"windows {X.shape} do not match {len(feature_names)} feature names")
    phi = np.zeros_like(X)
    for w in range(len(X)):
        if method == "exact":
            vals = shapley_exact(predict, X[w], baseline)
        elif method == "sampled":
            vals = shapley_sampled(predict, X[w], baseline, n_permutations, seed + w).values
        else:
            raise ConfigurationError(f"unknown attribution method {method!r}")
        phi[w] = vals.reshape(X.shape[1:])
    ids = np.arange(len(X)) if window_ids is None else np.asarray(window_ids)
    return AttributionReport(phi, X.copy(), tuple(feature_names), ids)


def summary_rows(report: AttributionReport, top_k: int = 10, split_by_timestep: bool = True) -> list[tuple]:
    """Rows (lag, feature, window_id, shap_value, feature_value) for the top-k cells.

    With ``split_by_timestep`` the ranking is made separately for each lag;
    otherwise over all cells jointly.
    """
    if report.phi.size == 0:
        raise ConfigurationError("empty attribution report")
    imp = report.importance()
    if split_by_timestep:
        cells = [(t, i) for t in range(report.steps) for i in np.argsort(-imp[t], kind="stable")[:top_k]]
    else:
        flat = np.argsort(-imp.ravel(), kind="stable")[:top_k]
        cells = [divmod(int(c), imp.shape[1]) for c in flat]
    rows = []
    for t, i in cells:
        for w, wid in enumerate(report.window_ids):
            rows.append((int(report.lags[t]), report.feature_names[i], int(wid), float(report.phi[w, t, i]), float(report.values[w, t, i])))
    return rows


def summary_export(report: AttributionReport, top_k: int = 10, split_by_timestep: bool = True, config_hash: Optional[str] = None) -> str:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestep", "feature", "window_id", "shap_value", "feature_value"])
    for lag, name, wid, phi, value in summary_rows(report, top_k, split_by_timestep):
        w.writerow([lag, name, wid, repr(phi), repr(value)])
    return buf.getvalue()
