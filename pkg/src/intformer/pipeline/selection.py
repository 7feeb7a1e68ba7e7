"""Correlation, extra-trees feature importance and greedy feature selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigurationError, DegenerateLabelsError, DimensionError


def pearson_r(x, y) -> float:
    """Product-moment correlation; 0 when either series is constant."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) != len(y):
        raise DimensionError(f"series lengths differ: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise DimensionError("need at least two observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return 0.0
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def correlation_matrix(X) -> np.ndarray:
    """Pairwise Pearson r over the columns of X (constant columns get r = 0, diagonal 1)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise DimensionError(f"expected an (n >= 2, p) matrix, got {X.shape}")
    D = X - X.mean(axis=0)
    ss = np.einsum("ij,ij->j", D, D)
    scale = np.sqrt(ss)
    constant = ss == 0.0
    scale[constant] = 1.0
    Z = D / scale
    R = np.clip(Z.T @ Z, -1.0, 1.0)
    R[constant, :] = 0.0
    R[:, constant] = 0.0
    np.fill_diagonal(R, 1.0)
    return R


@dataclass(frozen=True)
class ExtraTreesConfig:
    n_trees: int = 50
    max_features: object = "sqrt"  # "sqrt", "all", an int, or a fraction in (0, 1]
    max_depth: Optional[int] = 12
    min_samples_split: int = 2
    max_samples: Optional[int] = None  # rows subsampled (without replacement) per tree
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.min_samples_split < 2:
            raise ConfigurationError("n_trees must be >= 1 and min_samples_split >= 2")

    def features_per_split(self, p: int) -> int:
        m = self.max_features
        if m == "sqrt":
            return max(1, int(np.sqrt(p)))
        if m == "all" or m is None:
            return p
        if isinstance(m, float) and 0 < m <= 1:
            return max(1, int(m * p))
        if isinstance(m, int) and m >= 1:
            return min(m, p)
        raise ConfigurationError(f"invalid max_features {m!r}")


def _gini(pos, n):
    q = pos / n
    return 2.0 * q * (1.0 - q)


def _grow(X, y, idx, depth, cfg, mf, rng, gains, total):
    """Grow one randomized subtree over rows ``idx``, accumulating impurity decrease."""
    stack = [(idx, depth)]
    while stack:
        rows, d = stack.pop()
        n = len(rows)
        if n < cfg.min_samples_split or (cfg.max_depth is not None and d >= cfg.max_depth):
            continue
        yr = y[rows]
        pos = yr.sum()
        if pos == 0 or pos == n:
            continue
        feats = rng.choice(X.shape[1], size=mf, replace=False)
        sub = X[np.ix_(rows, feats)]
        lo = sub.min(axis=0)
        hi = sub.max(axis=0)
        usable = hi > lo
        if not usable.any():
            continue
        thr = rng.uniform(lo, hi)
        left = sub < thr
        n_left = left.sum(axis=0)
        pos_left = yr @ left
        n_right = n - n_left
        pos_right = pos - pos_left
        with np.errstate(invalid="ignore", divide="ignore"):
            child = (n_left * _gini(pos_left, n_left) + n_right * _gini(pos_right, n_right)) / n
        gain = _gini(pos, n) - child
        gain[~usable | (n_left == 0) | (n_right == 0)] = -np.inf
        best = int(np.argmax(gain))
        if not np.isfinite(gain[best]):
            continue
        gains[feats[best]] += n / total * gain[best]
        mask = left[:, best]
        stack.append((rows[mask], d + 1))
        stack.append((rows[~mask], d + 1))


def extra_trees_importance(X, y, config: ExtraTreesConfig = ExtraTreesConfig()) -> np.ndarray:
    """Mean-decrease-in-impurity importances of an extremely randomized forest.

    Each split draws ``max_features`` candidate features and one threshold per
    candidate uniformly between the node's min and max, then keeps the
    candidate with the largest weighted Gini decrease.  Importances are
    normalized to sum to 1.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64).ravel()
    if X.ndim != 2 or len(X) != len(y):
        raise DimensionError(f"X {X.shape} and y {y.shape} do not align")
    if len(np.unique(y)) < 2:
        raise DegenerateLabelsError("feature importance needs both classes in the labels")
    p = X.shape[1]
    mf = config.features_per_split(p)
    rng = np.random.default_rng(config.seed)
    gains = np.zeros(p)
    for _ in range(config.n_trees):
        if config.max_samples is not None and config.max_samples < len(X):
            idx = np.sort(rng.choice(len(X), size=config.max_samples, replace=False))
            # keep both classes represented in every subsample
            if y[idx].min() == y[idx].max():
                idx = np.arange(len(X))
        else:
            idx = np.arange(len(X))
        _grow(X, y.astype(np.float64), idx, 0, config, mf, rng, gains, len(idx))
    total = gains.sum()
    if total <= 0:
        return np.full(p, 1.0 / p)
    return gains / total


@dataclass
class SelectionResult:
    names: tuple
    importances: np.ndarray
    correlation: np.ndarray
    kept: np.ndarray  # bool per feature
    threshold: float = 0.5
    order: tuple = field(default=())

    @property
    def kept_names(self) -> tuple:
        """Kept features in descending importance."""
        return tuple(self.names[i] for i in self.order if self.kept[i])

    @property
    def kept_columns(self) -> tuple:
        """Kept features in canonical column order."""
        return tuple(n for n, k in zip(self.names, self.kept) if k)

    def to_json(self) -> str:
        return json.dumps(
            {
                "threshold": self.threshold,
                "features": [
                    {"name": n, "importance": float(s), "kept": bool(k)}
                    for n, s, k in zip(self.names, self.importances, self.kept)
                ],
                "kept_order": list(self.kept_names),
                "correlation": np.asarray(self.correlation).tolist(),
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "SelectionResult":
        d = json.loads(text)
        names = tuple(f["name"] for f in d["features"])
        pos = {n: i for i, n in enumerate(names)}
        return cls(
            names,
            np.array([f["importance"] for f in d["features"]]),
            np.array(d["correlation"]),
            np.array([f["kept"] for f in d["features"]]),
            d["threshold"],
            tuple(pos[n] for n in d["kept_order"]),
        )


def select_features(importances, correlation, names: Sequence[str], threshold: float = 0.5) -> SelectionResult:
    """Greedy importance-ordered selection under a pairwise |r| ceiling.

    Features are visited by descending importance (ties keep column order) and
    kept unless |r| exceeds ``threshold`` against a feature already kept.
    """
    imp = np.asarray(importances, dtype=np.float64)
    R = np.asarray(correlation, dtype=np.float64)
    names = tuple(names)
    if R.shape != (len(imp), len(imp)) or len(names) != len(imp):
        raise DimensionError("importances, correlation matrix and names do not align")
    order = np.argsort(-imp, kind="stable")
    kept = np.zeros(len(imp), dtype=bool)
    for i in order:
        if not np.any(np.abs(R[i, kept]) > threshold):
            kept[i] = True
    return SelectionResult(names, imp, R, kept, threshold, tuple(int(i) for i in order))
