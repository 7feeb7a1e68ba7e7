"""Window stacking, train/test splitting and SMOTE oversampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..datamodel import LabeledWindow, to_datetime
from ..errors import ConfigurationError, DimensionError, ResamplingError
from .formatting import STEP, RowTable


@dataclass
class WindowSet:
    """A batch of labeled windows.

    ``X`` is (N, T, F) and ``y`` holds the label of each window's last step.
    ``rows`` maps each real window to its source row indices (N, T); synthetic
    windows have ``rows == -1`` and record their two parents (indices into the
    set they were generated from) and interpolation weight.
    """

    X: np.ndarray
    y: np.ndarray
    intersection: np.ndarray
    approach: np.ndarray
    end_time: np.ndarray
    rows: np.ndarray
    synthetic: np.ndarray
    parents: np.ndarray
    weight: np.ndarray
    columns: tuple = ()

    def __post_init__(self):
        n = len(self.X)
        if self.X.ndim != 3:
            raise DimensionError(f"windows must be (N, T, F), got {self.X.shape}")
        for name in ("y", "intersection", "approach", "end_time", "rows", "synthetic", "parents", "weight"):
            if len(getattr(self, name)) != n:
                raise DimensionError(f"window field {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def steps(self) -> int:
        return self.X.shape[1]

    @property
    def n_features(self) -> int:
        return self.X.shape[2]

    def take(self, index) -> "WindowSet":
        return WindowSet(
            self.X[index], self.y[index], self.intersection[index], self.approach[index], self.end_time[index],
            self.rows[index], self.synthetic[index], self.parents[index], self.weight[index], self.columns,
        )

    def window(self, i: int) -> LabeledWindow:
        end = None if np.isnat(self.end_time[i]) else to_datetime(self.end_time[i])
        return LabeledWindow(self.X[i].copy(), int(self.y[i]), str(self.intersection[i]), str(self.approach[i]), end)

    @classmethod
    def empty(cls, steps: int, n_features: int, columns=()) -> "WindowSet":
        return cls(
            np.zeros((0, steps, n_features)), np.zeros(0, np.int8), np.array([], str), np.array([], str),
            np.array([], "datetime64[m]"), np.zeros((0, steps), np.int64), np.zeros(0, bool),
            np.zeros((0, 2), np.int64), np.zeros(0), tuple(columns),
        )

    @classmethod
    def concat(cls, sets) -> "WindowSet":
        sets = list(sets)
        return cls(
            *(np.concatenate([getattr(s, f) for s in sets]) for f in (
                "X", "y", "intersection", "approach", "end_time", "rows", "synthetic", "parents", "weight")),
            sets[0].columns,
        )


def stack_windows(rows: RowTable, labels, steps: int) -> WindowSet:
    """Sliding windows of ``steps`` contiguous 15-minute rows within one stream.

    Rows must be sorted by stream then time.  Windows crossing a stream
    boundary or a time gap are skipped.
    """
    if steps not in (2, 3, 4):
        raise ConfigurationError(f"window length must be 2, 3 or 4, got {steps}")
    labels = np.asarray(labels).astype(np.int8)
    if len(labels) != len(rows):
        raise DimensionError("labels and rows differ in length")
    n = len(rows)
    if n < steps:
        return WindowSet.empty(steps, rows.width, rows.columns)
    codes = rows.stream_codes()
    linked = (codes[1:] == codes[:-1]) & (np.diff(rows.time) == STEP)
    # a window starting at i is valid when links i .. i+steps-2 all hold
    breaks = np.concatenate([[0], np.cumsum(~linked)])
    starts = np.flatnonzero(breaks[steps - 1 :] - breaks[: n - steps + 1] == 0)
    index = starts[:, None] + np.arange(steps)
    last = index[:, -1]
    m = len(starts)
    return WindowSet(
        rows.values[index],
        labels[last],
        rows.intersection[last],
        rows.approach[last],
        rows.time[last],
        index,
        np.zeros(m, bool),
        np.full((m, 2), -1, np.int64),
        np.zeros(m),
        rows.columns,
    )


def unstack(windows: WindowSet) -> tuple[np.ndarray, np.ndarray]:
    """Flatten windows back to rows: (N*T, F) values and their (N*T,) source row indices."""
    return windows.X.reshape(-1, windows.n_features), windows.rows.reshape(-1)


def split_train_test(
    windows: WindowSet, test_fraction: float = 0.25, seed: int = 0, temporal: bool = False
) -> tuple[WindowSet, WindowSet]:
    """Seeded split stratified by label (or a chronological split when ``temporal``).

    The test size is round(N * test_fraction); positives are allocated
    round(P * test_fraction) of those slots.
    """
    if not 0 < test_fraction < 1:
        raise ConfigurationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(windows)
    if n < 4:
        raise ConfigurationError(f"need at least 4 windows to split, got {n}")
    n_test = int(round(n * test_fraction))
    if temporal:
        order = np.argsort(windows.end_time, kind="stable")
        return windows.take(np.sort(order[: n - n_test])), windows.take(np.sort(order[n - n_test :]))
    rng = np.random.default_rng(seed)
    pos = np.flatnonzero(windows.y == 1)
    neg = np.flatnonzero(windows.y != 1)
    n_test_pos = min(int(round(len(pos) * test_fraction)), n_test)
    n_test_neg = n_test - n_test_pos
    if n_test_neg > len(neg):
        n_test_neg = len(neg)
        n_test_pos = n_test - n_test_neg
    pos = rng.permutation(pos)
    neg = rng.permutation(neg)
    test = np.sort(np.concatenate([pos[:n_test_pos], neg[:n_test_neg]]))
    train = np.sort(np.concatenate([pos[n_test_pos:], neg[n_test_neg:]]))
    return windows.take(train), windows.take(test)


def _nearest(points: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    """Indices of the k nearest other points (Euclidean), ties by index."""
    m = len(points)
    sq = np.einsum("ij,ij->i", points, points)
    out = np.empty((m, k), np.int64)
    for a in range(0, m, chunk):
        b = min(a + chunk, m)
        d = sq[a:b, None] + sq[None, :] - 2.0 * points[a:b] @ points.T
        d[np.arange(b - a), np.arange(a, b)] = np.inf
        out[a:b] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def smote_resample(windows: WindowSet, k: int = 5, seed: int = 0, minority: Optional[int] = None) -> WindowSet:
    """Oversample the minority class to a 1:1 ratio.

    Windows are flattened to T*F vectors; each synthetic sample is
    x + u * (x_nn - x) with x a random minority window, x_nn one of its k
    nearest minority neighbours and u ~ U(0, 1).  Synthetic windows are
    appended after the originals.
    """
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    y = windows.y
    classes, counts = np.unique(y, return_counts=True)
    if minority is None:
        if len(classes) < 2:
            raise ResamplingError("only one class present; nothing to balance against")
        minority = int(classes[np.argmin(counts)]) if counts[0] != counts[1] else int(classes[-1])
    idx = np.flatnonzero(y == minority)
    m = len(idx)
    if m == 0:
        raise ResamplingError("no minority samples to oversample")
    need = int((y != minority).sum()) - m
    if need <= 0:
        return windows.take(np.arange(len(windows)))
    rng = np.random.default_rng(seed)
    flat = windows.X[idx].reshape(m, -1)
    if m == 1:
        neighbours = np.zeros((1, 1), np.int64)
    else:
        neighbours = _nearest(flat, max(1, min(k, m - 1)))
    base = rng.integers(0, m, size=need)
    pick = neighbours[base, rng.integers(0, neighbours.shape[1], size=need)]
    u = rng.random(need)
    synth = flat[base] + u[:, None] * (flat[pick] - flat[base])
    T = windows.steps
    extra = WindowSet(
        synth.reshape(need, T, windows.n_features),
        np.full(need, minority, dtype=y.dtype),
        np.full(need, "", dtype=str),
        np.full(need, "", dtype=str),
        np.full(need, np.datetime64("NaT"), dtype="datetime64[m]"),
        np.full((need, T), -1, np.int64),
        np.ones(need, bool),
        np.stack([idx[base], idx[pick]], axis=1),
        u,
        windows.columns,
    )
    return WindowSet.concat([windows, extra])
