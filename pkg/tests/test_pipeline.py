import datetime as dt
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intformer import synthgen
from intformer.datamodel import (
    APPROACH,
    APPROACH_COLUMNS,
    N_TRAFFIC,
    WITHIN,
    WITHIN_COLUMNS,
    CrashEvent,
    IntersectionGeometry,
)
from intformer.errors import DegenerateLabelsError, DimensionError, GapError, ResamplingError
from intformer.pipeline import (
    ExtraTreesConfig,
    RowTable,
    SelectionResult,
    correlation_matrix,
    exclude_post_crash,
    extra_trees_importance,
    format_approach,
    format_within_intersection,
    index_crashes,
    nomenclature,
    pearson_r,
    select_features,
    smote_resample,
    split_train_test,
    stack_windows,
    unstack,
)

FOUR = IntersectionGeometry("X", 4, ("N", "E", "S", "W"))
THREE = IntersectionGeometry("Y", 3, ("N", "E", "W"))
T0 = dt.datetime(2021, 7, 1)


def small(geos=(FOUR,), days=1, seed=0):
    return synthgen.generate_snapshots(list(geos), seed=seed, config=synthgen.GeneratorConfig(days=days))


def table(times, labels=None, stream=("X", "N"), width=3):
    times = np.asarray(times, dtype="datetime64[m]")
    n = len(times)
    vals = np.arange(n * width, dtype=float).reshape(n, width)
    rows = RowTable(vals, tuple(f"f{i}" for i in range(width)), np.full(n, stream[0]), np.full(n, stream[1]), times)
    return rows, np.zeros(n, np.int8) if labels is None else np.asarray(labels, np.int8)


def minutes(*ms):
    return np.datetime64("2021-07-01T00:00") + np.array(ms, dtype="timedelta64[m]")


# ------------------------------------------------------------------ nomenclature


def test_north_reference_puts_west_on_the_left():
    m = nomenclature(FOUR, "N")
    assert m == {"A": "N", "B": "W", "C": "S", "D": "E"}


def test_nomenclature_is_a_rotation_for_every_reference():
    # enumerate all rotations: left of N is W, left of E is N, ...
    left_of = {"N": "W", "E": "N", "S": "E", "W": "S"}
    for ref in FOUR.approaches:
        m = nomenclature(FOUR, ref)
        assert m["A"] == ref and m["B"] == left_of[ref]
        assert sorted(m.values()) == sorted(FOUR.approaches)


def test_three_leg_nomenclature_has_no_d():
    for ref in THREE.approaches:
        m = nomenclature(THREE, ref)
        assert set(m) == {"A", "B", "C"} and sorted(m.values()) == sorted(THREE.approaches)


# ------------------------------------------------------------------ formatting


def test_within_rows_four_leg_single_step():
    frame = small(days=1)
    one = frame.select(frame.time == frame.time.min())
    rows = format_within_intersection(one, [FOUR])
    assert rows.values.shape == (4, 114)
    assert rows.columns == WITHIN_COLUMNS


def test_within_rows_copy_the_rotated_blocks():
    frame = small(days=1)
    rows = format_within_intersection(frame, [FOUR])
    t = frame.time[5]
    for i in np.flatnonzero(rows.time == t):
        m = nomenclature(FOUR, rows.approach[i])
        for j, label in enumerate("ABCD"):
            src = frame.values[(frame.approach == m[label]) & (frame.time == t)][0]
            np.testing.assert_array_equal(rows.values[i, j * 27 : (j + 1) * 27], src[:N_TRAFFIC])
        src = frame.values[(frame.approach == "N") & (frame.time == t)][0]
        np.testing.assert_array_equal(rows.values[i, 108:], src[N_TRAFFIC:])


def test_three_leg_rows_have_zero_d_block():
    frame = small([THREE], days=1)
    rows = format_within_intersection(frame, [THREE])
    assert rows.values.shape == (3 * 96, 114)
    assert np.all(rows.values[:, 81:108] == 0)
    assert rows.leg_present[:, 3].sum() == 0 and rows.leg_present[:, :3].all()


def test_missing_leg_raises_gap_error_with_hole():
    frame = small(days=1)
    drop = (frame.approach == "S") & (frame.time == frame.time[3])
    with pytest.raises(GapError) as err:
        format_within_intersection(frame.select(~drop), [FOUR])
    assert err.value.holes == [("X", "S", str(frame.time[3]))]


def test_approach_rows_are_the_snapshot_values():
    frame = small(days=1)
    rows = format_approach(frame)
    assert rows.values.shape == (4 * 96, 33) and rows.columns == APPROACH_COLUMNS
    one = format_approach(frame.select(np.arange(len(frame)) == 7))
    np.testing.assert_array_equal(one.values[0], frame.values[7])


def test_full_roster_approach_row_count(full_year):
    assert len(format_approach(full_year)) == 1_051_200


# ------------------------------------------------------------------ crash indexing


def crash_rows(days=1):
    frame = small(days=days)
    return frame, format_approach(frame)


def test_crash_at_10_50_labels_10_45_and_10_30():
    _, rows = crash_rows()
    crash = CrashEvent("X", APPROACH, T0.replace(hour=10, minute=50), "E")
    y = index_crashes(rows, [crash], APPROACH)
    marked = rows.time[y == 1]
    assert set(rows.approach[y == 1]) == {"E"}
    assert sorted(marked.astype(str)) == ["2021-07-01T10:30", "2021-07-01T10:45"]


def test_crash_on_boundary_uses_preceding_intervals():
    _, rows = crash_rows()
    y = index_crashes(rows, [CrashEvent("X", APPROACH, T0.replace(hour=11), "E")], APPROACH)
    assert sorted(rows.time[y == 1].astype(str)) == ["2021-07-01T10:30", "2021-07-01T10:45"]


def test_label_rule_against_interval_enumeration():
    # brute force: step s is labeled iff it contains the minute just before the
    # crash or the minute fifteen minutes before that
    origin = np.datetime64("2021-07-01T00:00")
    for minute in range(30, 24 * 60):
        got = synthgen.label_steps(origin + np.timedelta64(minute, "m"))
        want = [s for s in range(0, 24 * 60, 15) if s <= minute - 1 < s + 15 or s <= minute - 16 < s + 15]
        assert sorted(int((g - origin).astype(int)) for g in got) == want


def test_within_crash_labels_every_reference_row():
    frame = small(days=1)
    rows = format_within_intersection(frame, [FOUR])
    y = index_crashes(rows, [CrashEvent("X", WITHIN, T0.replace(hour=3, minute=7))], WITHIN)
    assert y.sum() == 8
    assert sorted(set(rows.approach[y == 1])) == ["E", "N", "S", "W"]


def test_other_zone_crashes_are_ignored():
    _, rows = crash_rows()
    y = index_crashes(rows, [CrashEvent("X", WITHIN, T0.replace(hour=3, minute=7))], APPROACH)
    assert y.sum() == 0


def test_no_crashes_gives_zero_labels():
    _, rows = crash_rows()
    assert index_crashes(rows, [], APPROACH).sum() == 0


def test_out_of_range_crash_warns_with_count():
    _, rows = crash_rows()
    late = CrashEvent("X", APPROACH, dt.datetime(2022, 1, 1, 5), "N")
    with pytest.warns(UserWarning, match="1 crash"):
        y = index_crashes(rows, [late], APPROACH)
    assert y.sum() == 0


def test_labels_and_crashes_cross_check():
    frame, rows = crash_rows(days=3)
    rng = np.random.default_rng(4)
    crashes = [
        CrashEvent("X", APPROACH, T0 + dt.timedelta(minutes=int(m)), str(rng.choice(FOUR.approaches)))
        for m in rng.integers(30, 3 * 1440, size=25)
    ]
    y = index_crashes(rows, crashes, APPROACH)
    for i in np.flatnonzero(y):
        t = rows.time[i]
        assert any(
            c.approach_id == rows.approach[i] and t < np.datetime64(c.timestamp, "m") <= t + np.timedelta64(30, "m")
            for c in crashes
        )
    for c in crashes:
        for s in synthgen.label_steps(np.datetime64(c.timestamp, "m")):
            assert y[(rows.approach == c.approach_id) & (rows.time == s)].tolist() == [1]


# ------------------------------------------------------------------ exclusion


def test_one_crash_removes_eight_rows():
    rows, y = table(minutes(*range(0, 15 * 40, 15)))
    y[10] = 1
    kept, ky = exclude_post_crash(rows, y)
    assert len(rows) - len(kept) == 8
    assert ky.sum() == 1
    assert np.all((kept.time <= rows.time[10]) | (kept.time > rows.time[10] + np.timedelta64(120, "m")))


def test_crash_at_stream_end_removes_fewer():
    rows, y = table(minutes(*range(0, 15 * 12, 15)))
    y[9] = 1
    kept, _ = exclude_post_crash(rows, y)
    assert len(rows) - len(kept) == 2


def test_exclusion_matches_brute_force_union():
    rng = np.random.default_rng(7)
    rows, y = table(minutes(*range(0, 15 * 200, 15)))
    y[rng.choice(200, 12, replace=False)] = 1
    kept, _ = exclude_post_crash(rows, y)
    drop = set()
    for i in np.flatnonzero(y):
        for j in range(len(rows)):
            if rows.time[i] < rows.time[j] <= rows.time[i] + np.timedelta64(120, "m") and y[j] == 0:
                drop.add(j)
    assert len(kept) == len(rows) - len(drop)
    assert set(kept.time.tolist()) == {rows.time[j].item() for j in range(len(rows)) if j not in drop}


def test_exclusion_is_per_stream():
    a, ya = table(minutes(*range(0, 300, 15)), stream=("X", "N"))
    b, _ = table(minutes(*range(0, 300, 15)), stream=("X", "E"))
    rows = RowTable(np.vstack([a.values, b.values]), a.columns, np.r_[a.intersection, b.intersection],
                    np.r_[a.approach, b.approach], np.r_[a.time, b.time])
    y = np.zeros(len(rows), np.int8)
    y[2] = 1
    kept, _ = exclude_post_crash(rows, y)
    assert (kept.approach == "E").sum() == len(b)
    assert (kept.approach == "N").sum() == len(a) - 8


# ------------------------------------------------------------------ correlation


def test_pearson_basic_cases():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    assert pearson_r(x, x) == pytest.approx(1.0)
    assert pearson_r(x, -x) == pytest.approx(-1.0)
    assert pearson_r(x, np.ones(4)) == 0.0
    with pytest.raises(DimensionError):
        pearson_r(x, x[:3])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 60), st.integers(0, 10_000))
def test_pearson_matches_direct_formula(n, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=n), rng.normal(size=n)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sx = sum((a - mx) ** 2 for a in x) ** 0.5
    sy = sum((b - my) ** 2 for b in y) ** 0.5
    assert pearson_r(x, y) == pytest.approx(cov / (sx * sy), abs=1e-12)


def test_correlation_matrix_matches_pairwise():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(50, 6))
    X[:, 3] = 2.0
    R = correlation_matrix(X)
    for i, j in itertools.product(range(6), repeat=2):
        want = 1.0 if i == j else pearson_r(X[:, i], X[:, j])
        assert R[i, j] == pytest.approx(want, abs=1e-12)


# ------------------------------------------------------------------ extra trees


def test_planted_signal_feature_ranks_first():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(2000, 10))
    y = (X[:, 6] > np.median(X[:, 6])).astype(int)
    imp = extra_trees_importance(X, y, ExtraTreesConfig(n_trees=30, seed=1))
    assert int(np.argmax(imp)) == 6
    assert imp.sum() == pytest.approx(1.0, abs=1e-9)


def test_noise_labels_have_flat_importance():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(1000, 100))
    y = rng.integers(0, 2, size=1000)
    imp = extra_trees_importance(X, y, ExtraTreesConfig(n_trees=50, seed=2, max_depth=8))
    assert imp.max() < 5 * imp.mean()
    assert imp.sum() == pytest.approx(1.0, abs=1e-9)


def test_extra_trees_deterministic_and_single_class_error():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(300, 5))
    y = (X[:, 0] > 0).astype(int)
    cfg = ExtraTreesConfig(n_trees=5, seed=9, max_samples=200)
    np.testing.assert_array_equal(extra_trees_importance(X, y, cfg), extra_trees_importance(X, y, cfg))
    with pytest.raises(DegenerateLabelsError):
        extra_trees_importance(X, np.zeros(300), cfg)


# ------------------------------------------------------------------ selection


def test_perfectly_correlated_pair_keeps_more_important():
    R = np.array([[1.0, 1.0], [1.0, 1.0]])
    res = select_features([0.3, 0.7], R, ["a", "b"])
    assert res.kept_names == ("b",)


def test_weakly_correlated_features_all_kept():
    R = np.array([[1.0, 0.5, -0.2], [0.5, 1.0, 0.1], [-0.2, 0.1, 1.0]])
    res = select_features([0.2, 0.5, 0.3], R, ["a", "b", "c"])
    assert res.kept_names == ("b", "c", "a")
    assert res.kept_columns == ("a", "b", "c")


def test_ties_follow_column_order():
    R = np.array([[1.0, 0.9], [0.9, 1.0]])
    assert select_features([0.5, 0.5], R, ["a", "b"]).kept_names == ("a",)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 25), st.integers(0, 10_000))
def test_selection_invariant_by_brute_force(p, seed):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(40, 3))
    X = base @ rng.normal(size=(3, p)) + 0.5 * rng.normal(size=(40, p))
    R = correlation_matrix(X)
    imp = rng.random(p)
    res = select_features(imp, R, [f"f{i}" for i in range(p)])
    kept = np.flatnonzero(res.kept)
    for i, j in itertools.combinations(kept, 2):
        assert abs(R[i, j]) <= 0.5
    # maximal: every dropped feature conflicts with a more important kept one
    order = list(np.argsort(-imp, kind="stable"))
    for i in np.flatnonzero(~res.kept):
        assert any(abs(R[i, j]) > 0.5 and order.index(j) < order.index(i) for j in kept)


def test_selection_json_round_trip():
    R = np.array([[1.0, 0.8], [0.8, 1.0]])
    res = select_features([0.4, 0.6], R, ["a", "b"])
    back = SelectionResult.from_json(res.to_json())
    assert back.kept_names == res.kept_names
    np.testing.assert_array_equal(back.importances, res.importances)


# ------------------------------------------------------------------ windows


def test_five_contiguous_steps_give_four_pairs():
    rows, y = table(minutes(0, 15, 30, 45, 60))
    assert len(stack_windows(rows, y, 2)) == 4


def test_window_label_is_final_step():
    rows, _ = table(minutes(0, 15, 30, 45))
    ws = stack_windows(rows, [0, 0, 1, 0], 2)
    assert ws.y.tolist() == [0, 1, 0]


def test_windows_skip_time_gaps_by_enumeration():
    times = minutes(0, 15, 30, 45, 75, 90, 105, 120)
    rows, y = table(times)
    for T in (2, 3, 4):
        ws = stack_windows(rows, y, T)
        want = [
            list(range(i, i + T))
            for i in range(len(times) - T + 1)
            if all(times[i + k + 1] - times[i + k] == np.timedelta64(15, "m") for k in range(T - 1))
        ]
        assert ws.rows.tolist() == want


def test_windows_never_cross_streams_and_short_streams_are_empty():
    frame = small(days=1)
    rows = format_approach(frame)
    ws = stack_windows(rows, np.zeros(len(rows)), 4)
    assert len(ws) == 4 * (96 - 3)
    assert np.all(rows.approach[ws.rows] == rows.approach[ws.rows[:, :1]])
    short, y = table(minutes(0))
    assert len(stack_windows(short, y, 2)) == 0


def test_unstack_recovers_rows():
    frame = small(days=1)
    rows = format_within_intersection(frame, [FOUR])
    ws = stack_windows(rows, np.zeros(len(rows)), 3)
    flat, idx = unstack(ws)
    np.testing.assert_array_equal(flat, rows.values[idx])
    w = ws.window(0)
    assert w.features.shape == (3, 114)


# ------------------------------------------------------------------ split


def windows_with(n, positives, seed=0):
    rows, y = table(minutes(*range(0, 15 * (n + 1), 15)))
    rng = np.random.default_rng(seed)
    y[1 + rng.choice(n, positives, replace=False)] = 1
    return stack_windows(rows, y, 2)


def test_split_sizes_and_determinism():
    ws = windows_with(100, 12)
    train, test = split_train_test(ws, 0.25, seed=3)
    assert (len(train), len(test)) == (75, 25)
    train2, test2 = split_train_test(ws, 0.25, seed=3)
    np.testing.assert_array_equal(test.rows, test2.rows)
    assert set(train.rows[:, 0]).isdisjoint(test.rows[:, 0])


@settings(max_examples=40, deadline=None)
@given(st.integers(8, 300), st.integers(4, 40), st.integers(0, 1000))
def test_split_is_stratified(n, pos, seed):
    pos = min(pos, n // 2)
    ws = windows_with(n, pos, seed)
    train, test = split_train_test(ws, 0.25, seed=seed)
    rate = pos / n
    assert abs(test.y.sum() - rate * len(test)) <= 1
    assert abs(train.y.sum() - rate * len(train)) <= 1
    assert test.y.sum() >= 1 and train.y.sum() >= 1


def test_temporal_split_puts_latest_in_test():
    ws = windows_with(40, 6)
    train, test = split_train_test(ws, 0.25, temporal=True)
    assert train.end_time.max() < test.end_time.min()


# ------------------------------------------------------------------ SMOTE


def test_smote_balances_exactly():
    ws = windows_with(100, 10)
    ws = ws.take(np.arange(100))
    out = smote_resample(ws, k=5, seed=1)
    assert (out.y == 1).sum() == (out.y == 0).sum() == 90
    assert out.synthetic.sum() == 80
    np.testing.assert_array_equal(out.X[:100], ws.X)
    assert np.all(out.y[out.synthetic] == 1)


def test_synthetic_points_lie_on_parent_segments():
    rng = np.random.default_rng(0)
    ws = windows_with(200, 15)
    ws.X = rng.normal(size=ws.X.shape)
    out = smote_resample(ws, k=5, seed=2)
    flat = out.X.reshape(len(out), -1)
    for i in np.flatnonzero(out.synthetic):
        a, b = out.parents[i]
        assert ws.y[a] == ws.y[b] == 1
        d = flat[b] - flat[a]
        u = float((flat[i] - flat[a]) @ d / (d @ d)) if d @ d > 0 else 0.0
        assert -1e-9 <= u <= 1 + 1e-9
        np.testing.assert_allclose(flat[i], flat[a] + u * d, atol=1e-9)


def test_smote_neighbours_are_among_k_nearest():
    rng = np.random.default_rng(1)
    ws = windows_with(120, 20)
    ws.X = rng.normal(size=ws.X.shape)
    out = smote_resample(ws, k=3, seed=4)
    flat = ws.X.reshape(len(ws), -1)
    pos = np.flatnonzero(ws.y == 1)
    for a, b in out.parents[out.synthetic]:
        d = np.linalg.norm(flat[pos] - flat[a], axis=1)
        d[pos == a] = np.inf
        assert b in pos[np.argsort(d, kind="stable")[:3]]


def test_smote_identical_minority_points():
    ws = windows_with(20, 2)
    ws.X[ws.y == 1] = 3.5
    out = smote_resample(ws, k=1, seed=0)
    assert np.all(out.X[out.synthetic] == 3.5)


def test_smote_without_minority_raises():
    ws = windows_with(20, 2)
    with pytest.raises(ResamplingError):
        smote_resample(ws.take(ws.y == 0), seed=0)
    with pytest.raises(ResamplingError):
        smote_resample(ws.take(ws.y == 0), seed=0, minority=1)


def test_smote_leaves_the_test_set_alone():
    ws = windows_with(100, 16)
    train, test = split_train_test(ws, seed=1)
    snapshot = test.X.copy()
    smote_resample(train, seed=1)
    np.testing.assert_array_equal(test.X, snapshot)


# ------------------------------------------------------------------ end to end


def test_pipeline_is_deterministic():
    def run():
        frame = small(days=2, seed=11)
        frame, crashes = synthgen.inject_crashes(frame, synthgen.CrashInjectionPlan(total=6), seed=11)
        rows = format_within_intersection(frame, [FOUR])
        y = index_crashes(rows, crashes, WITHIN)
        rows, y = exclude_post_crash(rows, y)
        ws = stack_windows(rows, y, 3)
        train, test = split_train_test(ws, seed=2)
        return smote_resample(train, seed=2), test

    (a, at), (b, bt) = run(), run()
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(at.rows, bt.rows)
