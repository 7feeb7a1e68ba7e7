import datetime as dt

import numpy as np
import pytest

from intformer import datamodel as dm


def make_snapshot(values=None, ts=dt.datetime(2021, 7, 1, 10, 30)):
    if values is None:
        values = np.zeros(dm.N_APPROACH)
    return dm.unflatten_features(values, "INT1", ts, "N")


def test_column_counts():
    assert len(dm.TRAFFIC_FEATURES) == 27
    assert len(dm.APPROACH_COLUMNS) == 33
    assert len(dm.WITHIN_COLUMNS) == 4 * 27 + 6 == 114
    assert dm.TRAFFIC_FEATURES[:4] == ("ASA_L", "ASA_T", "ASA_R", "ASM_L")
    assert dm.TRAFFIC_FEATURES[-1] == "POG_R"
    assert dm.WITHIN_COLUMNS[27] == "ASA_L_B"
    assert len(set(dm.WITHIN_COLUMNS)) == 114


def test_zeroed_snapshot_flattens_to_zeros():
    flat = dm.flatten_features(make_snapshot())
    assert flat.shape == (33,)
    assert np.all(flat == 0)


def test_flatten_round_trip(full_year):
    for i in (0, 1234, len(full_year) - 1):
        snap = full_year.snapshot(i)
        flat = dm.flatten_features(snap)
        assert flat.tobytes() == full_year.values[i].tobytes()
        back = dm.unflatten_features(flat, snap.intersection_id, snap.timestamp, snap.approach_id)
        assert back == snap


def test_flatten_positions():
    values = np.arange(33, dtype=float)
    values[27:] = [70.0, 50.0, 5.0, 0.0, 9.0, 1.0]
    # make max >= average for each movement pair
    for avg, mx in ((0, 3), (6, 9), (12, 15)):
        values[mx : mx + 3] = values[avg : avg + 3] + 3
    values[21:27] = [1, 2, 3, 40, 50, 60]
    snap = make_snapshot(values)
    assert snap.traffic.left.asa == values[0]
    assert snap.traffic.through.asa == values[1]
    assert snap.traffic.right.pog == values[26]
    assert snap.weather.relative_humidity == 50.0
    assert snap.weather.conditions == 1


def test_movement_invariants():
    with pytest.raises(ValueError):
        dm.MovementStats(asa=30, asm=20, tta=1, ttm=2, cda=1, cdm=2, sfc=0, sfp=0, pog=0)
    with pytest.raises(ValueError):
        dm.MovementStats(asa=1, asm=2, tta=1, ttm=2, cda=1, cdm=2, sfc=0.5, sfp=0, pog=0)
    with pytest.raises(ValueError):
        dm.MovementStats(asa=1, asm=2, tta=1, ttm=2, cda=1, cdm=2, sfc=0, sfp=0, pog=101)


def test_weather_invariants():
    with pytest.raises(ValueError):
        dm.WeatherRecord(70, 101, 1, 0, 9, 0)
    with pytest.raises(ValueError):
        dm.WeatherRecord(70, 50, 1, 0, -1, 0)
    with pytest.raises(ValueError):
        dm.WeatherRecord(70, 50, 1, 0, 9, 2)


def test_snapshot_alignment():
    with pytest.raises(ValueError):
        make_snapshot(ts=dt.datetime(2021, 7, 1, 10, 31))


def test_crash_zone_invariants():
    dm.CrashEvent("INT1", dm.WITHIN, dt.datetime(2021, 7, 1, 10, 50))
    dm.CrashEvent("INT1", dm.APPROACH, dt.datetime(2021, 7, 1, 10, 50), "N")
    with pytest.raises(ValueError):
        dm.CrashEvent("INT1", dm.WITHIN, dt.datetime(2021, 7, 1, 10, 50), "N")
    with pytest.raises(ValueError):
        dm.CrashEvent("INT1", dm.APPROACH, dt.datetime(2021, 7, 1, 10, 50))


def test_geometry_invariants():
    dm.IntersectionGeometry("X", 3, ("N", "E", "W"))
    with pytest.raises(ValueError):
        dm.IntersectionGeometry("X", 4, ("N", "E", "W"))
    with pytest.raises(ValueError):
        dm.IntersectionGeometry("X", 5, ("N", "E", "S", "W", "Q"))


def test_labeled_window_invariants():
    dm.LabeledWindow(np.zeros((2, 18)), 1, "INT1", "N", None)
    with pytest.raises(ValueError):
        dm.LabeledWindow(np.zeros((5, 18)), 1, "INT1", "N", None)
    with pytest.raises(ValueError):
        dm.LabeledWindow(np.zeros((2, 18)), 2, "INT1", "N", None)


def test_frame_from_snapshots_round_trip(full_year):
    part = full_year.select(np.arange(10))
    rebuilt = dm.SnapshotFrame.from_snapshots(list(part))
    assert rebuilt.values.tobytes() == part.values.tobytes()
    assert (rebuilt.time == part.time).all()
    assert (rebuilt.approach == part.approach).all()
