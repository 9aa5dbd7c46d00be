import math

import numpy as np
import pytest

from lbnmpc import track as tr
from lbnmpc.errors import InvalidArgument, LocalizationError


def test_default_track_closes():
    t = tr.default_track()
    assert t.closed
    assert t.length == pytest.approx(92.0 + 2 * math.pi * 14.0, abs=1e-9)
    assert t.x[-1] == t.x[0] and t.y[-1] == t.y[0]


def test_pose_follows_arc_geometry():
    t = tr.make_synthetic_track([{"arc": 10.0, "angle": 90.0}], closed=False)
    x, y, h = t.pose_at(t.length)
    assert (x, y, h) == pytest.approx((10.0, 10.0, math.pi / 2), abs=1e-9)
    assert tr.curvature_at(t, 3.3) == pytest.approx(0.1)


def test_frenet_round_trip(rng):
    t = tr.default_track()
    for _ in range(200):
        s = rng.uniform(0, t.length)
        ey = rng.uniform(-1.9, 1.9)
        eth = rng.uniform(-0.5, 0.5)
        X, Y, psi = tr.frenet_to_global(t, s, ey, eth)
        s2, ey2, eth2 = tr.global_to_frenet(t, X, Y, psi, s_hint=s)
        ds = (s2 - s + t.length / 2) % t.length - t.length / 2
        assert abs(ds) < 1e-5 and abs(ey2 - ey) < 1e-5 and abs(tr.wrap_angle(eth2 - eth)) < 1e-5


def test_wrap_angle_range():
    for a in np.linspace(-20, 20, 101):
        w = tr.wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


def test_closed_track_wraps_s():
    t = tr.default_track()
    assert t.pose_at(5.0) == pytest.approx(t.pose_at(5.0 + t.length))


def test_open_track_rejects_out_of_range():
    t = tr.make_synthetic_track([{"straight": 10.0}], closed=False)
    with pytest.raises(InvalidArgument):
        t.pose_at(11.0)


def test_unclosed_segments_rejected():
    with pytest.raises(InvalidArgument):
        tr.make_synthetic_track([{"straight": 10.0}, {"arc": 5.0, "angle": 90.0}])


def test_bad_segment_rejected():
    with pytest.raises(InvalidArgument):
        tr.make_synthetic_track([{"spiral": 3.0}], closed=False)


def test_lost_vehicle_raises():
    t = tr.default_track()
    X, Y, _ = tr.frenet_to_global(t, 10.0, 0.0, 0.0)
    with pytest.raises(LocalizationError):
        tr.global_to_frenet(t, X + 0.0, Y - 9.0, 0.0, s_hint=10.0)


def test_bounds_and_save_load(tmp_path):
    t = tr.make_synthetic_track(tr.DEFAULT_SEGMENTS, 1.5, 2.5)
    assert tr.bounds_at(t, 12.0) == pytest.approx((-2.5, 1.5))
    t.save(tmp_path / "t.csv")
    back = tr.Track.load(tmp_path / "t.csv")
    assert back.closed and np.array_equal(back.x, t.x)
    assert back.pose_at(77.7) == pytest.approx(t.pose_at(77.7))
