import numpy as np

from semloam.core import RigidTransform
from semloam.estimation import residuals
from semloam.io_kitti import ring_from_points
from semloam.synthetic import (
    MOVING_CAR,
    ROAD,
    SENSOR_HEIGHT,
    Scene,
    Sensor,
    hdl64_elevations,
    make_sequence,
    planted_outlier_matches,
    street_trajectory,
)


def test_rings_reconstruct_from_beam_elevations():
    sensor = Sensor(n_azimuth=360)
    pts = sensor.directions.reshape(-1, 3) * 30.0
    assert np.array_equal(ring_from_points(pts), np.repeat(np.arange(64), 360))
    assert np.all(np.diff(hdl64_elevations()) < 0)


def test_flat_ground_returns():
    pts, labels, rings = Sensor(n_azimuth=360, range_noise=0.0).cast(Scene(), RigidTransform([0, 0, SENSOR_HEIGHT], [1, 0, 0, 0]))
    assert np.allclose(pts[:, 2], -SENSOR_HEIGHT)
    assert np.all(np.linalg.norm(pts, axis=1) <= 100.0)
    # the road is the ground strip |y| < 4
    near_road = np.abs(pts[:, 1]) < 3.9
    assert np.all(labels[near_road] == ROAD)


def test_trajectory_starts_from_rest():
    poses = street_trajectory(50)
    steps = np.linalg.norm(np.diff([p.t for p in poses], axis=0), axis=1)
    assert steps[0] < 0.1 and steps[-1] > 0.5
    assert np.allclose([p.t[2] for p in poses], SENSOR_HEIGHT)


def test_sequence_is_relative_and_reproducible():
    a = make_sequence(3, seed=5)
    b = make_sequence(3, seed=5)
    assert a.poses[0].delta(RigidTransform.identity()) == (0.0, 0.0)
    assert all(np.array_equal(x.positions, y.positions) for x, y in zip(a.scans, b.scans))
    assert any(np.any(s.labels == MOVING_CAR) for s in a.scans)


def test_planted_matches():
    P = planted_outlier_matches(3, n=400, outlier_fraction=0.25, noise=0.0)
    assert P.outlier.sum() == 100
    r = np.linalg.norm(residuals(P.matches, P.T_true), axis=1)
    assert np.all(r[~P.outlier] < 1e-9)
    assert np.all(r[P.outlier] >= 1.0 - 1e-9)
    # every planted model lies on the side the initial guess pushed its keypoint towards
    r_init = np.linalg.norm(residuals(P.matches, P.T_init), axis=1)
    assert np.all(r_init[P.outlier] < r[P.outlier])
