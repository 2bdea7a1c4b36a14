"""Shared generators for the test suite."""

import time
from contextlib import contextmanager

import numpy as np

from semloam.core import RigidTransform
from semloam.matching import Matches


def random_transform(rng, max_t=0.5, max_angle_deg=5.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    t = rng.normal(size=3)
    t *= rng.uniform(0, max_t) / np.linalg.norm(t)
    return RigidTransform.from_rotvec(axis * np.radians(rng.uniform(0, max_angle_deg)), t)


def exact_matches(rng, T_true, n=300, plane_fraction=0.7, extent=20.0):
    """Noise-free plane and line matches whose models pass through ``T_true`` of each source."""
    src = rng.uniform(-extent, extent, (n, 3))
    src[:, 2] *= 0.2
    is_plane = rng.uniform(size=n) < plane_fraction
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    p = T_true.apply(src)
    slide = rng.normal(size=(n, 3))
    along = np.sum(slide * d, axis=1, keepdims=True) * d
    anchors = p + np.where(is_plane[:, None], slide - along, along)
    return Matches(src, rng.integers(1, 4, n), is_plane, anchors, d, np.full(n, 5))


def plane_room_scan(half=10.0, height=30.0, wall=0.5):
    """Noise-free scan from the centre of four walls; every return lies on an exact plane.

    Rings that cross from floor to wall are dropped because their kink points
    lie on no single plane.
    """
    from semloam.io_kitti import LabeledScan
    from semloam.synthetic import BUILDING, FENCE, Scene, Sensor

    lo, hi = -half - wall, half + wall
    room = Scene(boxes=[
        (np.array([half, lo, 0]), np.array([hi, hi, height]), BUILDING),
        (np.array([lo, lo, 0]), np.array([-half, hi, height]), BUILDING),
        (np.array([lo, half, 0]), np.array([hi, hi, height]), FENCE),
        (np.array([lo, lo, 0]), np.array([hi, -half, height]), FENCE),
    ])
    pts, labels, rings = Sensor(range_noise=0.0).cast(room, RigidTransform([0, 0, 1.73], [1, 0, 0, 0]))
    on_floor = np.isclose(pts[:, 2], -1.73, atol=1e-9)
    frac = np.bincount(rings, on_floor, 64) / np.maximum(np.bincount(rings, None, 64), 1)
    keep = np.isin(rings, np.flatnonzero((frac == 0) | (frac == 1)))
    return LabeledScan(pts[keep], labels[keep], None, rings[keep])


# one "criterion N: PASS/FAIL ..." line per acceptance criterion, echoed in the summary
ACCEPTANCE = []


@contextmanager
def criterion(number, title, max_seconds=None):
    """Time a block, print and record its verdict, and fail if it overruns ``max_seconds``."""
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        line = f"criterion {number}: FAIL {title} ({type(exc).__name__})"
        print(line)
        ACCEPTANCE.append(line)
        raise
    elapsed = time.perf_counter() - start
    ok = max_seconds is None or elapsed < max_seconds
    bound = "" if max_seconds is None else f" < {max_seconds:g} s"
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} [{elapsed:.2f} s{bound}]"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line
