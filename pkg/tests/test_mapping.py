import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import plane_room_scan
from semloam.config import PipelineConfig
from semloam.core import RigidTransform, SurfaceType
from semloam.errors import InsufficientMatches
from semloam.features import Keypoints, extract_keypoint_sets
from semloam.io_kitti import SEMANTIC_KITTI, LabeledScan
from semloam.mapping import (
    SemanticLoam,
    SemanticVoxelMap,
    VoxelStore,
    export_map,
    extract_local_map,
    pack_keys,
    read_ply,
    scan_to_map_register,
    unpack_keys,
    update_map,
    voxel_downsample_semantic,
    write_ply,
)
from semloam.synthetic import Sensor, make_sequence, street_scene

I = RigidTransform.identity()


def brute_voxel(points, labels, ranges, side):
    """Dictionary group-by on floor(p / side); label of the closest contributor, first on ties."""
    cells = {}
    for i, p in enumerate(points):
        key = tuple(int(v) for v in np.floor(p / side))
        cell = cells.setdefault(key, [np.zeros(3), 0, None, np.inf])
        cell[0] = cell[0] + p
        cell[1] += 1
        if ranges[i] < cell[3]:
            cell[2], cell[3] = labels[i], ranges[i]
    return {k: (v[0] / v[1], v[2], v[3]) for k, v in cells.items()}


def as_cells(scan: LabeledScan, side):
    return {
        tuple(int(v) for v in np.floor(p / side)): (p, l, r)
        for p, l, r in zip(scan.positions, scan.labels, scan.ranges)
    }


def assert_same_cells(got, expected):
    assert got.keys() == expected.keys()
    for k, (p, l, r) in expected.items():
        gp, gl, gr = got[k]
        assert np.allclose(gp, p, atol=1e-9) and gl == l and gr == r


# ---------------------------------------------------------------------------
# voxel filter


def test_min_range_label_wins():
    out = voxel_downsample_semantic([[0.1, 0, 0], [0.3, 0, 0]], [10, 20], [10.0, 5.0], 1.0)
    assert np.allclose(out.positions, [[0.2, 0, 0]])
    assert out.labels.tolist() == [20] and out.ranges.tolist() == [5.0]


def test_distinct_voxels_are_a_permutation():
    pts = np.array([[0.5, 0.5, 0.5], [3.5, 0.5, 0.5], [-2.5, 1.5, 0.5]])
    out = voxel_downsample_semantic(pts, [1, 2, 3], [1.0, 2.0, 3.0], 1.0)
    assert sorted(map(tuple, out.positions)) == sorted(map(tuple, pts))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.1, 0.4, 0.8, 2.0]))
def test_voxel_filter_matches_brute_force(seed, side):
    rng = np.random.default_rng(seed)
    n = 10_000
    pts = rng.uniform(-10, 10, (n, 3))
    labels = rng.integers(1, 6, n)
    # coarse ranges force ties, resolved by insertion order
    ranges = np.round(rng.uniform(2, 50, n))
    out = voxel_downsample_semantic(pts, labels, ranges, side)
    assert_same_cells(as_cells(out, side), brute_voxel(pts, labels, ranges, side))


def test_centroids_stay_in_their_cell():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-5, 5, (5000, 3))
    out = voxel_downsample_semantic(pts, np.ones(5000), np.ones(5000), 0.4)
    assert len(np.unique(np.floor(out.positions / 0.4), axis=0)) == len(out)


def test_pack_unpack_round_trip():
    rng = np.random.default_rng(2)
    coords = rng.integers(-(1 << 20), 1 << 20, (1000, 3))
    assert np.array_equal(unpack_keys(pack_keys(coords)), coords)
    with pytest.raises(ValueError):
        pack_keys([[1 << 21, 0, 0]])


def test_insertion_is_order_independent():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-5, 5, (3000, 3))
    labels, ranges = rng.integers(1, 6, 3000), rng.uniform(2, 50, 3000)
    a, b = VoxelStore(0.4), VoxelStore(0.4)
    a.insert(pts, labels, ranges)
    perm = rng.permutation(3000)
    b.insert(pts[perm], labels[perm], ranges[perm])
    assert np.array_equal(a.keys, b.keys) and np.array_equal(a.labels, b.labels)
    assert np.allclose(a.centroids, b.centroids, atol=1e-12)


# ---------------------------------------------------------------------------
# map updates


def keypoints(positions, labels, surface, ranges):
    return Keypoints(positions, labels, surface, ranges)


def random_scan_keypoints(rng, n=2000):
    pts = rng.uniform(-20, 20, (n, 3))
    return (
        keypoints(pts[: n // 2], rng.choice([40, 50, 70], n // 2), SurfaceType.EDGE, rng.uniform(2, 50, n // 2)),
        keypoints(pts[n // 2 :], rng.choice([40, 50, 70], n - n // 2), SurfaceType.PLANAR, rng.uniform(2, 50, n - n // 2)),
    )


def test_first_scan_map_equals_downsampled_scan():
    rng = np.random.default_rng(4)
    edge, planar = random_scan_keypoints(rng)
    m = SemanticVoxelMap()
    update_map(m, edge, planar, None, I)
    for kp, side, surface in ((edge, 0.4, SurfaceType.EDGE), (planar, 0.8, SurfaceType.PLANAR)):
        ref = voxel_downsample_semantic(kp.positions, kp.labels, kp.ranges, side)
        st_ = m.stores[surface]
        got = LabeledScan(st_.centroids, st_.labels, st_.min_range, np.zeros(len(st_), np.int16))
        assert_same_cells(as_cells(got, side), as_cells(ref, side))


def test_same_scan_twice_keeps_centroids():
    rng = np.random.default_rng(5)
    edge, planar = random_scan_keypoints(rng)
    m = SemanticVoxelMap()
    update_map(m, edge, planar, None, I)
    before = {s: (st_.centroids.copy(), st_.counts.copy()) for s, st_ in m.stores.items()}
    update_map(m, edge, planar, None, I)
    for s, st_ in m.stores.items():
        assert np.allclose(st_.centroids, before[s][0], atol=1e-12)
        assert np.array_equal(st_.counts, 2 * before[s][1])


@pytest.mark.parametrize("near_first", [True, False])
def test_close_observation_labels_the_cell(near_first):
    g = np.arange(0.0, 4.0, 0.1)
    gy, gz = np.meshgrid(g, g)
    wall = np.column_stack([np.full(gy.size, 10.2), gy.ravel(), gz.ravel()])
    near = keypoints(wall, 50, SurfaceType.PLANAR, 5.0)
    far = keypoints(wall + [0.01, 0, 0], 70, SurfaceType.PLANAR, 50.0)
    m = SemanticVoxelMap()
    for kp in (near, far) if near_first else (far, near):
        update_map(m, Keypoints.empty(), kp, None, I)
    assert np.all(m.stores[SurfaceType.PLANAR].labels == 50)


def test_dynamic_points_never_enter_the_map():
    rng = np.random.default_rng(6)
    pts = rng.uniform(-10, 10, (1000, 3))
    labels = rng.choice([10, 40, 252, 30, 50], 1000)
    m = SemanticVoxelMap(keep_raw=True)
    raw = LabeledScan(pts, labels)
    update_map(m, keypoints(pts, labels, SurfaceType.EDGE, 5.0), keypoints(pts, labels, SurfaceType.PLANAR, 5.0), raw, I)
    for st_ in m.stores.values():
        assert len(st_) and not SEMANTIC_KITTI.is_dynamic(st_.labels).any()


def test_update_applies_pose():
    m = SemanticVoxelMap()
    T = RigidTransform([10.0, 0, 0], [1, 0, 0, 0])
    update_map(m, keypoints([[0.1, 0.1, 0.1]], 50, SurfaceType.EDGE, 3.0), Keypoints.empty(), None, T)
    assert np.allclose(m.stores[SurfaceType.EDGE].centroids, [[10.1, 0.1, 0.1]])


# ---------------------------------------------------------------------------
# local map


def test_local_map_cube():
    m = SemanticVoxelMap()
    update_map(m, keypoints([[0.5, 0, 0], [20.5, 0, 0]], 50, SurfaceType.EDGE, 3.0), Keypoints.empty(), None, I)
    local = extract_local_map(m, I, 10.0)
    assert np.allclose(local.positions, [[0.5, 0, 0]])
    assert len(extract_local_map(SemanticVoxelMap(), I, 10.0)) == 0


def test_local_map_grid_matches_box_filter():
    g = np.arange(-100.0, 100.0, 2.0) + 1.0
    gx, gy = np.meshgrid(g, g)
    grid = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, 0.4)])
    m = SemanticVoxelMap()
    update_map(m, Keypoints.empty(), keypoints(grid, 40, SurfaceType.PLANAR, 10.0), None, I)
    pose = RigidTransform([13.0, -7.0, 0.0], [1, 0, 0, 0])
    local = extract_local_map(m, pose, 50.0)
    expected = grid[np.all(np.abs(grid - pose.t) <= 50.0, axis=1)]
    assert sorted(map(tuple, local.positions)) == sorted(map(tuple, expected))


@settings(max_examples=30, deadline=None)
@given(st.tuples(*[st.floats(-45, 45)] * 3), st.tuples(*[st.floats(-1000, 1000)] * 3))
def test_inserted_point_is_retrievable(offset, center):
    m = SemanticVoxelMap()
    pose = RigidTransform(center, [1, 0, 0, 0])
    update_map(m, keypoints([offset], 50, SurfaceType.EDGE, 5.0), Keypoints.empty(), None, pose)
    # the centroid of a single point is the point itself
    assert len(extract_local_map(m, pose, 50.0)) == 1


# ---------------------------------------------------------------------------
# scan-to-map registration


@pytest.fixture(scope="module")
def street_scan():
    pts, labels, rings = Sensor(range_noise=0.0).cast(street_scene(length=120, seed=4), RigidTransform([30, 0.5, 1.73], [1, 0, 0, 0]))
    return LabeledScan(pts, labels, None, rings)


def map_of(scan, pose=I):
    _, _, t_edge, t_planar = extract_keypoint_sets(scan)
    m = SemanticVoxelMap()
    update_map(m, t_edge, t_planar, None, pose)
    return m


def source_of(scan):
    edge, planar, _, _ = extract_keypoint_sets(scan)
    return Keypoints.concat([edge, planar])


def test_same_cloud_registers_near_identity(street_scan):
    local = extract_local_map(map_of(street_scan), I, 100.0)
    dt, dr = scan_to_map_register(source_of(street_scan), local, I).T.delta(I)
    # map cells are voxel centroids, not the keypoints themselves
    assert dt < 2e-3 and dr < 2e-4


def test_refines_displaced_scan(street_scan):
    truth = RigidTransform.from_rotvec([0, 0, np.radians(2.0)], [1.5, 0.4, 0.0])
    cur = LabeledScan(truth.inverse().apply(street_scan.positions), street_scan.labels, None, street_scan.rings)
    local = extract_local_map(map_of(street_scan), truth, 100.0)
    T_init = RigidTransform([0.3, 0.0, 0.0], [1, 0, 0, 0]) @ truth
    dt, _ = scan_to_map_register(source_of(cur), local, T_init).T.delta(truth)
    assert dt < 0.02


def test_grossly_wrong_prior_has_no_matches(street_scan):
    m = map_of(street_scan)
    far = RigidTransform([5000.0, 0, 0], [1, 0, 0, 0])
    with pytest.raises(InsufficientMatches):
        scan_to_map_register(source_of(street_scan), extract_local_map(m, far, 100.0), far)
    with pytest.raises(InsufficientMatches):
        scan_to_map_register(source_of(street_scan), extract_local_map(m, I, 100.0), far)


# ---------------------------------------------------------------------------
# pipeline


def test_first_frame_is_identity_and_seeds_the_map(street_scan):
    loam = SemanticLoam()
    res = loam.process_frame(street_scan)
    assert res.pose.delta(I) == (0.0, 0.0)
    assert res.odometry is None and not res.flagged
    ref = map_of(street_scan)
    for s in (SurfaceType.EDGE, SurfaceType.PLANAR):
        assert np.array_equal(loam.map.stores[s].keys, ref.stores[s].keys)


def test_static_platform():
    loam = SemanticLoam()
    scan = plane_room_scan()
    for _ in range(10):
        loam.process_frame(scan)
    assert max(T.delta(I)[0] for T in loam.poses) < 1e-3


def test_static_platform_in_street_stays_within_millimetres(street_scan):
    # voxel centroids of thin poles and trunks sit off the silhouettes the
    # keypoints come from, which pulls the map registration slightly
    loam = SemanticLoam()
    for _ in range(10):
        loam.process_frame(street_scan)
    assert max(T.delta(I)[0] for T in loam.poses) < 5e-3


def test_constant_velocity_corridor():
    seq = make_sequence(40, seed=2, v_amp=0.0, wobble=0.0, ramp=0.0)
    loam = SemanticLoam(PipelineConfig())
    for scan in seq.scans:
        loam.process_frame(scan)
    length = np.linalg.norm(seq.poses[-1].t)
    assert length > 30
    assert loam.poses[-1].delta(seq.poses[-1])[0] < 0.005 * length


# ---------------------------------------------------------------------------
# export


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    pts = rng.uniform(-50, 50, (100, 3)).astype(np.float32)
    labels = rng.choice([40, 50, 70], 100)
    write_ply(tmp_path / "m.ply", pts, labels)
    xyz, rgb, cls = read_ply(tmp_path / "m.ply")
    assert np.array_equal(xyz, pts) and np.array_equal(cls, labels)
    assert np.array_equal(rgb, SEMANTIC_KITTI.color_array(labels))


def test_export_map_writes_feature_cells(tmp_path, street_scan):
    m = map_of(street_scan)
    export_map(m, tmp_path / "map.ply")
    xyz, _, _ = read_ply(tmp_path / "map.ply")
    assert len(xyz) == len(m)
