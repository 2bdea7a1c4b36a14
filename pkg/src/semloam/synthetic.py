"""Ray-cast synthetic street scenes for registration tests and benchmarks.

A straight street runs along +x. Road, sidewalk and terrain share the z = 0
ground plane; buildings, hedges, fences and parked cars are boxes; poles and
tree trunks are vertical cylinders; tree crowns are spheres. A 64-beam sensor
with HDL-64E elevation angles is ray cast against the scene, so scans come
out ordered by ring and azimuth like real sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import RigidTransform
from .io_kitti import LabeledScan, conjugate_poses, write_labels, write_poses, write_velodyne_bin

ROAD, SIDEWALK, TERRAIN = 40, 48, 72
BUILDING, FENCE, VEGETATION, TRUNK, POLE, SIGN, CAR, MOVING_CAR = 50, 51, 70, 71, 80, 81, 10, 252

SENSOR_HEIGHT = 1.73


def hdl64_elevations() -> np.ndarray:
    upper = 2.0 - np.arange(32) / 3.0
    lower = -8.83 - np.arange(32) / 2.0
    return np.radians(np.concatenate([upper, lower]))


# velodyne -> camera extrinsic in the usual KITTI axis convention
KITTI_LIKE_TR = RigidTransform.from_matrix(
    np.array(
        [
            [0.0, -1.0, 0.0, -0.01],
            [0.0, 0.0, -1.0, -0.07],
            [1.0, 0.0, 0.0, -0.27],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
)


@dataclass
class Scene:
    boxes: list = field(default_factory=list)  # (lo(3), hi(3), class)
    cylinders: list = field(default_factory=list)  # (cx, cy, z0, z1, radius, class)
    spheres: list = field(default_factory=list)  # (center(3), radius, class)
    road_half_width: float = 4.0
    sidewalk_outer: float = 7.0

    def ground_label(self, y):
        ay = np.abs(y)
        return np.where(ay < self.road_half_width, ROAD, np.where(ay < self.sidewalk_outer, SIDEWALK, TERRAIN))


def _segments(rng, x0, x1, length, gap):
    x = x0 + rng.uniform(0, gap[1])
    while x < x1:
        seg = rng.uniform(*length)
        yield x, min(x + seg, x1)
        x += seg + rng.uniform(*gap)


def street_scene(length=300.0, seed=0, margin=80.0, parked_cars=True, crowns=True, hedge_rows=(8.0, 11.0), tree_spacing=(4.0, 7.0)) -> Scene:
    """Corridor with repeated same-class structures on both sides of the street."""
    rng = np.random.default_rng(seed)
    sc = Scene()
    x0, x1 = -margin, length + margin
    for side in (-1.0, 1.0):
        for a, b in _segments(rng, x0, x1, (10, 30), (4, 10)):
            face = 15.0 + rng.uniform(-1.0, 1.0)
            h = rng.uniform(6, 15)
            ys = sorted([side * face, side * (face + 8.0)])
            sc.boxes.append((np.array([a, ys[0], 0.0]), np.array([b, ys[1], h]), BUILDING))
        # two hedge rows straddling the sidewalk edge
        for row in hedge_rows:
            for a, b in _segments(rng, x0, x1, (5, 20), (2, 8)):
                h = rng.uniform(1.0, 2.0)
                ys = sorted([side * row, side * (row + 0.8)])
                sc.boxes.append((np.array([a, ys[0], 0.0]), np.array([b, ys[1], h]), VEGETATION))
        for a, b in _segments(rng, x0, x1, (6, 15), (10, 30)):
            ys = sorted([side * 12.6, side * 12.65])
            sc.boxes.append((np.array([a, ys[0], 0.0]), np.array([b, ys[1], 1.2]), FENCE))
        x = x0 + rng.uniform(0, 10)
        while x < x1:
            sc.cylinders.append((x, side * 5.5, 0.0, 7.0, 0.12, POLE))
            if rng.uniform() < 0.5:
                y = side * 5.5
                sc.boxes.append((np.array([x - 0.05, y - 0.4, 2.6]), np.array([x + 0.05, y + 0.4, 3.3]), SIGN))
            x += rng.uniform(15, 30)
        x = x0 + rng.uniform(0, 8)
        while x < x1:
            r = rng.uniform(0.18, 0.3)
            sc.cylinders.append((x, side * 6.5, 0.0, 3.2, r, TRUNK))
            radius = rng.uniform(1.5, 2.3)
            if crowns:
                sc.spheres.append((np.array([x, side * 6.5, 4.8]), radius, VEGETATION))
            x += rng.uniform(*tree_spacing)
        if parked_cars:
            for a, b in _segments(rng, x0, x1, (4.2, 4.8), (15, 40)):
                ys = sorted([side * 2.4, side * 4.2])
                sc.boxes.append((np.array([a, ys[0], 0.0]), np.array([b, ys[1], 1.5]), CAR))
    return sc


# ---------------------------------------------------------------------------
# ray casting


def _bounding_spheres(scene: Scene):
    centers, radii = [], []
    for lo, hi, _ in scene.boxes:
        centers.append(0.5 * (lo + hi))
        radii.append(0.5 * np.linalg.norm(hi - lo))
    for cx, cy, z0, z1, r, _ in scene.cylinders:
        centers.append(np.array([cx, cy, 0.5 * (z0 + z1)]))
        radii.append(np.hypot(r, 0.5 * (z1 - z0)))
    for c, r, _ in scene.spheres:
        centers.append(np.asarray(c))
        radii.append(r)
    return np.array(centers, dtype=float).reshape(-1, 3), np.array(radii, dtype=float)


def _hit_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def _hit_cylinder(o, d, cx, cy, z0, z1, r):
    ox, oy = o[0] - cx, o[1] - cy
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (ox * d[:, 0] + oy * d[:, 1])
    c = ox * ox + oy * oy - r * r
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 1e-12)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2 * a)
    z = o[2] + t * d[:, 2]
    hit = ok & (t > 0) & (z >= z0) & (z <= z1)
    return np.where(hit, t, np.inf)


def _hit_sphere(o, d, center, r):
    oc = o - center
    b = d @ oc
    c = oc @ oc - r * r
    disc = b * b - c
    ok = disc >= 0
    t = -b - np.sqrt(np.where(ok, disc, 0.0))
    return np.where(ok & (t > 0), t, np.inf)


@dataclass
class Sensor:
    n_azimuth: int = 1800
    max_range: float = 100.0
    range_noise: float = 0.01

    def __post_init__(self):
        self.elevation = hdl64_elevations()
        az = np.pi - 2 * np.pi * (np.arange(self.n_azimuth) + 0.5) / self.n_azimuth
        self.azimuth = az  # descending, like a clockwise sweep
        el, azg = np.meshgrid(self.elevation, az, indexing="ij")
        self.directions = np.stack(
            [np.cos(el) * np.cos(azg), np.cos(el) * np.sin(azg), np.sin(el)], axis=-1
        )  # (64, n_az, 3) in the sensor frame

    def cast(self, scene: Scene, pose: RigidTransform, rng=None, bounds=None, dynamic=()):
        """Ray cast from ``pose`` (world <- sensor); returns sensor-frame points, labels and rings."""
        R, o = pose.rotation, pose.t
        n_el, n_az = self.directions.shape[:2]
        d_world = self.directions @ R.T
        t_best = np.full((n_el, n_az), np.inf)
        label = np.zeros((n_el, n_az), dtype=np.uint16)

        dz = d_world[..., 2]
        with np.errstate(divide="ignore"):
            tg = np.where(dz < -1e-9, -o[2] / dz, np.inf)
        hit_xy = o[:2] + tg[..., None] * d_world[..., :2]
        t_best = tg
        label = np.where(np.isfinite(tg), scene.ground_label(hit_xy[..., 1]), 0).astype(np.uint16)

        centers, radii = bounds if bounds is not None else _bounding_spheres(scene)
        rel = (centers - o) @ R  # sensor frame
        dist = np.linalg.norm(rel, axis=1)
        prim_az = np.arctan2(rel[:, 1], rel[:, 0])
        step = 2 * np.pi / n_az
        prims = [("box", b) for b in scene.boxes] + [("cyl", c) for c in scene.cylinders] + [("sph", s) for s in scene.spheres]
        prims += [("box", b) for b in dynamic]
        extra_c, extra_r = (_bounding_spheres(Scene(boxes=list(dynamic))) if dynamic else (np.zeros((0, 3)), np.zeros(0)))
        if len(extra_c):
            rel2 = (extra_c - o) @ R
            rel = np.vstack([rel, rel2])
            dist = np.concatenate([dist, np.linalg.norm(rel2, axis=1)])
            prim_az = np.concatenate([prim_az, np.arctan2(rel2[:, 1], rel2[:, 0])])
            radii = np.concatenate([radii, extra_r])
        for k, (kind, prim) in enumerate(prims):
            if dist[k] - radii[k] > self.max_range:
                continue
            if dist[k] <= radii[k] * 1.01:
                cols = np.arange(n_az)
            else:
                half = np.arcsin(min(1.0, radii[k] / dist[k])) + step
                c_mid = (np.pi - prim_az[k]) / step - 0.5
                lo = int(np.floor(c_mid - half / step))
                hi = int(np.ceil(c_mid + half / step))
                cols = np.arange(lo, hi + 1) % n_az
                cols = np.unique(cols)
            dsub = d_world[:, cols].reshape(-1, 3)
            if kind == "box":
                lo_, hi_, cls = prim
                t = _hit_box(o, dsub, lo_, hi_)
            elif kind == "cyl":
                cx, cy, z0, z1, r, cls = prim
                t = _hit_cylinder(o, dsub, cx, cy, z0, z1, r)
            else:
                c, r, cls = prim
                t = _hit_sphere(o, dsub, c, r)
            t = t.reshape(n_el, len(cols))
            cur = t_best[:, cols]
            closer = t < cur
            if closer.any():
                t_best[:, cols] = np.where(closer, t, cur)
                lab = label[:, cols]
                lab[closer] = cls
                label[:, cols] = lab

        valid = np.isfinite(t_best) & (t_best <= self.max_range)
        ring = np.broadcast_to(np.arange(n_el)[:, None], (n_el, n_az))[valid]
        t = t_best[valid]
        if rng is not None and self.range_noise > 0:
            t = t + rng.normal(0.0, self.range_noise, size=t.shape)
        pts = self.directions[valid] * t[:, None]
        return pts, label[valid], ring.astype(np.int16)


# ---------------------------------------------------------------------------
# trajectories and sequences


def street_trajectory(
    n_frames, rate_hz=10.0, v_mean=10.0, v_amp=4.0, v_period=12.0, wobble=2.0, wobble_len=90.0, phase=0.0, ramp=2.0
):
    """World <- sensor poses of a vehicle with varying speed and a lateral weave.

    The vehicle starts from rest; ``ramp`` is the time constant in seconds of
    the initial acceleration (0 starts at full speed).
    """
    dt = 1.0 / rate_hz
    sub = 20
    ts = np.arange(n_frames * sub) * dt / sub
    v = v_mean + v_amp * np.sin(2 * np.pi * ts / v_period + phase)
    if ramp > 0:
        v = v * (1.0 - np.exp(-ts / ramp))
    xs = np.concatenate([[0.0], np.cumsum(v[:-1] * dt / sub)])
    poses = []
    for i in range(n_frames):
        x = xs[i * sub]
        y = wobble * np.sin(2 * np.pi * x / wobble_len)
        slope = wobble * 2 * np.pi / wobble_len * np.cos(2 * np.pi * x / wobble_len)
        yaw = np.arctan(slope)
        poses.append(RigidTransform.from_rotvec([0.0, 0.0, yaw], [x, y, SENSOR_HEIGHT]))
    return poses


@dataclass
class SyntheticSequence:
    scans: list  # LabeledScan in the sensor frame
    poses: list  # world <- sensor, relative to the first frame
    scene: Scene

    def __len__(self):
        return len(self.scans)


def make_sequence(
    n_frames=200,
    seed=0,
    sensor: Sensor | None = None,
    label_noise=0.0,
    poses=None,
    moving_cars=True,
    scene: Scene | None = None,
    **trajectory_kwargs,
) -> SyntheticSequence:
    rng = np.random.default_rng(seed)
    world_poses = poses if poses is not None else street_trajectory(n_frames, **trajectory_kwargs)
    span = max(p.t[0] for p in world_poses) - min(p.t[0] for p in world_poses)
    if scene is None:
        scene = street_scene(length=span + 20.0, seed=seed)
    sensor = sensor or Sensor()
    bounds = _bounding_spheres(scene)
    classes = np.array([ROAD, SIDEWALK, TERRAIN, BUILDING, FENCE, VEGETATION, TRUNK, POLE, SIGN])
    scans = []
    for i, pose in enumerate(world_poses):
        dynamic = []
        if moving_cars:
            # two cars in the oncoming lane, moving at 8 m/s
            for x_start in (60.0, 140.0):
                x = x_start - 8.0 * i / 10.0
                dynamic.append((np.array([x, -2.9, 0.0]), np.array([x + 4.5, -1.1, 1.5]), MOVING_CAR))
        pts, labels, rings = sensor.cast(scene, pose, rng, bounds, dynamic)
        if label_noise > 0:
            flip = rng.uniform(size=len(labels)) < label_noise
            labels = labels.copy()
            labels[flip] = rng.choice(classes, size=int(flip.sum()))
        scans.append(LabeledScan(pts, labels, None, rings, timestamp_index=i))
    inv0 = world_poses[0].inverse()
    return SyntheticSequence(scans, [inv0 @ p for p in world_poses], scene)


def write_dataset(seq: SyntheticSequence, root, sequence="00", Tr: RigidTransform = KITTI_LIKE_TR):
    """Write in the KITTI / SemanticKITTI directory layout; ground truth in the camera frame."""
    root = Path(root)
    sdir = root / "sequences" / sequence
    (sdir / "velodyne").mkdir(parents=True, exist_ok=True)
    (sdir / "labels").mkdir(parents=True, exist_ok=True)
    (root / "poses").mkdir(parents=True, exist_ok=True)
    for i, scan in enumerate(seq.scans):
        write_velodyne_bin(sdir / "velodyne" / f"{i:06d}.bin", scan.positions)
        write_labels(sdir / "labels" / f"{i:06d}.label", scan.labels)
    P = "P0: " + " ".join(["0"] * 12)
    tr = " ".join(f"{v:.12e}" for v in Tr.as_matrix()[:3].ravel())
    (sdir / "calib.txt").write_text(f"{P}\n{P.replace('P0', 'P1')}\nTr: {tr}\n")
    write_poses(root / "poses" / f"{sequence}.txt", conjugate_poses(seq.poses, Tr))
    return root


# ---------------------------------------------------------------------------
# planted-outlier match sets


@dataclass
class PlantedMatches:
    matches: object  # semloam.matching.Matches
    outlier: np.ndarray  # True for planted cross-object matches
    T_true: RigidTransform
    T_init: RigidTransform


def planted_outlier_matches(
    seed=0, n=500, outlier_fraction=0.2, init_trans=0.5, init_rot_deg=3.0, gap=(1.0, 2.0), noise=0.01
) -> PlantedMatches:
    """Matches consistent with ``T_true`` plus cross-object planted outliers.

    True matches are planes (ground, facades, hedges, all slightly tilted) and
    vertical lines through the true position of each keypoint, with ``noise``
    m of normal jitter. A planted outlier pairs a hedge keypoint with a
    parallel hedge of the same class ``gap`` m away, on the side the wrong
    initial guess ``T_init`` pushed the keypoint towards. This is what a
    nearest-neighbour search from a poor prior produces between rows of
    vegetation.
    """
    from .matching import Matches

    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    T_true = RigidTransform.from_rotvec(axis / np.linalg.norm(axis) * rng.uniform(0, 0.1), rng.uniform(-1, 1, 3))
    axis = rng.normal(size=3)
    err = RigidTransform.from_rotvec(
        axis / np.linalg.norm(axis) * np.radians(rng.uniform(0, init_rot_deg)),
        rng.normal(size=3) * init_trans / np.sqrt(3),
    )
    T_init = T_true @ err

    n_out = int(round(outlier_fraction * n))
    n_in = n - n_out
    # surface families of the inliers: ground, facade (x normal), hedge (y normal), pole
    family = rng.choice(4, size=n_in, p=[0.35, 0.2, 0.25, 0.2])
    family = np.concatenate([family, np.full(n_out, 2)])
    src = rng.uniform([-30, -12, -1.7], [30, 12, 4], (n, 3))
    base = np.array([[0, 0, 1], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)[family]
    normal = base + rng.normal(0, 0.05, (n, 3))
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    is_plane = family != 3
    labels = np.array([ROAD, BUILDING, VEGETATION, POLE], dtype=np.uint16)[family]

    p_true = T_true.apply(src)
    # anchors slide within the surface so they are not the keypoint itself
    slide = rng.normal(0, 0.3, (n, 3))
    slide -= np.where(is_plane[:, None], np.sum(slide * normal, axis=1, keepdims=True) * normal, 0.0)
    slide = np.where(is_plane[:, None], slide, normal * rng.normal(0, 0.3, (n, 1)))
    anchors = p_true + slide + noise * rng.normal(size=(n, 1)) * np.where(is_plane[:, None], normal, 0.0)

    outlier = np.arange(n) >= n_in
    push = np.sum((T_init.apply(src) - p_true) * normal, axis=1)
    side = np.where(push >= 0, 1.0, -1.0)
    anchors[outlier] += (side * rng.uniform(*gap, n))[outlier, None] * normal[outlier]

    order = rng.permutation(n)
    matches = Matches(
        src[order], labels[order], is_plane[order], anchors[order], normal[order], np.full(n, 5)
    )
    return PlantedMatches(matches, outlier[order], T_true, T_init)
