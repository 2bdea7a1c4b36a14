"""Semantic voxel map, scan-to-map refinement and the per-frame pipeline."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .core import RigidTransform, SurfaceType
from .errors import InsufficientMatches, RegistrationFailed
from .estimation import RegistrationResult, register, semantic_lidar_odometry
from .features import Keypoints, extract_keypoint_sets
from .io_kitti import SEMANTIC_KITTI, LabeledScan, SemanticTaxonomy
from .matching import SemanticNnForest

log = logging.getLogger(__name__)

_BITS = 21
_OFFSET = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1


def voxel_coords(points, side) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / side).astype(np.int64)


def pack_keys(coords) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64) + _OFFSET
    if np.any((c < 0) | (c > _MASK)):
        raise ValueError("voxel coordinate out of packable range")
    return (c[:, 0] << (2 * _BITS)) | (c[:, 1] << _BITS) | c[:, 2]


def unpack_keys(keys) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    return np.stack([(keys >> (2 * _BITS)) & _MASK, (keys >> _BITS) & _MASK, keys & _MASK], axis=1) - _OFFSET


class VoxelStore:
    """Sparse voxel grid accumulating centroid sums and the min-range label.

    Cells are kept sorted by packed voxel key, so iteration order is a pure
    function of the cell set.
    """

    def __init__(self, side: float):
        if side <= 0:
            raise ValueError("voxel side must be positive")
        self.side = float(side)
        self.keys = np.zeros(0, dtype=np.int64)
        self.sums = np.zeros((0, 3))
        self.counts = np.zeros(0, dtype=np.int64)
        self.labels = np.zeros(0, dtype=np.uint16)
        self.min_range = np.zeros(0)

    def __len__(self):
        return len(self.keys)

    @property
    def centroids(self) -> np.ndarray:
        return self.sums / self.counts[:, None]

    def insert(self, points, labels, ranges):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if not len(points):
            return
        labels = np.asarray(labels, dtype=np.uint16)
        ranges = np.asarray(ranges, dtype=float)
        keys = pack_keys(voxel_coords(points, self.side))
        ukeys, inv = np.unique(keys, return_inverse=True)
        sums = np.zeros((len(ukeys), 3))
        for axis in range(3):
            sums[:, axis] = np.bincount(inv, weights=points[:, axis], minlength=len(ukeys))
        counts = np.bincount(inv, minlength=len(ukeys))
        # per cell, the contributor with the smallest range (earliest on ties)
        order = np.lexsort((np.arange(len(keys)), ranges, inv))
        first = order[np.r_[0, np.flatnonzero(np.diff(inv[order])) + 1]]
        b_label, b_range = labels[first], ranges[first]

        pos = np.searchsorted(self.keys, ukeys)
        pos_c = np.minimum(pos, max(len(self.keys) - 1, 0))
        exists = (pos < len(self.keys)) & (self.keys[pos_c] == ukeys) if len(self.keys) else np.zeros(len(ukeys), bool)
        if exists.any():
            at = pos[exists]
            self.sums[at] += sums[exists]
            self.counts[at] += counts[exists]
            closer = b_range[exists] < self.min_range[at]
            self.labels[at[closer]] = b_label[exists][closer]
            self.min_range[at[closer]] = b_range[exists][closer]
        new = ~exists
        if new.any():
            keys_all = np.concatenate([self.keys, ukeys[new]])
            order = np.argsort(keys_all, kind="stable")
            self.keys = keys_all[order]
            self.sums = np.concatenate([self.sums, sums[new]])[order]
            self.counts = np.concatenate([self.counts, counts[new]])[order]
            self.labels = np.concatenate([self.labels, b_label[new]])[order]
            self.min_range = np.concatenate([self.min_range, b_range[new]])[order]


def voxel_downsample_semantic(points, labels, ranges, side) -> LabeledScan:
    """One point per occupied voxel: member centroid, labelled by the closest observation."""
    store = VoxelStore(side)
    store.insert(points, labels, ranges)
    return LabeledScan(
        store.centroids if len(store) else np.zeros((0, 3)),
        store.labels.copy(),
        store.min_range.copy(),
        np.full(len(store), -1, dtype=np.int16),
    )


class SemanticVoxelMap:
    """Single merged map with separate stores for edge, planar and raw points."""

    def __init__(self, edge_voxel=0.4, planar_voxel=0.8, raw_voxel=0.4, keep_raw=False, taxonomy: SemanticTaxonomy = SEMANTIC_KITTI):
        self.stores = {
            SurfaceType.EDGE: VoxelStore(edge_voxel),
            SurfaceType.PLANAR: VoxelStore(planar_voxel),
        }
        if keep_raw:
            self.stores[SurfaceType.RAW] = VoxelStore(raw_voxel)
        self.taxonomy = taxonomy

    def _insert(self, surface, positions, labels, ranges, T_pose):
        if surface not in self.stores or not len(positions):
            return
        static = ~self.taxonomy.is_dynamic(labels)
        world = T_pose.apply(np.asarray(positions)[static])
        self.stores[surface].insert(world, np.asarray(labels)[static], np.asarray(ranges)[static])

    def update(self, edge: Keypoints, planar: Keypoints, raw: LabeledScan | None, T_pose: RigidTransform):
        self._insert(SurfaceType.EDGE, edge.positions, edge.labels, edge.ranges, T_pose)
        self._insert(SurfaceType.PLANAR, planar.positions, planar.labels, planar.ranges, T_pose)
        if raw is not None and raw.labels is not None:
            self._insert(SurfaceType.RAW, raw.positions, raw.labels, raw.ranges, T_pose)

    def feature_points(self) -> Keypoints:
        parts = []
        for surface in (SurfaceType.EDGE, SurfaceType.PLANAR):
            st = self.stores[surface]
            if len(st):
                parts.append(Keypoints(st.centroids, st.labels, surface, st.min_range))
        return Keypoints.concat(parts)

    def __len__(self):
        return sum(len(s) for s in self.stores.values())


def update_map(map_: SemanticVoxelMap, edge: Keypoints, planar: Keypoints, raw, T_pose: RigidTransform):
    map_.update(edge, planar, raw, T_pose)


def extract_local_map(map_: SemanticVoxelMap, pose: RigidTransform, half_extent: float) -> Keypoints:
    """Edge and planar cells whose centroid lies in the cube around ``pose.t``."""
    if half_extent <= 0:
        raise ValueError("half_extent must be positive")
    parts = []
    for surface in (SurfaceType.EDGE, SurfaceType.PLANAR):
        st = map_.stores[surface]
        if not len(st):
            continue
        c = st.centroids
        inside = np.all(np.abs(c - pose.t) <= half_extent, axis=1)
        parts.append(Keypoints(c[inside], st.labels[inside], surface, st.min_range[inside]))
    return Keypoints.concat(parts)


def scan_to_map_register(
    keypoints: Keypoints,
    local_map: Keypoints,
    T_init: RigidTransform,
    config: PipelineConfig | None = None,
) -> RegistrationResult:
    """Refine a world pose by matching scan keypoints against the local map."""
    cfg = config or PipelineConfig()
    if not len(local_map):
        raise InsufficientMatches(0, cfg.solver.min_matches)
    forest = SemanticNnForest(local_map, cfg.matching.use_semantics)
    return register(
        keypoints, forest, T_init,
        cfg.solver.map_loss_schedule, cfg.solver.map_passes, cfg.solver, cfg.matching,
        cfg.matching.match_distance(cfg.skip) if cfg.mapping.max_dist is None else cfg.mapping.max_dist,
        use_orme=cfg.solver.use_orme and cfg.mapping.use_orme,
        early_termination=False,
    )


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class FrameResult:
    index: int
    pose: RigidTransform
    flagged: bool
    odometry: RegistrationResult | None
    refinement: RegistrationResult | None
    seconds: float
    n_edge: int
    n_planar: int


@dataclass
class SemanticLoam:
    """Odometry + mapping state carried between frames."""

    config: PipelineConfig = field(default_factory=PipelineConfig)
    taxonomy: SemanticTaxonomy = SEMANTIC_KITTI

    def __post_init__(self):
        m = self.config.mapping
        self.map = SemanticVoxelMap(m.edge_voxel, m.planar_voxel, m.raw_voxel, m.keep_raw, self.taxonomy)
        self.pose = None
        self.motion = RigidTransform.identity()
        self.prev_forest = None
        self.poses = []
        self.flags = []

    def process_frame(self, scan: LabeledScan) -> FrameResult:
        start = time.perf_counter()
        cfg = self.config
        dyn = self.taxonomy.dynamic_classes
        edge, planar, t_edge, t_planar = extract_keypoint_sets(scan, cfg.features, dyn)
        current = Keypoints.concat([edge, planar])
        flagged = False
        odo = ref = None
        if self.pose is None:
            pose = RigidTransform.identity()
        else:
            try:
                odo = semantic_lidar_odometry(current, self.prev_forest, self.motion, cfg.solver, cfg.matching, cfg.skip)
                T_odo = odo.T
            except RegistrationFailed as exc:
                log.warning("frame %d: %s; using constant-velocity motion", scan.timestamp_index, exc)
                T_odo = self.motion
                flagged = True
            predicted = self.pose @ T_odo
            local = extract_local_map(self.map, predicted, cfg.mapping.half_extent)
            try:
                ref = scan_to_map_register(current, local, predicted, cfg)
                pose = ref.T
            except InsufficientMatches as exc:
                log.warning("frame %d: map registration failed (%s); keeping odometry pose", scan.timestamp_index, exc)
                pose = predicted
            self.motion = self.pose.inverse() @ pose
        self.map.update(t_edge, t_planar, scan if cfg.mapping.keep_raw else None, pose)
        self.prev_forest = SemanticNnForest(Keypoints.concat([t_edge, t_planar]), cfg.matching.use_semantics)
        self.pose = pose
        self.poses.append(pose)
        self.flags.append(flagged)
        return FrameResult(
            scan.timestamp_index, pose, flagged, odo, ref,
            time.perf_counter() - start, len(edge), len(planar),
        )


def process_frame(state: SemanticLoam, scan: LabeledScan) -> FrameResult:
    return state.process_frame(scan)


# ---------------------------------------------------------------------------
# export


def write_ply(path, positions, labels, taxonomy: SemanticTaxonomy = SEMANTIC_KITTI):
    """Binary little-endian PLY with xyz float32, rgb uint8 and a uint16 class."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.uint16)
    rgb = taxonomy.color_array(labels)
    vertex = np.empty(
        len(positions),
        dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("class", "<u2")],
    )
    vertex["x"], vertex["y"], vertex["z"] = positions.T
    vertex["red"], vertex["green"], vertex["blue"] = rgb.T
    vertex["class"] = labels
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(positions)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property ushort class\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vertex.tobytes())


def read_ply(path):
    """Reader for files produced by :func:`write_ply`; returns ``(xyz, rgb, labels)``."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    if header[1] != "format binary_little_endian 1.0":
        raise ValueError("unsupported PLY format")
    count = int(next(line for line in header if line.startswith("element vertex")).split()[-1])
    dtype = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("class", "<u2")]
    v = np.frombuffer(data[end:], dtype=dtype, count=count)
    xyz = np.stack([v["x"], v["y"], v["z"]], axis=1)
    rgb = np.stack([v["red"], v["green"], v["blue"]], axis=1)
    return xyz, rgb, v["class"].copy()


def export_map(map_: SemanticVoxelMap, path):
    store = map_.stores.get(SurfaceType.RAW)
    if store is None or not len(store):
        pts = map_.feature_points()
        write_ply(path, pts.positions, pts.labels, map_.taxonomy)
    else:
        write_ply(path, store.centroids, store.labels, map_.taxonomy)
