"""KITTI odometry / SemanticKITTI ingestion and KITTI pose files."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import RigidTransform
from .errors import (
    CountMismatch,
    DatasetNotFound,
    MalformedFile,
    MalformedLine,
    MissingField,
    NonOrthonormalRotation,
)

# (name, BGR color as listed by the SemanticKITTI api)
_SEMANTIC_KITTI = {
    0: ("unlabeled", (0, 0, 0)),
    1: ("outlier", (0, 0, 255)),
    10: ("car", (245, 150, 100)),
    11: ("bicycle", (245, 230, 100)),
    13: ("bus", (250, 80, 100)),
    15: ("motorcycle", (150, 60, 30)),
    16: ("on-rails", (255, 0, 0)),
    18: ("truck", (180, 30, 80)),
    20: ("other-vehicle", (255, 0, 0)),
    30: ("person", (30, 30, 255)),
    31: ("bicyclist", (200, 40, 255)),
    32: ("motorcyclist", (90, 30, 150)),
    40: ("road", (255, 0, 255)),
    44: ("parking", (255, 150, 255)),
    48: ("sidewalk", (75, 0, 75)),
    49: ("other-ground", (75, 0, 175)),
    50: ("building", (0, 200, 255)),
    51: ("fence", (50, 120, 255)),
    52: ("other-structure", (0, 150, 255)),
    60: ("lane-marking", (170, 255, 150)),
    70: ("vegetation", (0, 175, 0)),
    71: ("trunk", (0, 60, 135)),
    72: ("terrain", (80, 240, 150)),
    80: ("pole", (150, 240, 255)),
    81: ("traffic-sign", (0, 0, 255)),
    99: ("other-object", (255, 255, 50)),
    252: ("moving-car", (245, 150, 100)),
    253: ("moving-bicyclist", (200, 40, 255)),
    254: ("moving-person", (30, 30, 255)),
    255: ("moving-motorcyclist", (90, 30, 150)),
    256: ("moving-on-rails", (255, 0, 0)),
    257: ("moving-bus", (250, 80, 100)),
    258: ("moving-truck", (180, 30, 80)),
    259: ("moving-other-vehicle", (255, 0, 0)),
}

DEFAULT_DYNAMIC_CLASSES = frozenset({10, 11, 15, 18, 20, 30, 31, 32} | set(range(252, 260)))


@dataclass(frozen=True)
class SemanticTaxonomy:
    names: dict
    colors: dict  # class id -> (r, g, b)
    dynamic_classes: frozenset = DEFAULT_DYNAMIC_CLASSES

    def __post_init__(self):
        unknown = set(self.dynamic_classes) - set(self.names)
        if unknown:
            raise ValueError(f"dynamic classes not in taxonomy: {sorted(unknown)}")

    @classmethod
    def semantic_kitti(cls, dynamic_classes=None) -> SemanticTaxonomy:
        names = {k: v[0] for k, v in _SEMANTIC_KITTI.items()}
        colors = {k: tuple(reversed(v[1])) for k, v in _SEMANTIC_KITTI.items()}
        if dynamic_classes is None:
            dynamic_classes = DEFAULT_DYNAMIC_CLASSES
        return cls(names, colors, frozenset(dynamic_classes))

    def is_dynamic(self, labels) -> np.ndarray:
        return np.isin(np.asarray(labels), np.fromiter(self.dynamic_classes, dtype=np.int64))

    def color_array(self, labels) -> np.ndarray:
        lut = np.zeros((1 << 16, 3), dtype=np.uint8)
        for k, rgb in self.colors.items():
            lut[k] = rgb
        return lut[np.asarray(labels, dtype=np.int64)]


SEMANTIC_KITTI = SemanticTaxonomy.semantic_kitti()


# ---------------------------------------------------------------------------
# scans

# HDL-64E: upper block of 32 beams from +2.0 deg spaced 1/3 deg, lower block
# of 32 beams from -8.83 deg spaced 1/2 deg down to -24.8 deg.
_UPPER_TOP_DEG = 2.0
_BLOCK_SPLIT_DEG = -8.83


def ring_from_points(positions) -> np.ndarray:
    positions = np.asarray(positions, dtype=float)
    r = np.linalg.norm(positions, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        angle = np.degrees(np.arcsin(np.clip(positions[:, 2] / r, -1.0, 1.0)))
    angle = np.nan_to_num(angle)
    upper = np.floor((_UPPER_TOP_DEG - angle) * 3.0 + 0.5)
    lower = 32 + np.floor((_BLOCK_SPLIT_DEG - angle) * 2.0 + 0.5)
    ring = np.where(angle >= _BLOCK_SPLIT_DEG, upper, lower)
    return np.clip(ring, 0, 63).astype(np.int16)


@dataclass
class LabeledScan:
    """One LiDAR sweep as parallel arrays (struct-of-arrays)."""

    positions: np.ndarray
    labels: np.ndarray | None = None
    ranges: np.ndarray | None = None
    rings: np.ndarray | None = None
    timestamp_index: int = 0

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=float).reshape(-1, 3)
        if self.ranges is None:
            self.ranges = np.linalg.norm(self.positions, axis=1)
        if self.rings is None:
            self.rings = ring_from_points(self.positions)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint16)

    def __len__(self):
        return len(self.positions)

    def subset(self, mask) -> LabeledScan:
        return LabeledScan(
            self.positions[mask],
            None if self.labels is None else self.labels[mask],
            self.ranges[mask],
            self.rings[mask],
            self.timestamp_index,
        )

    def with_labels(self, labels) -> LabeledScan:
        return LabeledScan(self.positions, labels, self.ranges, self.rings, self.timestamp_index)


def read_velodyne_bin(path, timestamp_index=0) -> LabeledScan:
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % 16:
        raise MalformedFile(f"{path}: {len(raw)} bytes is not a positive multiple of 16")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    positions = data[:, :3].astype(float)
    if not np.all(np.isfinite(positions)):
        raise MalformedFile(f"{path}: non-finite coordinates")
    return LabeledScan(positions, timestamp_index=timestamp_index)


def read_labels(path, scan: LabeledScan) -> LabeledScan:
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise MalformedFile(f"{path}: truncated label file")
    words = np.frombuffer(raw, dtype="<u4")
    if len(words) != len(scan):
        raise CountMismatch(f"{path}: {len(words)} labels for {len(scan)} points")
    return scan.with_labels((words & 0xFFFF).astype(np.uint16))


def write_velodyne_bin(path, positions, intensity=None):
    positions = np.asarray(positions, dtype=float)
    data = np.zeros((len(positions), 4), dtype="<f4")
    data[:, :3] = positions
    if intensity is not None:
        data[:, 3] = intensity
    Path(path).write_bytes(data.tobytes())


def write_labels(path, labels, instances=None):
    words = np.asarray(labels, dtype="<u4") & 0xFFFF
    if instances is not None:
        words |= np.asarray(instances, dtype="<u4") << 16
    Path(path).write_bytes(words.astype("<u4").tobytes())


def filter_scan(scan: LabeledScan, min_range=2.0, max_range=120.0, drop_classes=(0,)) -> LabeledScan:
    """Drop self-returns, far noise and (when labelled) the listed classes."""
    keep = (scan.ranges >= min_range) & (scan.ranges <= max_range)
    if scan.labels is not None and len(drop_classes):
        keep &= ~np.isin(scan.labels, np.asarray(drop_classes))
    return scan.subset(keep)


# ---------------------------------------------------------------------------
# poses and calibration

_ORTHO_TOL = 1e-3


def _rigid_from_row(values, where) -> RigidTransform:
    M = np.asarray(values, dtype=float).reshape(3, 4)
    R = M[:, :3]
    U, _, Vt = np.linalg.svd(R)
    R_fix = U @ Vt
    if np.linalg.det(R_fix) < 0 or np.max(np.abs(R_fix - R)) > _ORTHO_TOL:
        raise NonOrthonormalRotation(f"{where}: rotation is not orthonormal")
    H = np.eye(4)
    H[:3, :3] = R_fix
    H[:3, 3] = M[:, 3]
    return RigidTransform.from_matrix(H)


def parse_pose_line(line, where="<line>") -> RigidTransform:
    fields = line.split()
    if len(fields) != 12:
        raise MalformedLine(f"{where}: expected 12 values, got {len(fields)}")
    try:
        values = [float(v) for v in fields]
    except ValueError as exc:
        raise MalformedLine(f"{where}: {exc}") from None
    if not np.all(np.isfinite(values)):
        raise MalformedLine(f"{where}: non-finite value")
    return _rigid_from_row(values, where)


def read_poses(path) -> list[RigidTransform]:
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            poses.append(parse_pose_line(line, f"{path}:{lineno}"))
    return poses


def format_pose(T: RigidTransform) -> str:
    return " ".join(f"{v:.9e}" for v in T.as_matrix()[:3].ravel())


def write_poses(path, poses):
    with open(path, "w") as f:
        for T in poses:
            f.write(format_pose(T) + "\n")


def load_calibration(path) -> RigidTransform:
    """Velodyne-to-camera extrinsic from the ``Tr:`` line of a KITTI calib.txt."""
    with open(path) as f:
        for line in f:
            if line.startswith("Tr:"):
                return parse_pose_line(line[3:], f"{path}:Tr")
    raise MissingField(f"{path}: no 'Tr:' line")


def conjugate_poses(poses, Tr: RigidTransform) -> list[RigidTransform]:
    """Express LiDAR-frame poses in the camera frame: ``Tr T Tr^-1``."""
    Tr_inv = Tr.inverse()
    return [Tr @ T @ Tr_inv for T in poses]


# ---------------------------------------------------------------------------
# dataset layout


@dataclass
class KittiSequence:
    """``<root>/sequences/<seq>/{velodyne,labels,calib.txt}`` plus ``<root>/poses/<seq>.txt``."""

    root: Path
    sequence: str
    min_range: float = 2.0
    max_range: float = 120.0
    drop_classes: tuple = (0,)
    frames: list = field(init=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.sequence = f"{int(self.sequence):02d}" if str(self.sequence).isdigit() else str(self.sequence)
        if not self.velodyne_dir.is_dir():
            raise DatasetNotFound(f"no velodyne scans under {self.velodyne_dir}")
        self.frames = sorted(int(p.stem) for p in self.velodyne_dir.glob("*.bin"))
        if not self.frames:
            raise DatasetNotFound(f"{self.velodyne_dir} holds no .bin files")

    @classmethod
    def from_env(cls, sequence, root=None, **kwargs) -> KittiSequence:
        root = root or os.environ.get("SEMLOAM_DATASET_ROOT")
        if not root:
            raise DatasetNotFound("no dataset root given and SEMLOAM_DATASET_ROOT is unset")
        return cls(Path(root), sequence, **kwargs)

    @property
    def sequence_dir(self) -> Path:
        return self.root / "sequences" / self.sequence

    @property
    def velodyne_dir(self) -> Path:
        return self.sequence_dir / "velodyne"

    @property
    def labels_dir(self) -> Path:
        return self.sequence_dir / "labels"

    @property
    def calib_path(self) -> Path:
        return self.sequence_dir / "calib.txt"

    @property
    def poses_path(self) -> Path:
        return self.root / "poses" / f"{self.sequence}.txt"

    def __len__(self):
        return len(self.frames)

    def load_scan(self, frame: int) -> LabeledScan:
        scan = read_velodyne_bin(self.velodyne_dir / f"{frame:06d}.bin", timestamp_index=frame)
        label_path = self.labels_dir / f"{frame:06d}.label"
        if not label_path.exists():
            raise DatasetNotFound(f"missing labels {label_path}")
        scan = read_labels(label_path, scan)
        return filter_scan(scan, self.min_range, self.max_range, self.drop_classes)

    def ground_truth(self) -> list[RigidTransform]:
        return read_poses(self.poses_path)

    def calibration(self) -> RigidTransform:
        if not self.calib_path.exists():
            return RigidTransform.identity()
        return load_calibration(self.calib_path)
