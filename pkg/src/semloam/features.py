"""Edge / planar keypoint extraction by local surface smoothness along scan rings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import FeatureConfig
from .core import SurfaceType
from .io_kitti import DEFAULT_DYNAMIC_CLASSES, LabeledScan


@dataclass
class Keypoints:
    """Parallel arrays describing a set of keypoints (or map points)."""

    positions: np.ndarray
    labels: np.ndarray
    surface: np.ndarray
    ranges: np.ndarray
    rings: np.ndarray | None = None
    smoothness: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        self.labels = np.broadcast_to(np.asarray(self.labels, dtype=np.uint16), (n,)).copy()
        self.surface = np.broadcast_to(np.asarray(self.surface, dtype=np.int8), (n,)).copy()
        self.ranges = np.broadcast_to(np.asarray(self.ranges, dtype=float), (n,)).copy()

    def __len__(self):
        return len(self.positions)

    def subset(self, mask) -> Keypoints:
        return Keypoints(
            self.positions[mask],
            self.labels[mask],
            self.surface[mask],
            self.ranges[mask],
            None if self.rings is None else self.rings[mask],
            None if self.smoothness is None else self.smoothness[mask],
        )

    @classmethod
    def empty(cls) -> Keypoints:
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def concat(cls, parts) -> Keypoints:
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.surface for p in parts]),
            np.concatenate([p.ranges for p in parts]),
        )


def _ring_order(scan: LabeledScan) -> np.ndarray:
    azimuth = np.arctan2(scan.positions[:, 1], scan.positions[:, 0])
    return np.lexsort((np.arange(len(scan)), azimuth, scan.rings))


def _ring_bounds(rings_sorted):
    """Start index (inclusive) and end index (exclusive) of each point's ring."""
    n = len(rings_sorted)
    change = np.flatnonzero(np.diff(rings_sorted)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [n]])
    seg = np.repeat(np.arange(len(starts)), ends - starts)
    return starts, ends, seg


def _smoothness_sorted(P, starts, ends, seg, window):
    n = len(P)
    csum = np.vstack([np.zeros((1, 3)), np.cumsum(P, axis=0)])
    idx = np.arange(n)
    ok = (idx - starts[seg] >= window) & (ends[seg] - 1 - idx >= window)
    lo = np.clip(idx - window, 0, n)
    hi = np.clip(idx + window + 1, 0, n)
    diff = csum[hi] - csum[lo] - (2 * window + 1) * P
    norm = np.linalg.norm(P, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.linalg.norm(diff, axis=1) / (2 * window * norm)
    s[~ok] = np.nan
    return s, ok


def compute_smoothness(ring_points, window=5):
    """Smoothness of each point of one azimuth-ordered ring.

    ``|sum_j (p_j - p_i)| / (|window| * |p_i|)`` over ``window`` neighbours on
    each side. Points without a full window are ineligible and get ``nan``.
    """
    P = np.asarray(ring_points, dtype=float).reshape(-1, 3)
    n = len(P)
    s, _ = _smoothness_sorted(P, np.zeros(1, int), np.full(1, n), np.zeros(n, int), window)
    return s


def _occlusion_mask(P, ranges, seg, ratio, window):
    """Far-side points next to a range jump, plus isolated points."""
    n = len(P)
    bad = np.zeros(n, dtype=bool)
    if n < 2:
        return bad
    same = seg[1:] == seg[:-1]
    r0, r1 = ranges[:-1], ranges[1:]
    jump = same & (np.abs(r0 - r1) > ratio * np.minimum(r0, r1))
    # left point far: it and `window` points before it are occluded
    for i in np.flatnonzero(jump & (r0 > r1)):
        lo = i - window
        while lo < 0 or seg[lo] != seg[i]:
            lo += 1
        bad[lo : i + 1] = True
    for i in np.flatnonzero(jump & (r1 >= r0)):
        hi = i + 1 + window
        while hi >= n or seg[hi] != seg[i + 1]:
            hi -= 1
        bad[i + 1 : hi + 1] = True
    isolated = np.zeros(n, dtype=bool)
    isolated[1:-1] = jump[:-1] & jump[1:]
    return bad | isolated


def _prepare(scan: LabeledScan, cfg: FeatureConfig, dynamic_classes):
    order = _ring_order(scan)
    P = scan.positions[order]
    rings = scan.rings[order]
    ranges = scan.ranges[order]
    labels = scan.labels[order] if scan.labels is not None else np.zeros(len(P), np.uint16)
    starts, ends, seg = _ring_bounds(rings)
    smooth, eligible = _smoothness_sorted(P, starts, ends, seg, cfg.window)
    eligible &= ~_occlusion_mask(P, ranges, seg, cfg.occlusion_ratio, cfg.window)
    eligible &= ~np.isin(labels, np.fromiter(dynamic_classes, dtype=np.int64))
    return P, rings, ranges, labels, starts, ends, smooth, eligible


def _select(smooth, eligible, starts, ends, cfg: FeatureConfig, max_edge, max_planar):
    """Per-region selection; ``max_planar=None`` takes every flat point without suppression."""
    w = cfg.window
    picked = ~eligible
    kind = np.full(len(smooth), -1, dtype=np.int8)

    def suppress(i, lo, hi):
        picked[max(lo, i - cfg.suppression) : min(hi, i + cfg.suppression + 1)] = True

    key_desc = -np.nan_to_num(smooth, nan=-1.0)
    key_asc = np.nan_to_num(smooth, nan=np.inf)
    for start, end in zip(starts, ends):
        span = end - start - 2 * w
        if span <= 0:
            continue
        for j in range(cfg.n_regions):
            sp = start + w + span * j // cfg.n_regions
            ep = start + w + span * (j + 1) // cfg.n_regions
            if ep <= sp:
                continue
            region = np.arange(sp, ep)
            s = smooth[region]
            by_desc = region[np.lexsort((region, key_desc[region]))]
            count = 0
            for i in by_desc:
                if count >= max_edge or not smooth[i] > cfg.edge_threshold:
                    break
                if picked[i]:
                    continue
                kind[i] = SurfaceType.EDGE
                count += 1
                suppress(i, start, end)
            if max_planar is None:
                flat = region[eligible[region] & (kind[region] < 0) & (s < cfg.planar_threshold)]
                kind[flat] = SurfaceType.PLANAR
                continue
            by_asc = region[np.lexsort((region, key_asc[region]))]
            count = 0
            for i in by_asc:
                if count >= max_planar or not smooth[i] < cfg.planar_threshold:
                    break
                if picked[i]:
                    continue
                kind[i] = SurfaceType.PLANAR
                count += 1
                suppress(i, start, end)
    return kind


def _voxel_centroids(P, labels, ranges, voxel):
    """Centroid per ``(voxel, class)`` cell, cells in first-seen order."""
    if not len(P) or voxel <= 0:
        return P, labels, ranges
    cell = np.floor(P / voxel).astype(np.int64) + (1 << 20)
    key = (cell[:, 0] << 42) | (cell[:, 1] << 21) | cell[:, 2]
    order = np.lexsort((np.arange(len(P)), labels, key))
    ks, ls = key[order], labels[order]
    new = np.ones(len(P), dtype=bool)
    new[1:] = (ks[1:] != ks[:-1]) | (ls[1:] != ls[:-1])
    group = np.cumsum(new) - 1
    inv = np.empty(len(P), dtype=np.int64)
    inv[order] = group
    first = order[new]
    n = len(first)
    counts = np.bincount(inv, minlength=n)
    cent = np.column_stack([np.bincount(inv, P[:, k], n) for k in range(3)]) / counts[:, None]
    rng_ = np.bincount(inv, ranges, n) / counts
    order = np.argsort(first, kind="stable")
    return cent[order], labels[first[order]], rng_[order]



def extract_keypoints(
    scan: LabeledScan,
    config: FeatureConfig | None = None,
    dynamic_classes=DEFAULT_DYNAMIC_CLASSES,
) -> tuple[Keypoints, Keypoints]:
    """Return ``(edge, planar)`` keypoints, each ordered by ring then azimuth."""
    return extract_keypoint_sets(scan, config, dynamic_classes, target=False)[:2]


def extract_target_keypoints(
    scan: LabeledScan,
    config: FeatureConfig | None = None,
    dynamic_classes=DEFAULT_DYNAMIC_CLASSES,
) -> tuple[Keypoints, Keypoints]:
    """Denser ``(edge, planar)`` sets used as registration targets and map input.

    Up to ``target_max_edge`` edges per region and every flat point, the flat
    ones reduced to per-class voxel centroids (LOAM's less-sharp / less-flat
    clouds).
    """
    return extract_keypoint_sets(scan, config, dynamic_classes, source=False)[2:]


def extract_keypoint_sets(scan: LabeledScan, config=None, dynamic_classes=DEFAULT_DYNAMIC_CLASSES, source=True, target=True):
    """``(edge, planar, target_edge, target_planar)`` from one smoothness pass.

    Sets that were not requested come back empty.
    """
    cfg = config or FeatureConfig()
    empty = Keypoints.empty()
    if len(scan) == 0:
        return empty, empty, empty, empty
    P, rings, ranges, labels, starts, ends, smooth, eligible = _prepare(scan, cfg, dynamic_classes)

    def gather(mask, surface):
        return Keypoints(P[mask], labels[mask], surface, ranges[mask], rings[mask], smooth[mask])

    out = [empty] * 4
    if source:
        kind = _select(smooth, eligible, starts, ends, cfg, cfg.max_edge, cfg.max_planar)
        out[0] = gather(kind == SurfaceType.EDGE, SurfaceType.EDGE)
        out[1] = gather(kind == SurfaceType.PLANAR, SurfaceType.PLANAR)
    if target:
        kind = _select(smooth, eligible, starts, ends, cfg, cfg.target_max_edge, None)
        out[2] = gather(kind == SurfaceType.EDGE, SurfaceType.EDGE)
        f = kind == SurfaceType.PLANAR
        cp, cl, cr = _voxel_centroids(P[f], labels[f], ranges[f], cfg.target_planar_voxel)
        out[3] = Keypoints(cp, cl, SurfaceType.PLANAR, cr)
    return tuple(out)
