"""Semantic nearest-neighbour forest, PCA surface fitting and match assignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import RigidTransform, SurfaceKind, SurfaceModel, SurfaceType, projectors
from .errors import DegenerateFit, TooFewPoints
from .features import Keypoints

ANY_CLASS = -1


class SemanticNnForest:
    """One k-d tree per ``(class_id, surface_type)`` pair.

    With ``use_semantics=False`` every point is filed under ``ANY_CLASS`` so
    there is a single tree per surface type (class-agnostic matching).
    """

    def __init__(self, points: Keypoints, use_semantics=True):
        self.points = points
        self.use_semantics = use_semantics
        self.trees = {}
        if not len(points):
            return
        classes = points.labels.astype(np.int64) if use_semantics else np.full(len(points), ANY_CLASS)
        keys = classes * 8 + points.surface
        for key in np.unique(keys):
            members = np.flatnonzero(keys == key)
            cls, surf = divmod(int(key), 8)
            self.trees[(cls, surf)] = (cKDTree(points.positions[members]), members)

    def __len__(self):
        return len(self.trees)

    def key(self, class_id, surface):
        return (int(class_id) if self.use_semantics else ANY_CLASS, int(surface))

    def query(self, positions, labels, surfaces, k, max_dist):
        """Batched K-NN restricted to each query's own tree.

        Returns ``(index, dist)`` of shape ``(N, k)``; missing neighbours have
        index -1 and distance inf. Indices refer to ``self.points``. Ties in
        distance resolve to the smaller index.
        """
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        n = len(positions)
        index = np.full((n, k), -1, dtype=np.int64)
        dist = np.full((n, k), np.inf)
        if n == 0 or not self.trees:
            return index, dist
        labels = np.broadcast_to(np.asarray(labels), (n,))
        surfaces = np.broadcast_to(np.asarray(surfaces), (n,))
        cls = labels.astype(np.int64) if self.use_semantics else np.full(n, ANY_CLASS)
        qkeys = cls * 8 + surfaces.astype(np.int64)
        for qkey in np.unique(qkeys):
            entry = self.trees.get(divmod(int(qkey), 8))
            if entry is None:
                continue
            tree, members = entry
            rows = np.flatnonzero(qkeys == qkey)
            d, i = tree.query(positions[rows], k=k, distance_upper_bound=max_dist)
            d = np.asarray(d, dtype=float).reshape(len(rows), k)
            i = np.asarray(i).reshape(len(rows), k)
            found = i < len(members)
            gi = np.where(found, members[np.minimum(i, len(members) - 1)], -1)
            d = np.where(found, d, np.inf)
            # deterministic tie order: distance, then global index
            order = np.lexsort((np.where(found, gi, np.iinfo(np.int64).max), d), axis=1)
            index[rows] = np.take_along_axis(gi, order, axis=1)
            dist[rows] = np.take_along_axis(d, order, axis=1)
        return index, dist


def build_forest(keypoints: Keypoints, use_semantics=True) -> SemanticNnForest:
    return SemanticNnForest(keypoints, use_semantics)


def semantic_nearest_neighbors(p, class_id, surface, forest: SemanticNnForest, k, max_dist) -> np.ndarray:
    """Positions of up to ``k`` same-class, same-surface points within ``max_dist``."""
    index, _ = forest.query(np.asarray(p, dtype=float)[None], [class_id], [surface], k, max_dist)
    index = index[0][index[0] >= 0]
    return forest.points.positions[index]


# ---------------------------------------------------------------------------
# PCA fitting


def _canonical_sign(d):
    """Flip so the largest-magnitude component is positive."""
    big = np.take_along_axis(d, np.argmax(np.abs(d), axis=-1)[..., None], axis=-1)
    return d * np.where(big < 0, -1.0, 1.0)


def pca_batch(neighbors):
    """Centroids, ascending eigenvalues and eigenvectors of ``(N, K, 3)`` sets."""
    neighbors = np.asarray(neighbors, dtype=float)
    centroid = neighbors.mean(axis=1)
    centered = neighbors - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / neighbors.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    return centroid, evals, evecs


def fit_models_batch(neighbors, is_plane, planarity_ratio=0.25, linearity_ratio=3.0):
    """Fit planes/lines to equally sized neighbour sets.

    Returns ``(anchors, directions, ok)``; ``ok`` is False where the gate
    rejects the fit as degenerate.
    """
    centroid, evals, evecs = pca_batch(neighbors)
    is_plane = np.asarray(is_plane, dtype=bool)
    direction = np.where(is_plane[:, None], evecs[:, :, 0], evecs[:, :, 2])
    l0, l1, l2 = evals[:, 0], evals[:, 1], evals[:, 2]
    scale = np.maximum(l2, 1e-300)
    plane_ok = (l0 <= planarity_ratio * l1) & (l1 > 1e-12 * scale)
    line_ok = (l2 >= linearity_ratio * l1) & (l2 > 0)
    ok = np.where(is_plane, plane_ok, line_ok)
    return centroid, _canonical_sign(direction), ok


def fit_plane(neighbors, planarity_ratio=0.25) -> SurfaceModel:
    pts = np.asarray(neighbors, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise TooFewPoints(f"plane fit needs 3 points, got {len(pts)}")
    ratio = np.inf if planarity_ratio is None else planarity_ratio
    anchor, direction, ok = fit_models_batch(pts[None], [True], planarity_ratio=ratio)
    if planarity_ratio is not None and not ok[0]:
        raise DegenerateFit("neighbours are not planar")
    return SurfaceModel(SurfaceKind.PLANE, anchor[0], direction[0])


def fit_line(neighbors, linearity_ratio=3.0) -> SurfaceModel:
    pts = np.asarray(neighbors, dtype=float).reshape(-1, 3)
    if len(pts) < 2:
        raise TooFewPoints(f"line fit needs 2 points, got {len(pts)}")
    ratio = 0.0 if linearity_ratio is None else linearity_ratio
    anchor, direction, ok = fit_models_batch(pts[None], [False], linearity_ratio=ratio)
    if linearity_ratio is not None and not ok[0]:
        raise DegenerateFit("neighbours have no dominant direction")
    return SurfaceModel(SurfaceKind.LINE, anchor[0], direction[0])


# ---------------------------------------------------------------------------
# matches


@dataclass
class Match:
    source: np.ndarray
    class_id: int
    surface_type: SurfaceType
    model: SurfaceModel
    neighbor_count: int


@dataclass
class Matches:
    """A set of keypoint-to-surface matches held as parallel arrays.

    ``source`` points are in the keypoints' own (current sensor) frame; the
    models live in the target frame.
    """

    source: np.ndarray
    labels: np.ndarray
    is_plane: np.ndarray
    anchors: np.ndarray
    directions: np.ndarray
    neighbor_count: np.ndarray
    neighbor_index: np.ndarray | None = None

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=float).reshape(-1, 3)
        self.is_plane = np.asarray(self.is_plane, dtype=bool)
        self.anchors = np.asarray(self.anchors, dtype=float).reshape(-1, 3)
        self.directions = np.asarray(self.directions, dtype=float).reshape(-1, 3)
        self.projectors = projectors(self.is_plane, self.directions)

    def __len__(self):
        return len(self.source)

    def __getitem__(self, i) -> Match:
        kind = SurfaceKind.PLANE if self.is_plane[i] else SurfaceKind.LINE
        return Match(
            self.source[i],
            int(self.labels[i]),
            SurfaceType.PLANAR if self.is_plane[i] else SurfaceType.EDGE,
            SurfaceModel(kind, self.anchors[i], self.directions[i]),
            int(self.neighbor_count[i]),
        )

    def subset(self, mask) -> Matches:
        return Matches(
            self.source[mask],
            self.labels[mask],
            self.is_plane[mask],
            self.anchors[mask],
            self.directions[mask],
            self.neighbor_count[mask],
            None if self.neighbor_index is None else self.neighbor_index[mask],
        )

    @classmethod
    def from_models(cls, sources, models, labels=None) -> Matches:
        n = len(models)
        return cls(
            np.asarray(sources, dtype=float).reshape(n, 3),
            np.zeros(n, np.uint16) if labels is None else labels,
            np.array([m.kind == SurfaceKind.PLANE for m in models], dtype=bool),
            np.array([m.anchor for m in models]).reshape(n, 3),
            np.array([m.direction for m in models]).reshape(n, 3),
            np.zeros(n, dtype=int),
        )

    @classmethod
    def concat(cls, parts) -> Matches:
        return cls(
            np.concatenate([p.source for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.is_plane for p in parts]),
            np.concatenate([p.anchors for p in parts]),
            np.concatenate([p.directions for p in parts]),
            np.concatenate([p.neighbor_count for p in parts]),
        )


def assign_matches(
    current: Keypoints,
    forest: SemanticNnForest,
    T: RigidTransform,
    k_plane=5,
    k_line=4,
    max_dist=3.0,
    planarity_ratio=0.25,
    linearity_ratio=3.0,
) -> Matches:
    """Transform keypoints by ``T``, look up same-class neighbours, fit surfaces.

    Keypoints with fewer than K neighbours in range or a degenerate fit are
    dropped.
    """
    parts = []
    moved = T.apply(current.positions) if len(current) else current.positions
    for surface, k in ((SurfaceType.EDGE, k_line), (SurfaceType.PLANAR, k_plane)):
        rows = np.flatnonzero(current.surface == surface)
        if not len(rows):
            continue
        index, _ = forest.query(moved[rows], current.labels[rows], surface, k, max_dist)
        full = np.all(index >= 0, axis=1)
        rows, index = rows[full], index[full]
        if not len(rows):
            continue
        neighbors = forest.points.positions[index]
        is_plane = np.full(len(rows), surface == SurfaceType.PLANAR)
        anchors, directions, ok = fit_models_batch(neighbors, is_plane, planarity_ratio, linearity_ratio)
        parts.append(
            Matches(
                current.positions[rows[ok]],
                current.labels[rows[ok]],
                is_plane[ok],
                anchors[ok],
                directions[ok],
                np.full(int(ok.sum()), k),
                np.pad(index[ok], ((0, 0), (0, max(k_plane, k_line) - k)), constant_values=-1),
            )
        )
    if not parts:
        return Matches(np.zeros((0, 3)), np.zeros(0, np.uint16), np.zeros(0, bool), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, int))
    out = Matches.concat(parts)
    out.neighbor_index = np.concatenate([p.neighbor_index for p in parts])
    return out
