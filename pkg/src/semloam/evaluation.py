"""KITTI-devkit style drift metric and scan-skipping subsampling."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .core import RigidTransform, quat_conjugate, quat_multiply
from .errors import TooShort

SEGMENT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)


def skip_scans(frames, n: int) -> list:
    """Keep every ``(n + 1)``-th frame starting with the first."""
    if n < 0:
        raise ValueError("skip count must be non-negative")
    return list(frames)[:: n + 1]


def default_step(skip: int) -> int:
    # the devkit's 10-frame stride assumes 10 Hz poses
    return 10 if skip == 0 else 1


def trajectory_distances(poses) -> np.ndarray:
    t = np.array([p.t for p in poses])
    steps = np.linalg.norm(np.diff(t, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def last_frame_from_segment_length(dist, first, length) -> int:
    """First index whose path distance from ``first`` reaches ``length``; -1 if none."""
    target = dist[first] + length
    idx = int(np.searchsorted(dist, target, side="left"))
    # distances are non-decreasing; searchsorted finds the first dist >= target
    return idx if idx < len(dist) else -1


def segments(gt, step=10, lengths=SEGMENT_LENGTHS):
    """``(first, last, length)`` triples evaluated by the metric."""
    dist = trajectory_distances(gt)
    out = []
    for first in range(0, len(gt), step):
        for length in lengths:
            last = last_frame_from_segment_length(dist, first, length)
            if last >= 0:
                out.append((first, last, length))
    return out


@dataclass
class TrajectoryError:
    """Translational drift in percent and rotational drift in deg/100 m."""

    per_length: dict = field(default_factory=dict)  # length -> mean translational %
    rotation_per_length: dict = field(default_factory=dict)  # length -> deg / 100 m
    average: float = 0.0
    rotation_average: float = 0.0
    segments: int = 0


def _relative(poses, first, last):
    """Stacked rotations and translations plus the ``first -> last`` relative motions."""
    R = np.array([p.rotation for p in poses])
    t = np.array([p.t for p in poses])
    q = np.array([p.q for p in poses])
    rel_t = np.einsum("nji,nj->ni", R[first], t[last] - t[first])
    rel_q = quat_multiply(quat_conjugate(q[first]), q[last])
    return R, t, rel_t, rel_q


def trajectory_error(gt, est, step=10, lengths=SEGMENT_LENGTHS) -> TrajectoryError:
    if len(gt) != len(est):
        raise ValueError(f"{len(gt)} ground-truth poses but {len(est)} estimates")
    if len(gt) < 2:
        raise TooShort("need at least two poses")
    segs = segments(gt, step, lengths)
    if not segs:
        raise TooShort(f"trajectory length {trajectory_distances(gt)[-1]:.1f} m is below {min(lengths)} m")
    first, last, seg_len = (np.array(c) for c in zip(*segs))
    gt_R, gt_t, gt_rel_t, gt_rel_q = _relative(gt, first, last)
    _, _, est_rel_t, est_rel_q = _relative(est, first, last)
    # gt_rel^-1 * est_rel, written so identical inputs give exactly zero
    gt_rel_R = np.einsum("nji,njk->nik", gt_R[first], gt_R[last])
    dt = np.einsum("nji,nj->ni", gt_rel_R, est_rel_t - gt_rel_t)
    wg, vg = gt_rel_q[:, 0], gt_rel_q[:, 1:]
    we, ve = est_rel_q[:, 0], est_rel_q[:, 1:]
    dq_vec = (wg[:, None] * ve - we[:, None] * vg) - np.cross(vg, ve)
    dq_w = wg * we + np.einsum("ni,ni->n", vg, ve)
    all_t = 100.0 * np.linalg.norm(dt, axis=1) / seg_len
    all_r = np.degrees(2.0 * np.arctan2(np.linalg.norm(dq_vec, axis=1), np.abs(dq_w))) * 100.0 / seg_len
    t_err = {L: all_t[seg_len == L] for L in lengths}
    r_err = {L: all_r[seg_len == L] for L in lengths}
    return TrajectoryError(
        {L: float(np.mean(v)) for L, v in t_err.items() if len(v)},
        {L: float(np.mean(v)) for L, v in r_err.items() if len(v)},
        float(np.mean(all_t)),
        float(np.mean(all_r)),
        len(segs),
    )


@dataclass
class Report:
    rows: list  # (name, TrajectoryError)

    @property
    def macro_average(self) -> float:
        return float(np.mean([e.average for _, e in self.rows]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sequence", "translation_pct", "rotation_deg_per_100m", "segments"] + [f"t_{L}" for L in SEGMENT_LENGTHS])
        for name, e in self.rows:
            writer.writerow(
                [name, f"{e.average:.4f}", f"{e.rotation_average:.4f}", e.segments]
                + [f"{e.per_length[L]:.4f}" if L in e.per_length else "" for L in SEGMENT_LENGTHS]
            )
        writer.writerow(["average", f"{self.macro_average:.4f}", f"{np.mean([e.rotation_average for _, e in self.rows]):.4f}", ""] + [""] * len(SEGMENT_LENGTHS))
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'sequence':<12}{'trans %':>10}{'rot deg/100m':>14}{'segments':>10}"]
        for name, e in self.rows:
            lines.append(f"{name:<12}{e.average:>10.3f}{e.rotation_average:>14.3f}{e.segments:>10d}")
        lines.append(f"{'average':<12}{self.macro_average:>10.3f}")
        return "\n".join(lines)


def summarize(errors) -> Report:
    """Accepts ``[(name, TrajectoryError), ...]`` or a mapping name -> error."""
    rows = list(errors.items()) if isinstance(errors, dict) else list(errors)
    if not rows:
        raise ValueError("nothing to summarize")
    return Report(rows)


def relative_to_first(poses) -> list[RigidTransform]:
    inv0 = poses[0].inverse()
    return [inv0 @ p for p in poses]
