"""Command-line entry points: ``run``, ``eval``, ``plot`` and ``synth``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .config import RunConfig, load_config
from .errors import SemLoamError
from .evaluation import default_step, skip_scans, summarize, trajectory_error
from .io_kitti import KittiSequence, SemanticTaxonomy, conjugate_poses, load_calibration, read_poses, write_poses
from .mapping import SemanticLoam, export_map

log = logging.getLogger("semloam")


# ---------------------------------------------------------------------------
# run


def cmd_run(cfg: RunConfig) -> Path:
    """Run the pipeline over a sequence; returns the written pose file.

    Poses are written in the LiDAR frame of the first processed scan, one per
    processed frame. A per-frame timing log goes next to them.
    """
    ing = cfg.pipeline.ingest
    seq = KittiSequence.from_env(
        cfg.sequence, cfg.dataset_root,
        min_range=ing.min_range, max_range=ing.max_range, drop_classes=ing.drop_classes,
    )
    taxonomy = SemanticTaxonomy.semantic_kitti(dynamic_classes=set(ing.dynamic_classes))
    loam = SemanticLoam(cfg.pipeline, taxonomy)
    frames = skip_scans(seq.frames, cfg.skip)
    if cfg.max_frames is not None:
        frames = frames[: cfg.max_frames]
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for frame in frames:
        try:
            res = loam.process_frame(seq.load_scan(frame))
        except SemLoamError as exc:
            raise type(exc)(f"frame {frame}: {exc}") from exc
        odo = res.odometry
        rows.append([
            frame, f"{res.seconds:.6f}", res.n_edge, res.n_planar,
            odo.matches if odo else 0, odo.inliers if odo else 0, int(res.flagged),
        ])
    pose_path = out / f"{seq.sequence}.txt"
    write_poses(pose_path, loam.poses)
    with open(out / f"{seq.sequence}_timing.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frame", "seconds", "edge", "planar", "odometry_matches", "odometry_inliers", "flagged"])
        w.writerows(rows)
    if cfg.export_map:
        export_map(loam.map, out / f"{seq.sequence}_map.ply")
    secs = [float(r[1]) for r in rows]
    log.info("processed %d frames, %.3f s per scan", len(rows), float(np.mean(secs)) if secs else 0.0)
    return pose_path


# ---------------------------------------------------------------------------
# eval


def cmd_eval(gt_path, est_path, calib_path=None, skip=0, step=None, name=None):
    """Compare estimated LiDAR-frame poses against camera-frame ground truth.

    With ``calib_path`` the estimates are conjugated into the camera frame
    first. ``skip`` subsamples the ground truth to the processed frames.
    """
    gt = skip_scans(read_poses(gt_path), skip)
    est = read_poses(est_path)
    if calib_path is not None:
        est = conjugate_poses(est, load_calibration(calib_path))
    if len(gt) != len(est):
        raise ValueError(f"{len(gt)} ground-truth poses (after skipping) but {len(est)} estimated poses")
    err = trajectory_error(gt, est, step=default_step(skip) if step is None else step)
    return summarize([(name or Path(est_path).stem, err)])


# ---------------------------------------------------------------------------
# plot

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def trajectory_svg(tracks, size=600, margin=40) -> str:
    """Top-down SVG of ``[(name, xz (N, 2))]`` with equal axis scaling."""
    allxz = np.vstack([xz for _, xz in tracks])
    lo, hi = allxz.min(axis=0), allxz.max(axis=0)
    span = max(float(np.max(hi - lo)), 1e-9)
    scale = (size - 2 * margin) / span
    legend_h = 18 * len(tracks) + 10

    def to_px(xz):
        px = margin + (xz[:, 0] - lo[0]) * scale
        py = size - margin - (xz[:, 1] - lo[1]) * scale  # z points up the page
        return px, py

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + legend_h}" '
        f'viewBox="0 0 {size} {size + legend_h}">',
        f'<rect x="0" y="0" width="{size}" height="{size + legend_h}" fill="white"/>',
        f'<text x="{size / 2:.1f}" y="{size - 8}" font-size="12" text-anchor="middle">x [m]</text>',
        f'<text x="12" y="{size / 2:.1f}" font-size="12" transform="rotate(-90 12 {size / 2:.1f})" '
        'text-anchor="middle">z [m]</text>',
    ]
    for k, (name, xz) in enumerate(tracks):
        color = _COLORS[k % len(_COLORS)]
        px, py = to_px(xz)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        y = size + 14 + 18 * k
        parts.append(f'<line x1="{margin}" y1="{y - 4}" x2="{margin + 20}" y2="{y - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{margin + 26}" y="{y}" font-size="12">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(pose_paths, svg_path, csv_path=None):
    tracks = []
    for p in pose_paths:
        poses = read_poses(p)
        xz = np.array([[T.t[0], T.t[2]] for T in poses])
        tracks.append((Path(p).stem, xz))
    if not tracks:
        raise ValueError("need at least one pose file")
    Path(svg_path).write_text(trajectory_svg(tracks))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["track", "index", "x", "z"])
            for name, xz in tracks:
                for i, (x, z) in enumerate(xz):
                    w.writerow([name, i, f"{x:.6f}", f"{z:.6f}"])
    return tracks


# ---------------------------------------------------------------------------
# synth


def cmd_synth(root, sequence="00", frames=200, seed=0, label_noise=0.0, speed=10.0, speed_amplitude=4.0):
    from .synthetic import make_sequence, write_dataset

    seq = make_sequence(frames, seed=seed, label_noise=label_noise, v_mean=speed, v_amp=speed_amplitude)
    return write_dataset(seq, root, sequence)


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser():
    ap = argparse.ArgumentParser(prog="semloam", description="Semantic LiDAR odometry and mapping")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="estimate a trajectory for one sequence")
    run.add_argument("--config", help="TOML configuration file")
    run.add_argument("--dataset", help="dataset root (default: $SEMLOAM_DATASET_ROOT)")
    run.add_argument("--sequence")
    run.add_argument("--output")
    run.add_argument("--skip", type=int)
    run.add_argument("--max-frames", type=int)
    run.add_argument("--no-semantics", action="store_true", help="class-agnostic matching")
    run.add_argument("--no-orme", action="store_true", help="plain robust estimation, no outlier rejection")
    run.add_argument("--export-map", action="store_true", help="write the map as PLY")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    ev = sub.add_parser("eval", help="KITTI drift metric of an estimated trajectory")
    ev.add_argument("ground_truth")
    ev.add_argument("estimate")
    ev.add_argument("--calib", help="calib.txt; converts LiDAR-frame estimates to the camera frame")
    ev.add_argument("--skip", type=int, default=0, help="skip count the estimate was produced with")
    ev.add_argument("--step", type=int, help="segment start stride (default 10 without skipping, else 1)")
    ev.add_argument("--csv", help="write the report as CSV")

    pl = sub.add_parser("plot", help="top-down SVG of trajectories")
    pl.add_argument("poses", nargs="+")
    pl.add_argument("-o", "--output", default="trajectories.svg")
    pl.add_argument("--csv", help="write x,z tracks as CSV")

    sy = sub.add_parser("synth", help="write a synthetic labeled sequence in KITTI layout")
    sy.add_argument("root")
    sy.add_argument("--sequence", default="00")
    sy.add_argument("--frames", type=int, default=200)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--label-noise", type=float, default=0.0, help="fraction of points given a random class")
    sy.add_argument("--speed", type=float, default=10.0, help="mean speed in m/s at 10 Hz")
    sy.add_argument("--speed-amplitude", type=float, default=4.0)
    return ap


def _run_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.skip is not None:
        overrides.append(f"skip={args.skip}")
    if args.no_semantics:
        overrides.append("matching.use_semantics=false")
    if args.no_orme:
        overrides.append("solver.use_orme=false")
    cfg = load_config(args.config, overrides)
    if args.dataset:
        cfg.dataset_root = args.dataset
    if args.sequence:
        cfg.sequence = args.sequence
    if args.output:
        cfg.output_dir = args.output
    if args.max_frames is not None:
        cfg.max_frames = args.max_frames
    if args.export_map:
        cfg.export_map = True
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            path = cmd_run(_run_config(args))
            print(path)
        elif args.command == "eval":
            report = cmd_eval(args.ground_truth, args.estimate, args.calib, args.skip, args.step)
            print(report.to_table())
            if args.csv:
                Path(args.csv).write_text(report.to_csv())
        elif args.command == "plot":
            cmd_plot(args.poses, args.output, args.csv)
            print(args.output)
        elif args.command == "synth":
            root = cmd_synth(args.root, args.sequence, args.frames, args.seed, args.label_noise, args.speed, args.speed_amplitude)
            print(root)
    except (SemLoamError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
