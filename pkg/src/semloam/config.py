"""Configuration dataclasses and TOML loading.

TOML files use dotted keys that mirror the dataclass layout, e.g.::

    skip = 5
    solver.r_tol = 0.4
    solver.loss_schedule = [["huber", 0.1, 4], ["arctan", 0.1, 4]]
    matching.use_semantics = false
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .io_kitti import DEFAULT_DYNAMIC_CLASSES


@dataclass
class FeatureConfig:
    window: int = 5
    n_regions: int = 6
    max_edge: int = 2
    max_planar: int = 4
    edge_threshold: float = 0.1
    planar_threshold: float = 0.05
    suppression: int = 5
    occlusion_ratio: float = 0.1
    # registration targets (LOAM less-sharp / less-flat sets)
    target_max_edge: int = 20
    target_planar_voxel: float = 0.2


@dataclass
class MatchingConfig:
    k_plane: int = 5
    k_line: int = 4
    # match radius = max_dist_per_frame * (skip + 1) unless max_dist is set
    max_dist_per_frame: float = 3.0
    max_dist: float | None = None
    planarity_ratio: float = 0.25
    linearity_ratio: float = 3.0
    use_semantics: bool = True

    def match_distance(self, skip: int) -> float:
        if self.max_dist is not None:
            return float(self.max_dist)
        return self.max_dist_per_frame * (skip + 1)


@dataclass
class SolverConfig:
    iters_max_outer: int = 8
    iters_max_orme: int = 8
    # (loss kind, scale in meters, number of outer passes)
    loss_schedule: tuple = (("huber", 0.1, 4), ("arctan", 0.1, 4))
    map_loss_schedule: tuple = (("arctan", 0.1, 4),)
    convergence_eps_trans: float = 0.01
    convergence_eps_rot: float = 0.001
    r_tol: float = 0.4
    cost_tol: float = 0.4
    eps_motion: float = 1e-6
    min_matches: int = 10
    lm_max_iterations: int = 10
    use_orme: bool = True
    early_termination: bool = True

    def __post_init__(self):
        self.loss_schedule = tuple(tuple(s) for s in self.loss_schedule)
        self.map_loss_schedule = tuple(tuple(s) for s in self.map_loss_schedule)
        if self.r_tol <= 0 or self.cost_tol <= 0:
            raise ValueError("r_tol and cost_tol must be positive")
        if min(self.iters_max_outer, self.iters_max_orme, self.lm_max_iterations) < 1:
            raise ValueError("iteration counts must be >= 1")
        for kind, scale, count in self.loss_schedule + self.map_loss_schedule:
            if kind not in ("huber", "arctan", "squared") or count < 1 or scale <= 0:
                raise ValueError(f"bad loss schedule entry {(kind, scale, count)}")

    @property
    def map_passes(self) -> int:
        return sum(int(c) for _, _, c in self.map_loss_schedule)


@dataclass
class MappingConfig:
    edge_voxel: float = 0.4
    planar_voxel: float = 0.8
    raw_voxel: float = 0.4
    half_extent: float = 100.0
    use_orme: bool = True
    keep_raw: bool = False
    # scan-to-map starts from the odometry estimate, so its radius does not
    # grow with the skip count; None falls back to the odometry radius
    max_dist: float | None = 3.0


@dataclass
class IngestConfig:
    min_range: float = 2.0
    max_range: float = 120.0
    drop_classes: tuple = (0,)
    dynamic_classes: tuple = tuple(sorted(DEFAULT_DYNAMIC_CLASSES))


@dataclass
class PipelineConfig:
    skip: int = 0
    features: FeatureConfig = field(default_factory=FeatureConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)


@dataclass
class RunConfig:
    dataset_root: str | None = None
    sequence: str = "00"
    output_dir: str = "output"
    export_map: bool = False
    max_frames: int | None = None
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    # ablation switches live in the sub-configs; these are shortcuts
    @property
    def use_semantics(self) -> bool:
        return self.pipeline.matching.use_semantics

    @property
    def use_orme(self) -> bool:
        return self.pipeline.solver.use_orme

    @property
    def skip(self) -> int:
        return self.pipeline.skip


# keys accepted at the top level of a TOML file that live inside `pipeline`
_PIPELINE_SECTIONS = {"skip", "features", "matching", "solver", "mapping", "ingest"}


def flatten(table: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _coerce(value, current):
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def set_dotted(cfg, key: str, value):
    """Set ``a.b.c`` on nested dataclasses, validating the path."""
    parts = key.split(".")
    if isinstance(cfg, RunConfig) and parts[0] in _PIPELINE_SECTIONS:
        parts = ["pipeline"] + parts
    target = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or not hasattr(target, part):
            raise KeyError(f"unknown config key {key!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    names = {f.name for f in dataclasses.fields(target)}
    if leaf not in names:
        raise KeyError(f"unknown config key {key!r}")
    setattr(target, leaf, _coerce(value, getattr(target, leaf)))
    if hasattr(target, "__post_init__"):
        target.__post_init__()


def parse_value(text: str):
    """Parse a command-line override with TOML literal rules; bare words stay strings."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        with open(Path(path), "rb") as f:
            table = tomli.load(f)
        for key, value in flatten(table).items():
            set_dotted(cfg, key, value)
    for item in overrides:
        key, _, text = item.partition("=")
        set_dotted(cfg, key.strip(), parse_value(text.strip()))
    return cfg
