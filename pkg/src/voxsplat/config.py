"""Engine configuration with plain-text key=value file support."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    # volume
    voxel_size: float = 0.05
    truncation: float = 0.07
    max_weight: float = 64.0
    blend_mode: str = "balanced"    # "balanced" | "unit_sample"
    downsample_step: float = 0.0    # 0 -> voxel_size
    keyframe_interval: int = 10
    # gaussian admission / pruning
    admit_tsdf_min: float = -0.03
    prune_tsdf_below: float = -0.04
    overlap_radius: float = 0.0     # 0 -> voxel_size / 2
    knn_neighbors: int = 20
    # open-vocabulary query
    seed_threshold: float = 0.8
    keyframes_per_cluster: int = 3
    window_halfwidth: float = 0.2
    query_rounds: int = 2
    window_lo: float = 0.5
    window_hi: float = 1.0
    dbscan_eps: float = 0.0         # 0 -> 2 * voxel_size
    dbscan_min_pts: int = 10
    coverage_eps: float = 0.01
    # evaluation
    accuracy_cutoff: float = 0.25
    match_radius: float = 0.0       # 0 -> voxel_size
    # misc
    embed_dim: int = 16
    seed: int = 0
    workers: int = 0

    def validate(self) -> "EngineConfig":
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be > 0")
        if self.truncation < self.voxel_size:
            raise ConfigError("truncation must be >= voxel_size")
        if self.blend_mode not in ("balanced", "unit_sample"):
            raise ConfigError(f"unknown blend_mode {self.blend_mode!r}")
        if self.max_weight < 1:
            raise ConfigError("max_weight must be >= 1")
        if self.keyframe_interval < 1:
            raise ConfigError("keyframe_interval must be >= 1")
        if not 0.0 <= self.seed_threshold <= 1.0:
            raise ConfigError("seed_threshold must be in [0, 1]")
        if not 0.0 <= self.window_lo < self.window_hi <= 1.0:
            raise ConfigError("query window must satisfy 0 <= lo < hi <= 1")
        if self.window_halfwidth <= 0:
            raise ConfigError("window_halfwidth must be > 0")
        if self.query_rounds < 1:
            raise ConfigError("query_rounds must be >= 1")
        if self.keyframes_per_cluster < 1:
            raise ConfigError("keyframes_per_cluster must be >= 1")
        if self.dbscan_min_pts < 1:
            raise ConfigError("dbscan_min_pts must be >= 1")
        if self.knn_neighbors < 4:
            raise ConfigError("knn_neighbors must be >= 4")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        return self

    # defaults that derive from voxel_size unless given explicitly
    @property
    def step(self) -> float:
        return self.downsample_step if self.downsample_step > 0 else self.voxel_size

    @property
    def r_overlap(self) -> float:
        return self.overlap_radius if self.overlap_radius > 0 else self.voxel_size / 2.0

    @property
    def eps_cluster(self) -> float:
        return self.dbscan_eps if self.dbscan_eps > 0 else 2.0 * self.voxel_size

    @property
    def cell_size(self) -> float:
        return self.match_radius if self.match_radius > 0 else self.voxel_size

    def merged(self, **overrides) -> "EngineConfig":
        clean = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **clean).validate()

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    @classmethod
    def from_file(cls, path) -> "EngineConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
                key, _, val = line.partition("=")
                key = key.strip()
                val = val.strip()
                if key not in types:
                    raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
                kind = types[key]
                try:
                    if kind in ("int", int):
                        values[key] = int(val)
                    elif kind in ("float", float):
                        values[key] = float(val)
                    else:
                        values[key] = val
                except ValueError as exc:
                    raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
        return cls(**values).validate()
