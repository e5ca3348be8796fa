"""Map-building pipeline and on-disk map bundles.

Every frame feeds TSDF integration; keyframes additionally run
densification (sample -> init -> gated admission), semantic fusion into the
home voxels, and TSDF pruning. A saved map is a directory holding the grid
snapshot, the primitive PLY, the retained keyframes and the config used.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import EngineConfig
from .dataset import Dataset
from .fusion import downsample_depth, fuse_semantics, integrate_frame
from .gaussians import (GaussianMap, Keyframe, check_consistency, init_gaussians,
                        is_keyframe, prune, read_ply, write_ply)
from .grid import SparseVoxelGrid, load_snapshot, save_snapshot
from .render import CameraIntrinsics

GRID_FILE = "map.gsfg"
PLY_FILE = "map.ply"
KEYFRAMES_FILE = "keyframes.json"
CONFIG_FILE = "config.cfg"


@dataclass
class MapStats:
    frames: int = 0
    keyframes: int = 0
    rays: int = 0
    admitted: int = 0
    rejected: int = 0
    pruned: int = 0


@dataclass
class MapState:
    grid: SparseVoxelGrid
    gaussians: GaussianMap
    keyframes: list = field(default_factory=list)
    config: EngineConfig = field(default_factory=EngineConfig)


def process_frame(state: MapState, frame, frame_index: int,
                  stats: MapStats | None = None) -> None:
    config = state.config
    samples = downsample_depth(frame, config.step)
    result = integrate_frame(state.grid, frame, config, samples=samples)
    if stats is not None:
        stats.frames += 1
        stats.rays += result.rays_cast

    if not is_keyframe(frame_index, config.keyframe_interval):
        return
    state.keyframes.append(Keyframe(frame_id=frame_index, pose=frame.pose.copy(),
                                    intrinsics=frame.intrinsics))
    if stats is not None:
        stats.keyframes += 1
    if len(samples) == 0:
        return
    drafts = init_gaussians(samples, config.knn_neighbors, config.voxel_size,
                            source_keyframe=frame_index)
    for draft in drafts:
        gid = state.gaussians.admit(draft, state.grid, config.admit_tsdf_min,
                                    config.r_overlap)
        if stats is not None:
            if gid is None:
                stats.rejected += 1
            else:
                stats.admitted += 1
        # semantics fuse for every initialized primitive carrying a region
        if draft.region_id >= 0 and frame.region_table:
            entry = frame.region_table.get(draft.region_id)
            if entry is not None:
                view = state.grid.get(np.floor(draft.mean / config.voxel_size).astype(np.int64))
                if view is not None:
                    fuse_semantics(view, entry[0], entry[1])
    n = prune(state.grid, state.gaussians, config.prune_tsdf_below)
    if stats is not None:
        stats.pruned += n


def build_map(dataset: Dataset, config: EngineConfig):
    embed_dim = dataset.embed_dim or config.embed_dim
    grid = SparseVoxelGrid(voxel_size=config.voxel_size, truncation=config.truncation,
                           feature_dim=embed_dim, max_weight=config.max_weight)
    state = MapState(grid=grid, gaussians=GaussianMap(voxel_size=config.voxel_size),
                     config=config)
    stats = MapStats()
    for frame in dataset.frames():
        process_frame(state, frame, frame.index, stats)
    issues = check_consistency(state.grid, state.gaussians)
    if issues:
        raise RuntimeError("map consistency broken: " + "; ".join(issues[:5]))
    return state, stats


def save_map(state: MapState, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_snapshot(state.grid, out / GRID_FILE)
    write_ply(state.gaussians, out / PLY_FILE)
    kfs = [{"frame": kf.frame_id,
            "pose": [[float(v) for v in row] for row in np.asarray(kf.pose)],
            "intrinsics": {"fx": kf.intrinsics.fx, "fy": kf.intrinsics.fy,
                           "cx": kf.intrinsics.cx, "cy": kf.intrinsics.cy,
                           "width": kf.intrinsics.width,
                           "height": kf.intrinsics.height}}
           for kf in state.keyframes]
    with open(out / KEYFRAMES_FILE, "w", encoding="utf-8") as fh:
        json.dump({"keyframes": kfs}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / CONFIG_FILE, "w", encoding="utf-8") as fh:
        fh.write(state.config.to_text())
    return out


def load_map(map_dir, config: EngineConfig | None = None) -> MapState:
    root = Path(map_dir)
    if not (root / GRID_FILE).exists():
        raise FileNotFoundError(f"no map bundle under {root}")
    if config is None:
        config = EngineConfig.from_file(root / CONFIG_FILE) \
            if (root / CONFIG_FILE).exists() else EngineConfig()
    grid = load_snapshot(root / GRID_FILE)
    gmap = read_ply(root / PLY_FILE, voxel_size=grid.voxel_size)
    # snapshot voxel lists are authoritative; PLY means are f32 and may round
    # across a voxel boundary, so rebuild homes from the lists
    gmap._buckets.clear()
    for row in range(grid.n_voxels):
        for gid in grid.gaussian_lists[row]:
            if not gmap.is_live(gid):
                raise RuntimeError(f"snapshot lists unknown gaussian {gid}")
            gmap.home[gid] = grid.keys[row]
    for gid in gmap.live_ids().tolist():
        gmap._hash_add(gid)
    issues = check_consistency(grid, gmap, check_home_keys=False)
    if issues:
        raise RuntimeError("loaded map inconsistent: " + "; ".join(issues[:5]))
    keyframes = []
    kf_path = root / KEYFRAMES_FILE
    if kf_path.exists():
        with open(kf_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        for item in doc["keyframes"]:
            intr = item["intrinsics"]
            keyframes.append(Keyframe(
                frame_id=int(item["frame"]),
                pose=np.asarray(item["pose"], np.float64),
                intrinsics=CameraIntrinsics(fx=intr["fx"], fy=intr["fy"],
                                            cx=intr["cx"], cy=intr["cy"],
                                            width=int(intr["width"]),
                                            height=int(intr["height"]))))
    return MapState(grid=grid, gaussians=gmap, keyframes=keyframes, config=config)
