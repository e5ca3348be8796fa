"""Per-frame TSDF integration and confidence-weighted semantic fusion.

Signed distances are projective (measured along the sensor ray), matching
incremental range-image fusion rather than a true Euclidean SDF. Only voxels
whose sampled value lands inside [-truncation, +truncation] are allocated;
space deep behind the surface is never touched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import blend_events, dda_batch
from .config import EngineConfig
from .grid import SparseVoxelGrid, VoxelView, pack_keys


@dataclass
class DepthSample:
    pixel: tuple
    point: np.ndarray
    color: np.ndarray
    region_id: int


class SampleBatch:
    """Column-wise batch of depth samples (one per occupied space cell)."""

    def __init__(self, pixels, points, colors, region_ids):
        self.pixels = np.asarray(pixels, np.int64).reshape(-1, 2)
        self.points = np.asarray(points, np.float64).reshape(-1, 3)
        self.colors = np.asarray(colors, np.float64).reshape(-1, 3)
        self.region_ids = np.asarray(region_ids, np.int64).reshape(-1)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, i: int) -> DepthSample:
        return DepthSample(tuple(self.pixels[i]), self.points[i],
                           self.colors[i], int(self.region_ids[i]))

    @staticmethod
    def empty() -> "SampleBatch":
        return SampleBatch(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)),
                           np.zeros(0))


def check_rigid(pose: np.ndarray, tol: float = 1e-6) -> None:
    pose = np.asarray(pose, np.float64)
    if pose.shape != (4, 4):
        raise ValueError("pose must be 4x4")
    rot = pose[:3, :3]
    if not np.allclose(rot @ rot.T, np.eye(3), atol=tol):
        raise ValueError("pose rotation is not orthonormal")
    if abs(np.linalg.det(rot) - 1.0) > 1e-5:
        raise ValueError("pose rotation is not proper (det != +1)")
    if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0], atol=tol):
        raise ValueError("pose bottom row must be [0 0 0 1]")


def downsample_depth(frame, grid_step: float) -> SampleBatch:
    """At most one back-projected sample per (grid_step)^3 cell.

    Invalid (zero) depth pixels are skipped; each sample keeps the color and
    region id of its source pixel. First pixel in scan order wins a cell.
    """
    if grid_step <= 0:
        raise ValueError("grid_step must be > 0")
    depth = frame.depth
    valid = depth > 0
    if not valid.any():
        return SampleBatch.empty()
    vv, uu = np.nonzero(valid)
    z = depth[vv, uu].astype(np.float64)
    intr = frame.intrinsics
    x = (uu - intr.cx) / intr.fx * z
    y = (vv - intr.cy) / intr.fy * z
    pts_cam = np.stack([x, y, z], axis=1)
    pose = np.asarray(frame.pose, np.float64)
    pts_world = pts_cam @ pose[:3, :3].T + pose[:3, 3]

    cells = pack_keys(np.floor(pts_world / grid_step).astype(np.int64))
    _, first = np.unique(cells, return_index=True)
    first.sort()  # keep scan order

    pixels = np.stack([uu[first], vv[first]], axis=1)
    colors = frame.color[vv[first], uu[first]].astype(np.float64) / 255.0
    if frame.region_map is not None:
        regions = frame.region_map[vv[first], uu[first]].astype(np.int64)
    else:
        regions = np.full(first.shape[0], -1, np.int64)
    return SampleBatch(pixels, pts_world[first], colors, regions)


def tsdf_sample(sensor_origin, surface_point, voxel_center, truncation: float):
    """Projective signed distance of a voxel center along one depth ray.

    Positive in front of the surface. Values below -truncation fall outside
    the band and return None; the rest clamp into [-truncation, +truncation].
    """
    if truncation <= 0:
        raise ValueError("truncation must be > 0")
    origin = np.asarray(sensor_origin, np.float64)
    surface = np.asarray(surface_point, np.float64)
    d_surf = float(np.linalg.norm(surface - origin))
    if d_surf < 1e-12:
        raise ValueError("degenerate ray: surface coincides with sensor origin")
    direction = (surface - origin) / d_surf
    d_vox = float(np.dot(np.asarray(voxel_center, np.float64) - origin, direction))
    phi = d_surf - d_vox
    if phi < -truncation:
        return None
    return min(phi, truncation)


@dataclass
class IntegrationStats:
    rays_cast: int
    voxels_touched: int


def integrate_frame(grid: SparseVoxelGrid, frame, config: EngineConfig,
                    samples: SampleBatch | None = None,
                    sample_log: list | None = None) -> IntegrationStats:
    """Fuse one posed depth frame into the grid.

    Every downsampled pixel becomes a ray; voxels crossed inside the
    truncation band blend the new projective distance with weight
    w_new = min(max_weight, w + 1) and, in the default "balanced" mode,
    tsdf = (tsdf_old * w_old + phi * w_new) / (w_old + w_new)
    (the incoming sample counts at par with the accumulated estimate).
    blend_mode "unit_sample" uses the conventional running mean
    (tsdf_old * w_old + phi) / (w_old + 1) instead.

    ``sample_log``, when given, records (packed_key, phi) events in update
    order for replay-style verification.
    """
    check_rigid(frame.pose)
    if samples is None:
        samples = downsample_depth(frame, config.step)
    n = len(samples)
    if n == 0:
        return IntegrationStats(0, 0)

    origin = np.asarray(frame.pose, np.float64)[:3, 3]
    delta = samples.points - origin
    dist = np.linalg.norm(delta, axis=1)
    ok = dist > 1e-9
    delta = delta[ok]
    dist = dist[ok]
    dirs = delta / dist[:, None]
    tmins = np.maximum(dist - grid.truncation, 0.0)
    tmaxs = dist + grid.truncation

    keys_ijk, offsets = dda_batch(origin[None, :].repeat(dirs.shape[0], axis=0),
                                  dirs, tmins, tmaxs, grid.voxel_size)
    counts = np.diff(offsets)
    ray_of = np.repeat(np.arange(dirs.shape[0]), counts)

    centers = (keys_ijk.astype(np.float64) + 0.5) * grid.voxel_size
    d_vox = np.einsum("ij,ij->i", centers - origin, dirs[ray_of])
    phi = dist[ray_of] - d_vox
    in_band = phi >= -grid.truncation
    phi = np.minimum(phi[in_band], grid.truncation)
    packed = pack_keys(keys_ijk[in_band])

    rows = grid.insert_rows(packed)
    if sample_log is not None:
        sample_log.extend(zip(packed.tolist(), phi.tolist()))
    n_live = grid.n_voxels
    blend_events(rows, phi, grid.weight[:n_live], grid.tsdf[:n_live],
                 config.max_weight, config.blend_mode == "balanced")
    return IntegrationStats(rays_cast=int(dirs.shape[0]),
                            voxels_touched=int(np.unique(rows).shape[0]))


def fuse_semantics(voxel: VoxelView, embedding: np.ndarray, confidence: float) -> VoxelView:
    """Running confidence-weighted mean of region embeddings into one voxel."""
    if confidence <= 0:
        raise ValueError("confidence must be > 0")
    e = np.asarray(embedding, np.float64)
    if not np.all(np.isfinite(e)):
        raise ValueError("embedding must be finite")
    grid = voxel._grid
    row = voxel.row
    c_old = grid.confidence[row]
    grid.feature[row] = (c_old * grid.feature[row] + confidence * e) / (c_old + confidence)
    grid.confidence[row] = c_old + confidence
    return voxel
