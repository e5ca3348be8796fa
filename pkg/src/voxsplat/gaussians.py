"""Gaussian primitive store: initialization, gated admission, pruning, export.

Primitives live in columnar arrays indexed by id (ids are never reused).
Each live primitive is registered in its home voxel's id list; admission and
pruning keep that bidirectional link intact. A uniform spatial hash bucketed
at the overlap radius backs the no-overlap admission check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .grid import SparseVoxelGrid, pack_key, pack_keys

EIGENVALUE_FLOOR = 1e-6  # m^2, keeps covariances positive-definite
INIT_OPACITY = 0.5


@dataclass
class Keyframe:
    frame_id: int
    pose: np.ndarray            # camera-to-world, rigid 4x4
    intrinsics: "object"        # render.CameraIntrinsics

    @property
    def camera_center(self) -> np.ndarray:
        return np.asarray(self.pose, np.float64)[:3, 3]


def is_keyframe(frame_index: int, interval: int) -> bool:
    if interval < 1:
        raise ValueError("interval must be >= 1")
    return frame_index % interval == 0


@dataclass
class PrimitiveDraft:
    mean: np.ndarray
    cov: np.ndarray
    opacity: float
    color: np.ndarray
    region_id: int
    source_keyframe: int


def _clamp_eigenvalues(cov: np.ndarray, ceiling: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, EIGENVALUE_FLOOR, ceiling)
    return (vecs * vals[..., None, :]) @ vecs.swapaxes(-1, -2)


def init_gaussians(samples, k_neighbors: int, voxel_size: float,
                   source_keyframe: int = -1) -> list[PrimitiveDraft]:
    """One draft primitive per depth sample, shaped by local k-NN covariance.

    Eigenvalues are clamped to [floor, voxel_size^2]: the floor keeps shapes
    positive-definite, the ceiling keeps splats at the sampling density (the
    raw k-NN spread of a grid-downsampled cloud is several cells wide, which
    would smear renders). With fewer than k_neighbors+1 samples the shape
    falls back to an isotropic (voxel_size/2)^2 covariance. Opacity starts
    at 0.5.
    """
    n = len(samples)
    if n == 0:
        raise ValueError("samples must be non-empty")
    if k_neighbors < 4:
        raise ValueError("k_neighbors must be >= 4")
    pts = samples.points
    iso = (voxel_size / 2.0) ** 2 * np.eye(3)
    if n < k_neighbors + 1:
        covs = np.tile(iso, (n, 1, 1))
    else:
        tree = cKDTree(pts)
        _, idx = tree.query(pts, k=k_neighbors + 1)
        neigh = pts[idx[:, 1:]]                      # exclude the point itself
        mean = neigh.mean(axis=1, keepdims=True)
        centered = neigh - mean
        covs = np.einsum("nki,nkj->nij", centered, centered) / k_neighbors
        covs = _clamp_eigenvalues(covs, voxel_size ** 2)
    return [PrimitiveDraft(mean=pts[i].copy(), cov=covs[i], opacity=INIT_OPACITY,
                           color=samples.colors[i].copy(),
                           region_id=int(samples.region_ids[i]),
                           source_keyframe=source_keyframe)
            for i in range(n)]


class GaussianMap:
    def __init__(self, voxel_size: float = 0.05):
        self.voxel_size = float(voxel_size)
        self.means = np.empty((0, 3), np.float64)
        self.covs = np.empty((0, 3, 3), np.float64)
        self.opacities = np.empty(0, np.float64)
        self.colors = np.empty((0, 3), np.float64)
        self.home = np.empty(0, np.int64)            # packed home voxel key
        self.source = np.empty(0, np.int64)
        self.alive = np.empty(0, bool)
        self._size = 0
        self._buckets: dict[tuple, list[int]] = {}   # spatial hash for overlap
        self._bucket_size = voxel_size / 2.0

    def __len__(self) -> int:
        return int(self.alive[:self._size].sum())

    @property
    def n_total(self) -> int:
        return self._size

    def live_ids(self) -> np.ndarray:
        return np.flatnonzero(self.alive[:self._size])

    def is_live(self, gid: int) -> bool:
        return 0 <= gid < self._size and bool(self.alive[gid])

    def _grow(self, extra: int = 1):
        need = self._size + extra
        cap = self.opacities.shape[0]
        if need <= cap:
            return
        new_cap = max(256, cap * 2, need)
        self.means = np.resize(self.means, (new_cap, 3))
        self.covs = np.resize(self.covs, (new_cap, 3, 3))
        self.opacities = np.resize(self.opacities, new_cap)
        self.colors = np.resize(self.colors, (new_cap, 3))
        self.home = np.resize(self.home, new_cap)
        self.source = np.resize(self.source, new_cap)
        alive = np.zeros(new_cap, bool)
        alive[:self._size] = self.alive[:self._size]
        self.alive = alive

    # spatial hash maintenance -------------------------------------------------
    def _bucket_of(self, mean) -> tuple:
        return tuple(np.floor(np.asarray(mean) / self._bucket_size).astype(np.int64))

    def _hash_add(self, gid: int):
        self._buckets.setdefault(self._bucket_of(self.means[gid]), []).append(gid)

    def _hash_remove(self, gid: int, mean=None):
        b = self._bucket_of(self.means[gid] if mean is None else mean)
        ids = self._buckets.get(b)
        if ids and gid in ids:
            ids.remove(gid)
            if not ids:
                del self._buckets[b]

    def nearest_within(self, mean, radius: float) -> bool:
        """True iff any live primitive mean lies strictly within radius."""
        b = self._bucket_of(mean)
        reach = int(np.ceil(radius / self._bucket_size))
        r2 = radius * radius
        for di in range(-reach, reach + 1):
            for dj in range(-reach, reach + 1):
                for dk in range(-reach, reach + 1):
                    for gid in self._buckets.get((b[0] + di, b[1] + dj, b[2] + dk), ()):
                        d = self.means[gid] - mean
                        if d @ d < r2:
                            return True
        return False

    # admission / removal ------------------------------------------------------
    def admit(self, draft: PrimitiveDraft, grid: SparseVoxelGrid,
              tsdf_min: float, r_overlap: float) -> int | None:
        """Admit one draft: home voxel must exist, its tsdf must exceed the
        gate, and no live mean may sit within r_overlap. Returns the new id,
        or None when rejected."""
        ijk = np.floor(draft.mean / grid.voxel_size).astype(np.int64)
        packed = pack_key(*ijk)
        row = grid.row_of(packed)
        if row is None:
            return None
        if grid.tsdf[row] <= tsdf_min:
            return None
        if self.nearest_within(draft.mean, r_overlap):
            return None
        self._grow()
        gid = self._size
        self._size += 1
        self.means[gid] = draft.mean
        self.covs[gid] = draft.cov
        self.opacities[gid] = draft.opacity
        self.colors[gid] = draft.color
        self.home[gid] = packed
        self.source[gid] = draft.source_keyframe
        self.alive[gid] = True
        grid.gaussian_lists[row].append(gid)
        self._hash_add(gid)
        return gid

    def remove(self, gid: int, grid: SparseVoxelGrid):
        if not self.is_live(gid):
            return
        row = grid.row_of(int(self.home[gid]))
        if row is not None:
            ids = grid.gaussian_lists[row]
            if gid in ids:
                ids.remove(gid)
        self._hash_remove(gid)
        self.alive[gid] = False

    def move(self, gid: int, new_mean: np.ndarray, grid: SparseVoxelGrid):
        """Relocate a live primitive, rehoming it (new voxels are created)."""
        old_row = grid.row_of(int(self.home[gid]))
        if old_row is not None:
            ids = grid.gaussian_lists[old_row]
            if gid in ids:
                ids.remove(gid)
        self._hash_remove(gid)
        self.means[gid] = new_mean
        packed = pack_key(*np.floor(new_mean / grid.voxel_size).astype(np.int64))
        self.home[gid] = packed
        view = grid.get_or_insert(packed)
        grid.gaussian_lists[view.row].append(gid)
        self._hash_add(gid)


def prune(grid: SparseVoxelGrid, gmap: GaussianMap, tsdf_below: float) -> int:
    """Drop every primitive whose home voxel tsdf fell below the threshold."""
    n = grid.n_voxels
    bad_rows = np.flatnonzero(grid.tsdf[:n] < tsdf_below)
    pruned = 0
    for row in bad_rows.tolist():
        ids = grid.gaussian_lists[row]
        if not ids:
            continue
        for gid in list(ids):
            gmap._hash_remove(gid)
            gmap.alive[gid] = False
            pruned += 1
        grid.gaussian_lists[row] = []
    return pruned


def primitives_in_voxels(grid: SparseVoxelGrid, keys) -> np.ndarray:
    """Deduplicated union of resident Gaussian ids over the given voxel keys."""
    out: set[int] = set()
    for key in np.asarray(keys, np.int64).reshape(-1).tolist():
        row = grid.row_of(int(key))
        if row is not None:
            out.update(grid.gaussian_lists[row])
    return np.array(sorted(out), np.int64)


def check_consistency(grid: SparseVoxelGrid, gmap: GaussianMap,
                      check_home_keys: bool = True) -> list[str]:
    """Bidirectional voxel<->primitive audit; returns human-readable violations.

    ``check_home_keys=False`` skips re-deriving home voxels from the means;
    use it for maps reloaded from PLY, whose float32 means can round across
    a voxel boundary."""
    problems = []
    listed: dict[int, int] = {}
    for row in range(grid.n_voxels):
        for gid in grid.gaussian_lists[row]:
            if gid in listed:
                problems.append(f"gaussian {gid} listed in two voxels")
            listed[gid] = row
            if not gmap.is_live(gid):
                problems.append(f"voxel row {row} lists dead gaussian {gid}")
    for gid in gmap.live_ids().tolist():
        row = grid.row_of(int(gmap.home[gid]))
        if row is None:
            problems.append(f"gaussian {gid} home voxel missing from grid")
            continue
        if listed.get(gid) != row:
            problems.append(f"gaussian {gid} not listed in its home voxel")
        if check_home_keys:
            expect = pack_key(*np.floor(gmap.means[gid] / grid.voxel_size).astype(np.int64))
            if expect != int(gmap.home[gid]):
                problems.append(f"gaussian {gid} home key stale")
    return problems


# PLY export/import ------------------------------------------------------------

_PLY_PROPS = (
    "property float x\nproperty float y\nproperty float z\n"
    "property uchar red\nproperty uchar green\nproperty uchar blue\n"
    "property float opacity\n"
    "property float cov_xx\nproperty float cov_xy\nproperty float cov_xz\n"
    "property float cov_yy\nproperty float cov_yz\nproperty float cov_zz\n"
    "property uint id\n"
)

_PLY_DTYPE = np.dtype([
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("opacity", "<f4"),
    ("cov_xx", "<f4"), ("cov_xy", "<f4"), ("cov_xz", "<f4"),
    ("cov_yy", "<f4"), ("cov_yz", "<f4"), ("cov_zz", "<f4"),
    ("id", "<u4"),
])


def write_ply(gmap: GaussianMap, path) -> None:
    ids = gmap.live_ids()
    rec = np.zeros(ids.shape[0], _PLY_DTYPE)
    rec["x"], rec["y"], rec["z"] = gmap.means[ids].T.astype(np.float32)
    rgb = np.clip(np.round(gmap.colors[ids] * 255.0), 0, 255).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = rgb.T
    rec["opacity"] = gmap.opacities[ids]
    covs = gmap.covs[ids]
    rec["cov_xx"] = covs[:, 0, 0]
    rec["cov_xy"] = covs[:, 0, 1]
    rec["cov_xz"] = covs[:, 0, 2]
    rec["cov_yy"] = covs[:, 1, 1]
    rec["cov_yz"] = covs[:, 1, 2]
    rec["cov_zz"] = covs[:, 2, 2]
    rec["id"] = ids
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {ids.shape[0]}\n{_PLY_PROPS}end_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path, voxel_size: float) -> GaussianMap:
    """Rebuild a GaussianMap from the export; ids and means/covs round-trip.

    Source keyframes are not stored in the PLY and come back as -1. Home
    voxel registration is the caller's job (see engine.load_map)."""
    with open(path, "rb") as fh:
        header = b""
        while not header.endswith(b"end_header\n"):
            chunk = fh.readline()
            if not chunk:
                raise ValueError(f"{path}: truncated PLY header")
            header += chunk
        text = header.decode("ascii")
        if "binary_little_endian" not in text:
            raise ValueError(f"{path}: expected binary little-endian PLY")
        count = 0
        for line in text.splitlines():
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
        rec = np.frombuffer(fh.read(count * _PLY_DTYPE.itemsize), _PLY_DTYPE)

    gmap = GaussianMap(voxel_size=voxel_size)
    if count == 0:
        return gmap
    max_id = int(rec["id"].max())
    gmap._grow(max_id + 1)
    gmap._size = max_id + 1
    ids = rec["id"].astype(np.int64)
    gmap.means[ids] = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    covs = np.zeros((count, 3, 3))
    covs[:, 0, 0] = rec["cov_xx"]
    covs[:, 0, 1] = covs[:, 1, 0] = rec["cov_xy"]
    covs[:, 0, 2] = covs[:, 2, 0] = rec["cov_xz"]
    covs[:, 1, 1] = rec["cov_yy"]
    covs[:, 1, 2] = covs[:, 2, 1] = rec["cov_yz"]
    covs[:, 2, 2] = rec["cov_zz"]
    gmap.covs[ids] = covs
    gmap.opacities[ids] = rec["opacity"]
    gmap.colors[ids] = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1) / 255.0
    gmap.home[ids] = pack_keys(np.floor(gmap.means[ids] / voxel_size).astype(np.int64))
    gmap.source[ids] = -1
    gmap.alive[ids] = True
    for gid in ids.tolist():
        gmap._hash_add(gid)
    return gmap
