"""Sparse voxel grid keyed by integer 3D coordinates.

Storage is a spatial hash over packed 63-bit keys with columnar numpy arrays,
so fusion kernels and similarity scans stay vectorized. Only voxels touched by
integration exist. Each voxel holds {weight, tsdf, confidence, feature,
resident Gaussian ids}; fresh voxels start at weight 0 with tsdf = +truncation
(unobserved space is assumed free up to the truncation band).
"""

from __future__ import annotations

import struct

import numpy as np

from ._kernels import dda_batch

_OFF = 1 << 20          # packs signed indices in [-2^20, 2^20) per axis
_MASK = (1 << 21) - 1
MAGIC = b"GSFG"
SNAPSHOT_VERSION = 1


def pack_keys(ijk: np.ndarray) -> np.ndarray:
    """Pack (N,3) signed voxel indices into int64 hash keys."""
    ijk = np.asarray(ijk, np.int64)
    if ijk.ndim == 1:
        ijk = ijk[None, :]
    return (((ijk[:, 0] + _OFF) << 42)
            | ((ijk[:, 1] + _OFF) << 21)
            | (ijk[:, 2] + _OFF))


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, np.int64)
    i = ((keys >> 42) & _MASK) - _OFF
    j = ((keys >> 21) & _MASK) - _OFF
    k = (keys & _MASK) - _OFF
    return np.stack([i, j, k], axis=-1)


def pack_key(i: int, j: int, k: int) -> int:
    return int(((i + _OFF) << 42) | ((j + _OFF) << 21) | (k + _OFF))


def world_to_voxel(p, voxel_size: float):
    """Voxel key of a world point: floor(p / s) per component.

    Boundary points follow the floor convention. Accepts a single point
    (returns a 3-tuple) or an (N,3) array (returns (N,3) int64).
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be > 0")
    arr = np.asarray(p, np.float64)
    keys = np.floor(arr / voxel_size).astype(np.int64)
    if arr.ndim == 1:
        return tuple(int(v) for v in keys)
    return keys


def voxel_center(key, voxel_size: float) -> np.ndarray:
    return (np.asarray(key, np.float64) + 0.5) * voxel_size


def dda_traverse(origin, direction, t_min: float, t_max: float, voxel_size: float):
    """All voxels crossed by the segment origin + t*direction, t in [t_min, t_max].

    Keys come back in increasing-t order, each exactly once. The direction
    must be unit-norm; a zero-length segment yields the single voxel
    containing the point.
    """
    direction = np.asarray(direction, np.float64)
    norm = float(np.linalg.norm(direction))
    if norm < 1e-12:
        raise ValueError("direction must be non-degenerate")
    if abs(norm - 1.0) > 1e-6:
        raise ValueError("direction must be unit-norm")
    if t_min > t_max:
        raise ValueError("t_min must be <= t_max")
    origin = np.asarray(origin, np.float64)
    keys, _ = dda_batch(origin[None, :], direction[None, :],
                        np.array([t_min]), np.array([t_max]), voxel_size)
    return [tuple(int(v) for v in row) for row in keys]


class VoxelView:
    """Handle onto one voxel's columns. Safe for concurrent reads."""

    __slots__ = ("_grid", "_row")

    def __init__(self, grid: "SparseVoxelGrid", row: int):
        self._grid = grid
        self._row = row

    @property
    def row(self) -> int:
        return self._row

    @property
    def weight(self) -> float:
        return float(self._grid.weight[self._row])

    @property
    def tsdf(self) -> float:
        return float(self._grid.tsdf[self._row])

    @tsdf.setter
    def tsdf(self, value: float):
        self._grid.tsdf[self._row] = value

    @property
    def confidence(self) -> float:
        return float(self._grid.confidence[self._row])

    @property
    def feature(self) -> np.ndarray:
        return self._grid.feature[self._row]

    @property
    def gaussians(self) -> list:
        return self._grid.gaussian_lists[self._row]

    @property
    def key(self):
        return tuple(int(v) for v in unpack_keys(self._grid.keys[self._row]))


class SparseVoxelGrid:
    def __init__(self, voxel_size: float = 0.05, truncation: float = 0.07,
                 feature_dim: int = 16, max_weight: float = 64.0):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be > 0")
        if truncation < voxel_size:
            raise ValueError("truncation must be >= voxel_size")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.feature_dim = int(feature_dim)
        self.max_weight = float(max_weight)
        self._index: dict[int, int] = {}
        cap = 0
        self.keys = np.empty(cap, np.int64)
        self.weight = np.empty(cap, np.float64)
        self.tsdf = np.empty(cap, np.float64)
        self.confidence = np.empty(cap, np.float64)
        self.feature = np.empty((cap, self.feature_dim), np.float64)
        self.gaussian_lists: list[list[int]] = []

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, key) -> bool:
        return self._packed(key) in self._index

    @staticmethod
    def _packed(key) -> int:
        if isinstance(key, (int, np.integer)):
            return int(key)
        return pack_key(*key)

    def _grow(self, extra: int):
        n = len(self._index)
        need = n + extra
        cap = self.keys.shape[0]
        if need <= cap:
            return
        new_cap = max(64, cap * 2, need)
        for name in ("keys", "weight", "tsdf", "confidence"):
            old = getattr(self, name)
            fresh = np.empty(new_cap, old.dtype)
            fresh[:n] = old[:n]
            setattr(self, name, fresh)
        feat = np.empty((new_cap, self.feature_dim), np.float64)
        feat[:n] = self.feature[:n]
        self.feature = feat

    def row_of(self, key) -> int | None:
        return self._index.get(self._packed(key))

    def get(self, key) -> VoxelView | None:
        row = self.row_of(key)
        return None if row is None else VoxelView(self, row)

    def get_or_insert(self, key) -> VoxelView:
        """Existing voxel unchanged; new ones start {w=0, tsdf=+trunc, conf=0, feat=0}."""
        packed = self._packed(key)
        row = self._index.get(packed)
        if row is None:
            row = self.insert_rows(np.array([packed], np.int64))[0]
        return VoxelView(self, int(row))

    def insert_rows(self, packed: np.ndarray) -> np.ndarray:
        """Rows for the given packed keys, inserting any that are missing."""
        rows = np.empty(packed.shape[0], np.int64)
        missing = []
        for i, pk in enumerate(packed.tolist()):
            row = self._index.get(pk)
            if row is None:
                missing.append(i)
                rows[i] = -1
            else:
                rows[i] = row
        if missing:
            self._grow(len(missing))
        for i in missing:
            pk = int(packed[i])
            row = self._index.get(pk)
            if row is None:
                row = len(self._index)
                self._index[pk] = row
                self.keys[row] = pk
                self.weight[row] = 0.0
                self.tsdf[row] = self.truncation
                self.confidence[row] = 0.0
                self.feature[row] = 0.0
                self.gaussian_lists.append([])
            rows[i] = row
        return rows

    @property
    def n_voxels(self) -> int:
        return len(self._index)

    def live_slice(self):
        n = len(self._index)
        return (self.keys[:n], self.weight[:n], self.tsdf[:n],
                self.confidence[:n], self.feature[:n])


def save_snapshot(grid: SparseVoxelGrid, path) -> None:
    """Binary grid snapshot, little-endian, voxels sorted by packed key."""
    n = grid.n_voxels
    order = np.argsort(grid.keys[:n], kind="stable")
    ijk = unpack_keys(grid.keys[:n][order]).astype("<i4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IddIQ", SNAPSHOT_VERSION, grid.voxel_size,
                             grid.truncation, grid.feature_dim, n))
        for pos, row in enumerate(order.tolist()):
            fh.write(ijk[pos].tobytes())
            fh.write(struct.pack("<fff", grid.weight[row], grid.tsdf[row],
                                 grid.confidence[row]))
            fh.write(grid.feature[row].astype("<f4").tobytes())
            ids = grid.gaussian_lists[row]
            fh.write(struct.pack("<I", len(ids)))
            if ids:
                fh.write(np.asarray(ids, "<u8").tobytes())


def load_snapshot(path) -> SparseVoxelGrid:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, s, trunc, dim, count = struct.unpack("<IddIQ", fh.read(4 + 8 + 8 + 4 + 8))
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        grid = SparseVoxelGrid(voxel_size=s, truncation=trunc, feature_dim=dim)
        for _ in range(count):
            i, j, k = struct.unpack("<iii", fh.read(12))
            w, phi, conf = struct.unpack("<fff", fh.read(12))
            feat = np.frombuffer(fh.read(4 * dim), "<f4").astype(np.float64)
            (n_ids,) = struct.unpack("<I", fh.read(4))
            ids = np.frombuffer(fh.read(8 * n_ids), "<u8").astype(np.int64)
            view = grid.get_or_insert((i, j, k))
            row = view.row
            grid.weight[row] = w
            grid.tsdf[row] = phi
            grid.confidence[row] = conf
            grid.feature[row] = feat
            grid.gaussian_lists[row] = [int(v) for v in ids]
    return grid
