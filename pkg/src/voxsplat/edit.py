"""Structured scene edits applied to query results: translate, rotate, delete.

Edits act on Gaussian primitives only; TSDF and semantic voxel fields are
left untouched. Home voxels are recomputed after every move so the
voxel<->primitive links stay consistent (moving into empty space allocates
the destination voxel).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import GaussianMap
from .grid import SparseVoxelGrid

VERBS = ("translate", "rotate", "delete")


class EditError(ValueError):
    pass


@dataclass
class EditCommand:
    verb: str
    target: int                      # cluster index within a QueryResult
    translation: np.ndarray = None   # (3,) m, translate only
    rotation_rpy: np.ndarray = None  # (3,) rad roll/pitch/yaw, rotate only

    def __post_init__(self):
        if self.verb not in VERBS:
            raise EditError(f"unknown edit verb {self.verb!r}")
        if self.verb == "translate":
            if self.translation is None or self.rotation_rpy is not None:
                raise EditError("translate takes exactly a translation")
            self.translation = np.asarray(self.translation, np.float64).reshape(3)
        elif self.verb == "rotate":
            if self.rotation_rpy is None or self.translation is not None:
                raise EditError("rotate takes exactly rotation angles")
            self.rotation_rpy = np.asarray(self.rotation_rpy, np.float64).reshape(3)
        elif self.translation is not None or self.rotation_rpy is not None:
            raise EditError("delete takes no transform")


@dataclass
class EditReport:
    verb: str
    target: int
    ids: list[int]

    def to_json(self) -> dict:
        return {"verb": self.verb, "target": self.target, "ids": self.ids}


def rpy_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def apply_edit(gmap: GaussianMap, grid: SparseVoxelGrid, command: EditCommand,
               result) -> EditReport:
    """Apply one command to the target cluster of a QueryResult.

    Rotation happens about the current centroid of the target's means.
    Stale (dead) target ids abort the edit before any mutation.
    """
    if not 0 <= command.target < len(result.clusters):
        raise EditError(f"no cluster {command.target} in query result")
    ids = np.asarray(result.clusters[command.target].gaussian_ids, np.int64)
    stale = [int(g) for g in ids.tolist() if not gmap.is_live(int(g))]
    if stale:
        raise EditError(f"stale gaussian ids: {stale}")

    if command.verb == "delete":
        for gid in ids.tolist():
            gmap.remove(int(gid), grid)
    elif command.verb == "translate":
        for gid in ids.tolist():
            gmap.move(int(gid), gmap.means[gid] + command.translation, grid)
    else:
        rot = rpy_matrix(*command.rotation_rpy)
        centroid = gmap.means[ids].mean(axis=0)
        for gid in ids.tolist():
            new_mean = rot @ (gmap.means[gid] - centroid) + centroid
            gmap.covs[gid] = rot @ gmap.covs[gid] @ rot.T
            gmap.move(int(gid), new_mean, grid)
    return EditReport(verb=command.verb, target=command.target,
                      ids=[int(g) for g in ids.tolist()])


@dataclass
class ObjectDescriptor:
    """9-number pose summary: box center, extents (sorted desc), frame angles."""
    center: np.ndarray
    dims: np.ndarray
    angles_rpy: np.ndarray

    def to_json(self) -> dict:
        return {"center": [float(v) for v in self.center],
                "dims": [float(v) for v in self.dims],
                "angles_rpy": [float(v) for v in self.angles_rpy]}


def _angles_from_matrix(rot: np.ndarray) -> np.ndarray:
    # inverse of rpy_matrix (ZYX convention)
    pitch = np.arcsin(np.clip(-rot[2, 0], -1.0, 1.0))
    if abs(rot[2, 0]) < 1.0 - 1e-9:
        roll = np.arctan2(rot[2, 1], rot[2, 2])
        yaw = np.arctan2(rot[1, 0], rot[0, 0])
    else:
        roll = np.arctan2(-rot[1, 2], rot[1, 1])
        yaw = 0.0
    return np.array([roll, pitch, yaw])


def object_descriptor(ids, gmap: GaussianMap) -> ObjectDescriptor:
    """Oriented bounding box of the member means via principal axes."""
    ids = np.asarray(ids, np.int64).reshape(-1)
    if ids.shape[0] == 0:
        raise EditError("descriptor needs at least one primitive")
    pts = gmap.means[ids]
    mean = pts.mean(axis=0)
    if ids.shape[0] == 1:
        return ObjectDescriptor(center=mean, dims=np.zeros(3),
                                angles_rpy=np.zeros(3))
    centered = pts - mean
    cov = centered.T @ centered / pts.shape[0]
    off = np.abs(cov - np.diag(np.diag(cov))).max()
    if off <= 1e-12 * max(np.abs(np.diag(cov)).max(), 1e-300):
        # already axis-aligned; eigh would pick an arbitrary basis when
        # eigenvalues repeat (e.g. a cube), so keep the world axes
        vecs = np.eye(3)
    else:
        _, vecs = np.linalg.eigh(cov)
    # canonical signs so the frame is reproducible
    for a in range(3):
        lead = np.argmax(np.abs(vecs[:, a]))
        if vecs[lead, a] < 0:
            vecs[:, a] = -vecs[:, a]
    local = centered @ vecs
    lo = local.min(axis=0)
    hi = local.max(axis=0)
    dims = hi - lo
    order = np.argsort(-dims, kind="stable")  # extents sorted descending
    vecs = vecs[:, order]
    dims = dims[order]
    lo = lo[order]
    hi = hi[order]
    if np.linalg.det(vecs) < 0:
        vecs[:, 2] = -vecs[:, 2]
        lo[2], hi[2] = -hi[2], -lo[2]
    center = mean + vecs @ ((lo + hi) / 2.0)
    return ObjectDescriptor(center=center, dims=dims,
                            angles_rpy=_angles_from_matrix(vecs))
