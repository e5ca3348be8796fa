"""Forward Gaussian splatting: pinhole projection and alpha-blended images.

Projection maps a world-space Gaussian (mean, covariance) through the rigid
world-to-camera transform and the pinhole Jacobian at the camera-space mean;
the resulting 2D covariance is regularized by +0.3 px^2 on the diagonal.
Per pixel, contributions are composited in depth order:

    C(p) = sum_i h_i a_i prod_{j<i} (1 - a_j) + background * prod_j (1 - a_j)
    D(p) = sum_i d_i a_i prod_{j<i} (1 - a_j)

with a_i = opacity_i * exp(-0.5 * d^T cov2d^-1 d), clipped to [0, 0.99], and a
3-sigma footprint. Front-to-back and back-to-front evaluation orders are both
available and agree up to float rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import rasterize
from .fusion import check_rigid
from .gaussians import GaussianMap

Z_NEAR = 0.2           # m; camera-space means at or behind this are culled
COV2D_REG = 0.3        # px^2 diagonal regularization
DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be > 0")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must fall inside the image")


@dataclass
class Projected2DGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray


def invert_pose(pose: np.ndarray) -> np.ndarray:
    pose = np.asarray(pose, np.float64)
    out = np.eye(4)
    rot = pose[:3, :3]
    out[:3, :3] = rot.T
    out[:3, 3] = -rot.T @ pose[:3, 3]
    return out


def project_gaussian(mean, cov, opacity, color, world_to_cam, intr: CameraIntrinsics):
    """Project one Gaussian; returns None when the mean is behind the camera."""
    check_rigid(world_to_cam)
    w2c = np.asarray(world_to_cam, np.float64)
    mu_c = w2c[:3, :3] @ np.asarray(mean, np.float64) + w2c[:3, 3]
    if mu_c[2] <= Z_NEAR:
        return None
    x, y, z = mu_c
    mean2d = np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])
    jac = np.array([[intr.fx / z, 0.0, -intr.fx * x / (z * z)],
                    [0.0, intr.fy / z, -intr.fy * y / (z * z)]])
    rot = w2c[:3, :3]
    cov2d = jac @ rot @ np.asarray(cov, np.float64) @ rot.T @ jac.T
    cov2d = cov2d + COV2D_REG * np.eye(2)
    return Projected2DGaussian(mean2d=mean2d, cov2d=cov2d, depth=float(z),
                               opacity=float(opacity),
                               color=np.asarray(color, np.float64))


def _project_batch(means, covs, world_to_cam, intr):
    w2c = np.asarray(world_to_cam, np.float64)
    rot = w2c[:3, :3]
    mu_c = means @ rot.T + w2c[:3, 3]
    keep = mu_c[:, 2] > Z_NEAR
    mu_c = mu_c[keep]
    if mu_c.shape[0] == 0:
        return keep, None, None, None
    x, y, z = mu_c[:, 0], mu_c[:, 1], mu_c[:, 2]
    mean2d = np.stack([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy], axis=1)
    jac = np.zeros((mu_c.shape[0], 2, 3))
    jac[:, 0, 0] = intr.fx / z
    jac[:, 0, 2] = -intr.fx * x / (z * z)
    jac[:, 1, 1] = intr.fy / z
    jac[:, 1, 2] = -intr.fy * y / (z * z)
    cov_cam = np.einsum("ab,nbc,dc->nad", rot, covs[keep], rot)
    cov2d = np.einsum("nab,nbc,ndc->nad", jac, cov_cam, jac)
    cov2d[:, 0, 0] += COV2D_REG
    cov2d[:, 1, 1] += COV2D_REG
    return keep, mean2d, cov2d, z


def render(ids, gmap: GaussianMap, world_to_cam, intr: CameraIntrinsics,
           background=DEFAULT_BACKGROUND, order: str = "front_to_back"):
    """Render the given primitive ids into (color, depth, alpha) float arrays.

    Contributors sort by camera depth (ties broken by id). An empty id set
    yields the background color, zero depth and zero alpha everywhere.
    """
    check_rigid(world_to_cam)
    if order not in ("front_to_back", "back_to_front"):
        raise ValueError(f"unknown compositing order {order!r}")
    height, width = intr.height, intr.width
    ids = np.asarray(ids, np.int64).reshape(-1)
    bg = np.asarray(background, np.float64)
    if ids.shape[0] == 0:
        color = np.tile(bg, (height, width, 1))
        return color, np.zeros((height, width)), np.zeros((height, width))

    means = gmap.means[ids]
    covs = gmap.covs[ids]
    keep, mean2d, cov2d, depth = _project_batch(means, covs, world_to_cam, intr)
    if mean2d is None:
        color = np.tile(bg, (height, width, 1))
        return color, np.zeros((height, width)), np.zeros((height, width))
    vis_ids = ids[keep]
    opac = gmap.opacities[vis_ids]
    colors = gmap.colors[vis_ids]

    sort = np.lexsort((vis_ids, depth))
    mean2d = mean2d[sort]
    cov2d = cov2d[sort]
    depth = depth[sort]
    opac = opac[sort]
    colors = colors[sort]

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.stack([cov2d[:, 1, 1] / det,
                      -cov2d[:, 0, 1] / det,
                      cov2d[:, 0, 0] / det], axis=1)

    # 3-sigma bounding boxes, clipped to the image
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.ceil(3.0 * np.sqrt(lam_max)) + 1.0
    x0 = np.clip(np.floor(mean2d[:, 0] - radius), 0, width).astype(np.int64)
    x1 = np.clip(np.ceil(mean2d[:, 0] + radius) + 1, 0, width).astype(np.int64)
    y0 = np.clip(np.floor(mean2d[:, 1] - radius), 0, height).astype(np.int64)
    y1 = np.clip(np.ceil(mean2d[:, 1] + radius) + 1, 0, height).astype(np.int64)
    bboxes = np.stack([x0, x1, y0, y1], axis=1)

    return rasterize(mean2d, conic, depth, opac, colors, height, width, bg,
                     bboxes, front_to_back=(order == "front_to_back"))


def normalized_depth(depth: np.ndarray, alpha: np.ndarray,
                     min_alpha: float = 1e-6) -> np.ndarray:
    """Alpha-normalized depth: blended depth divided by accumulated opacity."""
    out = np.zeros_like(depth)
    mask = alpha > min_alpha
    out[mask] = depth[mask] / alpha[mask]
    return out
