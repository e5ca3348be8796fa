"""Open-vocabulary querying over the fused semantic map.

The flow: a cosine similarity field over all semantic voxels, min-max
normalized per query; a high seed threshold selects candidate voxels;
DBSCAN over the resident Gaussians' means splits them into object clusters;
per cluster the best-covering keyframes are picked; then, for a fixed number
of rounds, five thresholds are sampled from a shrinking window, each cluster
is rendered at each threshold from each viewpoint, and the oracle votes for
the best threshold per viewpoint. The median vote re-centers the window.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .config import EngineConfig
from .edit import ObjectDescriptor, object_descriptor
from .gaussians import GaussianMap, Keyframe, primitives_in_voxels
from .grid import SparseVoxelGrid
from .oracle import Candidate, OracleError, ThresholdOracle
from .render import DEFAULT_BACKGROUND, invert_pose, render


class NoMatchError(RuntimeError):
    pass


@dataclass
class SimilarityField:
    keys: np.ndarray          # packed voxel keys, semantic voxels only
    raw: np.ndarray           # cosine similarity per key
    normalized: np.ndarray    # min-max mapped to [0, 1]
    min_raw: float
    max_raw: float


@dataclass
class Cluster:
    member_ids: np.ndarray
    centroid: np.ndarray
    voxel_keys: np.ndarray    # packed home voxels of the members
    member_means: np.ndarray = None


@dataclass
class ThresholdWindow:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0.0 <= self.lo < self.hi <= 1.0:
            raise ValueError(f"invalid threshold window [{self.lo}, {self.hi}]")


@dataclass
class ClusterSelection:
    cluster_index: int
    gaussian_ids: np.ndarray
    threshold: float
    descriptor: ObjectDescriptor


@dataclass
class QueryResult:
    query_text: str
    clusters: list[ClusterSelection] = field(default_factory=list)

    def all_ids(self) -> np.ndarray:
        if not self.clusters:
            return np.zeros(0, np.int64)
        return np.unique(np.concatenate([c.gaussian_ids for c in self.clusters]))


def similarity_field(grid: SparseVoxelGrid, text_embedding) -> SimilarityField:
    """Cosine similarity of every semantic voxel feature against a unit query."""
    q = np.asarray(text_embedding, np.float64)
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise ValueError("text embedding must be unit-norm")
    n = grid.n_voxels
    semantic = np.flatnonzero(grid.confidence[:n] > 0)
    if semantic.shape[0] == 0:
        raise NoMatchError("empty semantic map")
    feats = grid.feature[semantic]
    norms = np.linalg.norm(feats, axis=1)
    raw = feats @ q / norms
    lo, hi = float(raw.min()), float(raw.max())
    if hi > lo:
        normalized = (raw - lo) / (hi - lo)
    else:
        normalized = np.full_like(raw, 0.5)
    return SimilarityField(keys=grid.keys[:n][semantic].copy(), raw=raw,
                           normalized=normalized, min_raw=lo, max_raw=hi)


def seed_selection(field: SimilarityField, threshold: float) -> np.ndarray:
    """Packed keys of voxels whose normalized similarity reaches the threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("seed threshold must be in [0, 1]")
    return field.keys[field.normalized >= threshold]


def dbscan(points, eps: float, min_pts: int):
    """Density clustering; returns (labels, noise_flags), noise labeled -1.

    Labels are deterministic given the input order: clusters are numbered by
    the first core point reached, and expansion proceeds in index order.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    pts = np.asarray(points, np.float64).reshape(-1, 3)
    n = pts.shape[0]
    labels = np.full(n, -1, np.int64)
    if n == 0:
        return labels, labels == -1
    tree = cKDTree(pts)
    neighborhoods = tree.query_ball_point(pts, eps)
    core = np.array([len(nb) >= min_pts for nb in neighborhoods])
    visited = np.zeros(n, bool)
    current = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        # breadth-first expansion over density-reachable points
        labels[i] = current
        visited[i] = True
        queue = [i]
        while queue:
            p = queue.pop(0)
            for q in sorted(neighborhoods[p]):
                if labels[q] == -1:
                    labels[q] = current
                if not visited[q] and core[q]:
                    visited[q] = True
                    queue.append(q)
        current += 1
    return labels, labels == -1


def keyframe_score(coverage: float, distance: float, eps: float) -> float:
    """Viewpoint quality: visual coverage over (distance + eps)."""
    return coverage / (distance + eps)


def score_keyframes(cluster: Cluster, keyframes: list[Keyframe], u: int,
                    eps: float) -> list[Keyframe]:
    """Top-u keyframes by keyframe_score; ties break by frame id.

    Coverage is the fraction of member means that project inside the image
    with positive depth; distance runs from the cluster centroid to the
    keyframe camera center. Keyframes that see nothing score zero.
    """
    if u < 1:
        raise ValueError("u must be >= 1")
    if not keyframes:
        raise ValueError("at least one keyframe required")
    scored = []
    for kf in keyframes:
        w2c = invert_pose(kf.pose)
        cam = cluster.member_means @ w2c[:3, :3].T + w2c[:3, 3]
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = kf.intrinsics.fx * cam[:, 0] / z + kf.intrinsics.cx
            py = kf.intrinsics.fy * cam[:, 1] / z + kf.intrinsics.cy
        inside = ((z > 0) & (px >= 0) & (px < kf.intrinsics.width)
                  & (py >= 0) & (py < kf.intrinsics.height))
        cov = float(inside.mean())
        dist = float(np.linalg.norm(cluster.centroid - kf.camera_center))
        scored.append((keyframe_score(cov, dist, eps), kf))
    scored.sort(key=lambda s: (-s[0], s[1].frame_id))
    return [kf for score, kf in scored[:u] if score > 0.0]


def sample_thresholds(window: ThresholdWindow) -> np.ndarray:
    """Five uniform thresholds spanning the window, endpoints included."""
    return window.lo + (window.hi - window.lo) * np.arange(5) / 4.0


def _selection_at(grid: SparseVoxelGrid, field: SimilarityField,
                  cluster: Cluster, threshold: float) -> np.ndarray:
    """Ids in the cluster's member voxels whose similarity passes the threshold."""
    sim = dict(zip(field.keys.tolist(), field.normalized.tolist()))
    passing = [k for k in cluster.voxel_keys.tolist() if sim.get(k, 0.0) >= threshold]
    return primitives_in_voxels(grid, np.asarray(passing, np.int64))


def evaluate_round(cluster: Cluster, field: SimilarityField, thresholds,
                   viewpoints: list[Keyframe], oracle: ThresholdOracle,
                   query_text: str, grid: SparseVoxelGrid, gmap: GaussianMap,
                   background=DEFAULT_BACKGROUND, on_render=None) -> float:
    """One oracle round: per-viewpoint best thresholds, aggregated by median.

    Even vote counts take the lower median. Viewpoints whose oracle call
    fails are skipped; if every viewpoint fails the round errors out.
    """
    thresholds = np.asarray(thresholds, np.float64)
    if thresholds.shape[0] < 1 or np.any(np.diff(thresholds) < 0):
        raise ValueError("thresholds must be ascending")
    if not viewpoints:
        raise ValueError("at least one viewpoint required")
    votes = []
    failures = []
    for kf in viewpoints:
        w2c = invert_pose(kf.pose)
        candidates = []
        for t in thresholds.tolist():
            ids = _selection_at(grid, field, cluster, t)
            color, _, _ = render(ids, gmap, w2c, kf.intrinsics, background)
            img = np.clip(np.round(color * 255.0), 0, 255).astype(np.uint8)
            candidates.append(Candidate(threshold=t, image=img))
            if on_render is not None:
                on_render(kf.frame_id, t, img)
        try:
            best = oracle.best_index(query_text, kf.frame_id, candidates)
        except OracleError as exc:
            failures.append(f"viewpoint {kf.frame_id}: {exc}")
            continue
        votes.append(float(thresholds[best]))
    if not votes:
        raise OracleError("oracle failed on every viewpoint: " + "; ".join(failures))
    votes.sort()
    return votes[(len(votes) - 1) // 2]


def _build_clusters(grid: SparseVoxelGrid, gmap: GaussianMap,
                    seed_keys: np.ndarray, config: EngineConfig) -> list[Cluster]:
    ids = primitives_in_voxels(grid, seed_keys)
    if ids.shape[0] == 0:
        return []
    means = gmap.means[ids]
    labels, _ = dbscan(means, config.eps_cluster, config.dbscan_min_pts)
    clusters = []
    for label in range(labels.max() + 1 if labels.size else 0):
        member = ids[labels == label]
        m = gmap.means[member]
        clusters.append(Cluster(member_ids=member, centroid=m.mean(axis=0),
                                voxel_keys=np.unique(gmap.home[member]),
                                member_means=m))
    return clusters


def adaptive_query(grid: SparseVoxelGrid, gmap: GaussianMap,
                   keyframes: list[Keyframe], text_embedding,
                   query_text: str, oracle: ThresholdOracle,
                   config: EngineConfig, on_render=None) -> QueryResult:
    """Full adaptive-threshold query; see the module docstring for the flow."""
    field = similarity_field(grid, text_embedding)
    seeds = seed_selection(field, config.seed_threshold)
    if seeds.shape[0] == 0:
        raise NoMatchError(f"no match for query {query_text!r}")
    clusters = _build_clusters(grid, gmap, seeds, config)
    if not clusters:
        raise NoMatchError(f"no match for query {query_text!r} (all seeds were noise)")

    result = QueryResult(query_text=query_text)
    for idx, cluster in enumerate(clusters):
        views = score_keyframes(cluster, keyframes, config.keyframes_per_cluster,
                                config.coverage_eps)
        if not views:
            warnings.warn(f"cluster {idx}: no keyframe sees it; dropped")
            continue
        window = ThresholdWindow(config.window_lo, config.window_hi)
        best = None
        for round_index in range(config.query_rounds):
            thresholds = sample_thresholds(window)
            callback = None
            if on_render is not None:
                callback = (lambda fid, t, img, _r=round_index:
                            on_render(_r, fid, t, img))
            best = evaluate_round(cluster, field, thresholds, views, oracle,
                                  query_text, grid, gmap, on_render=callback)
            window = ThresholdWindow(max(0.0, best - config.window_halfwidth),
                                     min(1.0, best + config.window_halfwidth))
        ids = _selection_at(grid, field, cluster, best)
        if ids.shape[0] == 0:
            continue
        result.clusters.append(ClusterSelection(
            cluster_index=idx, gaussian_ids=ids, threshold=float(best),
            descriptor=object_descriptor(ids, gmap)))
    if not result.clusters:
        raise NoMatchError(f"no match for query {query_text!r}")
    return result


def fixed_query(grid: SparseVoxelGrid, gmap: GaussianMap, text_embedding,
                delta_fixed: float, config: EngineConfig,
                query_text: str = "") -> QueryResult:
    """One-shot selection at a fixed threshold; DBSCAN still removes noise."""
    if not 0.0 <= delta_fixed <= 1.0:
        raise ValueError("fixed threshold must be in [0, 1]")
    field = similarity_field(grid, text_embedding)
    keys = field.keys[field.normalized >= delta_fixed]
    if keys.shape[0] == 0:
        raise NoMatchError(f"no match for query {query_text!r}")
    clusters = _build_clusters(grid, gmap, keys, config)
    if not clusters:
        raise NoMatchError(f"no match for query {query_text!r} (all selections were noise)")
    result = QueryResult(query_text=query_text)
    for idx, cluster in enumerate(clusters):
        result.clusters.append(ClusterSelection(
            cluster_index=idx, gaussian_ids=cluster.member_ids,
            threshold=float(delta_fixed),
            descriptor=object_descriptor(cluster.member_ids, gmap)))
    return result
