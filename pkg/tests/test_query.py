import numpy as np
import pytest

from voxsplat.config import EngineConfig
from voxsplat.gaussians import GaussianMap, Keyframe, PrimitiveDraft
from voxsplat.grid import SparseVoxelGrid, pack_keys
from voxsplat.oracle import ConstantOptimumOracle, OracleError, ThresholdOracle
from voxsplat.query import (Cluster, NoMatchError, ThresholdWindow, adaptive_query,
                            dbscan, evaluate_round, fixed_query, sample_thresholds,
                            score_keyframes, seed_selection, similarity_field)
from voxsplat.render import CameraIntrinsics

from .reference import brute_dbscan, canonical_labels


def semantic_grid(features, confidences=None):
    dim = len(features[0])
    grid = SparseVoxelGrid(0.05, 0.07, feature_dim=dim)
    for i, feat in enumerate(features):
        view = grid.get_or_insert((i, 0, 0))
        grid.feature[view.row] = feat
        grid.confidence[view.row] = 1.0 if confidences is None else confidences[i]
    return grid


def test_similarity_field_examples():
    q = np.array([1.0, 0.0])
    grid = semantic_grid([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    field = similarity_field(grid, q)
    assert field.raw == pytest.approx([1.0, 0.0, np.sqrt(0.5)])
    # min-max: {1, 0, 0.707} -> {1, 0, 0.707}
    assert field.normalized == pytest.approx([1.0, 0.0, np.sqrt(0.5)])


def test_similarity_field_degenerate_range():
    grid = semantic_grid([[1.0, 0.0], [1.0, 0.0]])
    field = similarity_field(grid, np.array([1.0, 0.0]))
    assert np.all(field.normalized == 0.5)


def test_similarity_field_requires_unit_query():
    grid = semantic_grid([[1.0, 0.0]])
    with pytest.raises(ValueError):
        similarity_field(grid, np.array([2.0, 0.0]))


def test_similarity_field_empty_semantic_map():
    grid = SparseVoxelGrid(0.05, 0.07, feature_dim=2)
    grid.get_or_insert((0, 0, 0))  # geometry only, no semantics
    with pytest.raises(NoMatchError):
        similarity_field(grid, np.array([1.0, 0.0]))


def test_similarity_scale_invariance():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(20, 4))
    grid = semantic_grid(feats)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    f1 = similarity_field(grid, q)
    grid.feature[:grid.n_voxels] *= 3.7
    f2 = similarity_field(grid, q)
    assert np.allclose(f1.raw, f2.raw, atol=1e-12)
    assert np.allclose(f1.normalized, f2.normalized, atol=1e-12)


def test_seed_selection_examples():
    grid = semantic_grid([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    field = similarity_field(grid, np.array([1.0, 0.0]))
    assert seed_selection(field, 0.8).shape[0] == 1
    assert seed_selection(field, 0.0).shape[0] == 3
    assert seed_selection(field, 1.0).shape[0] == 1
    with pytest.raises(ValueError):
        seed_selection(field, 1.5)


def test_seed_selection_monotone():
    rng = np.random.default_rng(1)
    grid = semantic_grid(rng.normal(size=(50, 4)))
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    field = similarity_field(grid, q)
    prev = None
    for delta in np.linspace(0, 1, 11):
        keys = set(seed_selection(field, delta).tolist())
        if prev is not None:
            assert keys.issubset(prev)
        prev = keys


def test_dbscan_three_blobs():
    rng = np.random.default_rng(2)
    pts = np.concatenate([rng.normal(0, 0.01, (20, 3)),
                          rng.normal(1.0, 0.01, (20, 3)),
                          rng.normal(2.0, 0.01, (20, 3))])
    labels, noise = dbscan(pts, eps=0.1, min_pts=5)
    assert labels.max() == 2
    assert not noise.any()
    assert np.array_equal(canonical_labels(labels),
                          canonical_labels(brute_dbscan(pts, 0.1, 5)))


def test_dbscan_isolated_point_is_noise():
    pts = np.array([[0.0, 0, 0]])
    labels, noise = dbscan(pts, eps=0.1, min_pts=2)
    assert labels[0] == -1 and noise[0]


def test_dbscan_identical_points_one_cluster():
    pts = np.zeros((12, 3))
    labels, noise = dbscan(pts, eps=0.1, min_pts=5)
    assert np.all(labels == 0)
    assert not noise.any()


def test_dbscan_matches_bruteforce_random():
    rng = np.random.default_rng(3)
    for _ in range(15):
        n = int(rng.integers(5, 200))
        pts = rng.uniform(0, 1, (n, 3))
        eps = float(rng.uniform(0.05, 0.3))
        min_pts = int(rng.integers(2, 8))
        mine, _ = dbscan(pts, eps, min_pts)
        assert np.array_equal(canonical_labels(mine),
                              canonical_labels(brute_dbscan(pts, eps, min_pts)))


def make_keyframe(frame_id, cam_center, forward_z=True):
    """Axis-aligned camera at cam_center, looking along +z (or -z)."""
    intr = CameraIntrinsics(fx=100, fy=100, cx=40, cy=30, width=80, height=60)
    pose = np.eye(4)
    if not forward_z:
        pose[0, 0] = -1.0
        pose[2, 2] = -1.0
    pose[:3, 3] = np.asarray(cam_center, np.float64)
    return Keyframe(frame_id=frame_id, pose=pose, intrinsics=intr)


def cluster_at(points):
    pts = np.asarray(points, np.float64)
    return Cluster(member_ids=np.arange(len(pts)), centroid=pts.mean(axis=0),
                   voxel_keys=np.unique(pack_keys(np.floor(pts / 0.05).astype(np.int64))),
                   member_means=pts)


def test_score_keyframes_eq_values():
    cluster = cluster_at([[0, 0, 0], [0.02, 0, 0]])
    near = make_keyframe(0, (0, 0, -1.0))   # sees everything, distance 1
    far = make_keyframe(1, (0, 0, -3.0))
    behind = make_keyframe(2, (0, 0, 1.0))  # cluster behind the camera
    picked = score_keyframes(cluster, [far, near, behind], u=2, eps=0.01)
    assert [kf.frame_id for kf in picked] == [0, 1]
    picked = score_keyframes(cluster, [behind], u=3, eps=0.01)
    assert picked == []  # zero coverage scores drop out


def test_keyframe_score_values():
    from voxsplat.query import keyframe_score
    assert keyframe_score(1.0, 0.0, 0.01) == pytest.approx(100.0)
    assert keyframe_score(0.0, 3.7, 0.01) == 0.0
    assert keyframe_score(0.5, 0.99, 0.01) == pytest.approx(0.5)


def test_score_keyframes_tie_by_frame_id():
    cluster = cluster_at([[0, 0, 0]])
    a = make_keyframe(5, (0, 0, -1.0))
    b = make_keyframe(2, (0, 0, -1.0))
    picked = score_keyframes(cluster, [a, b], u=1, eps=0.01)
    assert picked[0].frame_id == 2


def test_sample_thresholds():
    assert sample_thresholds(ThresholdWindow(0.5, 1.0)) == pytest.approx(
        [0.5, 0.625, 0.75, 0.875, 1.0])
    t = sample_thresholds(ThresholdWindow(0.6, 0.6 + 4e-6))
    assert np.all(np.diff(t) > 0)
    assert t[0] == pytest.approx(0.6) and t[-1] == pytest.approx(0.6 + 4e-6)
    with pytest.raises(ValueError):
        ThresholdWindow(0.9, 0.4)


class FixedVoteOracle(ThresholdOracle):
    """Returns a scripted best index per viewpoint id."""

    def __init__(self, votes, fail=()):
        self.votes = votes
        self.fail = set(fail)

    def best_index(self, query_text, viewpoint_id, candidates):
        if viewpoint_id in self.fail:
            raise OracleError("scripted failure")
        return self.votes[viewpoint_id]


def small_cluster_setup():
    grid = SparseVoxelGrid(0.05, 0.07, feature_dim=2)
    gmap = GaussianMap(0.05)
    pts = [(0.01 + 0.05 * i, 0.01, 1.0) for i in range(3)]
    for p in pts:
        view = grid.get_or_insert(np.floor(np.asarray(p) / 0.05).astype(np.int64))
        grid.tsdf[view.row] = 0.01
        grid.feature[view.row] = [1.0, 0.0]
        grid.confidence[view.row] = 1.0
        draft = PrimitiveDraft(mean=np.asarray(p), cov=1e-4 * np.eye(3), opacity=0.9,
                               color=np.array([0.9, 0.1, 0.1]), region_id=0,
                               source_keyframe=0)
        assert gmap.admit(draft, grid, -0.03, 0.001) is not None
    view = grid.get_or_insert((10, 10, 10))
    grid.feature[view.row] = [0.0, 1.0]
    grid.confidence[view.row] = 1.0
    field = similarity_field(grid, np.array([1.0, 0.0]))
    cluster = cluster_at(np.asarray(pts))
    cluster.member_ids = gmap.live_ids()
    kfs = [make_keyframe(i, (0.05, 0.01, -0.1 * i)) for i in range(3)]
    return grid, gmap, field, cluster, kfs


def test_evaluate_round_median_of_votes():
    grid, gmap, field, cluster, kfs = small_cluster_setup()
    thresholds = sample_thresholds(ThresholdWindow(0.5, 1.0))
    oracle = FixedVoteOracle({0: 1, 1: 2, 2: 3})
    best = evaluate_round(cluster, field, thresholds, kfs, oracle, "q", grid, gmap)
    assert best == pytest.approx(0.75)


def test_evaluate_round_single_viewpoint():
    grid, gmap, field, cluster, kfs = small_cluster_setup()
    thresholds = sample_thresholds(ThresholdWindow(0.5, 1.0))
    best = evaluate_round(cluster, field, thresholds, kfs[:1],
                          FixedVoteOracle({0: 4}), "q", grid, gmap)
    assert best == pytest.approx(1.0)


def test_evaluate_round_even_votes_lower_median():
    grid, gmap, field, cluster, kfs = small_cluster_setup()
    thresholds = sample_thresholds(ThresholdWindow(0.5, 1.0))
    best = evaluate_round(cluster, field, thresholds, kfs[:2],
                          FixedVoteOracle({0: 1, 1: 2}), "q", grid, gmap)
    assert best == pytest.approx(0.625)


def test_evaluate_round_skips_failed_viewpoints():
    grid, gmap, field, cluster, kfs = small_cluster_setup()
    thresholds = sample_thresholds(ThresholdWindow(0.5, 1.0))
    best = evaluate_round(cluster, field, thresholds, kfs,
                          FixedVoteOracle({0: 0, 1: 2, 2: 2}, fail=(0,)),
                          "q", grid, gmap)
    assert best == pytest.approx(0.75)
    with pytest.raises(OracleError):
        evaluate_round(cluster, field, thresholds, kfs,
                       FixedVoteOracle({}, fail=(0, 1, 2)), "q", grid, gmap)


def test_window_update_arithmetic():
    w = ThresholdWindow(max(0.0, 0.7 - 0.2), min(1.0, 0.7 + 0.2))
    assert w.lo == pytest.approx(0.5)
    assert w.hi == pytest.approx(0.9)


@pytest.fixture()
def skirted(skirted_scene):
    return skirted_scene


def unit_of(v):
    return v / np.linalg.norm(v)


def test_adaptive_query_constant_oracle_converges(skirted):
    state, gt, config = skirted["state"], skirted["gt"], skirted["config"]
    for target in (0.55, 0.7, 0.85):
        res = adaptive_query(state.grid, state.gaussians, state.keyframes,
                             unit_of(gt.label_embeddings[0]), "label:0",
                             ConstantOptimumOracle(target), config)
        assert len(res.clusters) == 1
        assert abs(res.clusters[0].threshold - target) <= 0.05


def test_adaptive_query_no_match():
    grid = SparseVoxelGrid(0.05, 0.07, feature_dim=2)
    gmap = GaussianMap(0.05)
    view = grid.get_or_insert((0, 0, 0))
    grid.feature[view.row] = [1.0, 0.0]
    grid.confidence[view.row] = 1.0
    view2 = grid.get_or_insert((5, 5, 5))
    grid.feature[view2.row] = [0.9, 0.1]
    grid.confidence[view2.row] = 1.0
    config = EngineConfig().validate()
    # seeds exist but hold no gaussians -> no clusters -> no match
    with pytest.raises(NoMatchError):
        adaptive_query(grid, gmap, [make_keyframe(0, (0, 0, -1))],
                       np.array([1.0, 0.0]), "q", ConstantOptimumOracle(0.7), config)


def test_fixed_query_monotone_selection(skirted):
    state, gt = skirted["state"], skirted["gt"]
    config = skirted["config"]
    emb = unit_of(gt.label_embeddings[3])
    prev = None
    for delta in (0.9, 0.7, 0.5, 0.3):
        res = fixed_query(state.grid, state.gaussians, emb, delta, config, "q")
        ids = set(res.all_ids().tolist())
        if prev is not None:
            assert prev.issubset(ids)
        prev = ids


def test_fixed_query_at_one_selects_only_max_similarity(skirted):
    state, gt, config = skirted["state"], skirted["gt"], skirted["config"]
    emb = unit_of(gt.label_embeddings[0])
    field = similarity_field(state.grid, emb)
    max_keys = set(field.keys[field.normalized >= 1.0].tolist())
    assert max_keys  # the max voxel always normalizes to exactly 1
    res = fixed_query(state.grid, state.gaussians, emb, 1.0, config, "q")
    homes = set(state.gaussians.home[res.all_ids()].tolist())
    assert homes.issubset(max_keys)


def test_fixed_query_validates_threshold(skirted):
    state, gt = skirted["state"], skirted["gt"]
    with pytest.raises(ValueError):
        fixed_query(state.grid, state.gaussians, unit_of(gt.label_embeddings[0]),
                    1.5, skirted["config"], "q")


def test_adaptive_selection_subset_of_cluster_voxels(skirted):
    state, gt, config = skirted["state"], skirted["gt"], skirted["config"]
    res = adaptive_query(state.grid, state.gaussians, state.keyframes,
                         unit_of(gt.label_embeddings[4]), "label:4",
                         ConstantOptimumOracle(0.86), config)
    field = similarity_field(state.grid, unit_of(gt.label_embeddings[4]))
    passing = set(field.keys[field.normalized >= res.clusters[0].threshold].tolist())
    for sel in res.clusters:
        homes = set(state.gaussians.home[sel.gaussian_ids].tolist())
        assert homes.issubset(passing)


def test_window_containment_and_width(skirted):
    state, gt, config = skirted["state"], skirted["gt"], skirted["config"]

    windows = []
    votes = []

    class Spy(ThresholdOracle):
        def best_index(self, query_text, viewpoint_id, candidates):
            windows.append((candidates[0].threshold, candidates[-1].threshold))
            best = int(np.argmin([abs(c.threshold - 0.72) for c in candidates]))
            votes.append(candidates[best].threshold)
            return best

    res = adaptive_query(state.grid, state.gaussians, state.keyframes,
                         unit_of(gt.label_embeddings[1]), "label:1", Spy(), config)
    delta = res.clusters[0].threshold
    lo, hi = windows[-1]
    assert lo <= delta <= hi
    assert hi - lo == pytest.approx(2 * config.window_halfwidth, abs=1e-9)
    assert all(lo <= v <= hi for v in votes[len(votes) // 2:])
