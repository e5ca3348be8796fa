from pathlib import Path

import numpy as np
import pytest

from voxsplat.dataset import (DatasetError, SynthObject, SynthSpec, load_dataset,
                              read_depth_png, synth_scene, unit_mix,
                              write_depth_png, write_pose_txt)

from .conftest import aligned_box, axis_embedding


def tiny_spec(**kwargs):
    defaults = dict(n_objects=2, n_frames=4, width=64, height=48,
                    gt_points_per_object=200)
    defaults.update(kwargs)
    return SynthSpec(**defaults)


def tree_bytes(root):
    out = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = path.read_bytes()
    return out


def test_synth_deterministic(tmp_path):
    spec = tiny_spec()
    synth_scene(tmp_path / "a", seed=5, spec=spec)
    synth_scene(tmp_path / "b", seed=5, spec=spec)
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys()
    for name in a:
        assert a[name] == b[name], f"{name} differs"
    synth_scene(tmp_path / "c", seed=6, spec=spec)
    assert tree_bytes(tmp_path / "c") != a


def test_synth_rejects_overlap(tmp_path):
    objs = [aligned_box(50, 50, 4, 6, gt_label=0),
            aligned_box(51, 50, 4, 6, gt_label=1)]
    with pytest.raises(DatasetError):
        synth_scene(tmp_path / "bad", seed=0, spec=tiny_spec(objects=objs))


def test_synth_rejects_sparse_labels(tmp_path):
    objs = [aligned_box(40, 50, 4, 6, gt_label=0),
            aligned_box(60, 50, 4, 6, gt_label=2)]
    with pytest.raises(DatasetError):
        synth_scene(tmp_path / "bad", seed=0, spec=tiny_spec(objects=objs))


def test_roundtrip_and_embeddings_bit_exact(tmp_path):
    spec = tiny_spec()
    synth_scene(tmp_path / "ds", seed=9, spec=spec)
    ds = load_dataset(tmp_path / "ds")
    assert len(ds) == 4
    assert ds.frame_ids == [0, 1, 2, 3]
    assert ds.embed_dim == 16
    frame = ds.load_frame(0)
    assert frame.color.shape == (48, 64, 3)
    assert frame.depth.shape == (48, 64)
    for rid, (emb, conf) in frame.region_table.items():
        assert emb.dtype == np.float32
        assert conf > 0
        assert np.linalg.norm(emb) == pytest.approx(1.0, abs=1e-6)
    # re-generating yields bitwise-equal region tables
    synth_scene(tmp_path / "ds2", seed=9, spec=spec)
    t1 = (tmp_path / "ds" / "regions" / "000000.tab").read_bytes()
    t2 = (tmp_path / "ds2" / "regions" / "000000.tab").read_bytes()
    assert t1 == t2


def test_ground_truth_loaded(tmp_path):
    gt = synth_scene(tmp_path / "ds", seed=9, spec=tiny_spec())
    ds = load_dataset(tmp_path / "ds")
    assert ds.ground_truth is not None
    assert np.allclose(ds.ground_truth.points, gt.points, atol=1e-6)
    assert np.array_equal(ds.ground_truth.labels, gt.labels)
    assert np.allclose(ds.ground_truth.label_embeddings, gt.label_embeddings,
                       atol=1e-7)
    assert set(np.unique(gt.labels)) == {0, 1}


def test_backprojection_lands_on_surfaces(tmp_path):
    objs = [aligned_box(44, 50, 4, 6, gt_label=0),
            SynthObject(kind="sphere", center=np.array([3.2, 2.5, 0.4]),
                        size=np.array([0.15]), gt_label=1)]
    spec = tiny_spec(objects=objs, n_frames=3, width=120, height=90)
    synth_scene(tmp_path / "ds", seed=4, spec=spec)
    ds = load_dataset(tmp_path / "ds")
    rl, rw, rh = spec.room
    for frame in ds.frames():
        valid = frame.depth > 0
        vv, uu = np.nonzero(valid)
        z = frame.depth[vv, uu].astype(np.float64)
        intr = frame.intrinsics
        pts_cam = np.stack([(uu - intr.cx) / intr.fx * z,
                            (vv - intr.cy) / intr.fy * z, z], 1)
        pts = pts_cam @ frame.pose[:3, :3].T + frame.pose[:3, 3]
        dist = np.full(pts.shape[0], np.inf)
        # distance to room planes
        for axis, coord in ((2, 0.0), (0, 0.0), (0, rl), (1, 0.0), (1, rw)):
            dist = np.minimum(dist, np.abs(pts[:, axis] - coord))
        # box faces
        lo, hi = objs[0].aabb()
        inside = np.all((pts >= lo - 0.05) & (pts <= hi + 0.05), axis=1)
        face = np.minimum(np.abs(pts - lo), np.abs(pts - hi)).min(axis=1)
        dist = np.where(inside, np.minimum(dist, face), dist)
        # sphere surface
        d_sphere = np.abs(np.linalg.norm(pts - objs[1].center, axis=1) - 0.15)
        dist = np.minimum(dist, d_sphere)
        assert np.percentile(dist, 99) < 0.05 / 2
        assert dist.max() < 0.05


def test_wall_depth_constant_when_fronto_parallel():
    # camera at (2.5, 2.0, 1.0) facing the y=0 wall head-on from distance 2;
    # the box sits far outside the frustum
    objs = [aligned_box(30, 30, 2, 4, gt_label=0)]
    spec = tiny_spec(objects=objs, n_frames=1)
    forward = np.array([0.0, -1.0, 0.0])
    right = np.array([-1.0, 0.0, 0.0])
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = np.cross(forward, right)
    pose[:3, 2] = forward
    pose[:3, 3] = (2.5, 2.0, 1.0)
    from voxsplat.dataset import _ray_cast
    from voxsplat.fusion import check_rigid
    check_rigid(pose)
    color, depth, regions = _ray_cast(spec, objs, pose)
    assert np.allclose(depth, 2.0, atol=1e-9)


def test_loader_errors(tmp_path):
    spec = tiny_spec()
    synth_scene(tmp_path / "ds", seed=1, spec=spec)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope")

    # depth resolution mismatch names the frame
    bad = tmp_path / "ds" / "depth" / "000001.png"
    write_depth_png(bad, np.ones((10, 10)))
    ds = load_dataset(tmp_path / "ds")
    with pytest.raises(DatasetError, match="frame 1"):
        ds.load_frame(1)

    # non-rigid pose rejected
    pose = np.eye(4)
    pose[0, 0] = 2.0
    write_pose_txt(tmp_path / "ds" / "pose" / "000002.txt", pose)
    with pytest.raises(DatasetError, match="frame 2"):
        ds.load_frame(2)


def test_missing_region_files_mean_no_semantics(tmp_path):
    synth_scene(tmp_path / "ds", seed=1, spec=tiny_spec())
    (tmp_path / "ds" / "regions" / "000000.bin").unlink()
    (tmp_path / "ds" / "regions" / "000000.tab").unlink()
    ds = load_dataset(tmp_path / "ds")
    frame = ds.load_frame(0)
    assert frame.region_map is None
    assert frame.region_table == {}


def test_depth_png_roundtrip(tmp_path):
    depth = np.array([[0.0, 1.234], [0.5115, 4.0]])
    write_depth_png(tmp_path / "d.png", depth)
    back = read_depth_png(tmp_path / "d.png")
    assert np.allclose(back, depth, atol=5e-4)


def test_unit_mix_cosine():
    a = axis_embedding(0)
    b = axis_embedding(1)
    for c in (0.0, 0.35, 0.9, 1.0):
        v = unit_mix(a, b, c)
        assert np.linalg.norm(v) == pytest.approx(1.0)
        assert float(v @ a) == pytest.approx(c)
    with pytest.raises(ValueError):
        unit_mix(a, b, 1.5)


def test_separated_objects_cluster_apart(tmp_path):
    objs = [aligned_box(30, 50, 4, 6, gt_label=0),
            aligned_box(70, 50, 4, 6, gt_label=1)]
    gt = synth_scene(tmp_path / "ds", seed=2, spec=tiny_spec(objects=objs))
    from voxsplat.query import dbscan
    labels, noise = dbscan(gt.points, eps=0.1, min_pts=5)
    groups = {lab: set(gt.labels[labels == lab].tolist())
              for lab in range(labels.max() + 1)}
    assert len(groups) == 2
    for members in groups.values():
        assert len(members) == 1
