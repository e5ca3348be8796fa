import numpy as np
import pytest

import voxsplat as vs
from voxsplat.engine import build_map

EMBED_DIM = 16


def axis_embedding(i, dim=EMBED_DIM):
    v = np.zeros(dim)
    v[i] = 1.0
    return v


def aligned_box(cx_cells, cy_cells, z0_cells, n_cells, voxel_size=0.05, **kwargs):
    """Box whose faces sit 1 mm inside voxel boundaries (clean cell occupancy)."""
    size = n_cells * voxel_size - 0.002
    center = np.array([cx_cells * voxel_size, cy_cells * voxel_size,
                       z0_cells * voxel_size + n_cells * voxel_size / 2.0])
    return vs.SynthObject(kind="box", center=center, size=np.array([size] * 3),
                          **kwargs)


def skirted_scene_objects(skirt_levels, rho=0.1, n_cells=6):
    """Six grid-aligned host boxes on a hexagon, each with a corner-adjacent
    distractor ("skirt") whose embedding sits at a chosen cosine to the host.

    With the floor pinned to an orthogonal anchor embedding, the min-max
    normalized similarity of skirt i under query i equals skirt_levels[i].
    """
    hosts_cells = [(71, 50), (60, 68), (40, 68), (29, 50), (40, 32), (60, 32)]
    skirt_off = [(6, 6), (6, 6), (-6, 6), (-6, -6), (-6, -6), (6, -6)]
    objs = []
    for i, (cx, cy) in enumerate(hosts_cells):
        host_emb = (np.sqrt(rho) * axis_embedding(0)
                    + np.sqrt(1 - rho) * axis_embedding(i + 1))
        objs.append(aligned_box(cx, cy, 4, n_cells, embedding=host_emb, gt_label=i))
        skirt_emb = vs.dataset.unit_mix(host_emb, axis_embedding(i + 7),
                                        skirt_levels[i])
        dx, dy = skirt_off[i]
        objs.append(aligned_box(cx + dx, cy + dy, 4, n_cells, embedding=skirt_emb))
    return objs


def skirted_scene_spec(skirt_levels, n_frames=48):
    return vs.SynthSpec(objects=skirted_scene_objects(skirt_levels),
                        n_frames=n_frames, width=160, height=150,
                        orbit_radius=2.0, camera_height=1.2,
                        floor_embedding=axis_embedding(14))


def skirted_scene_config():
    # admission/prune gates widened so edge voxels (grazing-ray artifacts)
    # keep their primitives; isolates the threshold comparison
    return vs.EngineConfig(keyframe_interval=8, admit_tsdf_min=-0.06,
                           prune_tsdf_below=-0.08).validate()


SKIRT_LEVELS = [0.55, 0.62, 0.69, 0.76, 0.83, 0.90]


@pytest.fixture(scope="session")
def skirted_scene(tmp_path_factory):
    """Six hosts with similarity-level-controlled distractors, mapped."""
    root = tmp_path_factory.mktemp("skirted_scene")
    gt = vs.synth_scene(root / "ds", seed=11, spec=skirted_scene_spec(SKIRT_LEVELS))
    ds = vs.load_dataset(root / "ds")
    config = skirted_scene_config()
    state, stats = build_map(ds, config)
    return {"root": root, "dataset": ds, "gt": gt, "config": config,
            "state": state, "stats": stats, "levels": SKIRT_LEVELS}


@pytest.fixture(scope="session")
def small_scene(tmp_path_factory):
    """Two far-apart boxes, mapped; shared by query/edit/metrics tests."""
    root = tmp_path_factory.mktemp("small_scene")
    objs = [aligned_box(50, 44, 4, 6, embedding=None, gt_label=0),
            aligned_box(50, 56, 4, 6, embedding=None, gt_label=1)]
    spec = vs.SynthSpec(objects=objs, n_frames=40, width=160, height=120)
    gt = vs.synth_scene(root / "ds", seed=7, spec=spec)
    ds = vs.load_dataset(root / "ds")
    config = vs.EngineConfig(admit_tsdf_min=-0.06, prune_tsdf_below=-0.08).validate()
    state, stats = build_map(ds, config)
    return {"root": root, "dataset": ds, "gt": gt, "config": config,
            "state": state, "stats": stats}


def fresh_small_state(small_scene):
    """Rebuild the small scene's map so mutating tests do not poison the fixture."""
    state, _ = build_map(small_scene["dataset"], small_scene["config"])
    return state
