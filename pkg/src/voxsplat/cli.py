"""Command-line driver: map, query, edit, render, eval, synth.

Exit codes: 0 success, 2 query had no match, 3 I/O or dataset failure,
4 oracle failure, 1 anything else.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from ._kernels import set_worker_threads
from .config import ConfigError, EngineConfig
from .dataset import (DatasetError, SynthSpec, load_dataset, synth_scene,
                      write_color_png, write_depth_png)
from .edit import EditCommand, EditError, apply_edit
from .engine import build_map, load_map, save_map
from .gaussians import write_ply
from .metrics import EvalError, parse_strategy, segmentation_benchmark, write_report
from .oracle import OracleError, oracle_from_spec
from .query import NoMatchError, adaptive_query, fixed_query
from .render import invert_pose, normalized_depth, render

EXIT_NO_MATCH = 2
EXIT_IO = 3
EXIT_ORACLE = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(ctx) -> EngineConfig:
    cfg_path = ctx.obj.get("config")
    try:
        config = EngineConfig.from_file(cfg_path) if cfg_path else EngineConfig()
        overrides = {}
        if ctx.obj.get("seed") is not None:
            overrides["seed"] = ctx.obj["seed"]
        if ctx.obj.get("workers") is not None:
            overrides["workers"] = ctx.obj["workers"]
        config = config.merged(**overrides)
    except (ConfigError, OSError) as exc:
        _fail(EXIT_IO, str(exc))
    if config.workers:
        set_worker_threads(config.workers)
    return config


@click.group()
@click.option("--config", type=click.Path(), default=None,
              help="key=value config file; flags win over file values.")
@click.option("--seed", type=int, default=None, help="Global random seed.")
@click.option("--workers", type=int, default=None,
              help="Worker threads for tiled rendering kernels.")
@click.pass_context
def main(ctx, config, seed, workers):
    """Dense RGB-D mapping with open-vocabulary object queries."""
    ctx.ensure_object(dict)
    ctx.obj["config"] = config
    ctx.obj["seed"] = seed
    ctx.obj["workers"] = workers


@main.command("map")
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(), required=True,
              help="Output map bundle directory.")
@click.pass_context
def cmd_map(ctx, dataset_dir, out_dir):
    """Fuse a posed RGB-D dataset into a map bundle."""
    config = _load_config(ctx)
    try:
        dataset = load_dataset(dataset_dir)
        if len(dataset) == 0:
            _fail(EXIT_IO, "no frames")
        state, stats = build_map(dataset, config)
        save_map(state, out_dir)
    except DatasetError as exc:
        _fail(EXIT_IO, str(exc))
    click.echo(f"frames={stats.frames} keyframes={stats.keyframes} "
               f"voxels={state.grid.n_voxels} primitives={len(state.gaussians)} "
               f"admitted={stats.admitted} rejected={stats.rejected} "
               f"pruned={stats.pruned}")


def _load_embedding(embedding_path, label, map_state, dataset_dir):
    if embedding_path:
        path = Path(embedding_path)
        vec = (np.load(path) if path.suffix == ".npy"
               else np.loadtxt(path, dtype=np.float64)).reshape(-1)
    elif label is not None:
        if not dataset_dir:
            _fail(EXIT_IO, "--label needs --dataset for its ground-truth table")
        ds = load_dataset(dataset_dir)
        if ds.ground_truth is None or label >= ds.ground_truth.label_embeddings.shape[0]:
            _fail(EXIT_IO, f"label {label} not present in dataset ground truth")
        vec = ds.ground_truth.label_embeddings[label]
    else:
        _fail(EXIT_IO, "provide --embedding <file> or --label <int>")
    vec = np.asarray(vec, np.float64)
    return vec / np.linalg.norm(vec)


def _result_json(result) -> dict:
    return {
        "query": result.query_text,
        "clusters": [{
            "index": c.cluster_index,
            "threshold": c.threshold,
            "n_gaussians": int(c.gaussian_ids.shape[0]),
            "gaussian_ids": [int(g) for g in c.gaussian_ids.tolist()],
            "descriptor": c.descriptor.to_json(),
        } for c in result.clusters],
    }


def _run_query(state, embedding, query_text, oracle_spec, fixed, config, out_dir=None):
    if fixed is not None:
        return fixed_query(state.grid, state.gaussians, embedding, fixed,
                           config, query_text)
    oracle = oracle_from_spec(oracle_spec)
    on_render = None
    if out_dir is not None:
        renders = Path(out_dir) / "renders"
        renders.mkdir(parents=True, exist_ok=True)

        def on_render(round_index, frame_id, threshold, image):
            # one image per threshold per viewpoint, grouped by round
            write_color_png(renders / f"round{round_index}_view{frame_id:06d}"
                                      f"_t{threshold:.4f}.png", image)

    return adaptive_query(state.grid, state.gaussians, state.keyframes,
                          embedding, query_text, oracle, config,
                          on_render=on_render)


@main.command("query")
@click.argument("map_dir", type=click.Path(exists=True))
@click.option("--embedding", "embedding_path", type=click.Path(), default=None,
              help="Query embedding (.npy or whitespace floats).")
@click.option("--label", type=int, default=None,
              help="Use this ground-truth label's embedding (needs --dataset).")
@click.option("--dataset", "dataset_dir", type=click.Path(), default=None)
@click.option("--text", "query_text", default="", help="Query text shown to the oracle.")
@click.option("--oracle", "oracle_spec", default=None,
              help="scripted:<json> | http(s)://<url> | const:<float>")
@click.option("--fixed", type=float, default=None,
              help="Skip the adaptive loop; select at this fixed threshold.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.pass_context
def cmd_query(ctx, map_dir, embedding_path, label, dataset_dir, query_text,
              oracle_spec, fixed, out_dir):
    """Run one open-vocabulary query against a map bundle."""
    config = _load_config(ctx)
    try:
        state = load_map(map_dir, config)
        embedding = _load_embedding(embedding_path, label, state, dataset_dir)
        if fixed is None and oracle_spec is None:
            _fail(EXIT_IO, "provide --oracle or --fixed")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result = _run_query(state, embedding, query_text, oracle_spec, fixed,
                            config, out)
    except NoMatchError as exc:
        _fail(EXIT_NO_MATCH, str(exc))
    except OracleError as exc:
        _fail(EXIT_ORACLE, str(exc))
    except (DatasetError, FileNotFoundError, OSError) as exc:
        _fail(EXIT_IO, str(exc))
    with open(out / "result.json", "w", encoding="utf-8") as fh:
        json.dump(_result_json(result), fh, indent=2, sort_keys=True)
        fh.write("\n")
    selected = result.all_ids()
    sub = state.gaussians
    keep = np.zeros(sub.n_total, bool)
    keep[selected] = True
    masked = sub.alive[:sub.n_total] & keep
    sub.alive[:sub.n_total] = masked
    write_ply(sub, out / "selected.ply")
    click.echo(f"clusters={len(result.clusters)} selected={selected.shape[0]} "
               f"thresholds={[round(c.threshold, 4) for c in result.clusters]}")


@main.command("edit")
@click.argument("map_dir", type=click.Path(exists=True))
@click.option("--embedding", "embedding_path", type=click.Path(), default=None)
@click.option("--label", type=int, default=None)
@click.option("--dataset", "dataset_dir", type=click.Path(), default=None)
@click.option("--text", "query_text", default="", help="Query text for the oracle.")
@click.option("--oracle", "oracle_spec", default=None)
@click.option("--fixed", type=float, default=None,
              help="Fixed-threshold target selection (default 0.8 if no oracle).")
@click.option("--verb", type=click.Choice(["translate", "rotate", "delete"]),
              required=True)
@click.option("--target", type=int, default=0, help="Cluster index to edit.")
@click.option("--t", "translation", default=None, help="dx,dy,dz meters.")
@click.option("--r", "rotation", default=None, help="roll,pitch,yaw radians.")
@click.option("--out", "out_dir", type=click.Path(), required=True,
              help="Directory for the edited map bundle.")
@click.pass_context
def cmd_edit(ctx, map_dir, embedding_path, label, dataset_dir, query_text,
             oracle_spec, fixed, verb, target, translation, rotation, out_dir):
    """Query for an object, apply one structured edit, save the edited map."""
    config = _load_config(ctx)
    if fixed is None and oracle_spec is None:
        fixed = 0.8
    try:
        state = load_map(map_dir, config)
        embedding = _load_embedding(embedding_path, label, state, dataset_dir)
        result = _run_query(state, embedding, query_text, oracle_spec, fixed, config)
        command = EditCommand(
            verb=verb, target=target,
            translation=np.array([float(v) for v in translation.split(",")])
            if translation else None,
            rotation_rpy=np.array([float(v) for v in rotation.split(",")])
            if rotation else None)
        report = apply_edit(state.gaussians, state.grid, command, result)
        save_map(state, out_dir)
    except NoMatchError as exc:
        _fail(EXIT_NO_MATCH, str(exc))
    except OracleError as exc:
        _fail(EXIT_ORACLE, str(exc))
    except (EditError, ValueError) as exc:
        _fail(1, str(exc))
    except (DatasetError, FileNotFoundError, OSError) as exc:
        _fail(EXIT_IO, str(exc))
    click.echo(json.dumps(report.to_json(), sort_keys=True))


@main.command("render")
@click.argument("map_dir", type=click.Path(exists=True))
@click.option("--pose", "pose_path", type=click.Path(exists=True), required=True,
              help="4x4 row-major camera-to-world pose file.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.pass_context
def cmd_render(ctx, map_dir, pose_path, out_dir):
    """Render the full map from a pose: color.png + depth.png (16-bit mm)."""
    config = _load_config(ctx)
    try:
        state = load_map(map_dir, config)
        pose = np.loadtxt(pose_path, dtype=np.float64)
        if not state.keyframes:
            _fail(EXIT_IO, "map bundle has no keyframes to take intrinsics from")
        intr = state.keyframes[0].intrinsics
        ids = state.gaussians.live_ids()
        color, depth, alpha = render(ids, state.gaussians, invert_pose(pose), intr)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_color_png(out / "color.png",
                        np.clip(np.round(color * 255.0), 0, 255).astype(np.uint8))
        write_depth_png(out / "depth.png", normalized_depth(depth, alpha))
    except (DatasetError, FileNotFoundError, OSError, ValueError) as exc:
        _fail(EXIT_IO, str(exc))
    click.echo(f"rendered {ids.shape[0]} primitives -> {out_dir}")


@main.command("eval")
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True), required=True)
@click.option("--strategy", "strategies", multiple=True, required=True,
              help="adaptive or fixed:<delta>; repeatable.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.pass_context
def cmd_eval(ctx, dataset_dir, strategies, out_dir):
    """Build a map from the dataset and score each strategy against GT."""
    config = _load_config(ctx)
    try:
        for s in strategies:
            parse_strategy(s)
        dataset = load_dataset(dataset_dir)
        state, _ = build_map(dataset, config)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        scores = [segmentation_benchmark(dataset, state, config, s, out)
                  for s in strategies]
        write_report(scores, config, out / "report.json", out / "report.csv")
    except OracleError as exc:
        _fail(EXIT_ORACLE, str(exc))
    except (EvalError, DatasetError, FileNotFoundError, OSError) as exc:
        _fail(EXIT_IO, str(exc))
    for s in scores:
        click.echo(f"{s.strategy}: miou={s.miou:.4f} macc={s.macc:.4f}")


@main.command("synth")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--objects", "n_objects", type=int, default=2)
@click.option("--frames", "n_frames", type=int, default=20)
@click.option("--size", default="160x120", help="Image size WxH.")
@click.pass_context
def cmd_synth(ctx, out_dir, n_objects, n_frames, size):
    """Generate a deterministic synthetic RGB-D dataset with ground truth."""
    config = _load_config(ctx)
    try:
        width, height = (int(v) for v in size.lower().split("x"))
        spec = SynthSpec(n_objects=n_objects, n_frames=n_frames,
                         width=width, height=height, embed_dim=config.embed_dim)
        gt = synth_scene(out_dir, config.seed, spec)
    except (DatasetError, ValueError, OSError) as exc:
        _fail(EXIT_IO, str(exc))
    click.echo(f"wrote {n_frames} frames, {gt.label_embeddings.shape[0]} labels "
               f"-> {out_dir}")


if __name__ == "__main__":
    main()
