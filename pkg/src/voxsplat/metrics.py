"""Evaluation: occupancy-cell 3D IoU, PSNR, depth L1, and the benchmark driver."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import EngineConfig
from .dataset import Dataset, GroundTruthSegmentation, write_color_png
from .gaussians import GaussianMap
from .query import NoMatchError, adaptive_query, fixed_query
from .oracle import ScriptedMaskOracle

PSNR_CAP_DB = 99.0


class EvalError(ValueError):
    pass


def _cells(points: np.ndarray, cell: float) -> set:
    keys = np.floor(np.asarray(points, np.float64) / cell).astype(np.int64)
    return set(map(tuple, keys))


def iou3d(predicted_ids, gmap: GaussianMap, gt: GroundTruthSegmentation,
          label: int, match_radius: float) -> float:
    """Occupancy IoU between predicted Gaussian means and GT points of a label,
    both voxelized at match_radius."""
    if match_radius <= 0:
        raise EvalError("match_radius must be > 0")
    mask = gt.labels == label
    if not mask.any():
        raise EvalError(f"label {label} absent from ground truth")
    gt_cells = _cells(gt.points[mask], match_radius)
    ids = np.asarray(predicted_ids, np.int64).reshape(-1)
    pred_cells = _cells(gmap.means[ids], match_radius) if ids.size else set()
    union = pred_cells | gt_cells
    if not union:
        return 0.0
    return len(pred_cells & gt_cells) / len(union)


def psnr(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for uint8 images; identical pairs cap at 99 dB."""
    a = np.asarray(image_a)
    b = np.asarray(image_b)
    if a.shape != b.shape:
        raise EvalError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(255.0 ** 2 / mse), PSNR_CAP_DB)


def depth_l1(depth_a: np.ndarray, depth_b: np.ndarray, valid: np.ndarray) -> float:
    a = np.asarray(depth_a, np.float64)
    b = np.asarray(depth_b, np.float64)
    if a.shape != b.shape or a.shape != np.asarray(valid).shape:
        raise EvalError("depth/mask shapes differ")
    valid = np.asarray(valid, bool)
    if not valid.any():
        raise EvalError("empty valid mask")
    return float(np.abs(a[valid] - b[valid]).mean())


@dataclass
class SegmentationScore:
    per_label: list          # (label, iou, threshold)
    miou: float
    macc: float
    strategy: str

    def to_json(self, config_hash: str) -> dict:
        return {
            "per_label": [{"label": int(l), "iou": float(i), "threshold": float(t)}
                          for l, i, t in self.per_label],
            "miou": float(self.miou),
            "macc": float(self.macc),
            "strategy": self.strategy,
            "config_hash": config_hash,
        }


def make_label_masks(dataset: Dataset, state, label: int, out_dir) -> dict:
    """Per-keyframe hidden masks for one GT label, written as PNGs.

    Synthetic scenes assign region id == gt label, so the mask is just the
    region map. Returns {keyframe_id: path} for a scripted oracle."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    masks = {}
    for kf in state.keyframes:
        frame = dataset.load_frame(kf.frame_id)
        if frame.region_map is None:
            continue
        mask = (frame.region_map == label).astype(np.uint8) * 255
        path = out_dir / f"mask_l{label:03d}_f{kf.frame_id:06d}.png"
        write_color_png(path, np.repeat(mask[:, :, None], 3, axis=2))
        masks[kf.frame_id] = path
    return masks


def parse_strategy(text: str):
    """"adaptive" or "fixed:<delta>" -> (name, fixed_delta_or_None)."""
    if text == "adaptive":
        return "adaptive", None
    if text.startswith("fixed:"):
        return text, float(text.split(":", 1)[1])
    raise EvalError(f"unknown strategy {text!r} (use adaptive or fixed:<delta>)")


def segmentation_benchmark(dataset: Dataset, state, config: EngineConfig,
                           strategy: str, work_dir) -> SegmentationScore:
    """One query per GT label, scored by 3D IoU; failed queries score zero."""
    gt = dataset.ground_truth
    if gt is None or gt.label_embeddings.shape[0] == 0:
        raise EvalError("dataset has no ground-truth labels")
    name, fixed_delta = parse_strategy(strategy)
    work_dir = Path(work_dir)
    per_label = []
    for label in range(gt.label_embeddings.shape[0]):
        emb = gt.label_embeddings[label]
        emb = emb / np.linalg.norm(emb)
        query_text = f"label:{label}"
        try:
            if fixed_delta is None:
                masks = make_label_masks(dataset, state, label, work_dir / "masks")
                oracle = ScriptedMaskOracle(masks)
                result = adaptive_query(state.grid, state.gaussians, state.keyframes,
                                        emb, query_text, oracle, config)
            else:
                result = fixed_query(state.grid, state.gaussians, emb,
                                     fixed_delta, config, query_text)
            ids = result.all_ids()
            threshold = result.clusters[0].threshold if result.clusters else 0.0
            score = iou3d(ids, state.gaussians, gt, label, config.cell_size)
        except NoMatchError:
            score, threshold = 0.0, 0.0
        per_label.append((label, score, threshold))
    ious = [s for _, s, _ in per_label]
    macc = float(np.mean([s > config.accuracy_cutoff for s in ious]))
    return SegmentationScore(per_label=per_label, miou=float(np.mean(ious)),
                             macc=macc, strategy=name)


def write_report(scores: list[SegmentationScore], config: EngineConfig,
                 json_path, csv_path) -> dict:
    report = {"strategies": [s.to_json(config.config_hash()) for s in scores]}
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "label", "iou", "threshold", "miou", "macc"])
        for s in scores:
            for label, iou, thr in s.per_label:
                writer.writerow([s.strategy, label, f"{iou:.6f}", f"{thr:.6f}",
                                 f"{s.miou:.6f}", f"{s.macc:.6f}"])
    return report
