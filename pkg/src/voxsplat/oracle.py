"""Threshold oracles: the pluggable judge that picks the best-rendered cutoff.

An oracle sees, for one viewpoint, the candidate renders produced at each
sampled similarity threshold and returns the index of the best one. Three
implementations: a scripted mask-IoU judge (used by tests and benchmarks),
a constant-optimum judge, and an HTTP client speaking the wire protocol of a
real multimodal model service.
"""

from __future__ import annotations

import base64
import io
import json
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class OracleError(RuntimeError):
    pass


@dataclass
class Candidate:
    threshold: float
    image: np.ndarray   # HxWx3 uint8


class ThresholdOracle:
    """Interface: best_index returns a value in [0, len(candidates))."""

    def best_index(self, query_text: str, viewpoint_id: int,
                   candidates: list[Candidate]) -> int:
        raise NotImplementedError


class ConstantOptimumOracle(ThresholdOracle):
    """Always favors the candidate threshold closest to a fixed optimum."""

    def __init__(self, optimum: float):
        self.optimum = float(optimum)

    def best_index(self, query_text, viewpoint_id, candidates):
        gaps = [abs(c.threshold - self.optimum) for c in candidates]
        return int(np.argmin(gaps))


class ScriptedMaskOracle(ThresholdOracle):
    """Judges candidates by mask IoU against hidden per-viewpoint masks.

    A pixel counts as foreground when its color strays from the fixed render
    background by more than ``tol`` (uint8 units) in any channel, mimicking a
    judge that only sees the rendered images.
    """

    def __init__(self, masks: dict, background=(127, 127, 127), tol: int = 8):
        self._masks = dict(masks)
        self._cache: dict[int, np.ndarray] = {}
        self.background = np.asarray(background, np.int16)
        self.tol = int(tol)

    @classmethod
    def from_json(cls, path) -> "ScriptedMaskOracle":
        """JSON file: {"masks": {"<viewpoint_id>": "mask.png", ...}};
        relative paths resolve against the JSON file's directory."""
        path = Path(path)
        with open(path, "r", encoding="utf-8") as fh:
            spec = json.load(fh)
        masks = {}
        for vp, rel in spec["masks"].items():
            p = Path(rel)
            masks[int(vp)] = p if p.is_absolute() else path.parent / p
        kwargs = {}
        if "background" in spec:
            kwargs["background"] = spec["background"]
        return cls(masks, **kwargs)

    def _mask(self, viewpoint_id: int) -> np.ndarray:
        if viewpoint_id not in self._cache:
            src = self._masks.get(viewpoint_id)
            if src is None:
                raise OracleError(f"no scripted mask for viewpoint {viewpoint_id}")
            if isinstance(src, np.ndarray):
                mask = src.astype(bool)
            else:
                mask = np.asarray(Image.open(src).convert("L")) > 127
            self._cache[viewpoint_id] = mask
        return self._cache[viewpoint_id]

    def _predicted(self, image: np.ndarray) -> np.ndarray:
        diff = np.abs(image.astype(np.int16) - self.background)
        return diff.max(axis=2) > self.tol

    def best_index(self, query_text, viewpoint_id, candidates):
        gt = self._mask(viewpoint_id)
        best, best_iou = 0, -1.0
        for i, cand in enumerate(candidates):
            pred = self._predicted(cand.image)
            if pred.shape != gt.shape:
                raise OracleError("candidate/mask size mismatch")
            union = np.logical_or(pred, gt).sum()
            iou = (np.logical_and(pred, gt).sum() / union) if union else 0.0
            if iou > best_iou:
                best, best_iou = i, iou
        return best


def encode_png_base64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class HttpThresholdOracle(ThresholdOracle):
    """POSTs {query, viewpoint_id, candidates: [{threshold, image_png_base64}]}
    and expects {"best_index": int} back."""

    def __init__(self, url: str, timeout: float = 10.0, retries: int = 2,
                 retry_wait: float = 0.2):
        self.url = url
        self.timeout = float(timeout)
        self.retries = int(retries)
        self.retry_wait = float(retry_wait)

    def best_index(self, query_text, viewpoint_id, candidates):
        payload = json.dumps({
            "query": query_text,
            "viewpoint_id": int(viewpoint_id),
            "candidates": [{"threshold": float(c.threshold),
                            "image_png_base64": encode_png_base64(c.image)}
                           for c in candidates],
        }).encode("utf-8")
        last_err = None
        for attempt in range(self.retries + 1):
            try:
                req = urllib.request.Request(
                    self.url, data=payload,
                    headers={"Content-Type": "application/json"})
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    body = json.loads(resp.read().decode("utf-8"))
                idx = int(body["best_index"])
                if not 0 <= idx < len(candidates):
                    raise OracleError(f"oracle returned out-of-range index {idx}")
                return idx
            except (urllib.error.URLError, OSError, KeyError, ValueError) as exc:
                last_err = exc
                if attempt < self.retries:
                    time.sleep(self.retry_wait)
        raise OracleError(f"oracle at {self.url} unreachable: {last_err}")


def oracle_from_spec(spec: str) -> ThresholdOracle:
    """Parse a CLI oracle spec: scripted:<json>, an http(s) URL, or const:<value>."""
    if spec.startswith(("http://", "https://")):
        return HttpThresholdOracle(spec)
    kind, _, rest = spec.partition(":")
    if kind == "scripted" and rest:
        return ScriptedMaskOracle.from_json(rest)
    if kind == "const" and rest:
        return ConstantOptimumOracle(float(rest))
    raise OracleError(f"bad oracle spec {spec!r} "
                      "(expected scripted:<json> | http(s)://<url> | const:<float>)")
