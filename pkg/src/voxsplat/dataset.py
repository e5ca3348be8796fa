"""Posed RGB-D dataset I/O and a deterministic synthetic scene generator.

On-disk layout (all little-endian):
    intrinsics.txt            fx fy cx cy width height
    color/NNNNNN.png          8-bit RGB
    depth/NNNNNN.png          16-bit grayscale, millimeters (0 = invalid)
    pose/NNNNNN.txt           4x4 row-major camera-to-world
    regions/NNNNNN.bin        H*W int32 region ids (-1 = none)
    regions/NNNNNN.tab        count u32, then per region {id i32, conf f32, emb f32*D}
    gt/points.ply             labeled surface points (optional)
    gt/labels.bin             int32 label per point
    gt/label_embeddings.bin   count u32, D u32, then count*D f32

The synthetic generator ray-casts an axis-aligned room (floor plus four
walls, no ceiling) containing boxes and spheres from an orbiting camera.
Depth is the camera-space z of the first hit, so a fronto-parallel wall
renders as a constant depth image. The same seed always reproduces the
same bytes.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .fusion import check_rigid
from .render import CameraIntrinsics


class DatasetError(RuntimeError):
    pass


# --- small image / text helpers -------------------------------------------------

def write_color_png(path, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image, np.uint8), mode="RGB").save(path)


def read_color_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), np.uint8)


def write_depth_png(path, depth_m: np.ndarray) -> None:
    mm = np.clip(np.round(np.asarray(depth_m, np.float64) * 1000.0), 0, 65535)
    Image.fromarray(mm.astype("<u2")).save(path)  # 16-bit grayscale, millimeters


def read_depth_png(path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img, np.float64)
    return (arr / 1000.0).astype(np.float32)


def write_pose_txt(path, pose: np.ndarray) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for row in np.asarray(pose, np.float64):
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_pose_txt(path) -> np.ndarray:
    vals = np.loadtxt(path, dtype=np.float64)
    if vals.shape != (4, 4):
        raise DatasetError(f"{path}: pose must be 4x4")
    return vals


# --- frames ---------------------------------------------------------------------

@dataclass
class Frame:
    index: int
    color: np.ndarray                 # HxWx3 uint8
    depth: np.ndarray                 # HxW float32 meters, 0 invalid
    pose: np.ndarray                  # camera-to-world
    region_map: np.ndarray | None     # HxW int32, -1 none
    region_table: dict                # id -> (embedding f32 D, confidence)
    intrinsics: CameraIntrinsics


@dataclass
class GroundTruthSegmentation:
    points: np.ndarray                # (N,3)
    labels: np.ndarray                # (N,) dense ints from 0
    label_embeddings: np.ndarray      # (L,D)


class Dataset:
    def __init__(self, root: Path, intrinsics: CameraIntrinsics,
                 frame_ids: list[int], ground_truth, embed_dim):
        self.root = Path(root)
        self.intrinsics = intrinsics
        self.frame_ids = frame_ids
        self.ground_truth = ground_truth
        self.embed_dim = embed_dim

    def __len__(self) -> int:
        return len(self.frame_ids)

    def load_frame(self, index: int) -> Frame:
        name = f"{index:06d}"
        intr = self.intrinsics
        color = read_color_png(self.root / "color" / f"{name}.png")
        depth = read_depth_png(self.root / "depth" / f"{name}.png")
        if color.shape[:2] != (intr.height, intr.width):
            raise DatasetError(f"frame {index}: color is {color.shape[:2]}, "
                               f"expected {(intr.height, intr.width)}")
        if depth.shape != (intr.height, intr.width):
            raise DatasetError(f"frame {index}: depth is {depth.shape}, "
                               f"expected {(intr.height, intr.width)}")
        pose = read_pose_txt(self.root / "pose" / f"{name}.txt")
        try:
            check_rigid(pose)
        except ValueError as exc:
            raise DatasetError(f"frame {index}: {exc}") from exc

        region_map = None
        region_table: dict = {}
        bin_path = self.root / "regions" / f"{name}.bin"
        tab_path = self.root / "regions" / f"{name}.tab"
        if bin_path.exists() and tab_path.exists():
            raw = np.fromfile(bin_path, "<i4")
            if raw.shape[0] != intr.height * intr.width:
                raise DatasetError(f"frame {index}: region map has {raw.shape[0]} "
                                   f"entries, expected {intr.height * intr.width}")
            region_map = raw.reshape(intr.height, intr.width)
            region_table = _read_region_table(tab_path, index)
            for rid in np.unique(region_map):
                if rid >= 0 and int(rid) not in region_table:
                    raise DatasetError(f"frame {index}: region {rid} missing from table")
        return Frame(index=index, color=color, depth=depth, pose=pose,
                     region_map=region_map, region_table=region_table,
                     intrinsics=intr)

    def frames(self):
        for index in self.frame_ids:
            yield self.load_frame(index)


def _read_region_table(path, frame_index: int) -> dict:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise DatasetError(f"frame {frame_index}: truncated region table")
    (count,) = struct.unpack_from("<I", data, 0)
    table: dict = {}
    if count == 0:
        return table
    body = len(data) - 4
    if body % count != 0 or body // count < 8:
        raise DatasetError(f"frame {frame_index}: malformed region table")
    dim = (body // count - 8) // 4
    off = 4
    for _ in range(count):
        rid, conf = struct.unpack_from("<if", data, off)
        off += 8
        emb = np.frombuffer(data, "<f4", count=dim, offset=off).copy()
        off += 4 * dim
        if conf <= 0:
            raise DatasetError(f"frame {frame_index}: region {rid} confidence <= 0")
        if not np.all(np.isfinite(emb)):
            raise DatasetError(f"frame {frame_index}: region {rid} embedding not finite")
        table[int(rid)] = (emb, float(conf))
    return table


def _write_region_table(path, table: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(table)))
        for rid in sorted(table):
            emb, conf = table[rid]
            fh.write(struct.pack("<if", rid, conf))
            fh.write(np.asarray(emb, "<f4").tobytes())


def _write_xyz_ply(path, points: np.ndarray) -> None:
    pts = np.asarray(points, "<f4")
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {pts.shape[0]}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "end_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(pts.tobytes())


def _read_xyz_ply(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = b""
        while not header.endswith(b"end_header\n"):
            line = fh.readline()
            if not line:
                raise DatasetError(f"{path}: truncated PLY")
            header += line
        count = 0
        for line in header.decode("ascii").splitlines():
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
        return np.frombuffer(fh.read(count * 12), "<f4").reshape(count, 3).astype(np.float64)


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    intr_path = root / "intrinsics.txt"
    if not intr_path.exists():
        raise DatasetError(f"missing intrinsics file {intr_path}")
    vals = intr_path.read_text().split()
    if len(vals) != 6:
        raise DatasetError("intrinsics.txt must hold: fx fy cx cy width height")
    intr = CameraIntrinsics(fx=float(vals[0]), fy=float(vals[1]),
                            cx=float(vals[2]), cy=float(vals[3]),
                            width=int(vals[4]), height=int(vals[5]))
    color_dir = root / "color"
    if not color_dir.is_dir():
        raise DatasetError(f"missing color directory under {root}")
    frame_ids = sorted(int(p.stem) for p in color_dir.glob("*.png"))
    if not frame_ids:
        raise DatasetError(f"no frames under {root}")

    gt = None
    embed_dim = None
    gt_dir = root / "gt"
    if (gt_dir / "points.ply").exists():
        points = _read_xyz_ply(gt_dir / "points.ply")
        labels = np.fromfile(gt_dir / "labels.bin", "<i4").astype(np.int64)
        if labels.shape[0] != points.shape[0]:
            raise DatasetError("gt labels count does not match gt points")
        raw = (gt_dir / "label_embeddings.bin").read_bytes()
        count, dim = struct.unpack_from("<II", raw, 0)
        emb = np.frombuffer(raw, "<f4", count=count * dim, offset=8)
        gt = GroundTruthSegmentation(points=points, labels=labels,
                                     label_embeddings=emb.reshape(count, dim).astype(np.float64))
        embed_dim = dim

    if embed_dim is None:
        for fid in frame_ids:
            tab = root / "regions" / f"{fid:06d}.tab"
            if tab.exists():
                table = _read_region_table(tab, fid)
                if table:
                    embed_dim = next(iter(table.values()))[0].shape[0]
                    break
    return Dataset(root, intr, frame_ids, gt, embed_dim)


# --- synthetic scenes -----------------------------------------------------------

@dataclass
class SynthObject:
    kind: str                        # "box" | "sphere"
    center: np.ndarray
    size: np.ndarray                 # box: full extents (3,); sphere: (radius,)
    embedding: np.ndarray = None     # unit vector; auto when None
    color: np.ndarray = None         # [0,1]^3; auto when None
    gt_label: int | None = None

    def aabb(self):
        c = np.asarray(self.center, np.float64)
        if self.kind == "box":
            h = np.asarray(self.size, np.float64) / 2.0
        elif self.kind == "sphere":
            h = np.full(3, float(np.asarray(self.size).reshape(-1)[0]))
        else:
            raise DatasetError(f"unknown object kind {self.kind!r}")
        return c - h, c + h


@dataclass
class SynthSpec:
    objects: list = None             # explicit SynthObjects; auto-placed when None
    n_objects: int = 2
    room: tuple = (5.0, 5.0, 2.5)    # interior extents; None = free space
    n_frames: int = 20
    width: int = 160
    height: int = 120
    focal: float = 130.0
    orbit_radius: float = 1.7
    camera_height: float = 1.5
    look_at_height: float = 0.35
    orbit_rings: tuple = None        # ((radius, height), ...) cycled per frame
    embed_dim: int = 16
    inter_object_cos: float = 0.1
    confidence_range: tuple = (0.5, 1.0)
    gt_points_per_object: int = 1500
    wall_distance_max: float = 0.0   # 0 = no depth clipping
    wall_embedding: np.ndarray = None   # default: the shared component
    floor_embedding: np.ndarray = None  # default: same as walls

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(fx=self.focal, fy=self.focal,
                                cx=self.width / 2.0, cy=self.height / 2.0,
                                width=self.width, height=self.height)


def unit_mix(base: np.ndarray, orth: np.ndarray, cosine: float) -> np.ndarray:
    """Unit vector at the requested cosine to ``base`` in the (base, orth) plane."""
    if not -1.0 <= cosine <= 1.0:
        raise ValueError("cosine must be in [-1, 1]")
    return cosine * np.asarray(base, np.float64) + np.sqrt(1.0 - cosine ** 2) * np.asarray(orth, np.float64)


def _auto_objects(spec: SynthSpec, rng: np.random.Generator) -> list[SynthObject]:
    room = spec.room or (5.0, 5.0, 2.5)
    cx, cy = room[0] / 2.0, room[1] / 2.0
    objs = []
    ring = max(0.9, 0.35 * spec.n_objects)
    for i in range(spec.n_objects):
        ang = 2.0 * np.pi * i / max(spec.n_objects, 1)
        center = np.array([cx + ring * np.cos(ang), cy + ring * np.sin(ang), 0.35])
        kind = "box" if i % 2 == 0 else "sphere"
        if kind == "box":
            size = rng.uniform(0.22, 0.34, size=3)
        else:
            size = np.array([rng.uniform(0.12, 0.18)])
        objs.append(SynthObject(kind=kind, center=center, size=size, gt_label=i))
    return objs


def _fill_embeddings(objects: list[SynthObject], spec: SynthSpec,
                     rng: np.random.Generator) -> np.ndarray:
    """Assign missing embeddings/colors; returns the wall embedding."""
    dim = spec.embed_dim
    if dim < len(objects) + 2:
        raise DatasetError("embed_dim too small for distinct object embeddings")
    rho = spec.inter_object_cos
    shared = np.zeros(dim)
    shared[0] = 1.0
    for i, obj in enumerate(objects):
        if obj.embedding is None:
            basis = np.zeros(dim)
            basis[i + 1] = 1.0
            obj.embedding = np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * basis
        obj.embedding = np.asarray(obj.embedding, np.float64)
        obj.embedding = obj.embedding / np.linalg.norm(obj.embedding)
        if obj.color is None:
            # keep colors well away from the mid-gray render background
            hue = rng.uniform(0, 3, size=3)
            color = 0.15 + 0.7 * (hue / max(hue.max(), 1e-9))
            color[np.argmin(hue)] = 0.12
            obj.color = color
        obj.color = np.asarray(obj.color, np.float64)
    return shared


def _check_overlaps(objects: list[SynthObject]) -> None:
    for i in range(len(objects)):
        lo_i, hi_i = objects[i].aabb()
        for j in range(i + 1, len(objects)):
            lo_j, hi_j = objects[j].aabb()
            if np.all(hi_i > lo_j) and np.all(hi_j > lo_i):
                raise DatasetError(f"objects {i} and {j} overlap")


def _orbit_pose(center: np.ndarray, eye: np.ndarray) -> np.ndarray:
    forward = center - eye
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = eye
    return pose


def _ray_cast(spec: SynthSpec, objects: list[SynthObject], pose: np.ndarray):
    """Analytic first-hit over room planes and objects; depth is camera z."""
    intr = spec.intrinsics()
    h, w = intr.height, intr.width
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    dirs_cam = np.stack([(uu - intr.cx) / intr.fx,
                         (vv - intr.cy) / intr.fy,
                         np.ones_like(uu, np.float64)], axis=-1).reshape(-1, 3)
    rot = pose[:3, :3]
    origin = pose[:3, 3]
    dirs = dirs_cam @ rot.T                      # t along these = camera-space z

    n_rays = dirs.shape[0]
    best_t = np.full(n_rays, np.inf)
    best_region = np.full(n_rays, -1, np.int64)
    colors = np.zeros((n_rays, 3))

    def consider(t, mask, region, color):
        hit = mask & (t > 1e-6) & (t < best_t)
        best_t[hit] = t[hit]
        best_region[hit] = region
        colors[hit] = color

    region = 0
    for obj in objects:
        if obj.kind == "sphere":
            r = float(np.asarray(obj.size).reshape(-1)[0])
            oc = origin - obj.center
            a = np.einsum("ij,ij->i", dirs, dirs)
            b = 2.0 * dirs @ oc
            c0 = oc @ oc - r * r
            disc = b * b - 4.0 * a * c0
            ok = disc >= 0
            t = np.full(n_rays, np.inf)
            sq = np.sqrt(np.maximum(disc, 0.0))
            t_near = (-b - sq) / (2.0 * a)
            t_far = (-b + sq) / (2.0 * a)
            t[ok] = np.where(t_near[ok] > 1e-6, t_near[ok], t_far[ok])
            consider(t, ok, region, obj.color)
        else:
            lo, hi = obj.aabb()
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo - origin) / dirs
                t2 = (hi - origin) / dirs
            t_lo = np.fmin(t1, t2)
            t_hi = np.fmax(t1, t2)
            t_near = np.nanmax(t_lo, axis=1)
            t_far = np.nanmin(t_hi, axis=1)
            ok = (t_near <= t_far) & (t_far > 0)
            t = np.where(t_near > 1e-6, t_near, t_far)
            consider(t, ok, region, obj.color)
        region += 1

    if spec.room is not None:
        rl, rw, rh = spec.room
        wall_color = np.array([0.78, 0.78, 0.80])
        floor_color = np.array([0.72, 0.70, 0.68])
        planes = [  # (axis, coordinate, color): floor plus four walls, open top
            (2, 0.0, floor_color),
            (0, 0.0, wall_color), (0, rl, wall_color),
            (1, 0.0, wall_color), (1, rw, wall_color),
        ]
        bounds = np.array([[0.0, rl], [0.0, rw], [0.0, rh]])
        for axis, coord, color in planes:
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (coord - origin[axis]) / dirs[:, axis]
                t = np.where(np.isfinite(t), t, np.inf)
                pts = origin + t[:, None] * dirs
            mask = np.ones(n_rays, bool)
            for other in range(3):
                if other == axis:
                    continue
                mask &= (pts[:, other] >= bounds[other, 0] - 1e-9)
                mask &= (pts[:, other] <= bounds[other, 1] + 1e-9)
            consider(t, mask, region, color)
            region += 1

    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    if spec.wall_distance_max > 0:
        too_far = depth > spec.wall_distance_max
        depth[too_far] = 0.0
        best_region[too_far] = -1
    img = np.clip(np.round(colors * 255.0), 0, 255).astype(np.uint8)
    img[best_region < 0] = 12  # dark sky
    return (img.reshape(h, w, 3), depth.reshape(h, w).astype(np.float64),
            best_region.reshape(h, w).astype(np.int32))


def _sample_gt_points(obj: SynthObject, count: int, rng: np.random.Generator) -> np.ndarray:
    if obj.kind == "sphere":
        r = float(np.asarray(obj.size).reshape(-1)[0])
        v = rng.normal(size=(count, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return obj.center + r * v
    lo, hi = obj.aabb()
    ext = hi - lo
    # five faces: bottom (z-min) excluded, it is never observed
    faces = [(0, 0.0), (0, 1.0), (1, 0.0), (1, 1.0), (2, 1.0)]
    areas = []
    for axis, _ in faces:
        other = [a for a in range(3) if a != axis]
        areas.append(ext[other[0]] * ext[other[1]])
    areas = np.asarray(areas)
    picks = rng.choice(len(faces), size=count, p=areas / areas.sum())
    pts = lo + rng.uniform(size=(count, 3)) * ext
    for f, (axis, side) in enumerate(faces):
        sel = picks == f
        pts[sel, axis] = lo[axis] + side * ext[axis]
    return pts


def synth_scene(out_dir, seed: int, spec: SynthSpec | None = None) -> GroundTruthSegmentation:
    """Generate a synthetic dataset on disk; byte-identical for equal seeds."""
    spec = spec or SynthSpec()
    rng = np.random.default_rng(seed)
    if spec.objects is not None:
        objects = [copy.deepcopy(o) for o in spec.objects]
    else:
        objects = _auto_objects(spec, rng)
    if not objects:
        raise DatasetError("scene needs at least one object")
    _check_overlaps(objects)

    # region ids: gt-labeled objects take their label, others follow, walls last
    labeled = [o for o in objects if o.gt_label is not None]
    labels = sorted(o.gt_label for o in labeled)
    if labels != list(range(len(labeled))):
        raise DatasetError("gt labels must be dense integers starting at 0")
    unlabeled = [o for o in objects if o.gt_label is None]
    ordered = sorted(labeled, key=lambda o: o.gt_label) + unlabeled

    shared = _fill_embeddings(ordered, spec, rng)
    wall_emb = (np.asarray(spec.wall_embedding, np.float64)
                if spec.wall_embedding is not None else shared)
    wall_emb = wall_emb / np.linalg.norm(wall_emb)
    floor_emb = (np.asarray(spec.floor_embedding, np.float64)
                 if spec.floor_embedding is not None else wall_emb)
    floor_emb = floor_emb / np.linalg.norm(floor_emb)

    root = Path(out_dir)
    for sub in ("color", "depth", "pose", "regions", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    intr = spec.intrinsics()
    with open(root / "intrinsics.txt", "w", encoding="ascii") as fh:
        fh.write(f"{intr.fx:.17g} {intr.fy:.17g} {intr.cx:.17g} {intr.cy:.17g} "
                 f"{intr.width} {intr.height}\n")

    if spec.room is not None:
        look_at = np.array([spec.room[0] / 2.0, spec.room[1] / 2.0, spec.look_at_height])
    else:
        look_at = np.mean([o.center for o in ordered], axis=0)
    n_regions = len(ordered) + (5 if spec.room is not None else 0)

    rings = spec.orbit_rings or ((spec.orbit_radius, spec.camera_height),)
    for k in range(spec.n_frames):
        ang = 2.0 * np.pi * k / spec.n_frames
        radius, cam_height = rings[k % len(rings)]
        eye = look_at + np.array([radius * np.cos(ang),
                                  radius * np.sin(ang),
                                  cam_height - spec.look_at_height])
        pose = _orbit_pose(look_at, eye)
        color, depth, regions = _ray_cast(spec, ordered, pose)
        name = f"{k:06d}"
        write_color_png(root / "color" / f"{name}.png", color)
        write_depth_png(root / "depth" / f"{name}.png", depth)
        write_pose_txt(root / "pose" / f"{name}.txt", pose)
        regions.astype("<i4").tofile(root / "regions" / f"{name}.bin")

        frame_rng = np.random.default_rng((seed + 1) * 1_000_003 + k)
        confs = frame_rng.uniform(spec.confidence_range[0], spec.confidence_range[1],
                                  size=n_regions)
        table = {}
        for rid in np.unique(regions):
            if rid < 0:
                continue
            rid = int(rid)
            if rid < len(ordered):
                emb = ordered[rid].embedding
            elif rid == len(ordered):    # plane order: floor first, then walls
                emb = floor_emb
            else:
                emb = wall_emb
            table[rid] = (emb.astype(np.float32), float(np.float32(confs[rid])))
        _write_region_table(root / "regions" / f"{name}.tab", table)

    pts_list = []
    label_list = []
    for obj in sorted(labeled, key=lambda o: o.gt_label):
        pts = _sample_gt_points(obj, spec.gt_points_per_object, rng)
        pts_list.append(pts)
        label_list.append(np.full(pts.shape[0], obj.gt_label, np.int64))
    if pts_list:
        points = np.concatenate(pts_list, axis=0)
        gt_labels = np.concatenate(label_list)
        emb = np.stack([o.embedding for o in sorted(labeled, key=lambda o: o.gt_label)])
        _write_xyz_ply(root / "gt" / "points.ply", points)
        gt_labels.astype("<i4").tofile(root / "gt" / "labels.bin")
        with open(root / "gt" / "label_embeddings.bin", "wb") as fh:
            fh.write(struct.pack("<II", emb.shape[0], emb.shape[1]))
            fh.write(emb.astype("<f4").tobytes())
        return GroundTruthSegmentation(points=points, labels=gt_labels,
                                       label_embeddings=emb)
    return GroundTruthSegmentation(points=np.zeros((0, 3)),
                                   labels=np.zeros(0, np.int64),
                                   label_embeddings=np.zeros((0, spec.embed_dim)))
