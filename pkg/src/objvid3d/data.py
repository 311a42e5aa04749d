"""Synthetic room-and-objects video dataset, rendered with the package's own renderers.

Generator world frame: +y points down (matching camera space, where image v
grows downward), the floor is the plane ``y = floor_y > 0`` and the room is
centred on the y axis. Stored cameras are re-based so frame 0 is identity.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import container
from .geometry import Box3D, CameraTrack, rot_y
from .mesh import GridMesh, _grid_faces, rasterize_views
from .metrics import instance_masks, voxel_box
from .voxel import ObjectLayer, composite_layers, depth_order, render_voxel_layers

FORMAT_VERSION = 1
SHAPES = ("cube", "sphere", "capsule", "cylinder", "icosahedron")
COLOURS = np.array(
    [
        [0.85, 0.20, 0.18],
        [0.20, 0.65, 0.25],
        [0.20, 0.35, 0.85],
        [0.90, 0.80, 0.15],
        [0.75, 0.30, 0.80],
        [0.15, 0.75, 0.80],
    ]
)
WALL_STYLES = 5
FLOOR_STYLES = 3
SPLITS = ("train", "val", "test")


@dataclass
class DatasetConfig:
    count: int = 500
    length: int = 3
    height: int = 32
    width: int = 32
    fov_y: float = 60.0
    min_objects: int = 1
    max_objects: int = 4
    object_voxels: int = 16
    object_extent: float = 1.0  # world edge of every object's voxel cube
    size_range: tuple[float, float] = (0.6, 0.95)  # shape size as a fraction of the cube
    place_radius: float = 1.2  # object centres lie within this distance of the room axis
    room_half: float = 3.5
    floor_y: float = 1.0
    ceiling_y: float = -1.6
    camera_distance: tuple[float, float] = (2.0, 2.6)
    camera_rate: tuple[float, float] = (0.04, 0.1)  # radians per frame, random sign
    target_y: float = 0.0  # look-at height; 0 keeps the camera level
    wall_grid: int = 12
    tile: int = 32

    def __post_init__(self):
        self.size_range = tuple(float(v) for v in self.size_range)
        self.camera_distance = tuple(float(v) for v in self.camera_distance)
        self.camera_rate = tuple(float(v) for v in self.camera_rate)
        if self.count < 1 or self.length < 1:
            raise ValueError("count and length must be at least 1")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.camera_distance[0] <= self.place_radius:
            raise ValueError("camera orbit must stay outside the object placement disc")
        if self.camera_distance[1] >= self.room_half:
            raise ValueError("camera orbit must stay inside the room")

    @classmethod
    def toy(cls, **overrides) -> DatasetConfig:
        base = dict(count=4, length=3, max_objects=2)
        base.update(overrides)
        return cls(**base)


@dataclass
class SequenceRecord:
    frames: np.ndarray  # (L, H, W, 3) float32
    depth: np.ndarray | None  # (L, H, W) float32
    masks: np.ndarray | None  # (L, H, W) uint8, 0 = background, g + 1 = object g
    cameras: CameraTrack
    boxes: list[dict] = field(default_factory=list)  # {"frame", "object", "lo", "hi"} in view space
    meta: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.frames)

    def gt_boxes(self, frame: int | None = None) -> list[Box3D]:
        return [Box3D(b["lo"], b["hi"]) for b in self.boxes if frame is None or b["frame"] == frame]

    def equals(self, other: SequenceRecord) -> bool:
        return (
            np.array_equal(self.frames, other.frames)
            and _same(self.depth, other.depth)
            and _same(self.masks, other.masks)
            and np.array_equal(self.cameras.extrinsics, other.cameras.extrinsics)
            and self.cameras.intrinsics == other.cameras.intrinsics
            and self.boxes == other.boxes
            and self.meta == other.meta
        )


def _same(a, b) -> bool:
    return (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))


# -- procedural content -----------------------------------------------------


def _wall_pattern(style: int, a: np.ndarray, b: np.ndarray, tint: np.ndarray) -> np.ndarray:
    """Wall colour at horizontal coordinate ``a`` and height ``b`` (world units)."""
    base = {
        0: np.array([0.80, 0.72, 0.60]),
        1: np.array([0.62, 0.70, 0.78]),
        2: np.array([0.72, 0.78, 0.64]),
        3: np.array([0.78, 0.62, 0.60]),
        4: np.array([0.60, 0.60, 0.66]),
    }[style] + tint
    if style == 0:
        mod = np.zeros_like(a)
    elif style == 1:
        mod = 0.08 * np.sign(np.sin(2 * np.pi * a / 1.4))
    elif style == 2:
        mod = np.where(b > 0.2, -0.12, 0.04)
    elif style == 3:
        mod = 0.08 * np.sin(2 * np.pi * a / 3.0)
    else:
        mod = 0.06 * np.sign(np.sin(2 * np.pi * b / 1.3))
    return np.clip(base + mod[..., None], 0, 1)


def _floor_pattern(style: int, x: np.ndarray, z: np.ndarray, tint: np.ndarray) -> np.ndarray:
    base = {0: np.array([0.45, 0.38, 0.30]), 1: np.array([0.55, 0.52, 0.48]), 2: np.array([0.35, 0.40, 0.42])}[style]
    base = base + tint
    if style == 0:
        mod = 0.08 * np.sign(np.sin(np.pi * x) * np.sin(np.pi * z))
    elif style == 1:
        mod = 0.06 * np.sign(np.sin(2 * np.pi * z / 0.9))
    else:
        mod = 0.05 * (x / 3.5)
    return np.clip(base + mod[..., None], 0, 1)


def _shape_sdf(shape: str, p: np.ndarray, r: float) -> np.ndarray:
    """Signed distance to a shape of half-size ``r`` centred at the origin (points (..., 3))."""
    if shape == "cube":
        q = np.abs(p) - r
        return np.linalg.norm(np.maximum(q, 0), axis=-1) + np.minimum(q.max(axis=-1), 0)
    if shape == "sphere":
        return np.linalg.norm(p, axis=-1) - r
    if shape == "capsule":
        y = np.clip(p[..., 1], -0.5 * r, 0.5 * r)
        return np.linalg.norm(p - np.stack([0 * y, y, 0 * y], -1), axis=-1) - 0.5 * r
    if shape == "cylinder":
        d = np.stack([np.hypot(p[..., 0], p[..., 2]) - 0.7 * r, np.abs(p[..., 1]) - r], -1)
        return np.minimum(d.max(-1), 0) + np.linalg.norm(np.maximum(d, 0), axis=-1)
    if shape == "icosahedron":
        g = (1 + 5**0.5) / 2
        normals = []
        for s1 in (-1, 1):
            for s2 in (-1, 1):
                for s3 in (-1, 1):
                    normals.append((s1, s2, s3))
                normals += [(0, s1 / g, s2 * g), (s1 / g, s2 * g, 0), (s2 * g, 0, s1 / g)]
        n = np.array(normals, dtype=np.float64)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        return (p @ n.T).max(axis=-1) - 0.8 * r
    raise ValueError(f"unknown shape {shape!r}")


def voxelize(shape: str, size: float, colour, resolution: int) -> np.ndarray:
    """RGBA grid (V, V, V, 4) of a shape spanning ``size`` of the unit cube.

    Opacity ramps over one voxel across the surface; colour fills the grid.
    """
    V = resolution
    c = (np.arange(V) + 0.5) / V - 0.5
    p = np.stack(np.meshgrid(c, c, c, indexing="ij"), -1)
    sdf = _shape_sdf(shape, p, size / 2)
    grid = np.empty((V, V, V, 4))
    grid[..., :3] = colour
    grid[..., 3] = np.clip(0.5 - sdf * V, 0.0, 1.0)
    return grid


# -- room mesh --------------------------------------------------------------


def _room_planes(cfg: DatasetConfig):
    """(origin, axis_a, axis_b, tile) per plane: floor, ceiling and four walls."""
    h, fy, cy = cfg.room_half, cfg.floor_y, cfg.ceiling_y
    tall = fy - cy
    return [
        (np.array([-h, fy, -h]), np.array([2 * h, 0, 0]), np.array([0, 0, 2 * h]), 0),
        (np.array([-h, cy, -h]), np.array([2 * h, 0, 0]), np.array([0, 0, 2 * h]), 1),
        (np.array([-h, cy, h]), np.array([2 * h, 0, 0]), np.array([0, tall, 0]), 2),
        (np.array([h, cy, h]), np.array([0, 0, -2 * h]), np.array([0, tall, 0]), 3),
        (np.array([h, cy, -h]), np.array([-2 * h, 0, 0]), np.array([0, tall, 0]), 4),
        (np.array([-h, cy, -h]), np.array([0, 0, 2 * h]), np.array([0, tall, 0]), 5),
    ]


def room_mesh(cfg: DatasetConfig) -> GridMesh:
    """Six planar grids in one mesh; each plane's uv maps into its own atlas tile (2 x 3 tiles)."""
    n = cfg.wall_grid
    T = cfg.tile
    th, tw = 2 * T, 3 * T
    verts, uvs, faces = [], [], []
    base_faces = _grid_faces(n, n, wrap=False)
    s = np.linspace(0, 1, n)
    sa, sb = np.meshgrid(s, s, indexing="xy")  # rows follow axis b, columns axis a
    for k, (o, a, b, tile) in enumerate(_room_planes(cfg)):
        pts = o + sa[..., None] * a + sb[..., None] * b
        verts.append(pts.reshape(-1, 3))
        ty, tx = divmod(tile, 3)
        u = (tx * T + 0.5 + sa * (T - 1)) / tw
        v = (ty * T + 0.5 + sb * (T - 1)) / th
        uvs.append(np.stack([u, v], -1).reshape(-1, 2))
        faces.append(base_faces + k * n * n)
    verts, uv, faces = np.concatenate(verts), np.concatenate(uvs), np.concatenate(faces)
    return GridMesh(6 * n, n, verts, faces, uv, uv[faces], wrap=False)


def room_texture(cfg: DatasetConfig, wall_style: int, floor_style: int, tint: np.ndarray) -> np.ndarray:
    """(2T, 3T, 3) atlas; texel centres map to the same world points as the mesh uv."""
    T = cfg.tile
    atlas = np.zeros((2 * T, 3 * T, 3))
    t = np.arange(T) / (T - 1)
    ta, tb = np.meshgrid(t, t, indexing="xy")
    for o, a, b, tile in _room_planes(cfg):
        ty, tx = divmod(tile, 3)
        pts = o + ta[..., None] * a + tb[..., None] * b
        if tile == 0:
            img = _floor_pattern(floor_style, pts[..., 0], pts[..., 2], tint)
        elif tile == 1:
            img = np.broadcast_to(np.clip(np.array([0.88, 0.88, 0.86]) + tint, 0, 1), pts.shape)
        else:
            img = _wall_pattern(wall_style, ta * np.linalg.norm(a), pts[..., 1], tint)
        atlas[ty * T : (ty + 1) * T, tx * T : (tx + 1) * T] = img
    return atlas


# -- cameras ----------------------------------------------------------------


def look_at(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` facing ``target`` with +y down."""
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross([0.0, 1.0, 0.0], forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    E = np.eye(4)
    E[:3, :3] = np.stack([right, down, forward])
    E[:3, 3] = -E[:3, :3] @ eye
    return E


def orbit_track(cfg: DatasetConfig, rng: np.random.Generator) -> tuple[CameraTrack, dict]:
    theta0 = rng.uniform(-np.pi, np.pi)
    dist = rng.uniform(*cfg.camera_distance)
    rate = rng.uniform(*cfg.camera_rate) * rng.choice([-1.0, 1.0])
    exts = []
    for t in range(cfg.length):
        th = theta0 + rate * t
        eye = np.array([dist * np.sin(th), 0.0, -dist * np.cos(th)])
        exts.append(look_at(eye, np.array([0.0, cfg.target_y, 0.0])))
    track = CameraTrack.from_fov(np.stack(exts), cfg.width, cfg.height, cfg.fov_y)
    return track, {"theta0": theta0, "distance": dist, "rate": rate}


# -- scene sampling ---------------------------------------------------------


def _bottom_offset(grid: np.ndarray, extent: float) -> float:
    """Distance from the grid centre to the lowest (largest y) opaque voxel face."""
    V = grid.shape[0]
    occupied = np.nonzero((grid[..., 3] > 0).any(axis=(0, 2)))[0]
    return ((occupied.max() + 1) / V - 0.5) * extent


def _radius(grid: np.ndarray, extent: float) -> float:
    """Horizontal bounding radius of the non-transparent voxels (voxel corners included)."""
    V = grid.shape[0]
    idx = np.argwhere(grid[..., 3] > 0)
    c = (idx + 0.5) / V - 0.5
    return float(np.hypot(c[:, 0], c[:, 2]).max() * extent + extent / V * np.sqrt(0.5))


def sample_objects(cfg: DatasetConfig, rng: np.random.Generator) -> list[dict]:
    """1..max non-intersecting objects resting on the floor; resamples after 100 failed tries."""
    while True:
        count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        objs = []
        for _ in range(count):
            shape = SHAPES[rng.integers(len(SHAPES))]
            colour = int(rng.integers(len(COLOURS)))
            size = float(rng.uniform(*cfg.size_range))
            objs.append({"shape": shape, "colour": colour, "size": size, "azimuth": float(rng.uniform(0, 2 * np.pi))})
        grids = [voxelize(o["shape"], o["size"], COLOURS[o["colour"]], cfg.object_voxels) for o in objs]
        radii = [_radius(g, cfg.object_extent) for g in grids]
        placed = []
        for o, g, r in zip(objs, grids, radii):
            for _ in range(100):
                rho = cfg.place_radius * np.sqrt(rng.uniform())
                phi = rng.uniform(0, 2 * np.pi)
                xz = np.array([rho * np.cos(phi), rho * np.sin(phi)])
                if all(np.linalg.norm(xz - p["xz"]) > r + p["radius"] for p in placed):
                    y = cfg.floor_y - _bottom_offset(g, cfg.object_extent)
                    placed.append({**o, "xz": xz, "radius": r, "location": [float(xz[0]), float(y), float(xz[1])]})
                    break
            else:
                break
        if len(placed) == count:
            for p in placed:
                del p["xz"]
            return placed


# -- rendering ground truth -------------------------------------------------


def render_sequence(cfg: DatasetConfig, objects: list[dict], camera: CameraTrack, wall_style: int, floor_style: int,
                    tint: np.ndarray, return_layers: bool = False):
    """Frames, depth, instance masks and view-space boxes for a world-frame scene.

    With ``return_layers`` a fifth item holds the per-object alpha and depth (G, L, H, W).
    """
    L, H, W = cfg.length, cfg.height, cfg.width
    frames = list(range(L))
    with ad.default_dtype(np.float64), ad.no_grad():
        mesh = room_mesh(cfg)
        tex = ad.tensor(room_texture(cfg, wall_style, floor_style, tint)[None])
        verts = np.stack([mesh.vertices @ camera.extrinsics[t][:3, :3].T + camera.extrinsics[t][:3, 3] for t in frames])
        bg = rasterize_views(ad.tensor(verts), mesh, tex, camera.intrinsics, H, W)
        cov = bg.coverage.data[..., None]
        bg_rgb = ad.tensor((bg.rgb.data / np.maximum(cov, 1e-12))[None])
        bg_depth = ad.tensor(bg.depth.data[None] / np.maximum(bg.coverage.data[None], 1e-12))

        G = len(objects)
        grids = np.stack([voxelize(o["shape"], o["size"], COLOURS[o["colour"]], cfg.object_voxels) for o in objects])
        locs = np.array([[o["location"]] * L for o in objects])
        azs = np.array([[o["azimuth"]] * L for o in objects])
        spacing = cfg.object_extent / cfg.object_voxels
        layers = render_voxel_layers(
            ad.tensor(grids[None]), ad.tensor(locs[None]), ad.tensor(azs[None]), [camera], frames, spacing
        )
        order = depth_order(locs[None], [camera], frames)
        out = composite_layers(bg_rgb, bg_depth, layers, order)

    masks = instance_masks(layers.alpha.data[0], order[0])
    boxes = []
    for g in range(G):
        for t in frames:
            box = voxel_box(grids[g], locs[g, t], azs[g, t], spacing, camera, t)
            if box is not None:
                boxes.append({"frame": t, "object": g, "lo": box.lo.tolist(), "hi": box.hi.tolist()})
    result = (
        np.clip(out.rgb.data[0], 0, 1).astype(np.float32),
        out.depth.data[0].astype(np.float32),
        masks.astype(np.uint8),
        boxes,
    )
    if return_layers:
        result += ({"alpha": layers.alpha.data[0], "depth": layers.depth.data[0], "grids": grids},)
    return result


def generate_sequence(cfg: DatasetConfig, seed: int, index: int) -> SequenceRecord:
    """One sequence, fully determined by ``(seed, index)``."""
    rng = np.random.default_rng([seed, index])
    wall_style = int(rng.integers(WALL_STYLES))
    floor_style = int(rng.integers(FLOOR_STYLES))
    tint = rng.uniform(-0.05, 0.05, size=3)
    camera, orbit = orbit_track(cfg, rng)
    objects = sample_objects(cfg, rng)
    frames, depth, masks, boxes = render_sequence(cfg, objects, camera, wall_style, floor_style, tint)

    # object poses re-expressed in the frame-0 camera frame (level camera: a pure yaw)
    E0 = camera.extrinsics[0]
    yaw0 = float(np.arctan2(E0[0, 2], E0[0, 0]))
    for o in objects:
        o["location_cam0"] = (E0[:3, :3] @ np.array(o["location"]) + E0[:3, 3]).tolist()
        o["azimuth_cam0"] = float(o["azimuth"] + yaw0)
    meta = {
        "seed": seed,
        "index": index,
        "wall_style": wall_style,
        "floor_style": floor_style,
        "tint": tint.tolist(),
        "orbit": orbit,
        "objects": objects,
    }
    return SequenceRecord(frames, depth, masks, camera.rebased(0, cfg.length), boxes, meta)


def subsample_window(record: SequenceRecord, start: int, length: int) -> SequenceRecord:
    """Contiguous window with cameras re-based to its first frame."""
    if length > record.length or length < 1:
        raise ValueError(f"window of {length} frames does not fit a {record.length}-frame sequence")
    if not 0 <= start <= record.length - length:
        raise ValueError(f"window start {start} out of range for length {length} in {record.length} frames")
    sl = slice(start, start + length)
    boxes = [{**b, "frame": b["frame"] - start} for b in record.boxes if start <= b["frame"] < start + length]
    return SequenceRecord(
        record.frames[sl],
        None if record.depth is None else record.depth[sl],
        None if record.masks is None else record.masks[sl],
        record.cameras.rebased(start, length),
        boxes,
        {**record.meta, "window": [start, length]},
    )


# -- persistence ------------------------------------------------------------


def save_sequence(record: SequenceRecord, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    container.save(d / "frames.o3vt", record.frames)
    container.save(d / "depth.o3vt", record.depth)
    container.save(d / "masks.o3vt", record.masks)
    (d / "cameras.json").write_text(json.dumps(record.cameras.to_json()))
    (d / "boxes.json").write_text(json.dumps({"boxes": record.boxes, "meta": record.meta}, sort_keys=True))


SEQUENCE_FILES = ("frames.o3vt", "depth.o3vt", "masks.o3vt", "cameras.json", "boxes.json")
REQUIRED_FILES = ("frames.o3vt", "cameras.json")


def load_sequence(directory, strict: bool = True) -> SequenceRecord:
    """Read a sequence directory.

    With ``strict=False`` only frames and cameras are required; absent depth,
    masks or boxes load as None (masks, depth) or an empty list (boxes).
    """
    d = Path(directory)
    required = SEQUENCE_FILES if strict else REQUIRED_FILES
    missing = [f for f in required if not (d / f).exists()]
    if missing:
        raise FileNotFoundError(f"sequence {d} is missing {', '.join(missing)}")

    def optional(name):
        return container.load(d / name) if (d / name).exists() else None

    side = json.loads((d / "boxes.json").read_text()) if (d / "boxes.json").exists() else {"boxes": [], "meta": {}}
    return SequenceRecord(
        container.load(d / "frames.o3vt"),
        optional("depth.o3vt"),
        optional("masks.o3vt"),
        CameraTrack.from_json(json.loads((d / "cameras.json").read_text())),
        side["boxes"],
        side["meta"],
    )


def split_indices(count: int, seed: int) -> dict[str, list[int]]:
    """Seeded 80/10/10 partition of ``range(count)``."""
    perm = np.random.default_rng([seed, 2**31 - 1]).permutation(count)
    n_val = n_test = int(round(0.1 * count))
    return {
        "train": sorted(perm[n_val + n_test :].tolist()),
        "val": sorted(perm[:n_val].tolist()),
        "test": sorted(perm[n_val : n_val + n_test].tolist()),
    }


def generate_dataset(cfg: DatasetConfig, seed: int, directory) -> dict:
    """Write every sequence plus ``manifest.json``; returns the manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = [f"seq_{i:06d}" for i in range(cfg.count)]
    for i, name in enumerate(names):
        save_sequence(generate_sequence(cfg, seed, i), d / name)
    splits = split_indices(cfg.count, seed)
    manifest = {
        "version": FORMAT_VERSION,
        "seed": seed,
        "config": dataclasses.asdict(cfg),
        "sequences": names,
        "splits": {k: [names[i] for i in v] for k, v in splits.items()},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def manifest_hash(directory) -> str:
    """SHA-256 over the manifest and every sequence file, in a fixed order."""
    d = Path(directory)
    h = hashlib.sha256((d / "manifest.json").read_bytes())
    for name in json.loads((d / "manifest.json").read_text())["sequences"]:
        for f in SEQUENCE_FILES:
            h.update((d / name / f).read_bytes())
    return h.hexdigest()


def load_manifest(directory, strict: bool = True) -> dict:
    """Read ``manifest.json`` and verify the files it lists (all, or frames and cameras only)."""
    d = Path(directory)
    files = SEQUENCE_FILES if strict else REQUIRED_FILES
    path = d / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {d}")
    manifest = json.loads(path.read_text())
    missing = [f"{n}/{f}" for n in manifest["sequences"] for f in files if not (d / n / f).exists()]
    if missing:
        raise FileNotFoundError(f"manifest lists files that do not exist: {', '.join(missing[:10])}")
    return manifest


def load_split(directory, split: str = "train", strict: bool = True) -> tuple[list[str], list[SequenceRecord]]:
    if split not in SPLITS and split != "all":
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS + ('all',)}")
    manifest = load_manifest(directory, strict)
    names = manifest["sequences"] if split == "all" else manifest["splits"][split]
    return names, [load_sequence(Path(directory) / n, strict) for n in names]


def dataset_config_from_manifest(manifest: dict) -> DatasetConfig:
    return DatasetConfig(**manifest["config"])


def stack_batch(records: Sequence[SequenceRecord]) -> tuple[np.ndarray, list[CameraTrack]]:
    return np.stack([r.frames for r in records]), [r.cameras for r in records]
