"""Seeded synthetic BEV scenes: vector-map graphs with junctions, all four
element classes, a segment rasterizer, and dataset persistence.

Scene recipe: two jittered boundary polylines flank the range, dividers run
through the interior, pedestrian crossings are small quadrilateral polygons,
and centerlines form a trunk with branches so that at least one degree-3
vertex forces decomposition whenever two or more centerlines are requested.

Dataset layout: one JSON Lines file (one scene per line) plus one binary
raster file per scene ("BEVR" magic, u32 H/W/C, little-endian f32 grid).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geometry as geo

log = logging.getLogger(__name__)

X_RANGE = (-15.0, 15.0)
Y_RANGE = (-30.0, 30.0)
DEFAULT_RESOLUTION = 0.3

RASTER_MAGIC = b"BEVR"


@dataclass(frozen=True)
class SceneConfig:
    x_range: tuple[float, float] = X_RANGE
    y_range: tuple[float, float] = Y_RANGE
    boundaries: tuple[int, int] = (2, 2)
    dividers: tuple[int, int] = (1, 3)
    crossings: tuple[int, int] = (1, 2)
    centerlines: tuple[int, int] = (2, 3)
    jitter: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if self.x_range[0] >= self.x_range[1] or self.y_range[0] >= self.y_range[1]:
            raise ValueError("empty scene range")
        for name in ("boundaries", "dividers", "crossings", "centerlines"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"bad count range for {name}: ({lo}, {hi})")


@dataclass
class BevRaster:
    """H x W x C intensity grid; one channel per element class.

    Row r spans y in [y_min + r*res, y_min + (r+1)*res), column c likewise in
    x; all values lie in [0, 1].
    """

    grid: np.ndarray  # float32 (H, W, C)
    resolution: float

    def __eq__(self, other):
        if not isinstance(other, BevRaster):
            return NotImplemented
        return self.resolution == other.resolution and np.array_equal(
            self.grid, other.grid
        )


@dataclass
class Scene:
    scene_id: int
    instances: list[geo.Instance]
    raster: BevRaster

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.instances == other.instances
            and self.raster == other.raster
        )


# ---------------------------------------------------------------------------
# scene generation


class _GraphBuilder:
    def __init__(self):
        self.vertices: list[geo.Point] = []
        self.edges: list[tuple[int, int]] = []
        self.classes: list[str] = []

    def add_vertex(self, p) -> int:
        self.vertices.append((float(p[0]), float(p[1])))
        return len(self.vertices) - 1

    def add_chain(self, points, cls: str) -> list[int]:
        idx = [self.add_vertex(p) for p in points]
        self.link_chain(idx, cls)
        return idx

    def link_chain(self, idx: list[int], cls: str) -> None:
        for a, b in zip(idx[:-1], idx[1:]):
            self.edges.append((a, b))
            self.classes.append(cls)

    def add_ring(self, points, cls: str) -> None:
        idx = [self.add_vertex(p) for p in points]
        self.link_chain(idx, cls)
        self.edges.append((idx[-1], idx[0]))
        self.classes.append(cls)

    def graph(self) -> geo.VectorMapGraph:
        return geo.VectorMapGraph(
            vertices=tuple(self.vertices),
            edges=tuple(self.edges),
            edge_class=tuple(self.classes),
        )


def _clip(v: float, lo: float, hi: float) -> float:
    return min(max(v, lo + 0.5), hi - 0.5)


def generate_scene(cfg: SceneConfig) -> tuple[geo.VectorMapGraph, list[geo.Instance]]:
    """Build one scene; bit-identical output for a fixed config."""
    rng = np.random.default_rng(cfg.seed)
    b = _GraphBuilder()
    x_lo, x_hi = cfg.x_range
    y_lo, y_hi = cfg.y_range
    jit = cfg.jitter

    def jpoint(x: float, y: float) -> geo.Point:
        dx, dy = rng.normal(0.0, jit, size=2)
        return (_clip(x + dx, x_lo, x_hi), _clip(y + dy, y_lo, y_hi))

    n_bound = int(rng.integers(cfg.boundaries[0], cfg.boundaries[1] + 1))
    n_div = int(rng.integers(cfg.dividers[0], cfg.dividers[1] + 1))
    n_cross = int(rng.integers(cfg.crossings[0], cfg.crossings[1] + 1))
    n_center = int(rng.integers(cfg.centerlines[0], cfg.centerlines[1] + 1))

    # boundaries: long polylines flanking the range, alternating sides
    for i in range(n_bound):
        side = -1.0 if i % 2 == 0 else 1.0
        bx = side * (x_hi - 1.8)
        ys = np.linspace(y_lo + 2.0, y_hi - 2.0, 8)
        b.add_chain([jpoint(bx, y) for y in ys], "boundary")

    # dividers: interior near-vertical polylines
    for _ in range(n_div):
        dx = float(rng.uniform(x_lo + 5.0, x_hi - 5.0))
        span = float(rng.uniform(18.0, (y_hi - y_lo) - 8.0))
        y0 = float(rng.uniform(y_lo + 2.0, y_hi - 2.0 - span))
        ys = np.linspace(y0, y0 + span, max(4, int(span // 5)))
        b.add_chain([jpoint(dx, y) for y in ys], "divider")

    # pedestrian crossings: small quadrilateral polygons
    for _ in range(n_cross):
        cx = float(rng.uniform(x_lo + 5.0, x_hi - 5.0))
        cy = float(rng.uniform(y_lo + 5.0, y_hi - 5.0))
        hx = float(rng.uniform(1.5, 3.0))
        hy = float(rng.uniform(1.0, 2.0))
        corners = [
            jpoint(cx - hx, cy - hy),
            jpoint(cx + hx, cy - hy),
            jpoint(cx + hx, cy + hy),
            jpoint(cx - hx, cy + hy),
        ]
        b.add_ring(corners, "pedestrian_crossing")

    # centerlines: a trunk plus branches sharing trunk vertices (degree 3)
    if n_center > 0:
        tx = float(rng.uniform(-6.0, 6.0))
        ys = np.linspace(y_lo + 4.0, y_hi - 4.0, 10)
        trunk_idx = b.add_chain([jpoint(tx, y) for y in ys], "centerline")
        n_branches = n_center - 1
        if n_branches > 0:
            starts = rng.choice(np.arange(2, len(trunk_idx) - 2), size=n_branches,
                                replace=False)
            for s in starts:
                start_idx = trunk_idx[int(s)]
                sx, sy = b.vertices[start_idx]
                side = -1.0 if rng.uniform() < 0.5 else 1.0
                length = float(rng.uniform(6.0, 10.0))
                ex = _clip(sx + side * length, x_lo, x_hi)
                ey = _clip(sy + float(rng.uniform(4.0, 9.0)), y_lo, y_hi)
                ts = np.linspace(0.0, 1.0, 5)[1:]
                pts = [
                    jpoint(sx + t * (ex - sx), sy + t * (ey - sy) + 1.2 * t * (1 - t))
                    for t in ts
                ]
                branch_idx = [start_idx] + [b.add_vertex(p) for p in pts]
                b.link_chain(branch_idx, "centerline")

    graph = b.graph()
    return graph, geo.decompose(graph)


def scene_seed(dataset_seed: int, scene_index: int) -> int:
    """Child seed for one scene, stable under parallel generation."""
    ss = np.random.SeedSequence([int(dataset_seed), int(scene_index)])
    return int(ss.generate_state(1, np.uint64)[0])


def generate_dataset(
    cfg: SceneConfig,
    n_scenes: int,
    resolution: float = DEFAULT_RESOLUTION,
) -> list[Scene]:
    """n_scenes scenes, each from its own child seed of cfg.seed."""
    scenes = []
    for i in range(n_scenes):
        scfg = replace(cfg, seed=scene_seed(cfg.seed, i))
        _, instances = generate_scene(scfg)
        raster = rasterize(instances, resolution, cfg.x_range, cfg.y_range)
        scenes.append(Scene(scene_id=i, instances=instances, raster=raster))
    return scenes


# ---------------------------------------------------------------------------
# rasterization


def raster_shape(
    resolution: float,
    x_range: tuple[float, float] = X_RANGE,
    y_range: tuple[float, float] = Y_RANGE,
) -> tuple[int, int, int]:
    h = int(round((y_range[1] - y_range[0]) / resolution))
    w = int(round((x_range[1] - x_range[0]) / resolution))
    return h, w, len(geo.CLASSES)


def rasterize(
    instances,
    resolution: float,
    x_range: tuple[float, float] = X_RANGE,
    y_range: tuple[float, float] = Y_RANGE,
) -> BevRaster:
    """Draw each instance into its class channel with anti-aliased intensity.

    A cell's intensity for one segment is max(0, 1 - distance/resolution)
    where distance runs from the cell center to the segment; overlapping
    segments combine by maximum, so values stay in [0, 1]. Geometry outside
    the range is clipped with a logged diagnostic.
    """
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    h, w, c = raster_shape(resolution, x_range, y_range)
    grid = np.zeros((h, w, c), dtype=np.float64)
    for inst in instances:
        ch = geo.CLASSES.index(inst.cls)
        pts = np.asarray(inst.points, dtype=np.float64)
        if (
            pts[:, 0].min() < x_range[0]
            or pts[:, 0].max() > x_range[1]
            or pts[:, 1].min() < y_range[0]
            or pts[:, 1].max() > y_range[1]
        ):
            log.warning(
                "instance extends outside BEV range; clipping (class=%s)", inst.cls
            )
        for p, q in zip(pts[:-1], pts[1:]):
            _draw_segment(grid[:, :, ch], p, q, resolution, x_range, y_range)
    return BevRaster(grid=grid.astype(np.float32), resolution=resolution)


def _draw_segment(channel, p, q, res, x_range, y_range):
    h, w = channel.shape
    # candidate cell window: segment bbox padded by one resolution step
    x0 = min(p[0], q[0]) - res
    x1 = max(p[0], q[0]) + res
    y0 = min(p[1], q[1]) - res
    y1 = max(p[1], q[1]) + res
    c0 = max(int(np.floor((x0 - x_range[0]) / res)), 0)
    c1 = min(int(np.ceil((x1 - x_range[0]) / res)), w - 1)
    r0 = max(int(np.floor((y0 - y_range[0]) / res)), 0)
    r1 = min(int(np.ceil((y1 - y_range[0]) / res)), h - 1)
    if c0 > c1 or r0 > r1:
        return
    cols = np.arange(c0, c1 + 1)
    rows = np.arange(r0, r1 + 1)
    cx = x_range[0] + (cols + 0.5) * res
    cy = y_range[0] + (rows + 0.5) * res
    gx, gy = np.meshgrid(cx, cy)
    d = _point_segment_distance(gx, gy, p, q)
    vals = np.clip(1.0 - d / res, 0.0, None)
    window = channel[r0 : r1 + 1, c0 : c1 + 1]
    np.maximum(window, vals, out=window)


def _point_segment_distance(gx, gy, p, q):
    vx, vy = q[0] - p[0], q[1] - p[1]
    seg2 = vx * vx + vy * vy
    if seg2 == 0.0:
        return np.sqrt((gx - p[0]) ** 2 + (gy - p[1]) ** 2)
    t = np.clip(((gx - p[0]) * vx + (gy - p[1]) * vy) / seg2, 0.0, 1.0)
    nx = p[0] + t * vx
    ny = p[1] + t * vy
    return np.sqrt((gx - nx) ** 2 + (gy - ny) ** 2)


# ---------------------------------------------------------------------------
# persistence


def raster_filename(scene_id: int) -> str:
    return f"raster_{scene_id:06d}.bin"


def write_raster(raster: BevRaster, path) -> None:
    h, w, c = raster.grid.shape
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(raster.grid, dtype="<f4").tobytes())


def read_raster(path, resolution: float | None = None) -> BevRaster:
    """Load a raster file; with resolution=None it is derived from the width
    and the standard BEV x-range."""
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise ValueError(
            f"{path}: truncated raster header, {len(blob)} bytes at offset 0"
        )
    if blob[:4] != RASTER_MAGIC:
        raise ValueError(
            f"{path}: raster format/version mismatch "
            f"(magic {blob[:4]!r}, expected {RASTER_MAGIC!r})"
        )
    h, w, c = struct.unpack("<III", blob[4:16])
    expected = 16 + h * w * c * 4
    if len(blob) < expected:
        raise ValueError(
            f"{path}: truncated raster data: expected {expected} bytes, "
            f"file ends at offset {len(blob)}"
        )
    grid = np.frombuffer(blob[16:expected], dtype="<f4").reshape(h, w, c)
    if resolution is None:
        resolution = (X_RANGE[1] - X_RANGE[0]) / w
    return BevRaster(grid=np.array(grid, dtype=np.float32), resolution=resolution)


def write_dataset(scenes, path) -> None:
    """Write the JSONL index and one raster file per scene next to it.

    read_dataset(write_dataset(x)) reproduces x exactly, rasters bit for bit.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            rname = raster_filename(scene.scene_id)
            write_raster(scene.raster, path.parent / rname)
            record = {
                "scene_id": scene.scene_id,
                "instances": [
                    {
                        "class": inst.cls,
                        "kind": inst.kind,
                        "points": [[x, y] for x, y in inst.points],
                    }
                    for inst in scene.instances
                ],
                "raster_file": rname,
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_dataset(path) -> list[Scene]:
    path = Path(path)
    scenes: list[Scene] = []
    offset = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            raw = line.encode("utf-8")
            if line.strip():
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ValueError(
                        f"{path}: parse error at line {lineno}, byte offset "
                        f"{offset + e.pos}: {e.msg}"
                    ) from None
                scenes.append(_scene_from_record(record, path, lineno))
            offset += len(raw)
    return scenes


def _scene_from_record(record: dict, path: Path, lineno: int) -> Scene:
    try:
        scene_id = record["scene_id"]
        instances = [
            geo.Instance(
                points=tuple((float(x), float(y)) for x, y in item["points"]),
                kind=item["kind"],
                cls=item["class"],
            )
            for item in record["instances"]
        ]
        rname = record["raster_file"]
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"{path}: malformed scene record at line {lineno}: {e}")
    raster = read_raster(path.parent / rname)
    return Scene(scene_id=scene_id, instances=instances, raster=raster)
