"""Vector-map graph model, decomposition into intersection-free instances,
and even arc-length resampling.

A scene's road elements form an undirected graph of 2-D vertices (meters,
BEV frame) with per-edge class labels. Vertices of degree > 2 are treated
as intersections: cutting there yields simple polylines and polygons, the
"instances" every downstream module works with.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

Point = tuple[float, float]

CLASSES = ("pedestrian_crossing", "divider", "boundary", "centerline")

POLYLINE = "polyline"
POLYGON = "polygon"


@dataclass(frozen=True)
class VectorMapGraph:
    """Undirected vertex/edge graph of a scene's road elements."""

    vertices: tuple[Point, ...]
    edges: tuple[tuple[int, int], ...]
    edge_class: tuple[str, ...]


@dataclass(frozen=True)
class Instance:
    """One intersection-free polyline or polygon.

    Polygon instances carry an explicit closing point: points[0] == points[-1].
    """

    points: tuple[Point, ...]
    kind: str  # POLYLINE | POLYGON
    cls: str


@dataclass(frozen=True)
class SampledInstance:
    """An instance evenly re-sampled to a fixed number of points.

    For polygons the stored points lie at uniform arc-length steps around the
    loop and the closing point is implicit (points[0] is on the source loop,
    there is no duplicated closure).
    """

    points: tuple[Point, ...]
    kind: str
    cls: str


def empty_graph() -> VectorMapGraph:
    return VectorMapGraph(vertices=(), edges=(), edge_class=())


# ---------------------------------------------------------------------------
# validation


def validate_graph(g: VectorMapGraph) -> list[str]:
    """Check all graph invariants; return one located diagnostic per violation.

    An empty list means the graph is valid. Violations never raise.
    """
    diags: list[str] = []
    n = len(g.vertices)
    if len(g.edges) != len(g.edge_class):
        diags.append(
            f"edge_class length {len(g.edge_class)} != edge count {len(g.edges)}"
        )
    seen: dict[frozenset[int], int] = {}
    for k, (u, v) in enumerate(g.edges):
        if not (0 <= u < n):
            diags.append(f"edge {k} references invalid vertex index {u}")
            continue
        if not (0 <= v < n):
            diags.append(f"edge {k} references invalid vertex index {v}")
            continue
        if u == v:
            diags.append(f"self-loop at vertex {u} (edge {k})")
            continue
        key = frozenset((u, v))
        if key in seen:
            diags.append(f"duplicate edge {k}: ({u}, {v}) duplicates edge {seen[key]}")
        else:
            seen[key] = k

    # single class per connected component, checked over structurally valid edges
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for k, (u, v) in enumerate(g.edges):
        if 0 <= u < n and 0 <= v < n and u != v:
            parent[find(u)] = find(v)
    comp_class: dict[int, tuple[str, int]] = {}
    for k, (u, v) in enumerate(g.edges):
        if not (0 <= u < n and 0 <= v < n) or u == v or k >= len(g.edge_class):
            continue
        root = find(u)
        cls = g.edge_class[k]
        if root in comp_class:
            first_cls, first_k = comp_class[root]
            if cls != first_cls:
                diags.append(
                    f"component of edge {k} mixes classes "
                    f"{first_cls!r} (edge {first_k}) and {cls!r}"
                )
        else:
            comp_class[root] = (cls, k)
    return diags


# ---------------------------------------------------------------------------
# canonical orientation

def signed_area(ring: list[Point]) -> float:
    """Shoelace signed area of a ring given without its closing point."""
    s = 0.0
    n = len(ring)
    for i in range(n):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return 0.5 * s


def canonical_polyline(points: list[Point]) -> tuple[Point, ...]:
    """Orient a polyline from its lexicographically smaller end.

    Equal endpoints fall back to comparing the full sequences, so the result
    is deterministic for every input.
    """
    fwd = tuple(points)
    rev = tuple(reversed(points))
    return fwd if fwd <= rev else rev


def canonical_polygon(ring: list[Point]) -> tuple[Point, ...]:
    """Canonical closed polygon from a ring (no closing point in the input).

    Starts at the lexicographically smallest vertex and travels so the signed
    area is non-negative; the returned tuple includes the closing point.
    """
    area = signed_area(ring)
    if area > 0:
        directions = [list(ring)]
    elif area < 0:
        directions = [list(reversed(ring))]
    else:
        directions = [list(ring), list(reversed(ring))]
    best: tuple[Point, ...] | None = None
    for seq in directions:
        lo = min(seq)
        for i, p in enumerate(seq):
            if p == lo:
                rot = tuple(seq[i:] + seq[:i])
                if best is None or rot < best:
                    best = rot
    assert best is not None
    return best + (best[0],)


# ---------------------------------------------------------------------------
# decomposition

def decompose(g: VectorMapGraph) -> list[Instance]:
    """Cut the graph at every vertex of degree > 2 and return its instances.

    Each edge incident to an intersection keeps a private duplicate of the
    intersection's coordinates, so arms still terminate at the junction
    position. The remaining components are simple paths (polylines) or simple
    cycles (polygons); every original edge lands in exactly one instance.
    Isolated vertices are dropped.
    """
    n = len(g.vertices)
    deg = [0] * n
    for u, v in g.edges:
        deg[u] += 1
        deg[v] += 1
    junction = {i for i in range(n) if deg[i] > 2}

    # Cut-graph nodes: ("v", i) for surviving vertices, ("c", k, side) for the
    # per-edge duplicate of a junction endpoint.
    adj: dict[tuple, list[tuple]] = {}
    coord: dict[tuple, Point] = {}
    edge_cls: dict[tuple[tuple, tuple], str] = {}

    def node_for(vertex: int, edge_idx: int, side: int) -> tuple:
        if vertex in junction:
            node = ("c", edge_idx, side)
        else:
            node = ("v", vertex)
        coord[node] = g.vertices[vertex]
        return node

    for k, (u, v) in enumerate(g.edges):
        a = node_for(u, k, 0)
        b = node_for(v, k, 1)
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
        edge_cls[(a, b)] = g.edge_class[k]
        edge_cls[(b, a)] = g.edge_class[k]

    instances: list[Instance] = []
    visited: set[tuple] = set()
    for start in adj:
        if start in visited:
            continue
        # flood-fill the component
        comp = [start]
        visited.add(start)
        stack = [start]
        while stack:
            cur = stack.pop()
            for nxt in adj[cur]:
                if nxt not in visited:
                    visited.add(nxt)
                    comp.append(nxt)
                    stack.append(nxt)
        ends = [node for node in comp if len(adj[node]) == 1]
        cls = edge_cls[(comp[0], adj[comp[0]][0])]
        if ends:
            walk = _walk(adj, ends[0], None)
            points = [coord[node] for node in walk]
            instances.append(
                Instance(points=canonical_polyline(points), kind=POLYLINE, cls=cls)
            )
        else:
            walk = _walk(adj, comp[0], comp[0])
            ring = [coord[node] for node in walk]
            instances.append(
                Instance(points=canonical_polygon(ring), kind=POLYGON, cls=cls)
            )
    return instances


def _walk(adj: dict, start: tuple, stop: tuple | None) -> list[tuple]:
    """Walk a degree-<=2 component from `start`; stop on return to `stop`
    (cycle) or at a dead end (path)."""
    walk = [start]
    prev = None
    cur = start
    while True:
        nxt = None
        for cand in adj[cur]:
            if cand != prev:
                nxt = cand
                break
        if nxt is None or nxt == stop:
            return walk
        walk.append(nxt)
        prev, cur = cur, nxt
        if stop is None and len(adj[cur]) == 1 and cur != start:
            return walk


# ---------------------------------------------------------------------------
# resampling

def arc_length(points) -> float:
    """Total Euclidean length of the polyline through `points` (>= 2 points)."""
    pts = list(points)
    if len(pts) < 2:
        raise ValueError(f"arc_length needs >= 2 points, got {len(pts)}")
    total = 0.0
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        dx = x1 - x0
        dy = y1 - y0
        total += math.sqrt(dx * dx + dy * dy)
    return total


def resample(inst: Instance, n_points: int) -> SampledInstance:
    """Evenly re-sample an instance to exactly `n_points` points.

    Polylines sample at parameters k*L/(n_points-1), so both endpoints are
    preserved exactly. Polygons sample at k*L/n_points around the closed loop
    starting at points[0]; the closure stays implicit. Interpolation is linear
    along segments.
    """
    if n_points < 2:
        raise ValueError(f"n_points must be >= 2, got {n_points}")
    pts = list(inst.points)
    cum = [0.0]
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        dx = x1 - x0
        dy = y1 - y0
        cum.append(cum[-1] + math.sqrt(dx * dx + dy * dy))
    total = cum[-1]
    if total <= 0.0:
        raise ValueError("zero-length instance")

    if inst.kind == POLYGON:
        params = [k * total / n_points for k in range(n_points)]
    else:
        params = [k * total / (n_points - 1) for k in range(n_points)]

    out: list[Point] = []
    for t in params:
        out.append(_point_at(pts, cum, min(max(t, 0.0), total)))
    out[0] = pts[0]
    if inst.kind == POLYLINE:
        out[-1] = pts[-1]
    return SampledInstance(points=tuple(out), kind=inst.kind, cls=inst.cls)


def _point_at(pts: list[Point], cum: list[float], t: float) -> Point:
    """Linear interpolation at arc parameter t along the polyline."""
    i = bisect_right(cum, t) - 1
    if i >= len(pts) - 1:
        return pts[-1]
    seg = cum[i + 1] - cum[i]
    if seg <= 0.0:
        return pts[i]
    u = (t - cum[i]) / seg
    x0, y0 = pts[i]
    x1, y1 = pts[i + 1]
    return (x0 + u * (x1 - x0), y0 + u * (y1 - y0))


def points_array(inst) -> np.ndarray:
    """Instance points as an (n, 2) float64 array."""
    return np.asarray(inst.points, dtype=np.float64)
