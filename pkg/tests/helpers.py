"""Shared test utilities: seeded random graphs and independent oracles."""

from __future__ import annotations

import math
from collections import Counter, deque

import networkx as nx
import numpy as np

from vecmaplab import geometry as geo


def random_graph(seed: int, max_vertices: int = 40) -> geo.VectorMapGraph:
    """Seeded random valid graph: distinct coordinates, no self-loops or
    duplicate edges, one class per connected component."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, max_vertices + 1))
    cells = rng.choice(10000, size=n, replace=False)
    verts = tuple(
        (float(c % 100) * 0.3 - 14.8, float(c // 100) * 0.6 - 29.7) for c in cells
    )
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    m = 0 if not pairs else int(rng.integers(0, min(len(pairs), 2 * n) + 1))
    edge_idx = rng.choice(len(pairs), size=m, replace=False) if m else []
    edges = tuple(pairs[int(k)] for k in edge_idx)

    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for u, v in edges:
        parent[find(u)] = find(v)
    root_cls = {}
    classes = []
    for u, v in edges:
        r = find(u)
        if r not in root_cls:
            root_cls[r] = geo.CLASSES[int(rng.integers(0, len(geo.CLASSES)))]
        classes.append(root_cls[r])
    return geo.VectorMapGraph(vertices=verts, edges=edges, edge_class=tuple(classes))


# -- independent decomposition oracle ---------------------------------------


def _oracle_canon_path(pts):
    fwd = tuple(pts)
    rev = tuple(reversed(pts))
    return min(fwd, rev)


def _oracle_canon_ring(ring):
    arr = np.asarray(ring, dtype=np.float64)
    x, y = arr[:, 0], arr[:, 1]
    area = 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
    seqs = []
    if area >= 0:
        seqs.append(list(ring))
    if area <= 0:
        seqs.append(list(reversed(ring)))
    candidates = []
    for seq in seqs:
        for i in range(len(seq)):
            candidates.append(tuple(seq[i:] + seq[:i]))
    best = min(candidates)
    return best + (best[0],)


def oracle_decompose(g: geo.VectorMapGraph):
    """Brute-force reference: split junctions, flood-fill with networkx,
    classify path vs cycle. Returns (kind, cls, points) triples."""
    deg = Counter()
    for u, v in g.edges:
        deg[u] += 1
        deg[v] += 1
    junctions = {i for i, d in deg.items() if d > 2}

    G = nx.Graph()
    coords = {}
    for k, (u, v) in enumerate(g.edges):
        a = ("c", k, 0) if u in junctions else ("v", u)
        b = ("c", k, 1) if v in junctions else ("v", v)
        coords[a] = g.vertices[u]
        coords[b] = g.vertices[v]
        G.add_edge(a, b, cls=g.edge_class[k])

    out = []
    for comp in nx.connected_components(G):
        sub = G.subgraph(comp)
        if sub.number_of_edges() == 0:
            continue
        assert max(dict(sub.degree()).values()) <= 2
        cls = next(iter(nx.get_edge_attributes(sub, "cls").values()))
        ends = [node for node in sub if sub.degree(node) == 1]
        if ends:
            path = nx.shortest_path(sub, ends[0], ends[1])
            out.append(("polyline", cls, _oracle_canon_path([coords[p] for p in path])))
        else:
            cyc = nx.find_cycle(sub)
            ring = [coords[a] for a, _ in cyc]
            out.append(("polygon", cls, _oracle_canon_ring(ring)))
    return sorted(out)


def instance_key(inst: geo.Instance):
    return (inst.kind, inst.cls, inst.points)


def edge_multiset(g: geo.VectorMapGraph) -> Counter:
    c = Counter()
    for u, v in g.edges:
        c[tuple(sorted((g.vertices[u], g.vertices[v])))] += 1
    return c


def instance_edge_multiset(instances) -> Counter:
    c = Counter()
    for inst in instances:
        for p, q in zip(inst.points[:-1], inst.points[1:]):
            c[tuple(sorted((p, q)))] += 1
    return c


# -- independent AP oracle ----------------------------------------------------


def oracle_chamfer(p, q):
    def directed(a, b):
        total = 0.0
        for x0, y0 in a:
            best = min(math.sqrt((x0 - x1) ** 2 + (y0 - y1) ** 2) for x1, y1 in b)
            total += best
        return total / len(a)

    return 0.5 * (directed(p, q) + directed(q, p))


def oracle_ap_at_tau(preds, gts, tau):
    """Pure-python greedy confidence-ordered matching + 101-point AP."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    taken = set()
    flags = []
    for i in order:
        pred = preds[i]
        best_d, best_j = None, None
        for j, gt in enumerate(gts):
            if (pred.scene, j) in taken or gt.cls != pred.cls or gt.scene != pred.scene:
                continue
            d = oracle_chamfer(pred.points, gt.points)
            if d <= tau and (best_d is None or d < best_d):
                best_d, best_j = d, j
        if best_j is None:
            flags.append(False)
        else:
            taken.add((pred.scene, best_j))
            flags.append(True)
    if not gts:
        raise ValueError("AP undefined with zero ground-truth instances")
    if not flags:
        return 0.0
    tp = 0
    precisions, recalls = [], []
    for rank, flag in enumerate(flags, start=1):
        tp += int(flag)
        precisions.append(tp / rank)
        recalls.append(tp / len(gts))
    ap = 0.0
    for step in range(101):
        r = step / 100.0
        cands = [p for p, rec in zip(precisions, recalls) if rec >= r - 1e-12]
        ap += max(cands) if cands else 0.0
    return ap / 101.0


# -- independent TOPO oracle ----------------------------------------------------


def oracle_topo(preds, gts, cfg):
    """BFS-based reference for topo_score on small single-scene inputs."""

    def densify(instances):
        vertices = []  # (x, y, instance, idx)
        adjacency = []
        steps = []
        for item in instances:
            if cfg.centerline_only and item.cls != "centerline":
                continue
            pts = list(item.points)
            closed = item.kind == geo.POLYGON
            if closed and pts[0] == pts[-1]:
                pts = pts[:-1]
            if closed:
                pts = list(geo.canonical_polygon(pts)[:-1])
                chain = pts + [pts[0]]
            else:
                pts = list(geo.canonical_polyline(pts))
                chain = pts
            arr = np.asarray(chain)
            seg = np.sqrt(((arr[1:] - arr[:-1]) ** 2).sum(axis=1))
            total = float(seg.sum())
            if total <= 0:
                continue
            m = max(1, math.ceil(total / cfg.topo_step))
            count = m if closed else m + 1
            cum = np.concatenate([[0.0], np.cumsum(seg)])
            params = np.arange(count) * (total / m)
            px = np.interp(params, cum, arr[:, 0])
            py = np.interp(params, cum, arr[:, 1])
            base = len(vertices)
            iid = len(steps)
            for t in range(count):
                vertices.append((px[t], py[t], iid, t))
                adjacency.append([])
            for t in range(count - 1):
                adjacency[base + t].append(base + t + 1)
                adjacency[base + t + 1].append(base + t)
            if closed and count > 2:
                adjacency[base].append(base + count - 1)
                adjacency[base + count - 1].append(base)
            steps.append(total / m)
        return vertices, adjacency, steps

    pv, padj, psteps = densify(preds)
    gv, gadj, gsteps = densify(gts)
    if not pv or not gv:
        return 0.0, 0.0, 0.0

    cands = []
    for i, (px, py, _, _) in enumerate(pv):
        for j, (gx, gy, _, _) in enumerate(gv):
            d = float(np.sqrt((px - gx) ** 2 + (py - gy) ** 2))
            if d <= cfg.topo_match_radius:
                cands.append((d, i, j))
    cands.sort()
    partner_p = {}
    partner_g = {}
    for d, i, j in cands:
        if i not in partner_p and j not in partner_g:
            partner_p[i] = j
            partner_g[j] = i

    def reachable(adjacency, start, max_hops):
        seen = {start}
        frontier = deque([(start, 0)])
        while frontier:
            node, hops = frontier.popleft()
            if hops == max_hops:
                continue
            for nxt in adjacency[node]:
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append((nxt, hops + 1))
        return seen

    precision_sum = 0.0
    recall_sum = 0.0
    for i, j in partner_p.items():
        w_p = int(cfg.topo_prop_radius / psteps[pv[i][2]] + 1e-9)
        w_g = int(cfg.topo_prop_radius / gsteps[gv[j][2]] + 1e-9)
        a = {partner_p[u] for u in reachable(padj, i, w_p) if u in partner_p}
        b = {u for u in reachable(gadj, j, w_g) if u in partner_g}
        inter = len(a & b)
        precision_sum += inter / len(a)
        recall_sum += inter / len(b)
    precision = precision_sum / len(pv)
    recall = recall_sum / len(gv)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1
