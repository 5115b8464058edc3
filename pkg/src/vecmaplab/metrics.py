"""Evaluation metrics: Chamfer-distance instance matching, average precision
over distance thresholds, and the TOPO reachability metric.

AP uses greedy confidence-ordered matching (highest-confidence prediction
first, each taking the closest unmatched same-class ground-truth instance
within the threshold) and 101-point precision-recall interpolation.

TOPO densifies both instance sets into graphs with a vertex every
`topo_step` meters, one-to-one matches pred/GT vertices within the match
radius, and compares, for every matched pair, the sets of matched vertices
reachable within the propagation radius along the respective graphs.
Unmatched prediction vertices count as precision 0, unmatched ground-truth
vertices as recall 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from math import ceil

import numpy as np
from scipy.spatial import cKDTree

from . import geometry as geo

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricConfig:
    taus: tuple[float, ...] = (0.5, 1.0, 1.5)
    topo_step: float = 0.15
    topo_match_radius: float = 0.5
    topo_prop_radius: float = 5.0
    centerline_only: bool = False

    def __post_init__(self):
        if not self.taus or any(t <= 0 for t in self.taus):
            raise ValueError(f"taus must be positive, got {self.taus}")
        if list(self.taus) != sorted(self.taus):
            raise ValueError(f"taus must be ascending, got {self.taus}")
        if min(self.topo_step, self.topo_match_radius, self.topo_prop_radius) <= 0:
            raise ValueError("TOPO step and radii must be positive")


@dataclass(frozen=True)
class PredInstance:
    points: tuple[geo.Point, ...]
    kind: str
    cls: str
    confidence: float
    scene: int = 0


@dataclass(frozen=True)
class GtInstance:
    points: tuple[geo.Point, ...]
    kind: str
    cls: str
    scene: int = 0


def gt_from_instance(inst, scene: int = 0) -> GtInstance:
    return GtInstance(points=tuple(inst.points), kind=inst.kind, cls=inst.cls,
                      scene=scene)


# ---------------------------------------------------------------------------
# chamfer distance


def chamfer(p, q) -> float:
    """Symmetric mean-of-means Chamfer distance between two point sets."""
    P = np.asarray(p, dtype=np.float64)
    Q = np.asarray(q, dtype=np.float64)
    if P.size == 0 or Q.size == 0:
        raise ValueError("chamfer distance of an empty point set")
    diff = P[:, None, :] - Q[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


# ---------------------------------------------------------------------------
# average precision


def _greedy_match_flags(preds, gts, tau: float) -> tuple[list[bool], int]:
    """TP flag per prediction in confidence order, plus the GT count.

    Matching is per scene: a prediction may take the unmatched same-class GT
    with the smallest Chamfer distance <= tau (ties -> lower GT index).
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    taken: set[tuple[int, int]] = set()  # (scene, gt index)
    gt_by_scene: dict[int, list[int]] = {}
    for j, gt in enumerate(gts):
        gt_by_scene.setdefault(gt.scene, []).append(j)
    flags = []
    for i in order:
        pred = preds[i]
        best: tuple[float, int] | None = None
        for j in gt_by_scene.get(pred.scene, []):
            if (pred.scene, j) in taken or gts[j].cls != pred.cls:
                continue
            d = chamfer(pred.points, gts[j].points)
            if d <= tau and (best is None or d < best[0]):
                best = (d, j)
        if best is None:
            flags.append(False)
        else:
            taken.add((pred.scene, best[1]))
            flags.append(True)
    return flags, len(gts)


def ap_from_flags(flags, n_gt: int) -> float:
    """101-point interpolated AP from ordered TP flags."""
    if n_gt == 0:
        raise ValueError("AP undefined with zero ground-truth instances")
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    ranks = np.arange(1, len(flags) + 1, dtype=np.float64)
    precision = tp / ranks
    recall = tp / n_gt
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / 101.0


def ap_at_tau(preds, gts, tau: float) -> float:
    """AP for one class at one Chamfer threshold (inputs already per-class)."""
    flags, n_gt = _greedy_match_flags(preds, gts, tau)
    return ap_from_flags(flags, n_gt)


def map_score(preds, gts, cfg: MetricConfig) -> dict:
    """Per-class AP table (averaged over thresholds) and the mean AP.

    Classes with zero GT instances are reported as absent, not zero; classes
    present in GT but missing from the predictions score 0.
    """
    classes = [c for c in geo.CLASSES if any(g.cls == c for g in gts)]
    per_class: dict[str, dict[str, float]] = {}
    for cls in classes:
        cls_preds = [p for p in preds if p.cls == cls]
        cls_gts = [g for g in gts if g.cls == cls]
        row = {}
        for tau in cfg.taus:
            row[f"AP@{tau}"] = ap_at_tau(cls_preds, cls_gts, tau)
        row["AP"] = sum(row[f"AP@{t}"] for t in cfg.taus) / len(cfg.taus)
        per_class[cls] = row
    mean_ap = (
        sum(per_class[c]["AP"] for c in classes) / len(classes) if classes else 0.0
    )
    return {"per_class": per_class, "mAP": mean_ap}


# ---------------------------------------------------------------------------
# TOPO


class _DenseSide:
    """All instances of one side densified to a vertex every <= step meters."""

    def __init__(self, instances, step: float, centerline_only: bool):
        xs, inst_ids, idx_in_inst = [], [], []
        self.sizes: list[int] = []
        self.cyclic: list[bool] = []
        self.steps: list[float] = []
        self.base: list[int] = []
        n = 0
        for item in instances:
            if centerline_only and item.cls != "centerline":
                continue
            pts = list(item.points)
            closed = item.kind == geo.POLYGON
            if closed and pts[0] == pts[-1]:
                pts = pts[:-1]
            # canonical orientation makes the metric exactly invariant to the
            # stored point order
            if closed:
                pts = list(geo.canonical_polygon(pts)[:-1])
            else:
                pts = list(geo.canonical_polyline(pts))
            chain = pts + [pts[0]] if closed else pts
            arr = np.asarray(chain, dtype=np.float64)
            seg = np.sqrt(((arr[1:] - arr[:-1]) ** 2).sum(axis=1))
            total = float(seg.sum())
            if total <= 0.0:
                continue
            m = max(1, ceil(total / step))
            count = m if closed else m + 1
            cum = np.concatenate([[0.0], np.cumsum(seg)])
            params = np.arange(count) * (total / m)
            px = np.interp(params, cum, arr[:, 0])
            py = np.interp(params, cum, arr[:, 1])
            xs.append(np.stack([px, py], axis=1))
            inst_ids.append(np.full(count, len(self.sizes)))
            idx_in_inst.append(np.arange(count))
            self.base.append(n)
            n += count
            self.sizes.append(count)
            self.cyclic.append(closed)
            self.steps.append(total / m)
        self.xy = np.concatenate(xs) if xs else np.zeros((0, 2))
        self.inst = np.concatenate(inst_ids).astype(int) if xs else np.zeros(0, int)
        self.idx = np.concatenate(idx_in_inst).astype(int) if xs else np.zeros(0, int)
        self.total = n


def _window_members(sorted_idx: np.ndarray, payload: np.ndarray, center: int,
                    w: int, size: int, cyclic: bool) -> np.ndarray:
    """payload entries whose vertex index lies within w of center."""
    if not cyclic:
        lo = np.searchsorted(sorted_idx, center - w, side="left")
        hi = np.searchsorted(sorted_idx, center + w, side="right")
        return payload[lo:hi]
    if 2 * w + 1 >= size:
        return payload
    lo_i = (center - w) % size
    hi_i = (center + w) % size
    if lo_i <= hi_i:
        lo = np.searchsorted(sorted_idx, lo_i, side="left")
        hi = np.searchsorted(sorted_idx, hi_i, side="right")
        return payload[lo:hi]
    hi1 = np.searchsorted(sorted_idx, hi_i, side="right")
    lo2 = np.searchsorted(sorted_idx, lo_i, side="left")
    return np.concatenate([payload[:hi1], payload[lo2:]])


def _topo_one_scene(pred_instances, gt_instances, cfg: MetricConfig):
    """Returns (precision_sum, n_pred_vertices, recall_sum, n_gt_vertices)."""
    pred = _DenseSide(pred_instances, cfg.topo_step, cfg.centerline_only)
    gt = _DenseSide(gt_instances, cfg.topo_step, cfg.centerline_only)
    if pred.total == 0 or gt.total == 0:
        return 0.0, pred.total, 0.0, gt.total

    # one-to-one greedy nearest matching within the match radius
    tree = cKDTree(gt.xy)
    neighbor_lists = tree.query_ball_point(pred.xy, cfg.topo_match_radius)
    cand_p, cand_g, cand_d = [], [], []
    for vi, neigh in enumerate(neighbor_lists):
        for gj in neigh:
            diff = pred.xy[vi] - gt.xy[gj]
            cand_p.append(vi)
            cand_g.append(gj)
            cand_d.append(float(np.sqrt(diff[0] ** 2 + diff[1] ** 2)))
    partner_of_pred = np.full(pred.total, -1)
    partner_of_gt = np.full(gt.total, -1)
    if cand_p:
        order = np.lexsort((cand_g, cand_p, cand_d))
        cp = np.asarray(cand_p)[order]
        cg = np.asarray(cand_g)[order]
        for vi, gj in zip(cp, cg):
            if partner_of_pred[vi] < 0 and partner_of_gt[gj] < 0:
                partner_of_pred[vi] = gj
                partner_of_gt[gj] = vi

    matched_pred = np.where(partner_of_pred >= 0)[0]
    if matched_pred.size == 0:
        return 0.0, pred.total, 0.0, gt.total

    # per-instance sorted arrays of matched vertex indices with payloads
    pred_m_idx: dict[int, np.ndarray] = {}
    pred_m_partner: dict[int, np.ndarray] = {}
    for i in range(len(pred.sizes)):
        sel = matched_pred[pred.inst[matched_pred] == i]
        pred_m_idx[i] = pred.idx[sel]
        pred_m_partner[i] = partner_of_pred[sel]
    gt_m_idx: dict[int, np.ndarray] = {}
    gt_m_gid: dict[int, np.ndarray] = {}
    matched_gt = np.where(partner_of_gt >= 0)[0]
    for j in range(len(gt.sizes)):
        sel = matched_gt[gt.inst[matched_gt] == j]
        gt_m_idx[j] = gt.idx[sel]
        gt_m_gid[j] = sel

    precision_sum = 0.0
    recall_sum = 0.0
    for v in matched_pred:
        i = int(pred.inst[v])
        k = int(pred.idx[v])
        g = int(partner_of_pred[v])
        j = int(gt.inst[g])
        l = int(gt.idx[g])
        w_p = int(cfg.topo_prop_radius / pred.steps[i] + 1e-9)
        w_g = int(cfg.topo_prop_radius / gt.steps[j] + 1e-9)
        reach_a = _window_members(
            pred_m_idx[i], pred_m_partner[i], k, w_p, pred.sizes[i], pred.cyclic[i]
        )
        reach_b = _window_members(
            gt_m_idx[j], gt_m_gid[j], l, w_g, gt.sizes[j], gt.cyclic[j]
        )
        inter = np.intersect1d(reach_a, reach_b).size
        precision_sum += inter / reach_a.size
        recall_sum += inter / reach_b.size
    return precision_sum, pred.total, recall_sum, gt.total


def topo_score(preds, gts, cfg: MetricConfig) -> tuple[float, float, float]:
    """(precision, recall, F1) of local reachability between matched vertices."""
    scenes = sorted({p.scene for p in preds} | {g.scene for g in gts})
    p_sum = r_sum = 0.0
    n_pred = n_gt = 0
    for s in scenes:
        ps, np_, rs, ng = _topo_one_scene(
            [p for p in preds if p.scene == s],
            [g for g in gts if g.scene == s],
            cfg,
        )
        p_sum += ps
        r_sum += rs
        n_pred += np_
        n_gt += ng
    if n_pred == 0 or n_gt == 0:
        log.warning("TOPO: empty prediction or ground-truth graph; score 0")
        return 0.0, 0.0, 0.0
    precision = p_sum / n_pred
    recall = r_sum / n_gt
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def evaluation_report(preds, gts, cfg: MetricConfig) -> dict:
    """Full JSON-ready report: per-class AP, mAP, and TOPO."""
    report = map_score(preds, gts, cfg)
    precision, recall, f1 = topo_score(preds, gts, cfg)
    report["TOPO"] = {"precision": precision, "recall": recall, "f1": f1}
    return report
