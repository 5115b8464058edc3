"""Toy end-to-end point-set map detector.

Pipeline per scene: patchify the BEV raster and project patches to tokens
(sinusoidal 2-D positional encodings added to the keys), assemble object
queries from learnable embedding tables, fuse queries within each instance,
run the decoder stack, and read out per-instance class distributions plus
per-query 2-D points through a bounded activation.

Supervision is DETR-style: a rectangular Hungarian assignment of ground-truth
instances to prediction slots under a class + point-set cost, where the point
term is minimized over the orderings that describe the same geometry
(forward/reversed polylines, cyclically shifted polygons in both directions).
Training is seeded and byte-deterministic; every epoch/step derives its own
rng, so resuming from a checkpoint continues bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from math import ceil
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import decoder as dc
from . import geometry as geo
from . import metrics as mx
from . import numcore as nc
from . import queries as qg
from . import synthgen as sg

log = logging.getLogger(__name__)

NO_OBJECT = len(geo.CLASSES)  # index of the no-object class


@dataclass(frozen=True)
class DetectorConfig:
    num_instances: int = 12
    points_per_instance: int = 8
    embed_dim: int = 64
    num_layers: int = 3
    num_classes: int = len(geo.CLASSES)
    patch_size: int = 10
    resolution: float = sg.DEFAULT_RESOLUTION
    lambda_cls: float = 2.0
    lambda_pts: float = 5.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    query_scheme: str = qg.HYBRID
    fusion: str = dc.FUSION_SELF_ATTENTION
    mask: str = dc.ATTN_MASKED
    placement: str = dc.AFTER_CROSS
    epsilon: float = 0.1
    eval_every: int = 1
    val_scenes: int = 0  # 0 -> hold out 10% of the dataset

    def __post_init__(self):
        if self.query_scheme not in qg.SCHEMES:
            raise ValueError(
                f"invalid query_scheme {self.query_scheme!r}; valid: {qg.SCHEMES}"
            )
        if self.fusion not in dc.FUSION_MODES:
            raise ValueError(
                f"invalid fusion {self.fusion!r}; valid: {dc.FUSION_MODES}"
            )
        if self.mask not in dc.ATTN_MODES:
            raise ValueError(f"invalid mask {self.mask!r}; valid: {dc.ATTN_MODES}")
        if self.placement not in dc.PLACEMENTS:
            raise ValueError(
                f"invalid placement {self.placement!r}; valid: {dc.PLACEMENTS}"
            )
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if min(self.lambda_cls, self.lambda_pts) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.embed_dim % 4 != 0:
            raise ValueError(f"embed_dim must be divisible by 4, got {self.embed_dim}")

    @property
    def query_config(self) -> qg.QueryConfig:
        return qg.QueryConfig(
            num_instances=self.num_instances,
            points_per_instance=self.points_per_instance,
            embed_dim=self.embed_dim,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(cfg: DetectorConfig) -> str:
    return hashlib.sha256(
        json.dumps(cfg.to_dict(), sort_keys=True).encode()
    ).hexdigest()[:16]


@dataclass
class PredictionSet:
    """Per instance slot: class distribution, confidence, and points in
    meters (denormalized from [0,1]^2 onto the BEV range)."""

    class_probs: np.ndarray  # (num_instances, num_classes + 1)
    confidences: np.ndarray  # (num_instances,)
    points: np.ndarray  # (num_instances, points_per_instance, 2)


# ---------------------------------------------------------------------------
# coordinate normalization


def normalize_points(pts: np.ndarray) -> np.ndarray:
    x0, x1 = sg.X_RANGE
    y0, y1 = sg.Y_RANGE
    out = np.empty_like(pts, dtype=np.float64)
    out[..., 0] = (pts[..., 0] - x0) / (x1 - x0)
    out[..., 1] = (pts[..., 1] - y0) / (y1 - y0)
    return out


def denormalize_points(pts01: np.ndarray) -> np.ndarray:
    x0, x1 = sg.X_RANGE
    y0, y1 = sg.Y_RANGE
    out = np.empty_like(pts01, dtype=np.float64)
    out[..., 0] = pts01[..., 0] * (x1 - x0) + x0
    out[..., 1] = pts01[..., 1] * (y1 - y0) + y0
    return out


# ---------------------------------------------------------------------------
# BEV encoding


def sincos_positions(rows: int, cols: int, d: int) -> np.ndarray:
    """Fixed 2-D sinusoidal encodings for a rows x cols token grid,
    row-major; half the channels encode x, half y."""
    if d % 4 != 0:
        raise ValueError(f"embedding dim must be divisible by 4, got {d}")
    quarter = d // 4

    def axis(n: int) -> np.ndarray:
        pos = (np.arange(n) + 0.5) / n * 2.0 * np.pi
        freq = 10000.0 ** (np.arange(quarter) / quarter)
        ang = pos[:, None] / freq[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)  # (n, d/2)

    xe = axis(cols)
    ye = axis(rows)
    out = np.empty((rows * cols, d))
    for r in range(rows):
        out[r * cols : (r + 1) * cols, : d // 2] = xe
        out[r * cols : (r + 1) * cols, d // 2 :] = ye[r]
    return out


_POS_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _positions(rows: int, cols: int, d: int) -> np.ndarray:
    key = (rows, cols, d)
    if key not in _POS_CACHE:
        _POS_CACHE[key] = sincos_positions(rows, cols, d)
    return _POS_CACHE[key]


def patch_tokens(grid: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, C) -> (H/P * W/P, P*P*C), row-major over the patch grid."""
    h, w, c = grid.shape
    if h % patch or w % patch:
        raise ValueError(f"raster {h}x{w} not divisible by patch size {patch}")
    rows, cols = h // patch, w // patch
    x = grid.reshape(rows, patch, cols, patch, c)
    x = x.transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(rows * cols, patch * patch * c), dtype=np.float64)


def encode_bev(raster: sg.BevRaster, store: nc.ParamStore, cfg: DetectorConfig):
    """Patchify, project to embed_dim, add positional encodings to the keys.

    Returns ((keys, values, positions), backward); backward(dkeys, dvalues)
    accumulates the projection gradients.
    """
    h, w, c = raster.grid.shape
    expect = sg.raster_shape(cfg.resolution)
    if (h, w, c) != expect:
        raise ValueError(f"raster shape {(h, w, c)} != configured {expect}")
    tokens = patch_tokens(np.asarray(raster.grid, dtype=np.float64), cfg.patch_size)
    content, back = nc.affine(tokens, store["enc.w"], store["enc.b"])
    pos = _positions(h // cfg.patch_size, w // cfg.patch_size, cfg.embed_dim)
    keys = content + pos
    values = content

    def backward(dkeys, dvalues):
        _, dw, db = back(dkeys + dvalues)
        store.accumulate("enc.w", dw)
        store.accumulate("enc.b", db)

    return (keys, values, pos), backward


# ---------------------------------------------------------------------------
# model


def init_model(cfg: DetectorConfig) -> nc.ParamStore:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    store = nc.ParamStore()
    d = cfg.embed_dim
    patch_dim = cfg.patch_size * cfg.patch_size * len(geo.CLASSES)
    bound = 1.0 / np.sqrt(patch_dim)
    store.add("enc.w", rng.uniform(-bound, bound, size=(patch_dim, d)))
    store.add("enc.b", rng.uniform(-bound, bound, size=(1, d)))
    for kind, table in qg.init_tables(cfg.query_scheme, cfg.query_config, rng).items():
        store.add(f"queries.{kind}", table)
    dc.init_fusion_params(store, "fusion", dc.FusionConfig(cfg.fusion), d, rng)
    dc.init_decoder_stack(store, "dec", d, cfg.num_layers, rng)
    hb = 1.0 / np.sqrt(d)
    store.add("head.cls.w", rng.uniform(-hb, hb, size=(d, cfg.num_classes + 1)))
    store.add("head.cls.b", np.zeros((1, cfg.num_classes + 1)))
    store.add("head.pt.w", rng.uniform(-hb, hb, size=(d, 2)))
    store.add("head.pt.b", np.zeros((1, 2)))
    return store


def _query_tables(store: nc.ParamStore, scheme: str) -> dict[str, nc.Array]:
    kinds = ("query",) if scheme == qg.NAIVE else ("instance", "point")
    return {k: store[f"queries.{k}"] for k in kinds}


@dataclass
class LayerOutput:
    inst_logits: nc.Array  # (num_instances, num_classes + 1)
    points01: nc.Array  # (num_instances, points_per_instance, 2), in [0,1]


def forward(
    store: nc.ParamStore,
    cfg: DetectorConfig,
    raster: sg.BevRaster,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """Full forward pass. Returns (per-layer LayerOutputs, backward);
    backward takes per-layer (d_inst_logits, d_points01) pairs."""
    n_i, n_p, d = cfg.num_instances, cfg.points_per_instance, cfg.embed_dim
    (keys, values, _), enc_back = encode_bev(raster, store, cfg)
    q0, tables_back = qg.assemble(
        cfg.query_scheme, cfg.query_config, _query_tables(store, cfg.query_scheme)
    )
    fused, fuse_back = dc.fuse_forward(
        q0, n_i, n_p, dc.FusionConfig(cfg.fusion), store, "fusion"
    )
    instance_of = qg.instance_layout(cfg.query_config)
    outs, stack_back = dc.decoder_stack(
        store,
        "dec",
        fused,
        keys,
        values,
        cfg.num_layers,
        instance_of,
        dc.MaskConfig(epsilon=cfg.epsilon, seed=cfg.seed),
        training=training,
        rng=rng,
        attn_mode=cfg.mask,
        placement=cfg.placement,
    )

    layer_outputs: list[LayerOutput] = []
    head_backs = []
    for x in outs:
        logits, back_c = nc.affine(x, store["head.cls.w"], store["head.cls.b"])
        inst_logits = logits.reshape(n_i, n_p, -1).mean(axis=1)
        pt_lin, back_a = nc.affine(x, store["head.pt.w"], store["head.pt.b"])
        pts01, back_s = nc.sigmoid(pt_lin)
        layer_outputs.append(
            LayerOutput(inst_logits=inst_logits, points01=pts01.reshape(n_i, n_p, 2))
        )
        head_backs.append((back_c, back_a, back_s))

    def backward(per_layer_grads):
        dlayer = []
        for (back_c, back_a, back_s), (dinst, dpts) in zip(
            head_backs, per_layer_grads
        ):
            dlogits = np.repeat(dinst / n_p, n_p, axis=0)
            dx_c, dwc, dbc = back_c(dlogits)
            store.accumulate("head.cls.w", dwc)
            store.accumulate("head.cls.b", dbc)
            dpt_lin = back_s(dpts.reshape(n_i * n_p, 2))
            dx_p, dwp, dbp = back_a(dpt_lin)
            store.accumulate("head.pt.w", dwp)
            store.accumulate("head.pt.b", dbp)
            dlayer.append(dx_c + dx_p)
        dfused, dkeys, dvalues = stack_back(dlayer)
        dq0 = fuse_back(dfused)
        for kind, grad in tables_back(dq0).items():
            store.accumulate(f"queries.{kind}", grad)
        enc_back(dkeys, dvalues)

    return layer_outputs, backward


# ---------------------------------------------------------------------------
# matching cost and loss


@dataclass
class SlotPrediction:
    """One prediction slot in the matching frame: class distribution over
    num_classes+1 and points_per_instance 2-D points."""

    probs: np.ndarray  # (num_classes + 1,)
    points: np.ndarray  # (points_per_instance, 2)


def equivalent_orderings(points: np.ndarray, kind: str) -> np.ndarray:
    """All point orderings describing the same geometry: forward/reversed for
    polylines, every cyclic shift in both directions for polygons."""
    pts = np.asarray(points)
    if kind == geo.POLYGON:
        n = len(pts)
        orders = [np.roll(pts, -s, axis=0) for s in range(n)]
        rev = pts[::-1]
        orders += [np.roll(rev, -s, axis=0) for s in range(n)]
        return np.stack(orders)
    return np.stack([pts, pts[::-1]])


def point_term(pred_points: np.ndarray, gt: geo.SampledInstance) -> tuple[float, np.ndarray]:
    """Min over equivalent orderings of the mean point-wise L1 distance.
    Returns (distance, best gt ordering)."""
    gt_pts = np.asarray(gt.points, dtype=np.float64)
    if gt_pts.shape != pred_points.shape:
        raise ValueError(
            f"point count mismatch: pred {pred_points.shape} vs gt {gt_pts.shape}"
        )
    orders = equivalent_orderings(gt_pts, gt.kind)
    dists = np.abs(pred_points[None] - orders).sum(axis=2).mean(axis=1)
    best = int(np.argmin(dists))
    return float(dists[best]), orders[best]


def instance_cost(
    pred: SlotPrediction,
    gt: geo.SampledInstance,
    lambda_cls: float,
    lambda_pts: float,
) -> float:
    """Matching cost: lambda_cls * (1 - P(gt class)) + lambda_pts * point term.
    Prediction and GT points must share one coordinate frame."""
    cls_idx = geo.CLASSES.index(gt.cls)
    dist, _ = point_term(np.asarray(pred.points, dtype=np.float64), gt)
    return lambda_cls * (1.0 - float(pred.probs[cls_idx])) + lambda_pts * dist


def match_instances(
    preds: list[SlotPrediction],
    gts: list[geo.SampledInstance],
    lambda_cls: float,
    lambda_pts: float,
) -> np.ndarray:
    """Minimum-total-cost one-to-one assignment; returns slot -> gt index
    (-1 for unmatched slots, which take the no-object target)."""
    n_slots = len(preds)
    if n_slots < len(gts):
        raise ValueError(f"{n_slots} slots cannot cover {len(gts)} ground truths")
    assignment = np.full(n_slots, -1, dtype=int)
    if gts:
        cost = np.empty((n_slots, len(gts)))
        for i, pred in enumerate(preds):
            for j, gt in enumerate(gts):
                cost[i, j] = instance_cost(pred, gt, lambda_cls, lambda_pts)
        rows, cols = linear_sum_assignment(cost)
        assignment[rows] = cols
    return assignment


@dataclass
class TrainTarget:
    """One GT instance prepared for matching: normalized sampled points with
    all equivalent orderings precomputed."""

    cls_idx: int
    kind: str
    sampled: geo.SampledInstance  # normalized coordinates
    orders: np.ndarray  # (n_orders, points_per_instance, 2)


def make_target(sampled_norm: geo.SampledInstance) -> TrainTarget:
    pts = np.asarray(sampled_norm.points, dtype=np.float64)
    return TrainTarget(
        cls_idx=geo.CLASSES.index(sampled_norm.cls),
        kind=sampled_norm.kind,
        sampled=sampled_norm,
        orders=equivalent_orderings(pts, sampled_norm.kind),
    )


def _cost_and_orders(probs, pts01, targets: list[TrainTarget], cfg: DetectorConfig):
    """Vectorized cost matrix (slots x targets) and per-pair best ordering
    index; agrees with instance_cost pair by pair."""
    n_i = len(pts01)
    cost = np.empty((n_i, len(targets)))
    best_idx = np.empty((n_i, len(targets)), dtype=int)
    for j, t in enumerate(targets):
        d = np.abs(pts01[:, None] - t.orders[None]).sum(axis=3).mean(axis=2)
        best_idx[:, j] = d.argmin(axis=1)
        cost[:, j] = cfg.lambda_cls * (1.0 - probs[:, t.cls_idx]) + (
            cfg.lambda_pts * d.min(axis=1)
        )
    return cost, best_idx


def loss_and_grads(
    layer: LayerOutput,
    targets: list[TrainTarget],
    assignment: np.ndarray,
    best_idx: np.ndarray,
    cfg: DetectorConfig,
):
    """Scalar loss plus gradients w.r.t. the layer's logits and points.

    Classification: lambda_cls * mean cross-entropy over all slots, with
    no-object targets on unmatched slots. Points: lambda_pts * mean (over
    matched instances) of the mean point-wise L1 distance under the
    order-minimizing correspondence, which is frozen for the gradient.
    """
    n_i = cfg.num_instances
    probs, back_sm = nc.softmax_rows(layer.inst_logits)
    cls_targets = np.full(n_i, NO_OBJECT, dtype=int)
    for slot, j in enumerate(assignment):
        if j >= 0:
            cls_targets[slot] = targets[j].cls_idx
    picked = np.clip(probs[np.arange(n_i), cls_targets], 1e-300, None)
    ce = -float(np.log(picked).mean())
    onehot = np.zeros_like(probs)
    onehot[np.arange(n_i), cls_targets] = 1.0
    dprobs = -onehot / picked[:, None] / n_i
    dlogits = back_sm(dprobs) * cfg.lambda_cls

    dpts = np.zeros_like(layer.points01)
    point_loss = 0.0
    matched = [(slot, j) for slot, j in enumerate(assignment) if j >= 0]
    if matched:
        n_p = cfg.points_per_instance
        for slot, j in matched:
            order = targets[j].orders[best_idx[slot, j]]
            diff = layer.points01[slot] - order
            point_loss += float(np.abs(diff).sum()) / n_p
            dpts[slot] = np.sign(diff) * (cfg.lambda_pts / (len(matched) * n_p))
        point_loss = cfg.lambda_pts * point_loss / len(matched)

    total = cfg.lambda_cls * ce + point_loss
    if not np.isfinite(total):
        raise FloatingPointError(
            f"non-finite loss: ce={ce}, point={point_loss}, "
            f"targets={cls_targets.tolist()}"
        )
    return total, dlogits, dpts


def scene_loss(
    store: nc.ParamStore,
    cfg: DetectorConfig,
    raster: sg.BevRaster,
    targets: list[TrainTarget],
    training: bool = True,
    rng: np.random.Generator | None = None,
) -> float:
    """Forward + matching + loss + backward for one scene. Auxiliary losses
    on every decoder layer, weight 1 each; gradients accumulate in store."""
    layers, backward = forward(store, cfg, raster, training=training, rng=rng)
    grads = []
    total = 0.0
    for layer in layers:
        probs, _ = nc.softmax_rows(layer.inst_logits)
        assignment = np.full(cfg.num_instances, -1, dtype=int)
        best_idx = np.zeros((cfg.num_instances, len(targets)), dtype=int)
        if targets:
            cost, best_idx = _cost_and_orders(probs, layer.points01, targets, cfg)
            rows, cols = linear_sum_assignment(cost)
            assignment[rows] = cols
        layer_loss, dlogits, dpts = loss_and_grads(
            layer, targets, assignment, best_idx, cfg
        )
        total += layer_loss
        grads.append((dlogits, dpts))
    backward(grads)
    return total


# ---------------------------------------------------------------------------
# prediction and evaluation


def predict(raster: sg.BevRaster, store: nc.ParamStore, cfg: DetectorConfig) -> PredictionSet:
    """Eval-mode prediction for one scene."""
    layers, _ = forward(store, cfg, raster, training=False)
    final = layers[-1]
    probs, _ = nc.softmax_rows(final.inst_logits)
    confidences = 1.0 - probs[:, NO_OBJECT]
    return PredictionSet(
        class_probs=probs,
        confidences=confidences,
        points=denormalize_points(final.points01),
    )


def prediction_instances(pred: PredictionSet, scene: int = 0) -> list[mx.PredInstance]:
    """PredictionSet -> metric records. The kind follows the predicted class
    (pedestrian crossings are the only polygons in this domain)."""
    out = []
    for i in range(len(pred.confidences)):
        cls_idx = int(np.argmax(pred.class_probs[i, :NO_OBJECT]))
        cls = geo.CLASSES[cls_idx]
        kind = geo.POLYGON if cls == "pedestrian_crossing" else geo.POLYLINE
        out.append(
            mx.PredInstance(
                points=tuple(map(tuple, pred.points[i])),
                kind=kind,
                cls=cls,
                confidence=float(pred.confidences[i]),
                scene=scene,
            )
        )
    return out


def eval_ground_truth(scenes, cfg: DetectorConfig) -> list[mx.GtInstance]:
    """GT instances resampled to the detector's point count, tagged by scene."""
    out = []
    for s_idx, scene in enumerate(scenes):
        for inst in scene.instances:
            sampled = geo.resample(inst, cfg.points_per_instance)
            out.append(
                mx.GtInstance(
                    points=sampled.points, kind=sampled.kind, cls=sampled.cls,
                    scene=s_idx,
                )
            )
    return out


def evaluate(
    store: nc.ParamStore,
    cfg: DetectorConfig,
    scenes,
    metric_cfg: mx.MetricConfig | None = None,
    topo_confidence: float = 0.5,
) -> dict:
    """Metrics report over a list of scenes. All slots enter the AP ranking;
    only slots with confidence >= topo_confidence enter the TOPO graph."""
    metric_cfg = metric_cfg or mx.MetricConfig()
    preds: list[mx.PredInstance] = []
    for s_idx, scene in enumerate(scenes):
        pset = predict(scene.raster, store, cfg)
        preds.extend(prediction_instances(pset, scene=s_idx))
    gts = eval_ground_truth(scenes, cfg)
    report = mx.map_score(preds, gts, metric_cfg)
    topo_preds = [p for p in preds if p.confidence >= topo_confidence]
    precision, recall, f1 = mx.topo_score(topo_preds, gts, metric_cfg)
    report["TOPO"] = {"precision": precision, "recall": recall, "f1": f1}
    return report


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    store: nc.ParamStore
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    log_path: Path | None = None


def _scene_targets(scene: sg.Scene, cfg: DetectorConfig) -> list[TrainTarget]:
    """GT instances resampled to n points with normalized coordinates."""
    out = []
    for inst in scene.instances:
        sampled = geo.resample(inst, cfg.points_per_instance)
        pts = normalize_points(np.asarray(sampled.points))
        out.append(
            make_target(
                geo.SampledInstance(
                    points=tuple(map(tuple, pts)), kind=sampled.kind, cls=sampled.cls
                )
            )
        )
    return out


def _step_rng(seed: int, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 2, epoch, step]))


def _shuffle_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 3, epoch]))


def split_dataset(scenes, cfg: DetectorConfig):
    n_val = cfg.val_scenes if cfg.val_scenes > 0 else max(1, round(0.1 * len(scenes)))
    if n_val >= len(scenes):
        raise ValueError(f"validation split {n_val} swallows dataset of {len(scenes)}")
    return scenes[:-n_val], scenes[-n_val:]


def train(
    dataset: list[sg.Scene],
    cfg: DetectorConfig,
    out_dir=None,
    resume_from=None,
    metric_cfg: mx.MetricConfig | None = None,
) -> TrainResult:
    """Seeded deterministic training with per-epoch loss logging and periodic
    mAP/TOPO evaluation on the held-out split.

    Writes checkpoint.bin and train_log.jsonl into out_dir when given.
    Resuming from a checkpoint continues bit-identically with the
    uninterrupted run (optimizer state and step count live in the file).
    """
    if not dataset:
        raise ValueError("empty dataset")
    train_scenes, val_scenes = split_dataset(dataset, cfg)
    max_gt = max(len(s.instances) for s in dataset)
    if cfg.num_instances < max_gt:
        raise ValueError(
            f"num_instances={cfg.num_instances} < max GT instances {max_gt}"
        )

    targets = [_scene_targets(s, cfg) for s in train_scenes]
    steps_per_epoch = ceil(len(train_scenes) / cfg.batch_size)

    if resume_from is not None:
        store = nc.load_checkpoint(resume_from)
        start_epoch = store.step // steps_per_epoch
    else:
        store = init_model(cfg)
        start_epoch = 0

    out_dir = Path(out_dir) if out_dir is not None else None
    log_lines: list[dict] = []
    header = {"config_hash": config_hash(cfg), "config": cfg.to_dict()}
    history: list[dict] = []

    for epoch in range(start_epoch, cfg.epochs):
        order = _shuffle_rng(cfg.seed, epoch).permutation(len(train_scenes))
        epoch_loss = 0.0
        for step in range(steps_per_epoch):
            batch = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            if batch.size == 0:
                continue
            rng = _step_rng(cfg.seed, epoch, step)
            store.zero_grads()
            batch_loss = 0.0
            for idx in batch:
                scene = train_scenes[idx]
                batch_loss += scene_loss(
                    store, cfg, scene.raster, targets[idx], training=True, rng=rng
                )
            if not np.isfinite(batch_loss):
                raise FloatingPointError(
                    f"training diverged at epoch {epoch} step {step}"
                )
            nc.scale_grads(store, 1.0 / batch.size)
            nc.clip_grad_norm(store, cfg.grad_clip)
            nc.adam_step(
                store, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps
            )
            epoch_loss += batch_loss / batch.size
        mean_loss = epoch_loss / steps_per_epoch

        entry: dict = {"epoch": epoch, "loss": mean_loss, "mAP": None, "TOPO": None}
        is_eval_epoch = (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1
        if is_eval_epoch and val_scenes:
            report = evaluate(store, cfg, val_scenes, metric_cfg)
            entry["mAP"] = report["mAP"]
            entry["TOPO"] = report["TOPO"]["f1"]
        log_lines.append(entry)
        history.append(entry)
        log.info(
            "epoch %d: loss=%.4f mAP=%s TOPO=%s",
            epoch, mean_loss, entry["mAP"], entry["TOPO"],
        )

    result = TrainResult(store=store, history=history)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint = out_dir / "checkpoint.bin"
        nc.save_checkpoint(store, result.checkpoint)
        result.log_path = out_dir / "train_log.jsonl"
        with open(result.log_path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for entry in log_lines:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return result
