"""Inner-instance query fusion, masked inner-instance self-attention, and
the decoder layer/stack built around them.

The attention mask partitions queries by instance: with epsilon = 0 it is
exactly block-diagonal (attention allowed only within an instance). During
training each allowed off-diagonal entry is additionally blocked with
probability epsilon for robustness; the diagonal is never blocked, so no
attention row can end up fully masked.

Default sub-layer order inside a decoder layer: (1) plain self-attention
over all queries, (2) cross-attention to the BEV tokens, (3) masked
inner-instance self-attention, (4) position-wise feed-forward; every
sub-layer is wrapped residual + layer-norm. The masked module can instead be
placed before the cross-attention as an ablation.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np

from . import numcore as nc
from .numcore import Array
from .queries import QuerySet

FUSION_NONE = "none"
FUSION_MEAN = "mean"
FUSION_FEED_FORWARD = "feed_forward"
FUSION_SELF_ATTENTION = "self_attention"
FUSION_MODES = (FUSION_NONE, FUSION_MEAN, FUSION_FEED_FORWARD, FUSION_SELF_ATTENTION)

ATTN_MASKED = "masked"
ATTN_NO_MASK = "no_mask_attn"
ATTN_OFF = "off"
ATTN_MODES = (ATTN_OFF, ATTN_NO_MASK, ATTN_MASKED)

AFTER_CROSS = "after_cross"
BEFORE_CROSS = "before_cross"
PLACEMENTS = (AFTER_CROSS, BEFORE_CROSS)


@dataclass(frozen=True)
class MaskConfig:
    epsilon: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")


@dataclass(frozen=True)
class FusionConfig:
    mode: str = FUSION_SELF_ATTENTION

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(
                f"unknown fusion mode {self.mode!r}; valid: {FUSION_MODES}"
            )


@dataclass
class AttentionMask:
    """Boolean (n_queries x n_queries); True blocks attention."""

    blocked: np.ndarray


def build_instance_mask(
    instance_of,
    epsilon: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> AttentionMask:
    """Blocked everywhere across instances; allowed within an instance.

    In training mode each off-diagonal intra-instance entry is independently
    blocked with probability epsilon (requires rng); in eval mode epsilon is
    ignored. The diagonal is always allowed.
    """
    inst = np.asarray(instance_of)
    blocked = inst[:, None] != inst[None, :]
    if training and epsilon > 0.0:
        if rng is None:
            raise ValueError("training-time epsilon blocking needs an rng")
        n = len(inst)
        extra = rng.uniform(size=(n, n)) < epsilon
        extra &= ~blocked
        np.fill_diagonal(extra, False)
        blocked = blocked | extra
    np.fill_diagonal(blocked, False)
    return AttentionMask(blocked=blocked)


# ---------------------------------------------------------------------------
# parameter initialization


def _init_linear(store: nc.ParamStore, name: str, d_in: int, d_out: int, rng):
    bound = 1.0 / sqrt(d_in)
    store.add(name + ".w", rng.uniform(-bound, bound, size=(d_in, d_out)))
    store.add(name + ".b", rng.uniform(-bound, bound, size=(1, d_out)))


def _init_ln(store: nc.ParamStore, name: str, d: int):
    store.add(name + ".gain", np.ones((1, d)))
    store.add(name + ".bias", np.zeros((1, d)))


def init_attn_block(store: nc.ParamStore, prefix: str, d: int, rng):
    for part in ("q", "k", "v", "o"):
        _init_linear(store, f"{prefix}.{part}", d, d, rng)


def init_fusion_params(
    store: nc.ParamStore, prefix: str, cfg: FusionConfig, d: int, rng
) -> None:
    if cfg.mode == FUSION_FEED_FORWARD:
        _init_linear(store, f"{prefix}.f1", d, 2 * d, rng)
        _init_linear(store, f"{prefix}.f2", 2 * d, d, rng)
    elif cfg.mode == FUSION_SELF_ATTENTION:
        bound = 1.0 / sqrt(d)
        for part in ("wq", "wk", "wv"):
            store.add(f"{prefix}.{part}", rng.uniform(-bound, bound, size=(d, d)))


def init_decoder_layer(store: nc.ParamStore, prefix: str, d: int, rng) -> None:
    init_attn_block(store, f"{prefix}.sa", d, rng)
    _init_ln(store, f"{prefix}.ln1", d)
    init_attn_block(store, f"{prefix}.ca", d, rng)
    _init_ln(store, f"{prefix}.ln2", d)
    init_attn_block(store, f"{prefix}.misa", d, rng)
    _init_ln(store, f"{prefix}.ln3", d)
    _init_linear(store, f"{prefix}.ffn1", d, 2 * d, rng)
    _init_linear(store, f"{prefix}.ffn2", 2 * d, d, rng)
    _init_ln(store, f"{prefix}.ln4", d)


def init_decoder_stack(
    store: nc.ParamStore, prefix: str, d: int, n_layers: int, rng
) -> None:
    for layer in range(n_layers):
        init_decoder_layer(store, f"{prefix}.{layer}", d, rng)


# ---------------------------------------------------------------------------
# query fusion


def fuse_forward(
    q: Array,
    num_instances: int,
    points_per_instance: int,
    cfg: FusionConfig,
    store: nc.ParamStore | None = None,
    prefix: str = "fusion",
):
    """Differentiable fusion core on the raw query matrix.

    Returns (fused, backward); backward(dout) accumulates any parameter
    gradients into the store and returns the gradient at the input queries.
    """
    n_i, n_p = num_instances, points_per_instance
    n, d = q.shape
    if n != n_i * n_p:
        raise ValueError(f"query count {n} != {n_i} * {n_p}")

    if cfg.mode == FUSION_NONE:
        def backward(dout: Array) -> Array:
            return dout

        return q, backward

    if cfg.mode == FUSION_MEAN:
        mean = q.reshape(n_i, n_p, d).mean(axis=1, keepdims=True)
        out = np.broadcast_to(mean, (n_i, n_p, d)).reshape(n, d).copy()

        def backward(dout: Array) -> Array:
            dmean = dout.reshape(n_i, n_p, d).sum(axis=1, keepdims=True) / n_p
            return np.broadcast_to(dmean, (n_i, n_p, d)).reshape(n, d).copy()

        return out, backward

    if store is None:
        raise ValueError(f"fusion mode {cfg.mode!r} needs a parameter store")

    if cfg.mode == FUSION_FEED_FORWARD:
        h, back1 = nc.affine(q, store[f"{prefix}.f1.w"], store[f"{prefix}.f1.b"])
        a, back_t = nc.tanh_act(h)
        phi, back2 = nc.affine(a, store[f"{prefix}.f2.w"], store[f"{prefix}.f2.b"])
        mean = phi.reshape(n_i, n_p, d).mean(axis=1, keepdims=True)
        out = q + np.broadcast_to(mean, (n_i, n_p, d)).reshape(n, d)

        def backward(dout: Array) -> Array:
            dmean = dout.reshape(n_i, n_p, d).sum(axis=1, keepdims=True) / n_p
            dphi = np.broadcast_to(dmean, (n_i, n_p, d)).reshape(n, d).copy()
            da, dw2, db2 = back2(dphi)
            store.accumulate(f"{prefix}.f2.w", dw2)
            store.accumulate(f"{prefix}.f2.b", db2)
            dh = back_t(da)
            dq, dw1, db1 = back1(dh)
            store.accumulate(f"{prefix}.f1.w", dw1)
            store.accumulate(f"{prefix}.f1.b", db1)
            return dout + dq

        return out, backward

    # self-attention fusion: scaled-dot-product over each instance's queries,
    # realized as full attention under the epsilon=0 instance mask
    instance_of = np.arange(n) // n_p
    mask = build_instance_mask(instance_of).blocked
    qp, back_q = nc.matmul(q, store[f"{prefix}.wq"])
    kp, back_k = nc.matmul(q, store[f"{prefix}.wk"])
    vp, back_v = nc.matmul(q, store[f"{prefix}.wv"])
    att, back_att = nc.attention(qp, kp, vp, mask)
    out = q + att

    def backward(dout: Array) -> Array:
        dqp, dkp, dvp = back_att(dout)
        dq1, dwq = back_q(dqp)
        dq2, dwk = back_k(dkp)
        dq3, dwv = back_v(dvp)
        store.accumulate(f"{prefix}.wq", dwq)
        store.accumulate(f"{prefix}.wk", dwk)
        store.accumulate(f"{prefix}.wv", dwv)
        return dout + dq1 + dq2 + dq3

    return out, backward


def fuse_queries(
    qs: QuerySet,
    cfg: FusionConfig,
    store: nc.ParamStore | None = None,
    prefix: str = "fusion",
) -> QuerySet:
    """Fuse each query with the other queries of its instance (Fig-level API:
    provenance and layout pass through unchanged)."""
    inst = np.asarray(qs.instance_of)
    n_i = int(inst.max()) + 1 if len(inst) else 0
    n_p = len(inst) // max(n_i, 1)
    fused, _ = fuse_forward(qs.queries, n_i, n_p, cfg, store, prefix)
    return QuerySet(queries=fused, instance_of=qs.instance_of, provenance=qs.provenance)


# ---------------------------------------------------------------------------
# decoder layer and stack


def _attn_sublayer(store, prefix, x_q, x_kv, mask):
    """Projected attention block: out = Wo(attention(Wq x_q, Wk x_kv, Wv x_kv))."""
    q, back_q = nc.affine(x_q, store[f"{prefix}.q.w"], store[f"{prefix}.q.b"])
    k, back_k = nc.affine(x_kv, store[f"{prefix}.k.w"], store[f"{prefix}.k.b"])
    v, back_v = nc.affine(x_kv, store[f"{prefix}.v.w"], store[f"{prefix}.v.b"])
    att, back_att = nc.attention(q, k, v, mask)
    out, back_o = nc.affine(att, store[f"{prefix}.o.w"], store[f"{prefix}.o.b"])

    def backward(dout: Array):
        datt, dwo, dbo = back_o(dout)
        store.accumulate(f"{prefix}.o.w", dwo)
        store.accumulate(f"{prefix}.o.b", dbo)
        dq, dk, dv = back_att(datt)
        dxq, dwq, dbq = back_q(dq)
        store.accumulate(f"{prefix}.q.w", dwq)
        store.accumulate(f"{prefix}.q.b", dbq)
        dxk, dwk, dbk = back_k(dk)
        store.accumulate(f"{prefix}.k.w", dwk)
        store.accumulate(f"{prefix}.k.b", dbk)
        dxv, dwv, dbv = back_v(dv)
        store.accumulate(f"{prefix}.v.w", dwv)
        store.accumulate(f"{prefix}.v.b", dbv)
        return dxq, dxk + dxv

    return out, backward


def _residual_ln(store, prefix, x, sub_out, grad_to_input):
    """y = layer_norm(x + sub_out); grad_to_input threads the sub-layer's
    backward and returns the gradient at x."""
    summed = x + sub_out
    y, back_ln = nc.layer_norm(
        summed, store[f"{prefix}.gain"], store[f"{prefix}.bias"]
    )

    def backward(dy: Array):
        dsum, dgain, dbias = back_ln(dy)
        store.accumulate(f"{prefix}.gain", dgain)
        store.accumulate(f"{prefix}.bias", dbias)
        return dsum + grad_to_input(dsum)

    return y, backward


def masked_self_attention_sublayer(store, prefix, x, mask: Array | None):
    """Sub-layer 3 in isolation: residual + layer-norm around masked
    self-attention over the queries."""
    out, back_attn = _attn_sublayer(store, f"{prefix}.misa", x, x, mask)

    def grad_to_input(dsum: Array) -> Array:
        dxq, dxkv = back_attn(dsum)
        return dxq + dxkv

    return _residual_ln(store, f"{prefix}.ln3", x, out, grad_to_input)


def decoder_layer(
    store: nc.ParamStore,
    prefix: str,
    queries: Array,
    bev_keys: Array,
    bev_values: Array,
    mask: AttentionMask | None,
    attn_mode: str = ATTN_MASKED,
    placement: str = AFTER_CROSS,
):
    """One decoder layer. Returns (out, backward) with
    backward(dout) -> (dqueries, dbev_keys, dbev_values)."""
    if attn_mode not in ATTN_MODES:
        raise ValueError(f"unknown attn mode {attn_mode!r}; valid: {ATTN_MODES}")
    if placement not in PLACEMENTS:
        raise ValueError(f"unknown placement {placement!r}; valid: {PLACEMENTS}")

    x = queries
    backs = []
    cross_back_holder = []

    def run_self(x):
        out, back = _attn_sublayer(store, f"{prefix}.sa", x, x, None)

        def grad_to_input(dsum: Array) -> Array:
            dxq, dxkv = back(dsum)
            return dxq + dxkv

        return _residual_ln(store, f"{prefix}.ln1", x, out, grad_to_input)

    # cross-attention keys differ from values (keys carry positional
    # encodings), so it cannot reuse _attn_sublayer's shared-kv path
    def run_cross(x):
        p = f"{prefix}.ca"
        q, back_q = nc.affine(x, store[f"{p}.q.w"], store[f"{p}.q.b"])
        k, back_k = nc.affine(bev_keys, store[f"{p}.k.w"], store[f"{p}.k.b"])
        v, back_v = nc.affine(bev_values, store[f"{p}.v.w"], store[f"{p}.v.b"])
        att, back_att = nc.attention(q, k, v, None)
        out, back_o = nc.affine(att, store[f"{p}.o.w"], store[f"{p}.o.b"])

        def grad_to_input(dsum: Array) -> Array:
            datt, dwo, dbo = back_o(dsum)
            store.accumulate(f"{p}.o.w", dwo)
            store.accumulate(f"{p}.o.b", dbo)
            dq, dk, dv = back_att(datt)
            dx, dwq, dbq = back_q(dq)
            store.accumulate(f"{p}.q.w", dwq)
            store.accumulate(f"{p}.q.b", dbq)
            dbk, dwk, dbk_b = back_k(dk)
            store.accumulate(f"{p}.k.w", dwk)
            store.accumulate(f"{p}.k.b", dbk_b)
            dbv, dwv, dbv_b = back_v(dv)
            store.accumulate(f"{p}.v.w", dwv)
            store.accumulate(f"{p}.v.b", dbv_b)
            cross_back_holder.append((dbk, dbv))
            return dx

        return _residual_ln(store, f"{prefix}.ln2", x, out, grad_to_input)

    def run_masked(x):
        m = mask.blocked if attn_mode == ATTN_MASKED and mask is not None else None
        return masked_self_attention_sublayer(store, prefix, x, m)

    def run_ffn(x):
        h, back1 = nc.affine(x, store[f"{prefix}.ffn1.w"], store[f"{prefix}.ffn1.b"])
        a, back_t = nc.tanh_act(h)
        out, back2 = nc.affine(a, store[f"{prefix}.ffn2.w"], store[f"{prefix}.ffn2.b"])

        def grad_to_input(dsum: Array) -> Array:
            da, dw2, db2 = back2(dsum)
            store.accumulate(f"{prefix}.ffn2.w", dw2)
            store.accumulate(f"{prefix}.ffn2.b", db2)
            dh = back_t(da)
            dx, dw1, db1 = back1(dh)
            store.accumulate(f"{prefix}.ffn1.w", dw1)
            store.accumulate(f"{prefix}.ffn1.b", db1)
            return dx

        return _residual_ln(store, f"{prefix}.ln4", x, out, grad_to_input)

    stages = [run_self]
    if placement == AFTER_CROSS:
        stages.append(run_cross)
        if attn_mode != ATTN_OFF:
            stages.append(run_masked)
    else:
        if attn_mode != ATTN_OFF:
            stages.append(run_masked)
        stages.append(run_cross)
    stages.append(run_ffn)

    for stage in stages:
        x, back = stage(x)
        backs.append(back)

    def backward(dout: Array):
        cross_back_holder.clear()
        grad = dout
        for back in reversed(backs):
            grad = back(grad)
        dbk, dbv = cross_back_holder[0]
        return grad, dbk, dbv

    return x, backward


def decoder_stack(
    store: nc.ParamStore,
    prefix: str,
    queries: Array,
    bev_keys: Array,
    bev_values: Array,
    n_layers: int,
    instance_of,
    mask_cfg: MaskConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    attn_mode: str = ATTN_MASKED,
    placement: str = AFTER_CROSS,
):
    """Sequential decoder layers; a fresh epsilon-mask is drawn per layer per
    forward pass in training mode, eval mode is deterministic.

    Returns (per_layer_outputs, backward); backward takes one gradient per
    layer output (auxiliary heads) and returns (dqueries, dbev_k, dbev_v).
    """
    if n_layers < 1:
        raise ValueError(f"need at least one layer, got {n_layers}")
    if training and mask_cfg.epsilon > 0.0 and rng is None:
        rng = np.random.default_rng(mask_cfg.seed)
    outputs = []
    backs = []
    x = queries
    for layer in range(n_layers):
        mask = build_instance_mask(
            instance_of, mask_cfg.epsilon, rng=rng, training=training
        )
        x, back = decoder_layer(
            store,
            f"{prefix}.{layer}",
            x,
            bev_keys,
            bev_values,
            mask,
            attn_mode=attn_mode,
            placement=placement,
        )
        outputs.append(x)
        backs.append(back)

    def backward(dout_layers):
        if len(dout_layers) != n_layers:
            raise ValueError(
                f"need {n_layers} per-layer gradients, got {len(dout_layers)}"
            )
        dbk_total = np.zeros_like(bev_keys)
        dbv_total = np.zeros_like(bev_values)
        grad = dout_layers[-1]
        for layer in reversed(range(n_layers)):
            grad, dbk, dbv = backs[layer](grad)
            dbk_total += dbk
            dbv_total += dbv
            if layer > 0:
                grad = grad + dout_layers[layer - 1]
        return grad, dbk_total, dbv_total

    return outputs, backward
