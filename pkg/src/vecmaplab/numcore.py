"""Minimal dense float64 kernel with hand-derived reverse-mode gradients.

Tensors are 2-D row-major numpy float64 arrays. Each forward op returns
(output, backward) where backward maps the loss gradient at the output to
loss gradients at the inputs; the caller composes the closures in reverse
order. There is no tape: the model graph is static and shallow.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from math import sqrt
from pathlib import Path
from typing import Callable

import numpy as np

Array = np.ndarray

# Masked attention scores are set to this finite sentinel instead of -inf so
# backward arithmetic stays finite; exp(MASK_SCORE - rowmax) underflows to
# exactly 0.0 in float64.
MASK_SCORE = -1e30

LAYER_NORM_EPS = 1e-5


def tensor2(values) -> Array:
    """Coerce to a 2-D float64 C-order array."""
    arr = np.array(values, dtype=np.float64, order="C")
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"expected 2-D data, got shape {arr.shape}")
    return arr


def _check_finite(name: str, x: Array) -> Array:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{name} produced non-finite values")
    return x


# ---------------------------------------------------------------------------
# forward ops with explicit backward closures


def affine(x: Array, w: Array, b: Array):
    """y = x @ w + b with b broadcast over rows.

    backward(dy) -> (dx, dw, db).
    """
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"affine shape mismatch: x {x.shape} vs w {w.shape}")
    if b.shape != (1, w.shape[1]):
        raise ValueError(f"affine bias shape {b.shape} != (1, {w.shape[1]})")
    y = x @ w + b

    def backward(dy: Array):
        if dy.shape != y.shape:
            raise ValueError(f"affine backward: dy {dy.shape} vs y {y.shape}")
        return dy @ w.T, x.T @ dy, dy.sum(axis=0, keepdims=True)

    return _check_finite("affine", y), backward


def matmul(x: Array, w: Array):
    """y = x @ w (no bias). backward(dy) -> (dx, dw)."""
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: x {x.shape} vs w {w.shape}")
    y = x @ w

    def backward(dy: Array):
        return dy @ w.T, x.T @ dy

    return _check_finite("matmul", y), backward


def softmax_rows(x: Array):
    """Numerically stable row softmax; every output row sums to 1."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(dy: Array):
        inner = (dy * y).sum(axis=1, keepdims=True)
        return (dy - inner) * y

    return _check_finite("softmax_rows", y), backward


def attention(q: Array, k: Array, v: Array, mask: Array | None = None):
    """Scaled dot-product attention with an optional boolean blocking mask.

    mask[i, j] = True blocks query i from key j (score replaced by
    MASK_SCORE before the softmax). backward(dout) -> (dq, dk, dv).
    """
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"attention shape mismatch: q {q.shape} vs k {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"attention shape mismatch: k {k.shape} vs v {v.shape}")
    if mask is not None:
        if mask.shape != (q.shape[0], k.shape[0]):
            raise ValueError(
                f"attention mask shape {mask.shape} != ({q.shape[0]}, {k.shape[0]})"
            )
        if np.any(mask.all(axis=1)):
            raise ValueError("attention row fully masked")
    scale = 1.0 / sqrt(q.shape[1])
    scores = (q @ k.T) * scale
    if mask is None:
        weights, softmax_bwd = softmax_rows(scores)
    else:
        # Blocked entries take the MASK_SCORE sentinel, so they never win the
        # row max; the shifted scores are clamped before exp (raw exp of the
        # sentinel would trip the libm underflow slow path) and the blocked
        # weights are then forced to exactly 0.
        np.copyto(scores, MASK_SCORE, where=mask)
        shifted = scores - scores.max(axis=1, keepdims=True)
        np.clip(shifted, -700.0, None, out=shifted)
        e = np.exp(shifted)
        e *= ~mask
        weights = e / e.sum(axis=1, keepdims=True)

        def softmax_bwd(dy: Array):
            inner = (dy * weights).sum(axis=1, keepdims=True)
            # weights are exactly 0 at blocked entries, so dscores is too
            return (dy - inner) * weights

    out = weights @ v

    def backward(dout: Array):
        dv = weights.T @ dout
        dweights = dout @ v.T
        dscores = softmax_bwd(dweights)
        dq = (dscores @ k) * scale
        dk = (dscores.T @ q) * scale
        return dq, dk, dv

    return _check_finite("attention", out), backward


def layer_norm(x: Array, gain: Array, bias: Array):
    """Per-row normalization to zero mean / unit variance, then gain and bias."""
    if x.shape[1] < 2:
        raise ValueError(f"layer_norm needs feature dim >= 2, got {x.shape}")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    y = xhat * gain + bias

    def backward(dy: Array):
        dgain = (dy * xhat).sum(axis=0, keepdims=True)
        dbias = dy.sum(axis=0, keepdims=True)
        dxhat = dy * gain
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, dgain, dbias

    return _check_finite("layer_norm", y), backward


def tanh_act(x: Array):
    y = np.tanh(x)

    def backward(dy: Array):
        return dy * (1.0 - y * y)

    return y, backward


def sigmoid(x: Array):
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(dy: Array):
        return dy * y * (1.0 - y)

    return _check_finite("sigmoid", y), backward


# ---------------------------------------------------------------------------
# parameter store and optimizer


class ParamStore:
    """Named parameter tensors with matching gradient accumulators."""

    def __init__(self) -> None:
        self.params: dict[str, Array] = {}
        self.grads: dict[str, Array] = {}
        self.adam_m: dict[str, Array] = {}
        self.adam_v: dict[str, Array] = {}
        self.step = 0

    def add(self, name: str, value) -> Array:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        arr = tensor2(value)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> Array:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def accumulate(self, name: str, grad: Array) -> None:
        g = self.grads[name]
        if grad.shape != g.shape:
            raise ValueError(
                f"gradient shape {grad.shape} != parameter shape {g.shape} ({name})"
            )
        g += grad

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def names(self) -> list[str]:
        return list(self.params)


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_opt: float = 1e-8,
    t: int | None = None,
) -> None:
    """Bias-corrected Adam update from the accumulated gradients."""
    if t is None:
        store.step += 1
        t = store.step
    else:
        store.step = t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store.adam_m.setdefault(name, np.zeros_like(p))
        v = store.adam_v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps_opt)


def scale_grads(store: ParamStore, factor: float) -> None:
    for g in store.grads.values():
        g *= factor


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for g in store.grads.values():
        total += float((g * g).sum())
    norm = sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale_grads(store, max_norm / norm)
    return norm


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    rel_tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    worst_param: str = ""
    max_rel_err: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.rel_tol


def grad_check(
    f: Callable[[ParamStore], float],
    store: ParamStore,
    rel_tol: float = 1e-4,
    h: float = 1e-5,
    param_names: list[str] | None = None,
) -> GradCheckReport:
    """Compare f's analytic gradients against central finite differences.

    f must be deterministic (freeze any masks/rng outside), return a scalar
    loss, and accumulate analytic gradients into store.grads as a side
    effect. The relative-error denominator is floored so coordinates where
    both sides vanish do not blow up.
    """
    store.zero_grads()
    loss0 = float(f(store))
    if not np.isfinite(loss0):
        raise FloatingPointError(f"grad_check: non-finite loss {loss0}")
    analytic = {name: store.grads[name].copy() for name in store.params}

    report = GradCheckReport(rel_tol=rel_tol)
    for name in param_names if param_names is not None else store.names():
        flat = store.params[name].reshape(-1)
        gflat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(f(store))
            flat[i] = orig - h
            lm = float(f(store))
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = gflat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            worst = max(worst, rel)
        report.per_param[name] = worst
        if worst >= report.max_rel_err:
            report.max_rel_err = worst
            report.worst_param = name
    store.zero_grads()
    return report


# ---------------------------------------------------------------------------
# checkpoint io

CHECKPOINT_MAGIC = b"IMCK"
_ADAM_M = "__adam_m__"
_ADAM_V = "__adam_v__"
_ADAM_T = "__adam_t__"


def save_checkpoint(store: ParamStore, path) -> None:
    """Write all parameters (plus optimizer state, if any) to `path`."""
    records: list[tuple[str, Array]] = list(store.params.items())
    if store.step > 0:
        records += [(_ADAM_M + n, a) for n, a in store.adam_m.items()]
        records += [(_ADAM_V + n, a) for n, a in store.adam_v.items()]
        records.append((_ADAM_T, np.array([[float(store.step)]])))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParamStore:
    blob = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ValueError(
                f"truncated checkpoint: needed {n} bytes for {what} at offset "
                f"{off}, file has {len(blob)}"
            )
        chunk = blob[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (count,) = struct.unpack("<I", take(4, "record count"))
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        rows, cols = struct.unpack("<II", take(8, f"shape of {name}"))
        data = np.frombuffer(
            take(rows * cols * 8, f"data of {name}"), dtype="<f8"
        ).reshape(rows, cols)
        arr = np.array(data, dtype=np.float64, order="C")
        if name.startswith(_ADAM_M):
            store.adam_m[name[len(_ADAM_M) :]] = arr
        elif name.startswith(_ADAM_V):
            store.adam_v[name[len(_ADAM_V) :]] = arr
        elif name == _ADAM_T:
            store.step = int(arr[0, 0])
        else:
            store.add(name, arr)
    return store
