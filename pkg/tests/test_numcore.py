import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vecmaplab import numcore as nc


def rand(rng, r, c, scale=1.0):
    return rng.uniform(-scale, scale, size=(r, c))


# -- affine -------------------------------------------------------------------


def test_affine_identity():
    eye = np.eye(2)
    y, _ = nc.affine(eye, eye, np.zeros((1, 2)))
    assert np.array_equal(y, eye)


def test_affine_bias_only():
    x = np.zeros((3, 2))
    b = np.array([[1.5, -2.0]])
    y, _ = nc.affine(x, np.zeros((2, 2)), b)
    assert np.array_equal(y, np.tile(b, (3, 1)))


def test_affine_backward_hand_case():
    # x = ones(1x2), dL/dy = ones(1x3): dW = x^T dy = ones(2x3), db = ones
    x = np.ones((1, 2))
    w = np.zeros((2, 3))
    b = np.zeros((1, 3))
    y, back = nc.affine(x, w, b)
    dx, dw, db = back(np.ones((1, 3)))
    assert np.array_equal(dw, np.ones((2, 3)))
    assert np.array_equal(db, np.ones((1, 3)))
    assert np.array_equal(dx, np.zeros((1, 2)))


def test_affine_shape_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)|\(2, 2\).*\(2, 3\)"):
        nc.affine(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((1, 2)))


# -- softmax ------------------------------------------------------------------


def test_softmax_symmetric_row():
    y, _ = nc.softmax_rows(np.array([[0.0, 0.0]]))
    assert np.allclose(y, [[0.5, 0.5]], atol=1e-15)


def test_softmax_large_logit_stable():
    y, _ = nc.softmax_rows(np.array([[1000.0, 0.0]]))
    assert np.isfinite(y).all()
    assert abs(y[0, 0] - 1.0) < 1e-12
    assert abs(y[0, 1]) < 1e-12


@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
@settings(max_examples=50)
def test_softmax_shift_invariance(seed, c):
    rng = np.random.default_rng(seed)
    x = rand(rng, 3, 5, 4.0)
    y0, _ = nc.softmax_rows(x)
    y1, _ = nc.softmax_rows(x + c)
    assert np.allclose(y0, y1, atol=1e-12)
    assert np.allclose(y0.sum(axis=1), 1.0, atol=1e-12)


# -- attention ----------------------------------------------------------------


def test_attention_single_pair_passthrough():
    q = np.array([[2.0]])
    k = np.array([[1.0]])
    v = np.array([[7.0, -3.0]])
    out, _ = nc.attention(q, k, v, mask=np.zeros((1, 1), dtype=bool))
    assert np.allclose(out, v, atol=1e-15)


def test_attention_masked_column_blocks_value():
    rng = np.random.default_rng(0)
    q, k, v = rand(rng, 3, 4), rand(rng, 5, 4), rand(rng, 5, 2)
    mask = np.zeros((3, 5), dtype=bool)
    mask[:, 2] = True
    out0, _ = nc.attention(q, k, v, mask)
    v2 = v.copy()
    v2[2] += 1000.0
    k2 = k.copy()
    k2[2] -= 123.0
    out1, _ = nc.attention(q, k2, v2, mask)
    assert np.max(np.abs(out1 - out0)) <= 1e-12


def test_attention_2x2_closed_form():
    # Q = K = I (d=1 per row pair): scores/softmax computed by hand
    q = np.eye(2)
    k = np.eye(2)
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    out, _ = nc.attention(q, k, v)
    s = 1.0 / math.sqrt(2.0)
    w11 = math.exp(s) / (math.exp(s) + math.exp(0.0))
    expected = np.array([[w11, 1 - w11], [1 - w11, w11]])
    assert np.allclose(out, expected, atol=1e-12)


def test_attention_fully_masked_row_errors():
    mask = np.array([[True, True], [False, False]])
    with pytest.raises(ValueError, match="fully masked"):
        nc.attention(np.ones((2, 3)), np.ones((2, 3)), np.ones((2, 2)), mask)


# -- layer norm ---------------------------------------------------------------


def test_layer_norm_constant_row_zeros():
    x = np.full((2, 4), 3.7)
    gain = np.ones((1, 4))
    bias = np.zeros((1, 4))
    y, _ = nc.layer_norm(x, gain, bias)
    assert np.allclose(y, 0.0, atol=1e-12)


def test_layer_norm_bias_shifts_mean():
    rng = np.random.default_rng(1)
    x = rand(rng, 3, 6, 2.0)
    bias = np.full((1, 6), 0.25)
    y, _ = nc.layer_norm(x, np.ones((1, 6)), bias)
    assert np.allclose(y.mean(axis=1), 0.25, atol=1e-6)


# -- adam ---------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    store = nc.ParamStore()
    store.add("p", [[1.0, 2.0]])
    before = store["p"].copy()
    nc.adam_step(store, lr=0.1)
    assert np.array_equal(store["p"], before)


def test_adam_first_step_scalar():
    store = nc.ParamStore()
    store.add("p", [[1.0]])
    store.accumulate("p", np.array([[1.0]]))
    nc.adam_step(store, lr=1e-3, eps_opt=1e-8)
    # first bias-corrected step is lr * g / (|g| + eps)
    assert abs(store["p"][0, 0] - (1.0 - 1e-3)) < 1e-9


def test_adam_two_runs_identical():
    def run():
        rng = np.random.default_rng(7)
        store = nc.ParamStore()
        store.add("w", rand(rng, 3, 3))
        for t in range(5):
            store.zero_grads()
            store.accumulate("w", store["w"] * 0.5 + t)
            nc.adam_step(store, lr=1e-2)
        return store["w"].copy()

    assert np.array_equal(run(), run())


# -- grad_check ---------------------------------------------------------------


def quadratic_loss(store):
    total = 0.0
    for name in store.names():
        p = store.params[name]
        total += 0.5 * float((p * p).sum())
        store.accumulate(name, p.copy())
    return total


def test_grad_check_quadratic_near_exact():
    rng = np.random.default_rng(2)
    store = nc.ParamStore()
    store.add("p", rng.uniform(0.5, 1.5, size=(2, 3)))
    report = nc.grad_check(quadratic_loss, store, rel_tol=1e-9)
    assert report.passed
    assert report.max_rel_err < 1e-9


def test_grad_check_detects_corrupted_backward():
    store = nc.ParamStore()
    store.add("p", [[0.7, -0.3]])

    def bad_loss(s):
        p = s.params["p"]
        s.accumulate("p", 2.5 * p)  # wrong: true gradient is p
        return 0.5 * float((p * p).sum())

    report = nc.grad_check(bad_loss, store, rel_tol=1e-4)
    assert not report.passed
    assert report.worst_param == "p"


def _composite_loss(rng_seed):
    """attention(softmax path) + affine + layer_norm composite on 3x4 shapes."""
    rng = np.random.default_rng(rng_seed)
    target = rand(rng, 3, 4)
    mask = rng.uniform(size=(3, 3)) < 0.3
    mask[np.diag_indices(3)] = False

    def loss(store):
        q, back_q = nc.affine(store["x"], store["wq"], store["bq"])
        out, back_att = nc.attention(q, store["k"], store["v"], mask)
        normed, back_ln = nc.layer_norm(out, store["gain"], store["bias"])
        diff = normed - target
        l = 0.5 * float((diff * diff).sum())
        dn = diff
        dout, dgain, dbias = back_ln(dn)
        store.accumulate("gain", dgain)
        store.accumulate("bias", dbias)
        dq, dk, dv = back_att(dout)
        store.accumulate("k", dk)
        store.accumulate("v", dv)
        dx, dwq, dbq = back_q(dq)
        store.accumulate("x", dx)
        store.accumulate("wq", dwq)
        store.accumulate("bq", dbq)
        return l

    store = nc.ParamStore()
    store.add("x", rand(rng, 3, 4))
    store.add("wq", rand(rng, 4, 4))
    store.add("bq", rand(rng, 1, 4))
    store.add("k", rand(rng, 3, 4))
    store.add("v", rand(rng, 3, 4))
    store.add("gain", rng.uniform(0.5, 1.5, size=(1, 4)))
    store.add("bias", rand(rng, 1, 4))
    return loss, store


def test_grad_check_attention_composite():
    loss, store = _composite_loss(3)
    report = nc.grad_check(loss, store, rel_tol=1e-4)
    assert report.passed, report.per_param


@pytest.mark.parametrize("op", ["affine", "softmax", "attention", "layer_norm",
                                "tanh", "sigmoid"])
def test_grad_check_each_op_random_shapes(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    for trial in range(20):
        r = int(rng.integers(1, 8))
        c = int(rng.integers(2, 8))
        store = nc.ParamStore()
        target = rand(rng, r, c)

        if op == "affine":
            d_in = int(rng.integers(1, 8))
            store.add("x", rand(rng, r, d_in))
            store.add("w", rand(rng, d_in, c))
            store.add("b", rand(rng, 1, c))

            def loss(s):
                y, back = nc.affine(s["x"], s["w"], s["b"])
                diff = y - target
                dx, dw, db = back(diff)
                s.accumulate("x", dx)
                s.accumulate("w", dw)
                s.accumulate("b", db)
                return 0.5 * float((diff * diff).sum())

        elif op == "softmax":
            store.add("x", rand(rng, r, c, 3.0))

            def loss(s):
                y, back = nc.softmax_rows(s["x"])
                diff = y - target
                s.accumulate("x", back(diff))
                return 0.5 * float((diff * diff).sum())

        elif op == "attention":
            m = int(rng.integers(1, 8))
            d = int(rng.integers(1, 8))
            store.add("q", rand(rng, r, d))
            store.add("k", rand(rng, m, d))
            store.add("v", rand(rng, m, c))
            mask = rng.uniform(size=(r, m)) < 0.25
            mask[:, 0] = False  # keep every row attendable

            def loss(s):
                y, back = nc.attention(s["q"], s["k"], s["v"], mask)
                diff = y - target
                dq, dk, dv = back(diff)
                s.accumulate("q", dq)
                s.accumulate("k", dk)
                s.accumulate("v", dv)
                return 0.5 * float((diff * diff).sum())

        elif op == "layer_norm":
            store.add("x", rand(rng, r, c, 2.0))
            store.add("gain", rng.uniform(0.5, 1.5, size=(1, c)))
            store.add("bias", rand(rng, 1, c))

            def loss(s):
                y, back = nc.layer_norm(s["x"], s["gain"], s["bias"])
                diff = y - target
                dx, dg, db = back(diff)
                s.accumulate("x", dx)
                s.accumulate("gain", dg)
                s.accumulate("bias", db)
                return 0.5 * float((diff * diff).sum())

        elif op == "tanh":
            store.add("x", rand(rng, r, c, 2.0))

            def loss(s):
                y, back = nc.tanh_act(s["x"])
                diff = y - target
                s.accumulate("x", back(diff))
                return 0.5 * float((diff * diff).sum())

        else:  # sigmoid
            store.add("x", rand(rng, r, c, 4.0))

            def loss(s):
                y, back = nc.sigmoid(s["x"])
                diff = y - target
                s.accumulate("x", back(diff))
                return 0.5 * float((diff * diff).sum())

        report = nc.grad_check(loss, store, rel_tol=1e-4)
        assert report.passed, (op, trial, report.per_param)


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    store = nc.ParamStore()
    store.add("enc.w", rand(rng, 4, 3))
    store.add("enc.b", rand(rng, 1, 3))
    store.zero_grads()
    store.accumulate("enc.w", rand(rng, 4, 3))
    nc.adam_step(store, lr=1e-3)
    path = tmp_path / "model.bin"
    nc.save_checkpoint(store, path)
    loaded = nc.load_checkpoint(path)
    assert loaded.names() == store.names()
    for name in store.names():
        assert np.array_equal(loaded[name], store[name])
        assert np.array_equal(loaded.adam_m[name], store.adam_m[name])
        assert np.array_equal(loaded.adam_v[name], store.adam_v[name])
    assert loaded.step == store.step


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        nc.load_checkpoint(path)


def test_checkpoint_truncated_names_offset(tmp_path):
    store = nc.ParamStore()
    store.add("w", np.ones((2, 2)))
    path = tmp_path / "model.bin"
    nc.save_checkpoint(store, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 10])
    with pytest.raises(ValueError, match="offset"):
        nc.load_checkpoint(path)
