import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gatefuse.errors import DimensionError, InvalidMaskError, TrackingError
from gatefuse.numerics import Tape, Tensor, backward, kernels, ops

from helpers import grad_check

SEEDS = range(5)


# --- matmul --------------------------------------------------------------------

def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ops.matmul(np.eye(2), b).data, b)


def test_matmul_hand_product():
    out = ops.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_zero():
    out = ops.matmul(np.zeros((2, 2)), np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(out.data, np.zeros((2, 3)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        ops.matmul(np.zeros((2, 3)), np.zeros((2, 2)))


def test_matmul_rows_do_not_depend_on_batch_height():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    full = ops.matmul(a, b).data
    for i in range(7):
        np.testing.assert_array_equal(ops.matmul(a[i : i + 1], b).data[0], full[i])


# --- masked softmax --------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(ops.masked_softmax(np.ones(4)).data, [0.25] * 4, rtol=0, atol=1e-15)


def test_softmax_log3():
    np.testing.assert_allclose(ops.masked_softmax(np.array([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_masked_entry_exactly_zero():
    p = ops.masked_softmax(np.array([5.0, 2.0, 9.0]), np.array([True, True, False])).data
    e3 = math.exp(3)
    np.testing.assert_allclose(p[:2], [e3 / (e3 + 1), 1 / (e3 + 1)], rtol=1e-14)
    assert p[2] == 0.0


def test_softmax_all_masked_row_raises():
    with pytest.raises(InvalidMaskError):
        ops.masked_softmax(np.zeros((2, 3)), np.array([[True, False, False], [False, False, False]]))


@given(
    arrays(np.float64, (3, 6), elements=st.floats(-50, 50)),
    arrays(bool, (3, 6)),
)
def test_softmax_rows_sum_to_one_and_masked_are_zero(x, vis):
    vis[:, 0] = True
    p = ops.masked_softmax(x, vis).data
    assert np.all(p[~vis] == 0.0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.all(np.isfinite(p))


def test_softmax_extra_masked_columns_are_bit_neutral():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5))
    vis = rng.random((4, 5)) < 0.7
    vis[:, 0] = True
    wide = np.concatenate([x, rng.normal(size=(4, 3))], axis=1)
    wvis = np.concatenate([vis, np.zeros((4, 3), bool)], axis=1)
    np.testing.assert_array_equal(ops.masked_softmax(wide, wvis).data[:, :5], ops.masked_softmax(x, vis).data)


# --- layer norm --------------------------------------------------------------------

def test_layer_norm_constant_vector_maps_to_zero():
    out = ops.layer_norm(np.full((1, 4), 3.0), np.ones(4), np.zeros(4))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_closed_form():
    out = ops.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=1e-300)
    np.testing.assert_allclose(out.data, [1.0, -1.0], rtol=1e-15)


def test_layer_norm_zero_gain_gives_shift():
    shift = np.array([0.5, -2.0, 3.0])
    out = ops.layer_norm(np.random.default_rng(0).normal(size=(4, 3)), np.zeros(3), shift)
    np.testing.assert_array_equal(out.data, np.broadcast_to(shift, (4, 3)))


@given(arrays(np.float64, (3, 8), elements=st.floats(-100, 100)))
def test_layer_norm_standardizes(x):
    x = x + np.arange(8) * 0.5  # never constant
    out = ops.layer_norm(x, np.ones(8), np.zeros(8), eps=1e-5).data
    var = x.var(axis=1)
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=1), var / (var + 1e-5), atol=1e-9)


def test_layer_norm_shape_mismatch():
    with pytest.raises(DimensionError):
        ops.layer_norm(np.zeros((2, 3)), np.ones(4), np.zeros(4))


# --- tape -------------------------------------------------------------------------

def test_backward_square():
    tape = Tape()
    x = tape.watch(np.array(3.0), "x")
    assert backward(ops.mul(x, x), tape)["x"] == pytest.approx(6.0)


def test_backward_sum_matmul_pattern():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    tape = Tape()
    p = tape.watch_all({"a": a, "b": b})
    g = backward(ops.sum(ops.matmul(p["a"], p["b"])), tape)
    np.testing.assert_allclose(g["a"], np.ones((3, 2)) @ b.T, rtol=1e-14)
    np.testing.assert_allclose(g["b"], a.T @ np.ones((3, 2)), rtol=1e-14)
    errs = grad_check(lambda q: ops.sum(ops.matmul(q["a"], q["b"])), {"a": a, "b": b})
    assert max(errs.values()) < 1e-5


def test_backward_unused_leaf_is_zero():
    tape = Tape()
    p = tape.watch_all({"x": np.array([1.0, 2.0]), "unused": np.ones((2, 3))})
    g = backward(ops.sum(ops.mul(p["x"], p["x"])), tape)
    np.testing.assert_array_equal(g["unused"], np.zeros((2, 3)))


def test_backward_untracked_loss_raises():
    with pytest.raises(TrackingError):
        backward(Tensor(np.array(1.0)), Tape())


def test_backward_foreign_tape_raises():
    t1, t2 = Tape(), Tape()
    x = t1.watch(np.array(2.0), "x")
    with pytest.raises(TrackingError):
        backward(ops.mul(x, x), t2)


def test_backward_non_scalar_raises():
    tape = Tape()
    x = tape.watch(np.ones(3), "x")
    with pytest.raises(TrackingError):
        backward(ops.mul(x, 2.0), tape)


def test_tape_order_is_execution_order():
    tape = Tape()
    x = tape.watch(np.ones(2), "x")
    y = ops.exp(x)
    z = ops.sum(ops.mul(y, x))
    assert x.tape_id < y.tape_id < z.tape_id == len(tape) - 1


# --- gradient checks of every primitive ------------------------------------------

def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _primitive_cases(rng):
    vis = rng.random((3, 5)) < 0.7
    vis[:, 0] = True
    onehot = (rng.random((2, 3, 5)) < 0.5).astype(float)
    rows = (rng.random((2, 4)) < 0.5).astype(float)
    cos, sin = np.cos(rng.normal(size=(4, 2))), np.sin(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 5))
    targets = rng.integers(0, 5, size=3)
    cond = rng.random((3, 4)) < 0.5
    return {
        "add": (lambda p: ops.sum(ops.mul(ops.add(p["a"], p["b"]), w[:, :4])),
                {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,))}),
        "sub": (lambda p: ops.sum(ops.mul(ops.sub(p["a"], p["b"]), w[:, :4])),
                {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 1))}),
        "mul": (lambda p: ops.sum(ops.mul(p["a"], p["b"])),
                {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}),
        "div": (lambda p: ops.sum(ops.div(p["a"], p["b"])),
                {"a": rng.normal(size=(3, 4)), "b": _pos(rng, (4,))}),
        "exp_log": (lambda p: ops.sum(ops.add(ops.exp(p["a"]), ops.log(p["b"]))),
                    {"a": rng.normal(size=(3, 4)), "b": _pos(rng, (3, 4))}),
        "tanh_gelu": (lambda p: ops.sum(ops.mul(ops.tanh(p["a"]), ops.gelu(p["b"]))),
                      {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}),
        "where": (lambda p: ops.sum(ops.mul(ops.where(cond, p["a"], p["b"]), w[:, :4])),
                  {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}),
        "mean_reshape_transpose": (
            lambda p: ops.sum(ops.mul(ops.mean(ops.transpose(ops.reshape(p["a"], (2, 6)), (1, 0)), axis=1),
                                      np.arange(6.0))),
            {"a": rng.normal(size=(3, 4))}),
        "index_take_concat": (
            lambda p: ops.sum(ops.mul(ops.concat([ops.index(p["a"], (slice(0, 2),)),
                                                  ops.take(p["a"], np.array([[2, 0, 0]]))[0]], axis=0), w[:, :4][:1])),
            {"a": rng.normal(size=(3, 4))}),
        "matmul_batched": (lambda p: ops.sum(ops.mul(ops.matmul(p["a"], p["b"]), 1.5)),
                           {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(2, 4, 2))}),
        "linear": (lambda p: ops.sum(ops.tanh(ops.linear(p["x"], p["w"], p["b"]))),
                   {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 2)), "b": rng.normal(size=2)}),
        "masked_softmax": (lambda p: ops.sum(ops.mul(ops.masked_softmax(p["x"], vis), w)),
                           {"x": rng.normal(size=(3, 5))}),
        "cross_entropy": (lambda p: ops.cross_entropy(p["x"], targets), {"x": rng.normal(size=(3, 5))}),
        "layer_norm": (lambda p: ops.sum(ops.mul(ops.layer_norm(p["x"], p["g"], p["b"]), w)),
                       {"x": rng.normal(size=(3, 5)), "g": rng.normal(size=5), "b": rng.normal(size=5)}),
        "attention_scores": (lambda p: ops.sum(ops.tanh(ops.attention_scores(p["q"], p["k"], 0.7))),
                             {"q": rng.normal(size=(2, 3, 4)), "k": rng.normal(size=(2, 5, 4))}),
        "attend": (lambda p: ops.sum(ops.tanh(ops.attend(p["p"], p["v"]))),
                   {"p": rng.random((2, 3, 5)), "v": rng.normal(size=(2, 5, 4))}),
        "segment_sum": (lambda p: ops.sum(ops.tanh(ops.segment_sum(p["x"], onehot))),
                        {"x": rng.normal(size=(2, 5, 3))}),
        "query_mass": (lambda p: ops.sum(ops.tanh(ops.query_mass(p["a"], rows))),
                       {"a": rng.random((2, 3, 4, 4))}),
        "rotary": (lambda p: ops.sum(ops.mul(ops.rotary(p["x"], cos, sin), np.arange(16.0).reshape(4, 4))),
                   {"x": rng.normal(size=(4, 4))}),
    }


@pytest.mark.parametrize("seed", SEEDS)
def test_primitive_gradients_match_central_differences(seed):
    cases = _primitive_cases(np.random.default_rng(seed))
    for name, (f, params) in cases.items():
        errs = grad_check(f, params)
        assert max(errs.values()) < 1e-5, (name, errs)


# --- kernel backends --------------------------------------------------------------

def _kernel_inputs(rng):
    g, length, dh = 6, 7, 4
    x = rng.normal(size=(g * length, length))
    vis = rng.random(x.shape) < 0.7
    vis[:, 0] = True
    p = kernels.softmax_fwd(x, vis).reshape(g, length, length)
    return {
        "softmax_fwd": (x, vis),
        "softmax_bwd": (p.reshape(-1, length), rng.normal(size=(g * length, length))),
        "scores_fwd": (rng.normal(size=(g, length, dh)), rng.normal(size=(g, length, dh)), 0.5),
        "scores_bwd": (rng.normal(size=(g, length, length)), rng.normal(size=(g, length, dh)),
                       rng.normal(size=(g, length, dh)), 0.5),
        "attend_fwd": (p, rng.normal(size=(g, length, dh))),
        "attend_bwd": (rng.normal(size=(g, length, dh)), p, rng.normal(size=(g, length, dh))),
        "segment_sum_fwd": (rng.normal(size=(3, length, 5)), (rng.random((3, 2, length)) < 0.5).astype(float)),
        "query_mass_fwd": (p.reshape(3, 2, length, length), (rng.random((3, length)) < 0.4).astype(float)),
    }


@pytest.mark.skipif("cython" not in kernels.available_backends(), reason="compiled kernels not built")
@pytest.mark.parametrize("seed", SEEDS)
def test_backends_agree(seed):
    inputs = _kernel_inputs(np.random.default_rng(seed))
    for name, args in inputs.items():
        outs = {}
        for b in ("python", "cython"):
            with kernels.backend_scope(b):
                outs[b] = getattr(kernels, name)(*args)
        a, c = outs["python"], outs["cython"]
        for u, v in zip(a if isinstance(a, tuple) else (a,), c if isinstance(c, tuple) else (c,)):
            np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-14, err_msg=name)


def test_backend_switching():
    before = kernels.backend()
    with kernels.backend_scope("python"):
        assert kernels.backend() == "python"
    assert kernels.backend() == before
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_kernels_bit_identical_under_key_padding(backend):
    rng = np.random.default_rng(7)
    g, length, pad, dh = 4, 5, 3, 4
    q, k, v = (rng.normal(size=(g, length, dh)) for _ in range(3))
    kp = np.concatenate([k, rng.normal(size=(g, pad, dh))], axis=1)
    vp = np.concatenate([v, rng.normal(size=(g, pad, dh))], axis=1)
    vis = np.ones((g * length, length), bool)
    visp = np.concatenate([vis, np.zeros((g * length, pad), bool)], axis=1)
    with kernels.backend_scope(backend):
        s = kernels.scores_fwd(q, k, 0.5)
        sp = kernels.scores_fwd(q, kp, 0.5)
        np.testing.assert_array_equal(sp[:, :, :length], s)
        p = kernels.softmax_fwd(s.reshape(-1, length), vis).reshape(g, length, length)
        pp = kernels.softmax_fwd(sp.reshape(-1, length + pad), visp).reshape(g, length, length + pad)
        np.testing.assert_array_equal(pp[:, :, :length], p)
        assert np.all(pp[:, :, length:] == 0.0)
        np.testing.assert_array_equal(kernels.attend_fwd(pp, vp), kernels.attend_fwd(p, v))


def test_determinism():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 6))
    vis = rng.random((4, 6)) < 0.8
    vis[:, 0] = True
    a = ops.masked_softmax(x, vis).data
    b = ops.masked_softmax(x.copy(), vis.copy()).data
    assert a.tobytes() == b.tobytes()
