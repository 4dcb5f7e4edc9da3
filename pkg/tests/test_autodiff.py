import math
import struct
import zlib

import numpy as np
import pytest

from crossembed import autodiff as ad
from crossembed.autodiff import Adam, AdamState, Tape, Tensor, adam_step
from crossembed.autodiff.checkpoint import load_checkpoint, save_checkpoint
from crossembed.autodiff.gradcheck import check_gradients
from crossembed.errors import ContractError, DataError, NumericError, ShapeError

from oracles import adam_closed_form, gradcheck_cases

CASES = gradcheck_cases()


def leaf(x, dtype=np.float32):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=True, dtype=dtype)


def grads_of(fn, *inputs):
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    return [t.grad for t in inputs]


# --- matmul -----------------------------------------------------------------


def test_matmul_identity():
    a = np.random.default_rng(0).standard_normal((4, 3)).astype(np.float32)
    out = ad.matmul(Tensor(a), Tensor(np.eye(3, dtype=np.float32)))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_computed():
    out = Tensor([[1, 2], [3, 4]]) @ Tensor([[5, 6], [7, 8]])
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 5)))


def test_matmul_sum_gradient():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.standard_normal((3, 4)), np.float64), leaf(rng.standard_normal((4, 2)), np.float64)
    ga, gb = grads_of(lambda: (a @ b).sum(), a, b)
    np.testing.assert_allclose(ga, np.ones((3, 2)) @ b.data.T)
    np.testing.assert_allclose(gb, a.data.T @ np.ones((3, 2)))
    assert check_gradients(lambda: (a @ b).sum(), [a, b]) < 1e-3


# --- softmax / layer norm ----------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)
    out = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [1.0, 0.0])


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((50, 7)).astype(np.float32) * 5
    y = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)
    shifted = ad.softmax(Tensor(x + rng.standard_normal((50, 1)).astype(np.float32) * 10)).data
    np.testing.assert_allclose(shifted, y, atol=1e-6)


def test_layer_norm_constant_row_is_zero():
    out = ad.layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_moments_follow_affine():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((20, 64)) * 4 + 2
    gain, bias = 2.5, -0.7
    out = ad.layer_norm(Tensor(x, dtype=np.float64), Tensor(np.full(64, gain), dtype=np.float64),
                        Tensor(np.full(64, bias), dtype=np.float64)).data
    np.testing.assert_allclose(out.mean(-1), bias, atol=1e-6)
    np.testing.assert_allclose(out.std(-1), abs(gain), rtol=1e-3)


# --- embedding lookup --------------------------------------------------------


def test_embedding_lookup_examples():
    table = leaf(np.arange(10, dtype=np.float32).reshape(5, 2))
    np.testing.assert_array_equal(ad.embedding_lookup(Tensor([[1, 2]]), [0]).data, [[1, 2]])
    rows = ad.embedding_lookup(table, [3, 3]).data
    np.testing.assert_array_equal(rows[0], rows[1])
    (g,) = grads_of(lambda: ad.embedding_lookup(table, [3, 3]).sum(), table)
    expected = np.zeros((5, 2))
    expected[3] = 2
    np.testing.assert_array_equal(g, expected)


def test_embedding_lookup_out_of_range_names_id():
    with pytest.raises(IndexError, match="7"):
        ad.embedding_lookup(Tensor(np.zeros((5, 2))), [1, 7])
    with pytest.raises(IndexError, match="-1"):
        ad.embedding_lookup(Tensor(np.zeros((5, 2))), [-1])


# --- elementwise --------------------------------------------------------------


def test_elementwise_examples():
    np.testing.assert_allclose(ad.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=1e-6)
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    np.testing.assert_allclose(ad.sigmoid(Tensor([-800.0, 0.0, 800.0])).data, [0.0, 0.5, 1.0])
    np.testing.assert_allclose(ad.gelu(Tensor([0.0, 10.0, -10.0])).data, [0.0, 10.0, 0.0], atol=1e-6)


def test_l2_normalize_unit_norm_and_zero_guard():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((100, 16)).astype(np.float32) * rng.uniform(1e-3, 1e3, (100, 1)).astype(np.float32)
    np.testing.assert_allclose(np.linalg.norm(ad.l2_normalize(Tensor(x)).data, axis=-1), 1.0, atol=1e-6)
    zero = ad.l2_normalize(Tensor(np.zeros((1, 4)))).data
    assert np.all(np.isfinite(zero)) and np.all(zero == 0)


def test_broadcast_mismatch_is_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4,)))


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(20):
        fn, inputs = CASES[name](rng)
        assert check_gradients(fn, inputs) < 1e-3


# --- backward ------------------------------------------------------------------


def test_backward_examples():
    w = leaf([1.0, 2.0, 3.0])
    (g,) = grads_of(lambda: w.sum(), w)
    np.testing.assert_array_equal(g, 1.0)
    w = leaf([1.0, 2.0])
    (g,) = grads_of(lambda: (w * w).sum(), w)
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_backward_contract_errors():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = x * 2
    with pytest.raises(ContractError, match="scalar"):
        tape.backward(y)
    with pytest.raises(ContractError, match="empty"):
        Tape().backward(Tensor(1.0))


def test_backward_resets_tape_and_accumulates_leaf_grads():
    x = leaf([1.0, -2.0])
    with Tape() as tape:
        y = (x * 3).sum()
    tape.backward(y)
    assert len(tape) == 0
    with Tape() as tape:
        y = (x * 3).sum()
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_shared_subexpression_visited_once():
    x = leaf([0.5, 1.5], np.float64)
    (g,) = grads_of(lambda: (lambda h: (h * h + h).sum())(ad.tanh(x)), x)
    t = np.tanh(x.data)
    np.testing.assert_allclose(g, (2 * t + 1) * (1 - t * t))


def test_mlp_gradient_50_parameters():
    rng = np.random.default_rng(5)
    w1 = leaf(rng.standard_normal((4, 6)), np.float64)
    b1 = leaf(rng.standard_normal(6), np.float64)
    w2 = leaf(rng.standard_normal((6, 3)), np.float64)
    b2 = leaf(rng.standard_normal(3) * 0 + 0.1, np.float64)
    params = [w1, b1, w2, b2]
    assert sum(p.size for p in params) >= 50
    x = Tensor(rng.standard_normal((5, 4)), dtype=np.float64)
    y = rng.integers(0, 3, 5)

    def loss():
        h = ad.tanh(x @ w1 + b1)
        logits = h @ w2 + b2
        p = ad.softmax(logits, -1)
        return -ad.log(p[np.arange(5), y]).mean()

    assert check_gradients(loss, params) < 1e-3


def test_repeated_backward_is_bit_identical():
    rng = np.random.default_rng(6)
    w = leaf(rng.standard_normal((8, 8)))
    x = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
    results = []
    for _ in range(2):
        (g,) = grads_of(lambda: ad.gelu(ad.layer_norm(x @ w, Tensor(np.ones(8)), Tensor(np.zeros(8)))).sum(), w)
        results.append(g.copy())
    np.testing.assert_array_equal(results[0], results[1])


def test_no_tape_means_no_recording():
    x = leaf([1.0])
    y = x * 2
    assert y.requires_grad is False or y.grad is None
    with Tape() as tape:
        _ = Tensor([1.0]) * 2  # no grad inputs
    assert len(tape) == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_flags_non_finite():
    ad.set_debug(True)
    try:
        with pytest.raises(NumericError):
            ad.log(Tensor([-1.0]))
    finally:
        ad.set_debug(False)


def test_tensor_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros((2, 3))).data.size == 6


# --- adam --------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params_and_counts_step():
    p = np.array([1.0, -2.0], np.float32)
    state = AdamState(lr=1e-3)
    adam_step([p], [np.zeros(2, np.float32)], state)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_closed_form():
    p = np.array([0.0], np.float64)
    state = AdamState(lr=1e-4)
    adam_step([p], [np.array([1.0])], state)
    expected = adam_closed_form(0.0, [1.0], 1e-4)[0]
    assert p[0] == pytest.approx(expected, rel=1e-12)
    assert p[0] == pytest.approx(-1e-4, rel=1e-6)


def test_adam_trajectory_matches_closed_form():
    rng = np.random.default_rng(7)
    gs = rng.standard_normal(25)
    p = np.array([0.3])
    state = AdamState(lr=1e-2)
    for g in gs:
        adam_step([p], [np.array([g])], state)
    assert p[0] == pytest.approx(adam_closed_form(0.3, gs, 1e-2)[-1], rel=1e-10)


def test_adam_constant_gradient_descends():
    p = np.array([0.0, 0.0], np.float32)
    state = AdamState(lr=1e-2)
    for _ in range(50):
        adam_step([p], [np.array([2.0, -3.0], np.float32)], state)
    assert p[0] < 0 < p[1]


def test_adam_shape_mismatch_and_invalid_state():
    with pytest.raises(ContractError):
        adam_step([np.zeros(3)], [np.zeros(4)], AdamState())
    with pytest.raises(ValueError):
        AdamState(lr=0.0)
    with pytest.raises(ValueError):
        AdamState(beta1=1.0)


def test_adam_optimizer_respects_frozen_and_zero_lr():
    a, b = leaf([1.0]), leaf([1.0])
    opt = Adam({"a": a, "b": b}, lr=0.1)
    a.grad, b.grad = np.ones(1, np.float32), np.ones(1, np.float32)
    opt.step(frozen=frozenset({"b"}))
    assert a.data[0] < 1.0 and b.data[0] == 1.0
    opt.lr = 0.0
    before = a.data.copy()
    opt.step()
    np.testing.assert_array_equal(a.data, before)


# --- checkpoint ---------------------------------------------------------------------


def test_checkpoint_round_trip_and_determinism(tmp_path):
    rng = np.random.default_rng(8)
    params = {"w": rng.standard_normal((3, 4)).astype(np.float32),
              "a.b": rng.standard_normal(5), "ids": np.arange(4, dtype=np.int64)}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, params, {"note": "x"})
    save_checkpoint(p2, dict(reversed(list(params.items()))), {"note": "x"})
    assert p1.read_bytes() == p2.read_bytes()
    loaded, meta = load_checkpoint(p1)
    assert meta == {"note": "x"}
    for k, v in params.items():
        assert loaded[k].dtype == v.dtype
        np.testing.assert_array_equal(loaded[k], v)


def test_checkpoint_layout_is_documented(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, {"x": np.array([1.5, -2.0], np.float32)})
    raw = path.read_bytes()
    assert raw[:8] == b"XEMBCKPT"
    version, mlen = struct.unpack_from("<IQ", raw, 8)
    assert version == 1
    import json
    manifest = json.loads(raw[20:20 + mlen])
    (entry,) = manifest["tensors"]
    assert entry["name"] == "x" and entry["shape"] == [2] and entry["dtype"] == "float32"
    payload = raw[20 + mlen + entry["offset"]: 20 + mlen + entry["offset"] + entry["nbytes"]]
    np.testing.assert_array_equal(np.frombuffer(payload, "<f4"), [1.5, -2.0])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_gradcheck_detects_wrong_gradient():
    # sanity check on the checker itself: a deliberately wrong backward is caught
    from crossembed.autodiff.tensor import _make

    def bad_square(x):
        return _make(x.data**2, (x,), lambda g: (g * x.data,))  # missing factor 2

    x = leaf([1.0, 2.0], np.float64)
    assert check_gradients(lambda: bad_square(x).sum(), [x]) > 0.1
    assert math.isfinite(check_gradients(lambda: (x * x).sum(), [x]))
