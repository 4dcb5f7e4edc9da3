import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from crossembed.autodiff import Tape, Tensor, l2_normalize
from crossembed.autodiff.gradcheck import check_gradients
from crossembed.errors import ConfigError, ShapeError
from crossembed.loss import (LossConfig, hard_negative_indices, mh_loss, mh_loss_from_similarity,
                             similarity_matrix)

from oracles import hard_negatives_scan, mh_loss_double_loop


def unit_rows(rng, b, d, dtype=np.float64):
    x = rng.standard_normal((b, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(dtype)


def test_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(margin=-0.1)
    with pytest.raises(ConfigError):
        LossConfig(reduction="max")


# --- similarity --------------------------------------------------------------------


def test_similarity_examples():
    eye = np.eye(4)
    np.testing.assert_array_equal(similarity_matrix(Tensor(eye), Tensor(eye)).data, eye)
    rng = np.random.default_rng(0)
    a, b = unit_rows(rng, 3, 5), unit_rows(rng, 3, 5)
    S = similarity_matrix(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    naive = [[sum(a[k, i] * b[j, i] for i in range(5)) for j in range(3)] for k in range(3)]
    np.testing.assert_allclose(S, naive, atol=1e-12)
    big = unit_rows(rng, 64, 16, np.float32)
    assert np.abs(similarity_matrix(Tensor(big), Tensor(big[::-1].copy())).data).max() <= 1 + 1e-5
    with pytest.raises(ShapeError):
        similarity_matrix(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 5))))


# --- hard negatives ---------------------------------------------------------------------


def test_hard_negative_examples():
    S = np.eye(3)
    S[0, 2] = 0.5
    i2t, t2i = hard_negative_indices(S)
    assert i2t[0] == 2
    S = np.full((4, 4), 0.3) + np.eye(4)
    i2t, t2i = hard_negative_indices(S)
    assert i2t.tolist() == [1, 0, 0, 0] and t2i.tolist() == [1, 0, 0, 0]
    single = hard_negative_indices(np.ones((1, 1)))
    assert single[0].tolist() == [-1] and single[1].tolist() == [-1]


def test_hard_negatives_match_scan():
    rng = np.random.default_rng(1)
    for trial in range(200):
        S = rng.standard_normal((8, 8))
        if trial % 3 == 0:
            S = np.round(S, 1)  # plenty of ties
        mask = rng.random((8, 8)) < 0.2 if trial % 2 else None
        i2t, t2i = hard_negative_indices(S, mask)
        rows, cols = hard_negatives_scan(S, mask)
        assert i2t.tolist() == rows and t2i.tolist() == cols


# --- loss values --------------------------------------------------------------------------


def test_single_pair_loss_is_zero():
    x = Tensor(unit_rows(np.random.default_rng(2), 1, 4))
    assert float(mh_loss(x, x).data) == 0.0


def test_orthonormal_positives_give_zero():
    eye = Tensor(np.eye(6, dtype=np.float32))
    assert float(mh_loss(eye, eye, LossConfig(margin=0.2)).data) == 0.0


def test_matches_double_loop_oracle():
    rng = np.random.default_rng(3)
    for trial in range(200):
        B = int(rng.integers(1, 17))
        img, txt = unit_rows(rng, B, 8, np.float32), unit_rows(rng, B, 8, np.float32)
        mask = (rng.random((B, B)) < 0.15) if trial % 4 == 0 else None
        cfg = LossConfig(margin=float(rng.uniform(0, 0.5)), duplicate_mask=mask)
        got = float(mh_loss(Tensor(img), Tensor(txt), cfg).data)
        assert got == pytest.approx(mh_loss_double_loop(img @ txt.T, cfg.margin, mask), abs=1e-5)


def test_mean_reduction_divides_by_batch():
    rng = np.random.default_rng(4)
    img, txt = Tensor(unit_rows(rng, 7, 5)), Tensor(unit_rows(rng, 7, 5))
    total = float(mh_loss(img, txt).data)
    mean = float(mh_loss(img, txt, LossConfig(reduction="mean")).data)
    assert mean == pytest.approx(total / 7, rel=1e-12)


def test_all_masked_row_contributes_zero_and_diagonal_always_excluded():
    S = np.array([[0.9, 0.8, 0.1], [0.2, 0.5, 0.4], [0.0, 0.3, 0.6]])
    mask = np.zeros((3, 3), bool)
    mask[0, 1] = mask[0, 2] = True  # row 0 has no eligible negative
    got = float(mh_loss_from_similarity(Tensor(S, dtype=np.float64), LossConfig(0.2, mask)).data)
    assert got == pytest.approx(mh_loss_double_loop(S, 0.2, mask), abs=1e-12)
    i2t, _ = hard_negative_indices(S, mask)
    assert i2t[0] == -1
    # a mask that tries to re-enable the diagonal changes nothing
    diag_false = np.zeros((3, 3), bool)
    assert float(mh_loss_from_similarity(Tensor(S), LossConfig(0.2, diag_false)).data) == \
        float(mh_loss_from_similarity(Tensor(S), LossConfig(0.2)).data)


def test_symmetry_under_swapped_towers():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a, b = Tensor(unit_rows(rng, 9, 6)), Tensor(unit_rows(rng, 9, 6))
        m = rng.random((9, 9)) < 0.2
        m = m | m.T
        cfg = LossConfig(0.2, m)
        assert float(mh_loss(a, b, cfg).data) == pytest.approx(float(mh_loss(b, a, cfg).data), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 10), st.just(4)),
                  elements=st.floats(-1, 1, allow_nan=False)),
       st.floats(0, 1))
def test_loss_non_negative(raw, margin):
    x = raw + 1e-3
    S = Tensor(x @ x[::-1].T, dtype=np.float64)
    assert float(mh_loss_from_similarity(S, LossConfig(margin)).data) >= 0


def test_zero_iff_margin_satisfied():
    # binary-exact values so the margin comparison is exact in float32
    S = np.array([[1.0, 0.75, 0.5], [0.25, 1.0, 0.5], [0.125, 0.25, 1.0]])
    assert float(mh_loss_from_similarity(Tensor(S), LossConfig(0.25)).data) == 0.0
    S[1, 2] = 0.875  # now within the margin of row 1's positive and column 2's positive
    assert float(mh_loss_from_similarity(Tensor(S), LossConfig(0.25)).data) > 0.0


# --- gradients -------------------------------------------------------------------------------


def test_gradient_only_on_diagonal_and_hard_negatives():
    rng = np.random.default_rng(6)
    S = Tensor(rng.uniform(-1, 1, (6, 6)), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        loss = mh_loss_from_similarity(S, LossConfig(margin=2.0))  # every hinge active
    tape.backward(loss)
    i2t, t2i = hard_negative_indices(S.data)
    expected = np.zeros((6, 6))
    for k in range(6):
        expected[k, i2t[k]] += 1
        expected[t2i[k], k] += 1
        expected[k, k] -= 2
    np.testing.assert_array_equal(S.grad, expected)


def test_hinge_kink_takes_active_branch():
    # 0.75 - 1 + 0.25 == 0 exactly, for row 0 and for column 1
    S = Tensor(np.array([[1.0, 0.75], [0.0, 1.0]]), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        loss = mh_loss_from_similarity(S, LossConfig(margin=0.25))
    tape.backward(loss)
    assert float(loss.data) == 0.0
    np.testing.assert_array_equal(S.grad, [[-1.0, 2.0], [0.0, -1.0]])


def test_finite_difference_wrt_embeddings():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 20:
        raw_i = Tensor(rng.standard_normal((5, 4)), requires_grad=True, dtype=np.float64)
        raw_t = Tensor(rng.standard_normal((5, 4)), requires_grad=True, dtype=np.float64)

        def f():
            return mh_loss(l2_normalize(raw_i), l2_normalize(raw_t), LossConfig(margin=0.5))

        S = l2_normalize(raw_i).data @ l2_normalize(raw_t).data.T
        off = S + np.where(np.eye(5, dtype=bool), -np.inf, 0)
        top2 = np.sort(off, axis=1)[:, -2:]
        top2c = np.sort(off, axis=0)[-2:, :]
        hinge_args = np.concatenate([off.max(1) - np.diag(S), off.max(0) - np.diag(S)]) + 0.5
        stable = (np.min(top2[:, 1] - top2[:, 0]) > 1e-2 and np.min(top2c[1] - top2c[0]) > 1e-2
                  and np.min(np.abs(hinge_args)) > 1e-2)
        if not stable:
            continue
        assert check_gradients(f, [raw_i, raw_t]) < 1e-3
        checked += 1
