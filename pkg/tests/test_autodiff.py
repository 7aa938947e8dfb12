import math

import numpy as np
import pytest

from dppn import autodiff as ad
from reference import ref_cross_entropy, ref_softmax_cols


def grad_of(node):
    return node.grad if node.grad is not None else np.zeros_like(node.value)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(np.eye(2), a)
    assert np.array_equal(out.value, a)


def test_matmul_hand_value():
    # hand-computed 2x2 product
    out = ad.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(out.value, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_zero_annihilates():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    out = ad.matmul(a, np.zeros((4, 2)))
    assert np.array_equal(out.value, np.zeros((3, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_vjp_rule():
    rng = np.random.default_rng(1)
    a, b = ad.leaf(rng.normal(size=(3, 4))), ad.leaf(rng.normal(size=(4, 2)))
    loss = ad.sq_l2(ad.matmul(a, b), np.zeros((3, 2)))
    ad.backward(loss)
    g_out = 2.0 * (a.value @ b.value)
    assert np.allclose(a.grad, g_out @ b.value.T)
    assert np.allclose(b.grad, a.value.T @ g_out)


# ---------------------------------------------------------------------------
# softmax_cols


def test_softmax_cols_uniform_on_zeros():
    out = ad.softmax_cols(np.zeros((4, 2)))
    assert np.allclose(out.value, 0.25)


def test_softmax_cols_shift_invariant():
    for x in (-3.0, 0.0, 7.5):
        out = ad.softmax_cols(np.array([[x], [x]]))
        assert np.allclose(out.value, 0.5)


def test_softmax_cols_hand_value():
    out = ad.softmax_cols(np.array([[0.0], [math.log(3.0)]]))
    assert np.allclose(out.value, [[0.25], [0.75]])


def test_softmax_cols_columns_sum_to_one():
    rng = np.random.default_rng(2)
    for _ in range(25):
        m = rng.integers(1, 12)
        n = rng.integers(1, 12)
        out = ad.softmax_cols(rng.normal(scale=5.0, size=(m, n)))
        assert np.all(np.abs(out.value.sum(axis=0) - 1.0) < 1e-9)
        assert np.all(out.value > 0.0) and np.all(out.value < 1.0 + 1e-15)


def test_softmax_cols_stable_for_huge_logits():
    out = ad.softmax_cols(np.array([[1e6], [0.0]]))
    assert np.isfinite(out.value).all()
    assert out.value[0, 0] == pytest.approx(1.0)


def test_softmax_cols_matches_reference():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 7))
    assert np.allclose(ad.softmax_cols(a).value, ref_softmax_cols(a))


# ---------------------------------------------------------------------------
# concat_cols / col / stack_cols


def test_concat_cols_definition():
    out = ad.concat_cols([np.array([[1.0], [2.0]]), np.array([[3.0], [4.0]])])
    assert np.array_equal(out.value, [[1.0], [2.0], [3.0], [4.0]])


def test_concat_cols_single_part_identity():
    part = np.array([[5.0], [6.0]])
    assert np.array_equal(ad.concat_cols([part]).value, part)


def test_concat_cols_extent_is_parts_times_dim():
    # 312 parts of extent 8 -> 2496, the kind of size the full model uses
    parts = [np.full((8, 1), float(i)) for i in range(312)]
    assert ad.concat_cols(parts).value.shape == (2496, 1)


def test_concat_cols_rejects_empty_and_ragged():
    with pytest.raises(ad.DimensionError):
        ad.concat_cols([])
    with pytest.raises(ad.DimensionError):
        ad.concat_cols([np.ones((2, 1)), np.ones((3, 1))])


def test_concat_then_slice_gradient_is_identity():
    rng = np.random.default_rng(4)
    parts = [ad.leaf(rng.normal(size=(3, 1))) for _ in range(4)]
    target = rng.normal(size=(12, 1))
    loss = ad.sq_l2(ad.concat_cols(parts), target)
    ad.backward(loss)
    full = 2.0 * (np.concatenate([p.value for p in parts]) - target)
    for i, p in enumerate(parts):
        assert np.allclose(p.grad, full[3 * i:3 * (i + 1)])


def test_stack_cols_equals_concat_of_columns():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(4, 6))
    via_concat = ad.concat_cols([a[:, i:i + 1] for i in range(6)])
    assert np.array_equal(ad.stack_cols(a).value, via_concat.value)


def test_col_extracts_and_scatters():
    rng = np.random.default_rng(6)
    a = ad.leaf(rng.normal(size=(3, 4)))
    loss = ad.sq_l2(ad.col(a, 2), np.zeros((3, 1)))
    ad.backward(loss)
    expected = np.zeros((3, 4))
    expected[:, 2] = 2.0 * a.value[:, 2]
    assert np.allclose(a.grad, expected)


# ---------------------------------------------------------------------------
# pointwise ops


def test_relu_values_and_grad_at_zero():
    x = ad.leaf(np.array([[-1.0], [0.0], [2.0]]))
    out = ad.relu(x)
    assert np.array_equal(out.value, [[0.0], [0.0], [2.0]])
    ad.backward(ad.sq_l2(out, np.full((3, 1), -1.0)))
    # gradient at the kink is defined as 0
    assert x.grad[1, 0] == 0.0
    assert x.grad[0, 0] == 0.0
    assert x.grad[2, 0] != 0.0


def test_sigmoid_midpoint_and_saturation():
    out = ad.sigmoid(np.array([[0.0], [800.0], [-800.0]]))
    assert out.value[0, 0] == pytest.approx(0.5)
    assert out.value[1, 0] == pytest.approx(1.0)
    assert out.value[2, 0] == pytest.approx(0.0)
    assert np.isfinite(out.value).all()


def test_mul_by_ones_is_identity():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(2, 5))
    assert np.array_equal(ad.mul(a, np.ones((2, 5))).value, a)


def test_binary_ops_reject_shape_mismatch():
    for op in (ad.add, ad.mul, ad.sq_l2):
        with pytest.raises(ad.DimensionError, match=r"\(2, 2\).*\(2, 3\)"):
            op(np.ones((2, 2)), np.ones((2, 3)))


def test_scale_rejects_nonfinite_factor():
    with pytest.raises(ValueError):
        ad.scale(np.ones((2, 2)), float("inf"))


# ---------------------------------------------------------------------------
# sq_l2 / cross entropy


def test_sq_l2_identity_and_hand_value():
    a = np.array([[1.0], [2.0]])
    assert float(ad.sq_l2(a, a).value) == 0.0
    assert float(ad.sq_l2(np.array([[0.0], [0.0]]), np.array([[3.0], [4.0]])).value) == 25.0


def test_sq_l2_symmetric():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert float(ad.sq_l2(a, b).value) == pytest.approx(float(ad.sq_l2(b, a).value))


def test_cross_entropy_uniform_logits():
    for n in (2, 5, 11):
        out = ad.cross_entropy_logits(np.zeros((n, 1)), 0)
        assert float(out.value) == pytest.approx(math.log(n))


def test_cross_entropy_dominant_logit():
    logits = np.zeros((4, 1))
    logits[1, 0] = 1e6
    assert float(ad.cross_entropy_logits(logits, 1).value) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_hand_value():
    # lse([1,2,3]) - 3 = log(e^-2 + e^-1 + 1) = 0.40760596444438...
    out = ad.cross_entropy_logits(np.array([[1.0], [2.0], [3.0]]), 2)
    assert float(out.value) == pytest.approx(0.40760596444438, abs=1e-11)


def test_cross_entropy_matches_reference_oracle():
    rng = np.random.default_rng(9)
    for _ in range(10):
        logits = rng.normal(scale=3.0, size=(6, 1))
        t = int(rng.integers(6))
        got = float(ad.cross_entropy_logits(logits, t).value)
        assert got == pytest.approx(ref_cross_entropy(logits, t), rel=1e-12)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        ad.cross_entropy_logits(np.zeros((3, 1)), 3)


# ---------------------------------------------------------------------------
# backward


def test_backward_analytic_derivative():
    w = ad.leaf(np.array([[3.0]]))
    ad.backward(ad.sq_l2(w, np.zeros((1, 1))))
    assert np.allclose(w.grad, [[6.0]])


def test_backward_unused_parameter_has_zero_gradient():
    w = ad.leaf(np.ones((2, 2)))
    unused = ad.leaf(np.ones((2, 2)))
    ad.backward(ad.sq_l2(w, np.zeros((2, 2))))
    assert unused.grad is None
    assert np.array_equal(grad_of(unused), np.zeros((2, 2)))


def test_backward_accumulates_over_paths():
    rng = np.random.default_rng(10)
    w = ad.leaf(rng.normal(size=(3, 1)))
    t1, t2 = rng.normal(size=(3, 1)), rng.normal(size=(3, 1))
    # two separate paths from w into the loss
    loss = ad.add(ad.sq_l2(w, t1), ad.sq_l2(w, t2))
    ad.backward(loss)
    assert np.allclose(w.grad, 2.0 * (w.value - t1) + 2.0 * (w.value - t2))


def test_backward_rejects_nonscalar_loss():
    with pytest.raises(ad.DimensionError):
        ad.backward(ad.add(np.ones((2, 1)), np.ones((2, 1))))


def test_nonfinite_inputs_rejected():
    with pytest.raises(ValueError):
        ad.leaf(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        ad.leaf(np.array([[np.inf], [1.0]]))


def test_zero_extent_rejected():
    with pytest.raises(ad.DimensionError):
        ad.leaf(np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_keeps_param_bit_identical():
    rng = np.random.default_rng(11)
    p = rng.normal(size=(4, 3))
    state = ad.AdamState(p.shape, lr=1e-2)
    out = ad.adam_step(p, np.zeros_like(p), state)
    assert np.array_equal(out, p)
    out2 = ad.adam_step(out, np.zeros_like(p), state)
    assert np.array_equal(out2, p)


def test_adam_first_step_moves_by_lr_sign():
    p = np.zeros((2, 2))
    g = np.array([[1.0, -2.0], [0.5, -0.25]])
    state = ad.AdamState(p.shape, lr=2e-4)
    out = ad.adam_step(p, g, state)
    # bias corrections cancel at step 1: delta = -lr * g / (|g| + eps)
    assert np.allclose(out, -2e-4 * np.sign(g), atol=1e-9)


def test_adam_step_counter_increments():
    state = ad.AdamState((2,), lr=1e-3)
    state.step = 5
    ad.adam_step(np.zeros(2), np.ones(2), state)
    assert state.step == 6


def test_adam_shape_mismatch():
    state = ad.AdamState((2, 2))
    with pytest.raises(ad.DimensionError):
        ad.adam_step(np.zeros((2, 2)), np.zeros((3, 2)), state)


# ---------------------------------------------------------------------------
# finite differences


def test_finite_diff_quadratic_is_tight():
    rng = np.random.default_rng(12)
    at = rng.normal(size=(3, 2))
    err = ad.finite_diff_check(lambda x: ad.sq_l2(x, np.ones((3, 2))), at)
    assert err < 1e-8


def test_finite_diff_softmax_composite():
    rng = np.random.default_rng(13)
    at = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 3))
    err = ad.finite_diff_check(lambda x: ad.sq_l2(ad.softmax_cols(x), target), at)
    assert err < 1e-5


def test_finite_diff_relu_away_from_kink():
    rng = np.random.default_rng(14)
    at = rng.normal(size=(5, 2))
    at[np.abs(at) < 0.1] = 0.5  # keep every entry clear of the kink
    target = rng.normal(size=(5, 2))
    err = ad.finite_diff_check(lambda x: ad.sq_l2(ad.relu(x), target), at)
    assert err < 1e-6


@pytest.mark.parametrize("name", ["matmul_l", "matmul_r", "transpose", "stack", "sum", "max",
                                  "sigmoid", "mul", "scale", "concat", "col", "xent", "mean"])
def test_finite_diff_per_op(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    other = rng.normal(size=(4, 3))
    right = rng.normal(size=(5, 3))
    left = rng.normal(size=(4, 5))
    target43 = rng.normal(size=(4, 3))
    target41 = rng.normal(size=(4, 1))
    target121 = rng.normal(size=(12, 1))
    target81 = rng.normal(size=(8, 1))
    fns = {
        "matmul_l": ((4, 5), lambda x: ad.sq_l2(ad.matmul(x, right), target43)),
        "matmul_r": ((5, 3), lambda x: ad.sq_l2(ad.matmul(left, x), target43)),
        "transpose": ((3, 4), lambda x: ad.sq_l2(ad.transpose(x), target43)),
        "stack": ((4, 3), lambda x: ad.sq_l2(ad.stack_cols(x), target121)),
        "sum": ((4, 3), lambda x: ad.sq_l2(ad.sum_cols(x), target41)),
        "max": ((4, 3), lambda x: ad.sq_l2(ad.max_cols(x), target41)),
        "sigmoid": ((4, 3), lambda x: ad.sq_l2(ad.sigmoid(x), target43)),
        "mul": ((4, 3), lambda x: ad.sq_l2(ad.mul(x, other), target43)),
        "scale": ((4, 3), lambda x: ad.sq_l2(ad.scale(x, -1.7), target43)),
        "concat": ((4, 1), lambda x: ad.sq_l2(ad.concat_cols([x, ad.scale(x, 2.0)]),
                                              target81)),
        "col": ((4, 3), lambda x: ad.sq_l2(ad.col(x, 1), target41)),
        "xent": ((6, 1), lambda x: ad.cross_entropy_logits(x, 2)),
        "mean": ((4, 3), lambda x: ad.sq_l2(ad.mean_cols(x), target41)),
    }
    shape, fn = fns[name]
    assert ad.finite_diff_check(fn, rng.normal(size=shape)) < 1e-6


def test_finite_diff_rejects_bad_h():
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda x: ad.sq_l2(x, np.zeros((2, 1))), np.ones((2, 1)), h=0.0)


def test_affine_cols_broadcasts_bias():
    rng = np.random.default_rng(15)
    w, x, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(3, 1))
    target = rng.normal(size=(3, 5))
    out = ad.affine_cols(w, x, b)
    assert np.allclose(out.value, w @ x + b)
    err = ad.finite_diff_check(lambda p: ad.sq_l2(ad.affine_cols(w, p, b), target), x)
    assert err < 1e-6
