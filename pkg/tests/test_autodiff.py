import math

import numpy as np
import pytest

from iisan import autodiff as ad
from iisan.autodiff import Adam, Parameter, Tape, Tensor
from iisan.errors import ContractError, DimensionError


def _param(data, name, trainable=True, dtype=np.float32):
    return Parameter(Tensor(np.asarray(data, dtype=dtype)), name, trainable)


def _grad_of(build_loss, params):
    with Tape() as tape:
        loss = build_loss()
    return ad.backward(tape, loss, params)


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 3)).astype(np.float32))
    eye = Tensor(np.eye(3, dtype=np.float32))
    out = ad.matmul(eye, a)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_hand_values():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
    b = Tensor(np.array([[1.0], [1.0]], dtype=np.float32))
    out = ad.matmul(a, b)
    np.testing.assert_array_equal(out.data, np.array([[3.0], [7.0]], dtype=np.float32))


def test_matmul_shape_error_names_both_shapes():
    a = Tensor(np.zeros((2, 3), dtype=np.float32))
    b = Tensor(np.zeros((4, 2), dtype=np.float32))
    with pytest.raises(DimensionError) as exc:
        ad.matmul(a, b)
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_matmul_grad_matches_ones_times_bt():
    # d sum(a@b) / da = ones @ b^T, checked against finite differences too
    rng = np.random.default_rng(1)
    a = _param(rng.normal(size=(5, 4)), "a")
    bdata = rng.normal(size=(4, 3)).astype(np.float32)
    b = Tensor(bdata)

    grads = _grad_of(lambda: ad.sum_all(ad.matmul(a.tensor, b)), [a])
    expected = np.ones((5, 3), dtype=np.float32) @ bdata.T
    np.testing.assert_allclose(grads["a"], expected, rtol=1e-6)

    report = ad.finite_difference_check(
        [a], lambda: ad.sum_all(ad.matmul(a.tensor, b)), step=1e-3, tolerance=1e-3)
    assert report.passed, report.per_param


def test_sigmoid_at_zero():
    out = ad.sigmoid(Tensor(np.zeros((), dtype=np.float32)))
    assert out.item() == pytest.approx(0.5)


def test_layernorm_constant_vector_yields_offset():
    x = Tensor(np.full((6,), 3.25, dtype=np.float32))
    gain = Tensor(np.full((6,), 2.0, dtype=np.float32))
    offset = Tensor(np.arange(6, dtype=np.float32))
    out = ad.layernorm(x, gain, offset)
    np.testing.assert_allclose(out.data, offset.data, atol=1e-5)


def test_gelu_gradient_vs_finite_differences():
    rng = np.random.default_rng(2)
    x = _param(rng.normal(size=(100,)) * 2.0, "x")
    report = ad.finite_difference_check(
        [x], lambda: ad.sum_all(ad.gelu(x.tensor)), step=1e-3, tolerance=1e-3)
    assert report.passed, report.per_param


def test_elementwise_dispatch_and_broadcast_rules():
    a = Tensor(np.ones((2, 2), dtype=np.float32))
    s = Tensor(np.asarray(2.0, dtype=np.float32))
    np.testing.assert_array_equal(ad.elementwise("add", a, s).data, np.full((2, 2), 3.0, np.float32))
    np.testing.assert_array_equal(ad.elementwise("mul", a, s).data, np.full((2, 2), 2.0, np.float32))
    with pytest.raises(DimensionError):
        ad.add(a, Tensor(np.ones((3,), dtype=np.float32)))
    with pytest.raises(ContractError):
        ad.elementwise("pow", a, s)


def test_backward_simple_square():
    w = _param([3.0], "w")
    grads = _grad_of(lambda: ad.sum_all(ad.mul(w.tensor, w.tensor)), [w])
    np.testing.assert_allclose(grads["w"], [6.0], rtol=1e-6)


def test_backward_frozen_param_absent():
    w = _param([2.0], "w")
    frozen = _param([4.0], "frozen", trainable=False)
    grads = _grad_of(lambda: ad.sum_all(ad.mul(w.tensor, frozen.tensor)), [w, frozen])
    assert "frozen" not in grads
    np.testing.assert_allclose(grads["w"], [4.0], rtol=1e-6)


def test_backward_unreachable_trainable_is_zero():
    w = _param([2.0], "w")
    unused = _param([5.0], "unused")
    grads = _grad_of(lambda: ad.sum_all(ad.mul(w.tensor, w.tensor)), [w, unused])
    np.testing.assert_array_equal(grads["unused"], [0.0])


def test_backward_rejects_non_scalar_loss():
    w = _param([1.0, 2.0], "w")
    with pytest.raises(ContractError):
        with Tape() as tape:
            loss = ad.mul(w.tensor, w.tensor)
        ad.backward(tape, loss, [w])


def test_gradient_accumulates_for_shared_input():
    # f(x) = x + x  =>  df/dx = 2
    x = _param([1.5], "x")
    grads = _grad_of(lambda: ad.sum_all(ad.add(x.tensor, x.tensor)), [x])
    np.testing.assert_allclose(grads["x"], [2.0], rtol=1e-6)


def test_determinism_bit_identical_runs():
    def run():
        rng = np.random.default_rng(42)
        w = _param(rng.normal(size=(4, 4)), "w")
        x = Tensor(rng.normal(size=(4, 4)).astype(np.float32))
        grads = _grad_of(lambda: ad.sum_all(ad.gelu(ad.matmul(x, w.tensor))), [w])
        return grads["w"].tobytes()

    assert run() == run()


def test_take_rows_scatter_adds_repeats():
    table = _param(np.arange(8, dtype=np.float32).reshape(4, 2), "table")
    grads = _grad_of(lambda: ad.sum_all(ad.take_rows(table.tensor, [1, 1, 3])), [table])
    expected = np.zeros((4, 2), dtype=np.float32)
    expected[1] = 2.0
    expected[3] = 1.0
    np.testing.assert_array_equal(grads["table"], expected)


def test_slice_and_concat_roundtrip_gradients():
    x = _param(np.arange(12, dtype=np.float32).reshape(3, 4), "x")

    def loss_fn():
        left = ad.slice_cols(x.tensor, 0, 2)
        right = ad.slice_cols(x.tensor, 2, 4)
        return ad.sum_all(ad.concat_cols([right, left]))

    grads = _grad_of(loss_fn, [x])
    np.testing.assert_array_equal(grads["x"], np.ones((3, 4), dtype=np.float32))


def test_softmax_rows_and_gradient():
    rng = np.random.default_rng(3)
    x = _param(rng.normal(size=(5, 7)), "x")
    y = ad.softmax_rows(x.tensor)
    np.testing.assert_allclose(y.data.sum(axis=1), np.ones(5), rtol=1e-5)
    report = ad.finite_difference_check(
        [x], lambda: ad.sum_all(ad.mul(ad.softmax_rows(x.tensor), x.tensor)),
        step=1e-3, tolerance=1e-3)
    assert report.passed, report.per_param


def test_masked_ce_gradient_vs_finite_differences():
    rng = np.random.default_rng(4)
    logits = _param(rng.normal(size=(3, 6)), "logits")
    allowed = rng.uniform(size=(3, 6)) > 0.3
    positives = np.array([0, 2, 5])
    allowed[np.arange(3), positives] = True

    report = ad.finite_difference_check(
        [logits], lambda: ad.masked_softmax_ce(logits.tensor, allowed, positives),
        step=1e-3, tolerance=1e-3)
    assert report.passed, report.per_param


def test_finite_difference_check_linear_model():
    rng = np.random.default_rng(5)
    w = _param(rng.uniform(-1.0, 1.0, size=(8,)), "w")
    x = Tensor(rng.uniform(0.5, 1.5, size=(8,)).astype(np.float32))
    report = ad.finite_difference_check(
        [w], lambda: ad.sum_all(ad.mul(w.tensor, x)), step=1e-3, tolerance=1e-3)
    assert report.max_rel_err < 1e-4, report.per_param


def test_finite_difference_check_empty_model():
    report = ad.finite_difference_check([], lambda: Tensor(np.asarray(0.0)))
    assert report.per_param == {}
    assert report.passed


def test_gate_gradient_at_raw_zero():
    # loss = sigmoid(raw) * c at raw=0 has gradient 0.25 * c
    raw = _param(np.asarray(0.0), "raw")
    c = 3.0
    grads = _grad_of(lambda: ad.mul(ad.sigmoid(raw.tensor), c), [raw])
    assert float(grads["raw"]) == pytest.approx(0.25 * c, rel=1e-6)
    report = ad.finite_difference_check(
        [raw], lambda: ad.mul(ad.sigmoid(raw.tensor), c), step=1e-3, tolerance=1e-3)
    assert report.passed


def test_float64_mode_tighter_tolerance():
    rng = np.random.default_rng(6)
    w = _param(rng.normal(size=(6, 3)), "w", dtype=np.float64)
    x = Tensor(rng.normal(size=(4, 6)), dtype=np.float64)

    def loss_fn():
        return ad.sum_all(ad.gelu(ad.matmul(x, w.tensor)))

    report = ad.finite_difference_check([w], loss_fn, step=1e-6, tolerance=1e-5)
    assert report.passed, report.per_param


def test_adam_zero_lr_keeps_parameters():
    w = _param([1.0, -2.0], "w")
    before = w.data.copy()
    opt = Adam([w], lr=0.0)
    opt.step({"w": np.array([0.5, 0.5], dtype=np.float32)})
    np.testing.assert_array_equal(w.data, before)


def test_adam_moves_against_gradient():
    w = _param([1.0], "w")
    opt = Adam([w], lr=0.1)
    opt.step({"w": np.array([1.0], dtype=np.float32)})
    assert float(w.data[0]) < 1.0


def test_all_values_finite_after_ops():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(9, 8)).astype(np.float32) * 10.0)
    gain = Tensor(np.ones(8, dtype=np.float32))
    offset = Tensor(np.zeros(8, dtype=np.float32))
    for out in (ad.gelu(x), ad.sigmoid(x), ad.layernorm(x, gain, offset), ad.softmax_rows(x)):
        assert np.isfinite(out.data).all()


def test_tape_scopes_label_entries():
    w = _param([2.0], "w")
    with Tape() as tape:
        with ad.scope("backbone"):
            hidden = ad.mul(w.tensor, w.tensor)
        loss = ad.sum_all(hidden)
    assert [e.scope for e in tape.entries] == ["backbone", ""]
    assert len(tape.entries_in_scope("backbone")) == 1
