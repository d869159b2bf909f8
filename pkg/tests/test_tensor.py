import threading

import numpy as np
import pytest

from app.core import functional as F
from app.core.errors import ContractError, DimensionError, NumericalError
from app.core.gradcheck import finite_diff_check
from app.core.layers import attention_block, mlp_block
from app.core.tensor import Tensor, default_dtype, grad_enabled, no_grad, precision


def test_matmul_identity_and_hand_case():
    assert np.array_equal(F.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]])).data, [[1, 2], [3, 4]])
    assert F.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    expected = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                expected[i, j] += a[i, k] * b[k, j]
    with precision(np.float64):
        out = F.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(out, expected, rtol=1e-6)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_cases():
    np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(F.softmax(Tensor([1000.0, 1000.0, 1000.0])).data, [1 / 3] * 3, rtol=1e-6)
    with precision(np.float64):
        x = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(F.softmax(Tensor(x)).data, np.exp(x) / np.exp(x).sum(), rtol=1e-7)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_softmax_large_magnitudes_stay_normalized(dtype):
    logits = np.random.default_rng(5).normal(size=(6, 5)) * 1e4
    with precision(dtype):
        out = F.softmax(Tensor(logits)).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=1e-5)
    assert np.array_equal(out.argmax(axis=-1), logits.argmax(axis=-1))


def test_layer_norm_cases():
    gain, bias = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.allclose(F.layer_norm(Tensor(np.full((1, 4), 3.0)), gain, bias).data, 0.0)
    with precision(np.float64):
        out = F.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).data
        np.testing.assert_allclose(out, [[1.0, -1.0]], rtol=1e-9)
        x = np.random.default_rng(1).normal(size=(4, 8))
        normed = F.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.abs(normed.mean(axis=1)).max() < 1e-6
    assert np.abs(normed.var(axis=1) - 1.0).max() < 1e-4


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    F.mul(x, x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_linear_case():
    with precision(np.float64):
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        b = Tensor(np.arange(3.0) + 1.0, requires_grad=True)
        F.sum(F.mul(a, b)).backward()
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data, (2, 3)))
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        F.mul(x, 2.0).backward()


def test_construction_guards():
    with pytest.raises(NumericalError):
        Tensor([1.0, np.inf])
    with pytest.raises(DimensionError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = F.mul(x, 2.0)
    assert not y.requires_grad


def test_default_dtype_is_float32():
    assert Tensor([1.0]).data.dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64


def _hold_in_thread(context_factory):
    entered, release = threading.Event(), threading.Event()

    def worker():
        with context_factory():
            entered.set()
            release.wait(timeout=10)

    thread = threading.Thread(target=worker)
    thread.start()
    assert entered.wait(timeout=10)
    return thread, release


def test_no_grad_in_another_thread_keeps_this_thread_tracking():
    thread, release = _hold_in_thread(no_grad)
    try:
        w = Tensor([1.0, 2.0], requires_grad=True)
        y = F.mul(w, w)
        assert grad_enabled()
        assert y.requires_grad
        F.sum(y).backward()
        assert np.array_equal(w.grad, [2.0, 4.0])
    finally:
        release.set()
        thread.join()


def test_precision_in_another_thread_keeps_this_thread_dtype():
    thread, release = _hold_in_thread(lambda: precision(np.float64))
    try:
        assert default_dtype() is np.float32
        assert Tensor([1.0]).data.dtype == np.float32
    finally:
        release.set()
        thread.join()


def test_gradcheck_quadratic_form():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])

    def quadratic(p):
        x = p["x"]
        return F.sum(F.mul(F.matmul(x, Tensor(A)), x))

    assert finite_diff_check(quadratic, {"x": np.array([[0.3, -0.7]])}) < 1e-8


def test_gradcheck_softmax_cross_entropy():
    rng = np.random.default_rng(2)
    targets = np.array([0, 2, 1, 2])

    def loss(p):
        return F.cross_entropy(F.matmul(p["x"], p["w"]), targets)

    params = {"x": rng.normal(size=(4, 5)), "w": rng.normal(size=(5, 3))}
    assert finite_diff_check(loss, params) < 1e-5


def test_mlp_block_zero_weights():
    p = {"W_in": Tensor(np.zeros((3, 4))), "b_in": Tensor(np.zeros(4)),
         "W_out": Tensor(np.zeros((4, 3))), "b_out": Tensor(np.zeros(3))}
    assert np.array_equal(mlp_block(Tensor(np.ones((2, 3))), p).data, np.zeros((2, 3)))


def _attention_params(width: int, rng) -> dict:
    p = {"ln1/gain": Tensor(np.ones(width)), "ln1/bias": Tensor(np.zeros(width))}
    for name in "qkvo":
        p[f"attn/W_{name}"] = Tensor(rng.normal(size=(width, width)))
        p[f"attn/b_{name}"] = Tensor(rng.normal(size=width))
    return p


def test_attention_permutation_equivariance():
    rng = np.random.default_rng(3)
    with precision(np.float64):
        p = _attention_params(4, rng)
        x = rng.normal(size=(5, 4))
        perm = np.array([3, 0, 4, 1, 2])
        out = attention_block(Tensor(x), p, 2).data
        permuted = attention_block(Tensor(x[perm]), p, 2).data
    np.testing.assert_allclose(permuted, out[perm], rtol=1e-10, atol=1e-12)


def test_attention_single_token_is_value_path():
    rng = np.random.default_rng(4)
    with precision(np.float64):
        p = _attention_params(4, rng)
        x = rng.normal(size=(1, 4))
        normed = F.layer_norm(Tensor(x), p["ln1/gain"], p["ln1/bias"]).data
        value = normed @ p["attn/W_v"].data + p["attn/b_v"].data
        expected = x + value @ p["attn/W_o"].data + p["attn/b_o"].data
        np.testing.assert_allclose(attention_block(Tensor(x), p, 2).data, expected, rtol=1e-10)
