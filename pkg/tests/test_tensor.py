import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bistil import tensor as T
from bistil.errors import ContractError, DimensionError, DomainError, InputError

from oracles import autodiff, central_difference, random_graph, relative_error


@pytest.mark.parametrize("kind", sorted(T.OPS))
def test_op_gradients_fp64(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    for _ in range(2):
        build, leaves = random_graph(kind, rng)
        ad = autodiff(build, leaves, np.float64)
        fd = central_difference(build, leaves)
        assert relative_error(ad, fd) < 1e-6, kind


def test_forward_op_unknown_kind():
    with pytest.raises(ContractError):
        T.forward_op("conv2d", T.Tensor(np.ones(2)))


def test_forward_op_dispatch_matches_direct_call():
    a, b = T.Tensor(np.ones((2, 3))), T.Tensor(np.arange(3.0))
    np.testing.assert_array_equal(T.forward_op("add", a, b).data, T.add(a, b).data)


def test_softmax_rows_are_distributions():
    x = T.Tensor(np.random.default_rng(0).normal(size=(4, 7)) * 30)
    y = T.softmax(x).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-5)


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 2))))


def test_broadcast_error():
    with pytest.raises(DimensionError):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4,))))


def test_empty_tensor_is_domain_error():
    with pytest.raises(DomainError):
        T.softmax(T.Tensor(np.ones((0, 3))))


def test_embed_lookup_rejects_out_of_range_ids():
    table = T.parameter(np.ones((4, 2)))
    with pytest.raises(InputError):
        T.embed_lookup(table, np.array([0, 4]))
    with pytest.raises(InputError):
        T.embed_lookup(table, np.array([0.5]))


def test_backward_needs_scalar():
    x = T.parameter(np.ones(3))
    with pytest.raises(ContractError):
        T.backward(T.mul(x, 2.0))


def test_gradients_accumulate_across_uses():
    x = T.parameter(np.array([1.0, 2.0]))
    loss = T.sum(T.add(T.mul(x, x), x))
    T.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_records_nothing():
    x = T.parameter(np.ones(3))
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_default_dtype_float32():
    assert T.parameter([1, 2]).data.dtype == np.float32
    with T.default_dtype(np.float64):
        assert T.parameter([1, 2]).data.dtype == np.float64


def test_cross_entropy_ignores_labels():
    z = T.Tensor(np.array([[2.0, 0.0], [0.0, 5.0]]))
    full = T.cross_entropy(z, np.array([0, -100])).item()
    expected = -np.log(np.exp(2) / (np.exp(2) + 1))
    assert full == pytest.approx(expected, rel=1e-6)
    assert T.cross_entropy(z, np.array([-100, -100])).item() == 0.0


def test_mse_zero_weight_is_zero():
    a = T.Tensor(np.ones((2, 2)))
    assert T.mse(a, T.Tensor(np.zeros((2, 2))), np.zeros((2, 1))).item() == 0.0


def test_gelu_is_exact_erf_form():
    from math import erf, sqrt
    xs = np.array([-2.0, -0.3, 0.0, 1.7])
    with T.default_dtype(np.float64):
        got = T.gelu(T.Tensor(xs)).data
    want = [x * 0.5 * (1 + erf(x / sqrt(2))) for x in xs]
    np.testing.assert_allclose(got, want, rtol=1e-12)


# ---------------------------------------------------------------------------
# AdamW


def _adamw_reference(p, g_seq, lr, total, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(g_seq, start=1):
        step_lr = lr * max(0.0, 1 - (t - 1) / total)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p * (1 - step_lr * wd) - step_lr * mhat / (np.sqrt(vhat) + eps)
    return p


def test_adamw_matches_reference_with_linear_decay():
    rng = np.random.default_rng(3)
    init = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(5)]
    with T.default_dtype(np.float64):
        p = T.parameter(init)
        state = T.init_optimizer({"p": p}, lr=0.1, total_steps=5, weight_decay=0.01)
        for g in grads:
            T.adamw_step({"p": p}, {"p": g}, state)
    np.testing.assert_allclose(p.data, _adamw_reference(init, grads, 0.1, 5, wd=0.01), rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_adamw_mask_leaves_masked_entries_bitwise(seed, frac):
    rng = np.random.default_rng(seed)
    init = rng.normal(size=(5, 6)).astype(np.float32)
    mask = rng.random((5, 6)) < frac
    p = T.parameter(init.copy())
    state = T.init_optimizer({"p": p}, lr=0.05, total_steps=3, weight_decay=0.1)
    for _ in range(3):
        T.adamw_step({"p": p}, {"p": rng.normal(size=(5, 6)).astype(np.float32)}, state, {"p": mask})
    assert np.array_equal(p.data[~mask].view(np.uint32), init[~mask].view(np.uint32))
    if mask.any():
        assert not np.array_equal(p.data[mask], init[mask])


def test_adamw_mask_shape_checked():
    p = T.parameter(np.ones((2, 2)))
    state = T.init_optimizer({"p": p}, 0.1, 1)
    with pytest.raises(DimensionError):
        T.adamw_step({"p": p}, {"p": np.ones((2, 2))}, state, {"p": np.ones(3, bool)})


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    one = T.softmax(T.matmul(T.Tensor(a), T.Tensor(b))).data
    two = T.softmax(T.matmul(T.Tensor(a), T.Tensor(b))).data
    assert one.tobytes() == two.tobytes()


def test_no_grad_is_per_thread():
    import threading
    a_in, b_in, a_out = threading.Event(), threading.Event(), threading.Event()

    def first():
        with T.no_grad():
            a_in.set()
            b_in.wait(5)
        a_out.set()

    def second():
        a_in.wait(5)
        with T.no_grad():
            b_in.set()
            a_out.wait(5)   # leave after the first thread has restored its state

    threads = [threading.Thread(target=first), threading.Thread(target=second)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert T.grad_enabled()
    x = T.parameter(np.ones(2))
    assert T.mul(x, x).requires_grad
