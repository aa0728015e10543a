"""Autodiff engine: op gradients against finite differences, graph semantics,
and the binary tensor container."""

import io

import numpy as np
import pytest

from semtok import engine as E
from semtok.engine import Parameter, Tensor, no_grad


def test_add_mul_scalar_chain():
    a = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    b = Tensor(np.array([3.0, 5.0]), requires_grad=True)
    out = ((a + b) * a).sum()
    out.backward()
    # d/da (a^2 + ab) = 2a + b, d/db = a
    np.testing.assert_allclose(a.grad, [7.0, 3.0])
    np.testing.assert_allclose(b.grad, [2.0, -1.0])


def test_pow_square_at_three():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x ** 2.0
    y.backward()
    assert y.item() == 9.0
    assert x.grad == pytest.approx(6.0)


def test_matmul_grad_shapes():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((3, 4)), requires_grad=True)
    (a @ b).sum().backward()
    assert a.grad.shape == (2, 3)
    assert b.grad.shape == (3, 4)
    np.testing.assert_allclose(a.grad, 4.0)
    np.testing.assert_allclose(b.grad, 2.0)


def test_broadcast_unbroadcast_roundtrip():
    a = Tensor(np.ones((2, 1, 4)), requires_grad=True)
    b = Tensor(np.ones((3, 1)), requires_grad=True)
    (a + b).sum().backward()
    assert a.grad.shape == (2, 1, 4)
    assert b.grad.shape == (3, 1)
    np.testing.assert_allclose(a.grad, 3.0)
    np.testing.assert_allclose(b.grad, 8.0)


def test_getitem_scatter_accumulates():
    a = Tensor(np.arange(4.0), requires_grad=True)
    idx = np.array([1, 1, 3])
    E.getitem(a, idx).sum().backward()
    np.testing.assert_allclose(a.grad, [0.0, 2.0, 0.0, 1.0])


def test_masked_softmax_exact_zeros():
    logits = Tensor(np.array([[1.0, 2.0, 3.0]]))
    mask = np.array([[True, False, True]])
    out = E.masked_softmax(logits, mask)
    assert out.data[0, 1] == 0.0
    assert out.data[0].sum() == pytest.approx(1.0)


def test_softmax_two_key_oracle():
    # row [ln 2, 0] -> [2/3, 1/3]
    row = Tensor(np.array([[np.log(2.0), 0.0]]))
    out = E.masked_softmax(row, np.array([[True, True]]))
    np.testing.assert_allclose(out.data, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-12)


def test_no_grad_builds_no_graph():
    a = Tensor(np.array([1.0]), requires_grad=True)
    with no_grad():
        out = (a * a).sum()
    assert out._backward is None
    assert not out.requires_grad


def test_requires_grad_snapshot_at_build_time():
    # freezing after the graph is built must not stop accumulation, and
    # freezing before must stop it; the decision is taken when the node is made
    p = Parameter(np.array([2.0]))
    p.requires_grad = False
    out = (p * p).sum()
    p.requires_grad = True
    out.backward()
    np.testing.assert_allclose(p.grad, 0.0)

    q = Parameter(np.array([2.0]))
    out = (q * q).sum()
    q.requires_grad = False
    out.backward()
    np.testing.assert_allclose(q.grad, 4.0)


def test_backward_frees_interior_grads_keeps_leaves():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    mid = a * 3.0
    out = mid.sum()
    out.backward()
    assert a.grad is not None
    assert mid.grad is None


@pytest.mark.parametrize("op", ["exp", "log", "sqrt", "tanh", "sigmoid", "gelu"])
def test_unary_grad_matches_fd(op):
    rng = np.random.default_rng(3)
    x = np.abs(rng.normal(size=(3, 4))) + 0.5  # positive domain covers log/sqrt

    def build(ts):
        return getattr(E, op)(ts[0]).sum()

    rep = E.grad_check(build, [x])
    assert rep["ok"], rep


def test_layer_norm_grad_matches_fd():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 6))
    gamma = rng.normal(size=6)
    beta = rng.normal(size=6)

    def build(ts):
        return E.layer_norm(ts[0], ts[1], ts[2]).sum()

    rep = E.grad_check(build, [x, gamma, beta])
    assert rep["ok"], rep


def test_masked_attention_grad_matches_fd():
    rng = np.random.default_rng(9)
    q = rng.normal(size=(1, 2, 3, 4))
    k = rng.normal(size=(1, 2, 5, 4))
    v = rng.normal(size=(1, 2, 5, 4))
    mask = np.ones((1, 1, 3, 5), dtype=bool)
    mask[0, 0, 1, 3:] = False

    def build(ts):
        return E.masked_attention(ts[0], ts[1], ts[2], mask).sum()

    rep = E.grad_check(build, [q, k, v])
    assert rep["ok"], rep


def test_unattendable_query_raises():
    q = Tensor(np.zeros((1, 1, 2, 4)))
    k = Tensor(np.zeros((1, 1, 3, 4)))
    v = Tensor(np.zeros((1, 1, 3, 4)))
    mask = np.ones((1, 1, 2, 3), dtype=bool)
    mask[0, 0, 0, :] = False
    with pytest.raises(ValueError, match="unattendable"):
        E.masked_attention(q, k, v, mask)


def test_log_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 7)))
    out = E.log_softmax(x)
    np.testing.assert_allclose(np.exp(out.data).sum(axis=-1), 1.0, atol=1e-12)


def test_maximum_floor_grad_routes_to_survivor():
    x = Tensor(np.array([0.5, 2.0]), requires_grad=True)
    E.maximum(x, 1.0).sum().backward()
    np.testing.assert_allclose(x.grad, [0.0, 1.0])


# -- container ---------------------------------------------------------------


def test_tensor_roundtrip_bit_exact():
    rng = np.random.default_rng(11)
    arr = rng.normal(size=(3, 5, 2))
    buf = io.BytesIO()
    E.write_tensor(buf, arr)
    buf.seek(0)
    back = E.read_tensor(buf)
    assert back.dtype == arr.dtype
    assert (back == arr).all()


def test_tensor_roundtrip_float32():
    arr = np.linspace(0, 1, 7, dtype=np.float32).reshape(7, 1)
    buf = io.BytesIO()
    E.write_tensor(buf, arr)
    buf.seek(0)
    back = E.read_tensor(buf)
    assert back.dtype == np.float32
    assert (back == arr).all()


def test_bundle_roundtrip_and_missing_file(tmp_path):
    tensors = {"b": np.ones((2, 2)), "a": np.zeros(3)}
    path = tmp_path / "ckpt.bin"
    E.save_bundle(path, tensors)
    back = E.load_bundle(path)
    assert sorted(back) == ["a", "b"]
    assert (back["b"] == 1.0).all()
    with pytest.raises(FileNotFoundError, match="missing checkpoint"):
        E.load_bundle(tmp_path / "nope.bin")


def test_bad_magic_rejected():
    buf = io.BytesIO(b"XXXX" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        E.read_tensor(buf)


def test_adam_descends_quadratic():
    p = Parameter(np.array([5.0, -3.0]))
    opt = E.Adam([p], lr=0.1)
    for _ in range(200):
        loss = (p * p).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert np.abs(p.data).max() < 1e-2
