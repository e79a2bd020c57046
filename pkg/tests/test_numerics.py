import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from asyncfuse.errors import ContractError, NonFiniteError, ShapeError
from asyncfuse.numerics import (
    AdamHyper,
    ParameterStore,
    Tensor,
    adam_step,
    attention,
    concat,
    expand,
    gelu,
    layer_norm,
    linear,
    load_checkpoint,
    log,
    matmul,
    save_checkpoint,
    sigmoid,
    softmax,
    tanh,
)
from asyncfuse.numerics.gradcheck import check_gradients


def param(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


# -- matmul ------------------------------------------------------------------
def test_matmul_identity():
    out = matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_hand_product():
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_zero_annihilates():
    b = np.random.default_rng(0).standard_normal((3, 5))
    assert not matmul(Tensor(np.zeros((4, 3))), Tensor(b)).data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_batched_broadcast_gradients():
    rng = np.random.default_rng(1)
    a = param(rng.standard_normal((2, 3, 4, 5)))
    b = param(rng.standard_normal((5, 2)))
    errs = check_gradients(lambda: (matmul(a, b) ** 2).sum(), [("a", a), ("b", b)])
    assert max(errs.values()) < 1e-6


# -- softmax -----------------------------------------------------------------
def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
              elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_normalised(x):
    out = softmax(Tensor(x)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_softmax_gradient():
    x = param(np.random.default_rng(2).standard_normal((3, 5)))
    w = np.random.default_rng(3).standard_normal((3, 5))
    errs = check_gradients(lambda: (softmax(x) * w).sum(), [("x", x)])
    assert errs["x"] < 1e-7


# -- layernorm ---------------------------------------------------------------
def test_layernorm_constant_slice_is_zero():
    out = layer_norm(Tensor([[4.0, 4.0, 4.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert not out.data.any()


def test_layernorm_hand_example():
    out = layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-5)
    np.testing.assert_allclose(out.data, np.array([-1, 1]) / math.sqrt(1 + 1e-5), atol=1e-15)


def test_layernorm_affine_collapse():
    x = Tensor(np.random.default_rng(4).standard_normal((5, 6)))
    out = layer_norm(x, Tensor(np.zeros(6)), Tensor(np.full(6, 7.0)))
    np.testing.assert_array_equal(out.data, np.full((5, 6), 7.0))


def test_layernorm_gradient():
    rng = np.random.default_rng(5)
    x, g, b = param(rng.standard_normal((2, 3, 6))), param(rng.standard_normal(6)), param(rng.standard_normal(6))
    w = rng.standard_normal((2, 3, 6))
    errs = check_gradients(lambda: (layer_norm(x, g, b) * w).sum(), [("x", x), ("g", g), ("b", b)])
    assert max(errs.values()) < 1e-6


# -- backward ----------------------------------------------------------------
def test_backward_linear_sum():
    w = param([1.0, 2.0, 3.0])
    w.sum().backward()
    np.testing.assert_array_equal(w.grad, [1, 1, 1])


def test_backward_square():
    w = param([1.0, 2.0])
    (w * w).sum().backward()
    np.testing.assert_array_equal(w.grad, [2, 4])


def test_backward_detached_leaves_grad_unset():
    w = param([1.0, 2.0])
    v = param([3.0])
    (v * 2.0).sum().backward()
    assert w.grad is None


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        param([1.0, 2.0]).backward()


def test_backward_accumulates_until_zeroed():
    w = param([1.0, 2.0])
    for _ in range(2):
        (w * 3.0).sum().backward()
    np.testing.assert_array_equal(w.grad, [6, 6])


def test_tape_linearity():
    rng = np.random.default_rng(6)
    w = param(rng.standard_normal((3, 3)))
    x = Tensor(rng.standard_normal((4, 3)))

    def l1():
        return (tanh(matmul(x, w)) ** 2).sum()

    def l2():
        return sigmoid(matmul(x, w)).mean()

    (l1() + l2()).backward()
    joint = w.grad
    w.grad = None
    l1().backward()
    l2().backward()
    np.testing.assert_allclose(joint, w.grad, rtol=1e-13, atol=1e-15)


def test_nonfinite_forward_raises():
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError):
        log(Tensor([-1.0]))


def test_elementwise_gradients():
    rng = np.random.default_rng(7)
    a = param(rng.standard_normal((3, 4)))
    b = param(rng.uniform(0.5, 2.0, (1, 4)))
    c = param(rng.standard_normal((2, 4)))

    def f():
        y = gelu(a) / b + sigmoid(a) * b - tanh(a[1:, ::2]).sum()
        z = concat([y, expand(c[:1], (2, 4))], axis=0)
        return (z.transpose() @ z).mean() + (b ** 3).sum()

    errs = check_gradients(f, [("a", a), ("b", b), ("c", c)])
    assert max(errs.values()) < 1e-6


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(2024)
        w = param(rng.standard_normal((6, 6)))
        x = Tensor(rng.standard_normal((5, 6)))
        loss = (softmax(gelu(x @ w)) ** 2).sum()
        loss.backward()
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()


# -- adam --------------------------------------------------------------------
def test_adam_zero_grad_no_decay_is_noop():
    p = param([1.0, -2.0])
    store = ParameterStore([("p", p)], AdamHyper(lr=0.1))
    p.grad = np.zeros(2)
    adam_step(store)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = param([0.5])
    store = ParameterStore([("p", p)], AdamHyper(lr=0.1))
    p.grad = np.ones(1)
    adam_step(store)
    # m_hat = v_hat = 1 at t=1, so the update is lr / (1 + eps)
    np.testing.assert_allclose(p.data, [0.5 - 0.1 / (1 + 1e-8)], rtol=0, atol=1e-15)
    assert p.grad is None


def test_adam_decay_only_shrinks():
    p = param([1.0])
    store = ParameterStore([("p", p)], AdamHyper(lr=0.01, weight_decay=0.5))
    p.grad = np.zeros(1)
    adam_step(store)
    assert p.data[0] < 1.0


def test_adam_missing_grad_counts_skip():
    p = param([1.0])
    store = ParameterStore([("p", p)])
    adam_step(store)
    assert store.skipped == 1 and p.data[0] == 1.0


def test_parameter_store_rejects_duplicates():
    with pytest.raises(KeyError):
        ParameterStore([("a", param([1.0])), ("a", param([2.0]))])


# -- checkpoint --------------------------------------------------------------
def test_checkpoint_roundtrip_and_bytes(tmp_path):
    params = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([0.5])}
    p1 = save_checkpoint(tmp_path / "a.bin", params, {"D": 8}, seed=2024)
    p2 = save_checkpoint(tmp_path / "b.bin", params, {"D": 8}, seed=2024)
    assert p1.read_bytes() == p2.read_bytes()
    loaded, header = load_checkpoint(p1)
    assert header["seed"] == 2024 and header["config"] == {"D": 8}
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k])


def composite_attention(q, k, v, heads):
    # the same computation spelled out with elementary tape ops
    b, tq, d = q.shape
    tk = k.shape[1]
    dh = d // heads

    def split(x, t):
        return x.reshape(b, t, heads, dh).transpose(0, 2, 1, 3)

    a = softmax(split(q, tq) @ split(k, tk).transpose(0, 1, 3, 2) * (1 / math.sqrt(dh)), axis=-1)
    return (a @ split(v, tk)).transpose(0, 2, 1, 3).reshape(b, tq, d), a


@pytest.mark.parametrize("heads,tq,tk", [(1, 3, 3), (2, 4, 1), (4, 2, 5)])
def test_fused_attention_matches_composite(heads, tq, tk):
    rng = np.random.default_rng(heads * 10 + tk)
    q, k, v = (Tensor(rng.standard_normal((2, t, 8)), requires_grad=True) for t in (tq, tk, tk))
    w = rng.standard_normal((2, tq, 8))
    out, amap = attention(q, k, v, heads)
    ref, ref_map = composite_attention(q, k, v, heads)
    np.testing.assert_allclose(out.data, ref.data, atol=1e-13)
    np.testing.assert_allclose(amap, ref_map.data, atol=1e-13)
    (out * w).sum().backward()
    fused = [t.grad.copy() for t in (q, k, v)]
    for t in (q, k, v):
        t.grad = None
    (composite_attention(q, k, v, heads)[0] * w).sum().backward()
    for a, t in zip(fused, (q, k, v)):
        np.testing.assert_allclose(a, t.grad, atol=1e-12)


def test_fused_attention_gradients():
    rng = np.random.default_rng(3)
    q, k, v = (Tensor(rng.standard_normal((2, t, 6)), requires_grad=True) for t in (3, 4, 4))
    w = rng.standard_normal((2, 3, 6))
    errs = check_gradients(lambda: (attention(q, k, v, 3)[0] * w).sum(), [("q", q), ("k", k), ("v", v)])
    assert max(errs.values()) < 1e-6, errs


def test_attention_shape_errors():
    with pytest.raises(ShapeError):
        attention(np.zeros((1, 2, 6)), np.zeros((1, 3, 6)), np.zeros((1, 3, 6)), 4)
    with pytest.raises(ShapeError):
        attention(np.zeros((1, 2, 6)), np.zeros((2, 3, 6)), np.zeros((2, 3, 6)), 2)


def test_linear_matches_matmul_and_grads():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((2, 3, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    np.testing.assert_allclose(linear(x, w, b).data, x.data @ w.data + b.data, atol=1e-14)
    np.testing.assert_allclose(linear(x, w).data, x.data @ w.data, atol=1e-14)
    g = rng.standard_normal((2, 3, 4))
    errs = check_gradients(lambda: (linear(x, w, b) * g).sum(), [("x", x), ("w", w), ("b", b)])
    assert max(errs.values()) < 1e-7
    with pytest.raises(ShapeError):
        linear(x, Tensor(np.zeros((4, 4))))


def test_finite_checks_toggle_restores_and_gradcheck_flags_inf():
    from asyncfuse.numerics.gradcheck import relative_error
    from asyncfuse.numerics.tensor import finite_checks

    x = Tensor(np.array([-1.0]))
    with finite_checks(False), np.errstate(invalid="ignore"):
        assert np.isnan(log(x).data).all()
    with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
        log(x)
    assert relative_error(np.array([np.inf]), np.array([1.0])) == math.inf
