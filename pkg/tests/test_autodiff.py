import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phonemeldm.autodiff import (
    Graph, GraphStateError, NonFiniteError, ShapeError, Tensor, grad_check, grad_check_params,
    load_checkpoint, no_grad, precision, save_checkpoint,
)
from phonemeldm.autodiff import nn
from phonemeldm.autodiff import tensor as T
from phonemeldm.blobio import ChecksumError


def _weighted(fn, w):
    return lambda *xs: T.sum_(T.mul(fn(*xs), Tensor(w, dtype=np.float64)))


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


# name -> (function, point factory). Every primitive on the tape appears here.
PRIMITIVES = {
    "add": (lambda a, b: T.add(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": (lambda a, b: T.sub(a, b), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(3, 4))]),
    "mul": (lambda a, b: T.mul(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "scale": (lambda a: T.scale(a, -1.7), lambda r: [r.normal(size=(5,))]),
    "reciprocal": (T.reciprocal, lambda r: [_pos(r, (3, 3))]),
    "exp": (T.exp, lambda r: [r.normal(size=(3, 4))]),
    "log": (T.log, lambda r: [_pos(r, (3, 4))]),
    "sigmoid": (T.sigmoid, lambda r: [r.normal(size=(3, 4))]),
    "tanh": (T.tanh, lambda r: [r.normal(size=(3, 4))]),
    "relu": (T.relu, lambda r: [r.normal(size=(3, 4))]),
    "gelu": (T.gelu, lambda r: [r.normal(size=(3, 4))]),
    "clip": (lambda a: T.clip(a, -0.5, 0.5), lambda r: [r.normal(size=(3, 4))]),
    "sum_axis": (lambda a: T.sum_(a, axis=1), lambda r: [r.normal(size=(3, 4))]),
    "mean_axis": (lambda a: T.mean(a, axis=0), lambda r: [r.normal(size=(3, 4))]),
    "matmul": (T.matmul, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
    "matmul_batched": (T.matmul, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 5))]),
    "softmax": (T.softmax, lambda r: [r.normal(size=(3, 5))]),
    "layer_norm": (T.layer_norm, lambda r: [r.normal(size=(3, 6))]),
    "attention": (T.attention, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 5, 4)),
                                           r.normal(size=(2, 5, 6))]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), lambda r: [r.normal(size=(3, 4))]),
    "transpose": (lambda a: T.transpose(a, (2, 0, 1)), lambda r: [r.normal(size=(2, 3, 4))]),
    "concat": (lambda a, b: T.concat([a, b], axis=0), lambda r: [r.normal(size=(2, 3)), r.normal(size=(4, 3))]),
    "slice": (lambda a: a[1:3, ::2], lambda r: [r.normal(size=(4, 5))]),
    "embedding": (lambda a: T.take(a, [2, 0, 2, 1]), lambda r: [r.normal(size=(3, 4))]),
}

SCALAR_PRIMITIVES = {
    "mean": (lambda a: T.mean(a), lambda r: [r.normal(size=(3, 4))]),
    "sum": (lambda a: T.sum_(a), lambda r: [r.normal(size=(3, 4))]),
    "l1": (T.l1_loss, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "l2": (T.mse_loss, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_ten_points(name):
    fn, make = PRIMITIVES[name]
    for seed in range(10):
        rng = np.random.default_rng(seed)
        point = make(rng)
        with precision(np.float64), no_grad():
            out_shape = fn(*[Tensor(x) for x in point]).shape
        w = rng.normal(size=out_shape)
        assert grad_check(_weighted(fn, w), point, 1e-5) < 1e-4


@pytest.mark.parametrize("name", sorted(SCALAR_PRIMITIVES))
def test_scalar_primitive_gradients_ten_points(name):
    fn, make = SCALAR_PRIMITIVES[name]
    for seed in range(10):
        assert grad_check(fn, make(np.random.default_rng(seed)), 1e-5) < 1e-4


def test_matmul_identity():
    a = np.array([[1.5, -2.0], [0.25, 3.0]], dtype=np.float32)
    out = T.matmul(Tensor(np.eye(2)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_softmax_uniform():
    np.testing.assert_array_equal(T.softmax(Tensor(np.zeros(4))).data, np.full(4, 0.25, np.float32))


def test_layer_norm_constant_is_zero():
    assert np.all(T.layer_norm(Tensor(np.full((2, 5), 3.7))).data == 0.0)


def test_square_derivative():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_l1_sign_gradient_and_zero_tiebreak():
    x = Tensor([2.0, -3.0, 0.0], requires_grad=True)
    T.sum_(T.mul(T.l1_loss(x, np.zeros(3)), 3.0)).backward()
    np.testing.assert_array_equal(x.grad, [1.0, -1.0, 0.0])


def test_grad_check_constant_is_exactly_zero():
    err = grad_check(lambda x: T.mul(T.sum_(x), 0.0) + 2.0, [np.ones(3)], 1e-5)
    assert err == 0.0


def test_grad_check_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        grad_check(T.mean, [np.ones(3)], 0.0)


def test_linear_layer_grad_check():
    rng = np.random.default_rng(3)
    with precision(np.float64):
        lin = nn.Linear(rng, 4, 3)
        x = Tensor(rng.normal(size=(5, 4)))
        w = Tensor(rng.normal(size=(5, 3)))
        err = grad_check_params(lambda: T.sum_(lin(x) * w), lin.parameters())
    assert err < 1e-4


def test_softmax_cross_entropy_grad_check():
    rng = np.random.default_rng(4)
    onehot = np.eye(5)[[1, 3, 0]]

    def ce(logits):
        return -T.mean(T.sum_(T.log(T.softmax(logits)) * Tensor(onehot, dtype=np.float64), axis=1))

    assert grad_check(ce, [rng.normal(size=(3, 5))], 1e-5) < 1e-4


def test_attention_block_grad_check():
    rng = np.random.default_rng(5)
    with precision(np.float64):
        block = nn.TransformerLayer(rng, 8, 2)
        x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 8)))
        err = grad_check_params(lambda: T.sum_(block(x) * w), [x] + block.parameters())
    assert err < 1e-4


def test_cross_attention_single_key_weights_are_one():
    rng = np.random.default_rng(0)
    attn = nn.MultiHeadAttention(rng, 8, 2)
    q, m = Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(1, 8)))
    out = attn(q, m, keep_weights=True)
    np.testing.assert_allclose(attn.last_weights, 1.0)
    np.testing.assert_allclose(out.data, np.broadcast_to(out.data[0], out.shape), rtol=1e-6)


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(1)
    block = nn.TransformerLayer(rng, 16, 4)
    x = Tensor(np.random.default_rng(2).normal(size=(7, 16)))
    assert np.array_equal(block(x).data, block(x).data)


def test_backward_is_linear_in_losses():
    rng = np.random.default_rng(6)
    with precision(np.float64):
        block = nn.TransformerLayer(rng, 8, 2)
        x = Tensor(rng.normal(size=(3, 8)))
        w1, w2 = Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(3, 8)))
        params = block.parameters()

        def grads(loss):
            block.zero_grad()
            loss.backward()
            return [p.grad.copy() for p in params]

        g1 = grads(T.sum_(block(x) * w1))
        g2 = grads(T.sum_(block(x) * w2))
        g12 = grads(T.sum_(block(x) * w1) + T.sum_(block(x) * w2))
    for a, b, c in zip(g1, g2, g12):
        np.testing.assert_allclose(a + b, c, rtol=1e-12, atol=1e-14)


def test_backward_visits_shared_node_once():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    z = y + y  # y reused: dz/dx = 4x
    z.backward()
    assert x.grad == pytest.approx(8.0)


def test_non_scalar_backward_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0, 1.0]))


def test_broadcast_restricted_to_leading_dims():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 1))))


def test_graph_signature_and_state_errors():
    rng = np.random.default_rng(0)
    lin = nn.Linear(rng, 3, 2)
    g = Graph(lambda x: {"loss": T.mean(lin(x))}, {"x": (None, 3)}, params=lin)
    with pytest.raises(GraphStateError):
        g.backward("loss")
    with pytest.raises(ShapeError):
        g.forward({"x": np.ones((2, 4))})
    g.forward({"x": np.ones((2, 3))})
    grads = g.backward("loss")
    assert {k: v.shape for k, v in grads.items()} == {"weight": (3, 2), "bias": (2,)}


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    m = nn.TransformerStack(rng, 16, 4, 2)
    save_checkpoint(m, tmp_path / "ckpt", {"step": 3})
    m2 = nn.TransformerStack(np.random.default_rng(10), 16, 4, 2)
    meta = load_checkpoint(m2, tmp_path / "ckpt")
    assert meta == {"step": 3}
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()


def test_checkpoint_corruption_detected(tmp_path):
    m = nn.Linear(np.random.default_rng(0), 4, 4)
    save_checkpoint(m, tmp_path / "c")
    blob = tmp_path / "c.f32"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(ChecksumError):
        load_checkpoint(m, tmp_path / "c")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_a_distribution(xs):
    p = T.softmax(Tensor(np.array(xs))).data
    assert np.all(p >= 0) and abs(float(p.sum()) - 1.0) < 1e-5
