import zlib

import numpy as np
import pytest

from semrec import autodiff as ad
from semrec.autodiff import Tensor


def leaf(arr):
    return ad.parameter(np.asarray(arr, dtype=np.float64))


def test_matmul_identity_and_small():
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), b).data, b.data)
    out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = leaf(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal((4, 2)))
    err = ad.check_grads(lambda: ad.matmul(a, b).sum(), [a])
    assert err <= 1e-4


def test_elementwise_values():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_allclose(ad.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_array_equal(ad.relu(Tensor([-3.0, 3.0])).data, [0.0, 3.0])


def test_dropout_modes():
    x = Tensor(np.ones((50, 40)))
    assert ad.dropout(x, 0.3, key=None) is x
    y = ad.dropout(x, 0.25, key=(1, 2, 3))
    kept = y.data[y.data != 0]
    np.testing.assert_allclose(kept, 1 / 0.75)
    np.testing.assert_array_equal(y.data, ad.dropout(x, 0.25, key=(1, 2, 3)).data)
    assert not np.array_equal(y.data, ad.dropout(x, 0.25, key=(1, 2, 4)).data)
    with pytest.raises(ad.ConfigError):
        ad.dropout(x, 1.0, key=(0,))
    with pytest.raises(ad.ConfigError):
        ad.dropout(x, -0.1, key=None)


def test_stop_gradient():
    x = leaf([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(ad.stop_gradient(x).data, x.data)
    loss = (ad.stop_gradient(x) * x).sum()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [1.0, 2.0, 3.0])

    x.grad = None
    ad.backward(ad.stop_gradient(x).sum())
    assert x.grad is None or np.all(x.grad == 0)


def test_backward_simple_cases():
    x = leaf([1.0, 2.0, 3.0])
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])

    x = leaf([1.0, 2.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(leaf([1.0, 2.0]) * 2.0)


def test_gradient_accumulates_over_uses():
    x = leaf([0.5, -1.5])
    y = ad.sigmoid(x)
    loss = (y * 3.0).sum() + ad.square(y).sum()
    loss.backward()
    s = 1 / (1 + np.exp(-x.data))
    np.testing.assert_allclose(x.grad, (3 + 2 * s) * s * (1 - s))


def test_tape_order_is_topological():
    x = leaf([1.0])
    y = ad.exp(x)
    z = y * y + x
    tape = ad.tape_of(z.sum())
    pos = {id(t): i for i, t in enumerate(tape)}
    for node in tape:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]


PRIMS = {
    "add": lambda a, b: ad.add(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "matmul": lambda a, b: ad.matmul(a, b.T),
    "relu": lambda a, b: ad.relu(a),
    "sigmoid": lambda a, b: ad.sigmoid(a),
    "tanh": lambda a, b: ad.tanh(a),
    "exp": lambda a, b: ad.exp(a),
    "log": lambda a, b: ad.log(ad.square(a) + 1.0),
    "sqrt": lambda a, b: ad.sqrt(ad.square(a) + 1.0),
    "reciprocal": lambda a, b: ad.reciprocal(ad.square(a) + 1.0),
    "softmax_rows": lambda a, b: ad.softmax_rows(a),
    "log_softmax": lambda a, b: ad.log_softmax(a),
    "layer_norm_rows": lambda a, b: ad.layer_norm_rows(a),
    "dropout": lambda a, b: ad.dropout(a, 0.3, key=(5, 1, 9)),
    "mean": lambda a, b: a.mean(axis=0, keepdims=True),
    "reshape_transpose": lambda a, b: a.reshape(4, 3).transpose(1, 0),
    "getitem": lambda a, b: a[np.array([0, 2, 2])],
    "take_rows": lambda a, b: ad.take_rows(a, np.array([[1, 0], [1, 2]])),
    "pick": lambda a, b: ad.pick(a, np.array([0, 3, 1])),
    "concat": lambda a, b: ad.concat([a, b], axis=1),
    "stack": lambda a, b: ad.stack([a, b], axis=0),
    "where": lambda a, b: ad.where(a.data > 0, a, b),
    "l2_normalize_rows": lambda a, b: ad.l2_normalize_rows(a),
    "cross_entropy": lambda a, b: ad.cross_entropy(a, np.array([1, 0, 3])),
}


@pytest.mark.parametrize("name", sorted(PRIMS))
def test_primitive_finite_difference(name):
    fn = PRIMS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        a = leaf(rng.standard_normal((3, 4)))
        b = leaf(rng.standard_normal((3, 4)))
        w = rng.standard_normal(fn(a, b).shape)
        err = ad.check_grads(lambda: (fn(a, b) * w).sum(), [a, b])
        assert err <= 1e-4, (name, err)


def test_softmax_and_layer_norm_row_properties():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((20, 16)) * 3)
    np.testing.assert_allclose(ad.softmax_rows(x).data.sum(axis=1), 1.0, atol=1e-6)
    y = ad.layer_norm_rows(x).data
    assert np.abs(y.mean(axis=1)).max() <= 1e-6
    assert np.abs(y.var(axis=1) - 1).max() <= 1e-4


def test_adam_zero_gradient_leaves_params():
    w = leaf([1.0, -2.0])
    opt = ad.Adam({"w": w}, lr=0.1)
    w.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(w.data, [1.0, -2.0])


def test_adam_descends_quadratic():
    w = leaf([1.0])
    opt = ad.Adam({"w": w}, lr=0.1)
    ad.backward(ad.square(w).sum())
    opt.step()
    assert w.data[0] < 1.0


def test_adam_converges_on_2d_quadratic():
    w = leaf([1.5, -2.0])
    scale = np.array([1.0, 4.0])
    opt = ad.Adam({"w": w}, lr=0.05)
    for _ in range(200):
        opt.zero_grad()
        ad.backward((ad.square(w) * scale).sum())
        opt.step()
    assert float((w.data**2 * scale).sum()) < 1e-4


def test_adam_nan_names_parameter():
    w = leaf([1.0])
    opt = ad.Adam({"enc.weight": w})
    w.grad = np.array([np.nan])
    with pytest.raises(ad.TrainingDiverged, match="enc.weight"):
        opt.step()


def test_deterministic_forward_and_grads():
    def run():
        rng = np.random.default_rng(11)
        a = leaf(rng.standard_normal((5, 6)))
        y = ad.dropout(ad.layer_norm_rows(a), 0.2, key=(7, 3, 1))
        loss = ad.log_softmax(y).sum()
        loss.backward()
        return loss.data.tobytes(), a.grad.tobytes()

    assert run() == run()
