import numpy as np
import pytest

from diffsed import autodiff as ad
from diffsed.autodiff import Parameter, Tensor
from diffsed.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from diffsed.gradcheck import check_gradients
from diffsed.optim import Adam


def leaf(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ b).data, [[1, 2], [3, 4]])


def test_matmul_orthogonal():
    assert (Tensor([[1.0, 0.0]]) @ Tensor([[0.0], [1.0]])).data.tolist() == [[0.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="inner"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("seed", range(5))
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    assert check_gradients(lambda: ad.tsum(a @ b), [a, b]) < 1e-4


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0]), 0).data, [1 / 3] * 3)


def test_softmax_no_overflow():
    out = ad.softmax(Tensor([1000.0, 0.0, 0.0]), 0).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1, 0, 0], atol=1e-300)


def test_softmax_bad_axis():
    with pytest.raises(ValueError):
        ad.softmax(Tensor(np.ones((2, 2))), axis=2)


@pytest.mark.parametrize("seed", range(5))
def test_softmax_gradient(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 2, 5)
    w = rng.standard_normal((2, 5))
    assert check_gradients(lambda: ad.tsum(ad.softmax(x, -1) * w), [x]) < 1e-4


def test_layer_norm_constant_row():
    x = Tensor(np.full((1, 4), 3.0))
    out = ad.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_already_normalized():
    out = ad.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-15)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], rtol=1e-12)


def test_layer_norm_width_mismatch():
    with pytest.raises(ValueError):
        ad.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_gradient(seed):
    rng = np.random.default_rng(seed)
    x, g, b = leaf(rng, 4, 8), leaf(rng, 8), leaf(rng, 8)
    w = rng.standard_normal((4, 8))
    assert check_gradients(lambda: ad.tsum(ad.layer_norm(x, g, b) * w), [x, g, b]) < 1e-4


UNARY = {
    "exp": ad.exp,
    "log": lambda x: ad.log(x),
    "sqrt": lambda x: ad.sqrt(x),
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "relu": ad.relu,
    "sin": ad.sin,
    "cos": ad.cos,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(3))
def test_unary_gradients(name, seed):
    rng = np.random.default_rng(seed)
    lo = 0.1 if name in ("log", "sqrt") else -2.0
    x = leaf(rng, 3, 4, lo=lo)
    if name == "relu":
        x.data[np.abs(x.data) < 1e-2] = 0.5  # keep away from the kink
    w = rng.standard_normal((3, 4))
    assert check_gradients(lambda: ad.tsum(UNARY[name](x) * w), [x]) < 1e-4


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_broadcast_gradients(op):
    rng = np.random.default_rng(1)
    a = leaf(rng, 2, 3, 4)
    b = leaf(rng, 4, lo=0.5, hi=2.0)
    fn = getattr(ad, op)
    w = rng.standard_normal((2, 3, 4))
    assert check_gradients(lambda: ad.tsum(fn(a, b) * w), [a, b]) < 1e-4


def test_shape_ops_gradients():
    rng = np.random.default_rng(2)
    x, y = leaf(rng, 2, 3, 4), leaf(rng, 2, 1, 4)
    w = rng.standard_normal((4, 2, 2))

    def f():
        z = ad.concat([x, y], axis=1)  # 2x4x4
        z = ad.transpose(z, (2, 0, 1))  # 4x2x4
        z = ad.reshape(z, (4, 2, 2, 2))[:, :, 1, :]
        return ad.tsum(z * w)

    assert check_gradients(f, [x, y]) < 1e-4


def test_reductions_gradients():
    rng = np.random.default_rng(3)
    x = leaf(rng, 3, 5)
    assert check_gradients(lambda: ad.tsum(ad.mean(x, axis=0) * ad.tmax(x, axis=0)), [x]) < 1e-4
    assert check_gradients(lambda: ad.tsum(ad.log_softmax(x, axis=1) * x), [x]) < 1e-4


def test_embedding_repeated_rows_accumulate():
    w = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    ad.tsum(ad.embedding(w, [0, 2, 0])).backward()
    np.testing.assert_array_equal(w.grad, [[2, 2], [0, 0], [1, 1]])


def test_dropout_train_only():
    x = Tensor(np.ones((100, 100)))
    assert ad.dropout(x, 0.5, np.random.default_rng(0), training=False) is x
    y = ad.dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert set(np.unique(y)) == {0.0, 2.0}


def test_backward_linearity():
    rng = np.random.default_rng(4)
    x = leaf(rng, 3, 3)
    w1, w2 = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    f1 = lambda: ad.tsum(ad.tanh(x) * w1)  # noqa: E731
    f2 = lambda: ad.tsum(ad.exp(x) * w2)  # noqa: E731
    f1().backward()
    g1 = x.grad.copy()
    x.grad = None
    f2().backward()
    g2 = x.grad.copy()
    x.grad = None
    (f1() + f2()).backward()
    np.testing.assert_allclose(x.grad, g1 + g2, rtol=1e-13)


def test_forward_bit_reproducible():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((6, 5)), rng.standard_normal((5, 4))
    f = lambda: ad.softmax(ad.matmul(Tensor(a), Tensor(b)), -1).data  # noqa: E731
    assert f().tobytes() == f().tobytes()


def test_non_finite_root_rejected():
    x = Tensor([0.0], requires_grad=True)
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
        ad.tsum(ad.log(x)).backward()


def test_parameter_needs_name():
    with pytest.raises(ValueError):
        Parameter(np.zeros(2), "")


def test_adam_zero_gradient_is_noop():
    p = Parameter(np.array([1.5, -2.0]), "w")
    p.grad = np.zeros(2)
    Adam([p], lr=0.1).step()
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adam_moves_against_gradient():
    p = Parameter(np.array([0.0]), "w")
    p.grad = np.array([1.0])
    Adam([p], lr=0.1).step()
    assert p.data[0] < 0


def test_adam_missing_grad():
    with pytest.raises(RuntimeError, match="missing"):
        Adam([Parameter(np.zeros(1), "w")]).step()


def test_adam_converges_on_quadratic():
    w = Parameter(np.array([0.0]), "w")
    opt = Adam([w], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        d = w - 3.0
        ad.tsum(d * d).backward()
        opt.step()
    assert abs(w.data[0] - 3.0) < 0.1


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    arrays = {"a": rng.standard_normal((3, 4)), "b.c": rng.standard_normal(7), "s": np.array(2.5)}
    save_checkpoint(tmp_path / "x.ckpt", arrays, {"k": 1})
    back, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"k": 1}
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].tobytes() == np.asarray(arrays[k]).tobytes()
    save_checkpoint(tmp_path / "y.ckpt", back, meta)
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad")
    save_checkpoint(tmp_path / "ok", {"a": np.ones(3)})
    (tmp_path / "trunc").write_bytes((tmp_path / "ok").read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "trunc")
