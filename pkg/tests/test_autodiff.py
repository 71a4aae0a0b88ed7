import numpy as np
import pytest

from multits import autodiff as ad
from multits.autodiff import Tensor


def fd_scalar(fn, x_np, eps=1e-5):
    """Central-difference gradient of a numpy scalar function (oracle)."""
    g = np.zeros_like(x_np, dtype=np.float64)
    flat = x_np.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x_np)
        flat[i] = orig - eps
        lo = fn(x_np)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


class TestForward:
    def test_softmax_symmetry(self):
        out = ad.softmax(Tensor([0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 5))
        out = ad.matmul(Tensor(np.eye(3)), Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_concat_index_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 5))
        out = ad.concat([Tensor(a), Tensor(b)], axis=1)
        assert out.shape == (2, 8)
        # exhaustive index enumeration
        for i in range(2):
            for j in range(8):
                expect = a[i, j] if j < 3 else b[i, j - 3]
                assert out.data[i, j] == expect

    def test_softmax_rows_stochastic(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(7, 9)) * 5)
        out = ad.softmax(x, axis=1)
        assert (out.data >= 0).all()
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_shape_errors_name_op(self):
        with pytest.raises(ad.ShapeError, match="matmul"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        with pytest.raises(ad.AxisError, match="axis"):
            ad.softmax(Tensor(np.zeros((2, 3))), axis=5)
        with pytest.raises(ad.ShapeError, match="add"):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))

    def test_trailing_broadcast_rejected(self):
        # (W,1) against (W,d) would need a non-leading expansion
        with pytest.raises(ad.ShapeError):
            ad.add(Tensor(np.zeros((4, 1))), Tensor(np.zeros((4, 3))))

    def test_leading_broadcast_ok(self):
        out = ad.add(Tensor(np.zeros((4, 3))), Tensor(np.ones(3)))
        np.testing.assert_array_equal(out.data, np.ones((4, 3)))

    def test_op_forward_dispatch(self):
        out = ad.op_forward("concat", [Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 5)))], {"axis": 1})
        assert out.shape == (2, 8)
        with pytest.raises(ad.OpError, match="unknown"):
            ad.op_forward("convolve", [], {})


class TestBackward:
    def test_sum_square_analytic(self):
        x = Tensor([3.0], requires_grad=True)
        ad.backward(ad.sum_(ad.square(x)))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_mean_analytic(self):
        x = Tensor([1.0, 2.0, 3.0, 4.0], requires_grad=True)
        ad.backward(ad.mean(x))
        np.testing.assert_allclose(x.grad, [0.25] * 4)

    def test_softmax_log_pick_chain_fd(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=5)

        def chain(v):
            return ad.gather_rows(ad.log(ad.softmax(ad.reshape(v, (1, 5)), axis=1)), [2])

        err = ad.finite_diff_check(lambda t: ad.sum_(chain(t)), Tensor(x0))
        assert err < 1e-4

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ad.ShapeError, match="scalar"):
            ad.backward(ad.square(x))

    def test_frozen_tensor_stays_gradient_free(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        w = Tensor([3.0, 4.0], requires_grad=False)
        ad.backward(ad.sum_(ad.multiply(x, w)))
        assert w.grad is None
        np.testing.assert_allclose(x.grad, [3.0, 4.0])

    def test_accumulation_matches_duplicated_variable_oracle(self):
        rng = np.random.default_rng(4)
        v = rng.normal(size=4)
        # same tensor used twice
        x = Tensor(v, requires_grad=True)
        ad.backward(ad.sum_(ad.multiply(x, x)))
        # duplicated-variable oracle: d/da sum(a*b) + d/db sum(a*b) at a=b=v
        a = Tensor(v, requires_grad=True)
        b = Tensor(v, requires_grad=True)
        ad.backward(ad.sum_(ad.multiply(a, b)))
        np.testing.assert_allclose(x.grad, a.grad + b.grad)

    def test_gradients_accumulate_across_backward_calls(self):
        x = Tensor([2.0], requires_grad=True)
        ad.backward(ad.sum_(ad.square(x)))
        ad.backward(ad.sum_(ad.square(x)))
        np.testing.assert_allclose(x.grad, [8.0])


def _op_cases():
    """(name, builder, shape) for the per-op finite-difference sweep."""
    rng = np.random.default_rng(99)
    c2 = Tensor(rng.normal(size=(4, 3)))
    c3 = Tensor(rng.normal(size=(3, 4)))
    mask = rng.random((4, 3)) < 0.4
    return [
        ("add", lambda x: ad.add(x, c2), (4, 3)),
        ("add_broadcast", lambda x: ad.add(c2, ad.reshape(x, (3,))), (3,)),
        ("subtract", lambda x: ad.subtract(x, c2), (4, 3)),
        ("multiply", lambda x: ad.multiply(x, c2), (4, 3)),
        ("divide", lambda x: ad.divide(c2, ad.add(ad.square(x), 1.0)), (4, 3)),
        ("scale", lambda x: ad.scale(x, -2.5), (4, 3)),
        ("matmul_l", lambda x: ad.matmul(x, c3), (4, 3)),
        ("matmul_r", lambda x: ad.matmul(c2, x), (3, 4)),
        ("matmul_batched", lambda x: ad.matmul(x, c3), (5, 4, 3)),
        ("concat", lambda x: ad.concat([x, c2], axis=1), (4, 2)),
        ("split", lambda x: ad.split(x, [1, 2], axis=1)[1], (4, 3)),
        ("sum_axis", lambda x: ad.sum_(x, axis=0), (4, 3)),
        ("mean_axis", lambda x: ad.mean(x, axis=1), (4, 3)),
        ("transpose", lambda x: ad.transpose(x, (1, 0)), (4, 3)),
        ("reshape", lambda x: ad.reshape(x, (12,)), (4, 3)),
        ("softmax", lambda x: ad.softmax(x, axis=1), (4, 3)),
        ("tanh", lambda x: ad.tanh(x), (4, 3)),
        ("sigmoid", lambda x: ad.sigmoid(x), (4, 3)),
        ("relu", lambda x: ad.relu(x), (4, 3)),
        ("softplus", lambda x: ad.softplus(x), (4, 3)),
        ("log", lambda x: ad.log(ad.add(ad.square(x), 0.5)), (4, 3)),
        ("exp", lambda x: ad.exp(x), (4, 3)),
        ("square", lambda x: ad.square(x), (4, 3)),
        ("sqrt", lambda x: ad.sqrt(ad.add(ad.square(x), 0.5)), (4, 3)),
        ("abs", lambda x: ad.absolute(ad.add(x, 0.1)), (4, 3)),
        ("masked_fill", lambda x: ad.masked_fill(x, mask, -3.0), (4, 3)),
        ("embedding", lambda x: ad.embedding(x, [0, 2, 2, 1]), (4, 3)),
        ("gather_rows", lambda x: ad.gather_rows(x, [2, 0, 1, 2]), (4, 3)),
    ]


@pytest.mark.parametrize("name,builder,shape", _op_cases(), ids=[c[0] for c in _op_cases()])
def test_every_op_gradient_fd(name, builder, shape):
    """Analytic vs central differences, 50 seeded points per op, 1e-4 gate."""
    weights = Tensor(np.random.default_rng(7).normal(size=13))

    def readout(x):
        out = builder(x)
        flat = ad.reshape(out, (out.size,))
        w = ad.reshape(ad.embedding(weights, np.arange(out.size) % 13), (out.size,))
        return ad.sum_(ad.multiply(flat, w))

    worst = 0.0
    for seed in range(50):
        pt = Tensor(np.random.default_rng(1000 + seed).normal(size=shape))
        worst = max(worst, ad.finite_diff_check(readout, pt))
    assert worst < 1e-4, f"{name}: max relative error {worst}"


class TestFiniteDiffCheck:
    def test_linear_function_near_exact(self):
        a = np.array([1.5, -2.0, 0.7])
        err = ad.finite_diff_check(
            lambda x: ad.sum_(ad.multiply(x, Tensor(a))), Tensor(np.array([0.2, 0.4, -1.0]))
        )
        assert err < 1e-10

    def test_tanh_product(self):
        def f(x):
            parts = ad.split(x, [1, 1], axis=0)
            return ad.sum_(ad.multiply(ad.tanh(parts[0]), parts[1]))

        err = ad.finite_diff_check(f, Tensor(np.array([0.3, -1.2])))
        assert err < 1e-6


class TestSeededNormal:
    def test_determinism_bitwise(self):
        a = ad.seeded_normal((5, 5), seed=42, std=0.3)
        b = ad.seeded_normal((5, 5), seed=42, std=0.3)
        assert (a.data == b.data).all()

    def test_sample_std(self):
        t = ad.seeded_normal((100, 100), seed=7, std=1.0)
        assert 0.97 <= t.data.std() <= 1.03

    def test_sample_mean_bound(self):
        n = 10_000
        t = ad.seeded_normal((n,), seed=11, std=1.0)
        assert abs(t.data.mean()) < 5.0 / np.sqrt(n)

    def test_zero_std_rejected(self):
        with pytest.raises(ValueError):
            ad.seeded_normal((3,), seed=0, std=0.0)


class TestDropout:
    def test_eval_mode_identity(self):
        x = Tensor(np.ones((4, 4)))
        out = ad.dropout(x, 0.5, np.random.default_rng(0), training=False)
        assert out is x

    def test_inverted_scaling_preserves_mean(self):
        rng = np.random.default_rng(0)
        x = Tensor(np.ones((200, 200)))
        out = ad.dropout(x, 0.25, rng, training=True)
        assert abs(out.data.mean() - 1.0) < 0.02

    def test_seeded_mask_deterministic(self):
        x = Tensor(np.ones((8, 8)))
        a = ad.dropout(x, 0.5, np.random.default_rng(3), training=True)
        b = ad.dropout(x, 0.5, np.random.default_rng(3), training=True)
        assert (a.data == b.data).all()


def test_no_grad_suppresses_lineage():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.sum_(ad.square(x))
    assert not out.requires_grad
    assert out._backward is None
