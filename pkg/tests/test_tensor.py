import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apovi import tensor as T
from apovi.errors import DimensionError, NumericalError, PSDError, TapeError
from apovi.tensor import Tensor

from conftest import central_difference


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def naive_conv2d(x, k):
    c_out, c_in, kh, _ = k.shape
    r = kh // 2
    _, h, w = x.shape
    pad = np.zeros((c_in, h + 2 * r, w + 2 * r))
    pad[:, r:r + h, r:r + w] = x
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                out[o, i, j] = np.sum(pad[:, i:i + kh, j:j + kh] * k[o])
    return out


def naive_conv1d(x, k):
    c_out, c_in, kl = k.shape
    r = kl // 2
    n = x.shape[1]
    pad = np.zeros((c_in, n + 2 * r))
    pad[:, r:r + n] = x
    return np.array([[np.sum(pad[:, i:i + kl] * k[o]) for i in range(n)] for o in range(c_out)])


def check_grad(f_tensor, arrays, rtol=1e-4, h=1e-5):
    """Compare backward-pass gradients of ``f_tensor(*leaves)`` with central differences."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f_tensor(*leaves)
    analytic = T.grad(out, leaves)
    numeric = central_difference(lambda: float(f_tensor(*[Tensor(a) for a in arrays]).data), arrays, h=h)
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=1e-7)


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal((Tensor(np.eye(2)) @ m).data, m)

    def test_scalar_matrices(self):
        assert (Tensor([[2.0]]) @ Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_against_triple_loop(self, rng):
        a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        np.testing.assert_allclose((Tensor(a) @ b).data, naive_matmul(a, b), atol=1e-12, rtol=0)

    def test_inner_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_gradient(self, rng):
        check_grad(lambda a, b: ((a @ b) ** 2).sum(), [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))])


class TestActivations:
    def test_relu_values(self):
        assert T.activation(Tensor(-1.0), "relu").item() == 0.0
        assert T.activation(Tensor(2.0), "relu").item() == 2.0

    def test_tanh_zero(self):
        assert T.activation(Tensor(0.0), "tanh").item() == 0.0

    def test_identity(self):
        x = Tensor([1.5, -2.0])
        np.testing.assert_array_equal(T.activation(x, "identity").data, x.data)

    def test_relu_subgradient_at_kink_is_zero(self):
        x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
        (g,) = T.grad(T.relu(x).sum(), [x])
        np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.activation(Tensor(1.0), "gelu")

    def test_softplus_stable_for_large_inputs(self):
        out = T.softplus(Tensor(np.array([-800.0, 0.0, 800.0]))).data
        np.testing.assert_allclose(out, [0.0, np.log(2.0), 800.0])


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        T.backward(x * x)
        assert x.grad == pytest.approx(6.0)

    def test_sum_of_product_against_fd(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        check_grad(lambda x, y: (x * y).sum(), [a, b])

    def test_detached_loss_has_zero_grad(self):
        x = Tensor(2.0, requires_grad=True)
        (g,) = T.grad((x.detach() * 3.0).sum() + Tensor(1.0, requires_grad=True), [x])
        assert g == 0.0

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(TapeError):
            T.backward(x * 2.0)

    def test_reuse_of_tape_rejected(self):
        x = Tensor(2.0, requires_grad=True)
        y = (x * x).sum()
        T.backward(y)
        with pytest.raises(TapeError):
            T.backward(y)

    def test_shared_subgraph_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x
        (g,) = T.grad(y * y + y, [x])  # x^4 + x^2
        assert g == pytest.approx(4 * 8 + 4)

    def test_topological_order_parents_first(self):
        x = Tensor(1.0, requires_grad=True)
        y = T.exp(x)
        z = y * x + y
        order = T._topo(z)
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for p in node._parents:
                if id(p) in pos:
                    assert pos[id(p)] < pos[id(node)]

    def test_no_grad_records_nothing(self):
        x = Tensor(1.0, requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_overflow_surfaces_as_error(self):
        with pytest.raises(NumericalError):
            T.exp(Tensor(1000.0))

    def test_log_of_nonpositive(self):
        with pytest.raises(NumericalError):
            T.log(Tensor(0.0))

    def test_broadcast_gradient_shape(self, rng):
        a = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
        b = Tensor(rng.normal(size=(4,)), requires_grad=True)
        ga, gb = T.grad((a * b).sum(), [a, b])
        assert ga.shape == (3, 1) and gb.shape == (4,)


ELEMENTWISE = {
    "add": lambda a, b: (a + b * 2.0).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "tanh": lambda a, b: T.tanh(a * b).sum(),
    "sigmoid": lambda a, b: T.sigmoid(a - b).sum(),
    "softplus": lambda a, b: T.softplus(a * b).sum(),
    "log_sigmoid": lambda a, b: T.log_sigmoid(a + b).sum(),
    "exp_log": lambda a, b: T.log(T.exp(a) + T.exp(b)).sum(),
    "logsumexp": lambda a, b: T.logsumexp(a * b, axis=0).sum(),
    "power": lambda a, b: ((a * a + 1.0) ** 1.5).sum() + (b**3).sum(),
    "concat_index": lambda a, b: (T.concat([a, b], axis=1)[:, 1:3] ** 2).sum(),
    "fancy_index": lambda a, b: (a[np.array([0, 0, 2])] * b[np.array([1, 1, 0])]).sum(),
    "stack_mean": lambda a, b: (T.stack([a, b], axis=0).mean(axis=0) ** 2).sum(),
    "where": lambda a, b: T.where(a.data > 0, a * b, b).sum(),
    "transpose": lambda a, b: ((a.T @ b) ** 2).sum(),
    "sqrt": lambda a, b: T.sqrt(a * a + b * b + 1.0).sum(),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_op_gradients_on_twenty_instances(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(20):
        check_grad(ELEMENTWISE[name], [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))])


class TestCholesky:
    def test_identity(self):
        np.testing.assert_array_equal(T.cholesky(Tensor(np.eye(3))).data, np.eye(3))

    def test_reconstruction(self):
        A = np.array([[4.0, 2.0], [2.0, 3.0]])
        L = T.cholesky(Tensor(A)).data
        np.testing.assert_allclose(L @ L.T, A, atol=1e-12, rtol=0)
        assert L[0, 1] == 0.0

    def test_indefinite(self):
        with pytest.raises(PSDError):
            T.cholesky(Tensor([[1.0, 2.0], [2.0, 1.0]]))

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            T.cholesky(Tensor([[2.0, 1.0], [0.0, 2.0]]))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_round_trip_random_spd(self, n, seed):
        m = np.random.default_rng(seed).normal(size=(n, n))
        A = m @ m.T + np.eye(n)
        L = T.cholesky(Tensor(A)).data
        np.testing.assert_allclose(L @ L.T, A, atol=1e-10, rtol=0)

    def test_gradient(self, rng):
        m = rng.normal(size=(4, 4))
        A = m @ m.T + 4 * np.eye(4)
        w = rng.normal(size=(4, 4))

        def f(a):
            return (T.cholesky(0.5 * (a + a.T)) * w).sum()

        check_grad(f, [A])

    def test_jitter_rescues_singular_matrix(self):
        A = np.ones((3, 3))
        L = T.jittered_cholesky(Tensor(A)).data
        assert np.all(np.isfinite(L))
        np.testing.assert_allclose(L @ L.T, A, atol=1e-4)

    def test_jitter_gives_up(self):
        with pytest.raises(PSDError):
            T.jittered_cholesky(Tensor(-np.eye(2)))


class TestSolves:
    def test_identity(self, rng):
        B = rng.normal(size=(3, 2))
        np.testing.assert_allclose(T.solve_psd(Tensor(np.eye(3)), Tensor(B)).data, B)

    def test_scalar(self):
        np.testing.assert_allclose(T.solve_psd(Tensor([[2.0]]), Tensor([[4.0]])).data, [[2.0]], rtol=1e-15)

    def test_residual(self, rng):
        m = rng.normal(size=(4, 4))
        A = m @ m.T + np.eye(4)
        B = rng.normal(size=(4, 3))
        X = T.solve_psd(Tensor(A), Tensor(B)).data
        assert np.linalg.norm(A @ X - B) / np.linalg.norm(B) < 1e-10

    def test_solve_gradients(self, rng):
        m = rng.normal(size=(3, 3))
        A = m @ m.T + 3 * np.eye(3)
        B = rng.normal(size=(3, 2))
        check_grad(lambda a, b: (T.solve_psd(0.5 * (a + a.T), b) ** 2).sum(), [A, B])

    def test_triangular_upper(self, rng):
        U = np.triu(rng.normal(size=(3, 3))) + 3 * np.eye(3)
        b = rng.normal(size=(3, 1))
        x = T.solve_triangular(Tensor(U), Tensor(b), lower=False).data
        np.testing.assert_allclose(U @ x, b, atol=1e-12)


class TestConvolution:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 5, 5))
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)

    def test_all_ones_on_constant_interior(self):
        out = T.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3)))).data
        assert out[0, 2, 2] == 9.0
        assert out[0, 0, 0] == 4.0

    def test_against_naive_loop(self, rng):
        x, k = rng.normal(size=(1, 5, 5)), rng.normal(size=(1, 1, 3, 3))
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k)).data, naive_conv2d(x, k), atol=1e-12, rtol=0)

    def test_multichannel_against_naive_loop(self, rng):
        x, k = rng.normal(size=(3, 6, 4)), rng.normal(size=(2, 3, 5, 5))
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k)).data, naive_conv2d(x, k), atol=1e-12, rtol=0)

    def test_conv1d_against_naive_loop(self, rng):
        x, k = rng.normal(size=(2, 9)), rng.normal(size=(3, 2, 5))
        np.testing.assert_allclose(T.conv1d(Tensor(x), Tensor(k)).data, naive_conv1d(x, k), atol=1e-12, rtol=0)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            T.conv1d(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 1, 2))))

    def test_conv2d_gradients(self, rng):
        w = rng.normal(size=(2, 4, 5))
        check_grad(lambda x, k: (T.conv2d(x, k) * w).sum(), [rng.normal(size=(3, 4, 5)), rng.normal(size=(2, 3, 3, 3))])

    def test_conv1d_gradients(self, rng):
        w = rng.normal(size=(2, 7))
        check_grad(lambda x, k: (T.conv1d(x, k) * w).sum(), [rng.normal(size=(3, 7)), rng.normal(size=(2, 3, 5))])
