import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy.special import logsumexp as scipy_logsumexp

from vidcap import tensor as T
from vidcap.errors import ConfigError, NumericError, ShapeError
from vidcap.gradcheck import grad_check, relative_error
from vidcap.params import ParameterStore

from conftest import central_difference


def conv3d_loops(x, k, pad, stride):
    """Direct nested-loop cross-correlation."""
    xp = np.pad(x, [(pad[0],) * 2, (pad[1],) * 2, (pad[2],) * 2, (0, 0)])
    kx, ky, kz, cin, cout = k.shape
    ox = (xp.shape[0] - kx) // stride[0] + 1
    oy = (xp.shape[1] - ky) // stride[1] + 1
    oz = (xp.shape[2] - kz) // stride[2] + 1
    out = np.zeros((ox, oy, oz, cout))
    for i in range(ox):
        for j in range(oy):
            for l in range(oz):
                for o in range(cout):
                    s = 0.0
                    for a in range(kx):
                        for b in range(ky):
                            for c in range(kz):
                                for ci in range(cin):
                                    s += xp[i * stride[0] + a, j * stride[1] + b, l * stride[2] + c, ci] * k[a, b, c, ci, o]
                    out[i, j, l, o] = s
    return out


def maxpool_windows(x, r):
    ox, oy, oz = (n // k for n, k in zip(x.shape[:3], r))
    out = np.empty((ox, oy, oz, x.shape[3]))
    for i in range(ox):
        for j in range(oy):
            for l in range(oz):
                win = x[i * r[0]:(i + 1) * r[0], j * r[1]:(j + 1) * r[1], l * r[2]:(l + 1) * r[2]]
                out[i, j, l] = win.reshape(-1, x.shape[3]).max(axis=0)
    return out


def tape_and_numeric(fn, *arrays, h=1e-5):
    """Tape gradients of ``sum(fn(*tensors) * w)`` and their central differences."""
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    w = np.random.default_rng(0).standard_normal(out.shape)
    T.sum_(out * T.Tensor(w)).backward()
    analytic = [t.grad for t in tensors]
    numeric = []
    for t in tensors:
        def f():
            with T.no_grad():
                return float(np.sum(fn(*tensors).data * w))
        numeric.append(central_difference(f, t.data, h))
    return analytic, numeric


class TestConv3d:
    def test_scalar_case(self):
        out = T.conv3d(np.full((1, 1, 1, 1), 3.0), np.full((1, 1, 1, 1, 1), -2.0))
        assert out.shape == (1, 1, 1, 1) and out.data.item() == -6.0

    def test_identity_kernel_preserves_input(self, rng):
        x = rng.standard_normal((5, 4, 3, 2))
        k = np.zeros((3, 3, 3, 2, 2))
        k[1, 1, 1] = np.eye(2)
        np.testing.assert_array_equal(T.conv3d(x, k, padding=1).data, x)

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((4, 4, 4, 2))
        k = rng.standard_normal((3, 3, 3, 2, 3))
        np.testing.assert_allclose(T.conv3d(x, k, padding=1).data, conv3d_loops(x, k, (1, 1, 1), (1, 1, 1)),
                                   rtol=0, atol=1e-12)

    def test_strided_asymmetric_matches_loop_oracle(self, rng):
        x = rng.standard_normal((7, 6, 5, 2))
        k = rng.standard_normal((3, 2, 1, 2, 2))
        got = T.conv3d(x, k, padding=(1, 0, 2), stride=(2, 1, 3)).data
        np.testing.assert_allclose(got, conv3d_loops(x, k, (1, 0, 2), (2, 1, 3)), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [((1, 1, 1), (1, 1, 1)), ((2, 1, 2), (0, 1, 1))])
    def test_gradients(self, rng, stride, pad):
        x = rng.standard_normal((5, 4, 4, 2))
        k = rng.standard_normal((3, 3, 2, 2, 2))
        (ga, gb), (na, nb) = tape_and_numeric(lambda a, b: T.conv3d(a, b, pad, stride), x, k)
        assert relative_error(ga, na).max() < 1e-6
        assert relative_error(gb, nb).max() < 1e-6

    def test_same_padding_preserves_extent(self, rng):
        for shape in [(4, 5, 6, 1), (3, 3, 3, 2)]:
            out = T.conv3d(rng.standard_normal(shape), rng.standard_normal((3, 3, 3, shape[3], 4)), padding=1)
            assert out.shape == shape[:3] + (4,)

    def test_errors(self, rng):
        with pytest.raises(ShapeError, match="channels"):
            T.conv3d(np.zeros((3, 3, 3, 2)), np.zeros((3, 3, 3, 1, 1)))
        with pytest.raises(ShapeError, match="exceeds"):
            T.conv3d(np.zeros((2, 2, 2, 1)), np.zeros((3, 3, 3, 1, 1)))
        with pytest.raises(ConfigError, match="stride"):
            T.conv3d(np.zeros((3, 3, 3, 1)), np.zeros((3, 3, 3, 1, 1)), stride=0)

    @pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
    def test_non_finite_output_is_an_error(self):
        x = np.full((1, 1, 1, 1), 1e308)
        with pytest.raises(NumericError, match="conv3d"):
            T.conv3d(x, np.full((1, 1, 1, 1, 1), 10.0))


class TestMaxPool:
    def test_one_axis(self):
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1, 1)
        np.testing.assert_array_equal(T.maxpool3d(x, (2, 1, 1)).data.ravel(), [2.0, 4.0])

    def test_tie_goes_to_first_cell(self):
        x = T.Tensor(np.full((2, 2, 2, 1), 7.0), requires_grad=True)
        out = T.maxpool3d(x, 2)
        assert out.data.item() == 7.0
        out.backward(np.ones((1, 1, 1, 1)))
        expected = np.zeros((2, 2, 2, 1))
        expected[0, 0, 0, 0] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_matches_window_oracle(self, rng):
        x = rng.standard_normal((8, 8, 8, 3))
        np.testing.assert_array_equal(T.maxpool3d(x, 2).data, maxpool_windows(x, (2, 2, 2)))
        np.testing.assert_array_equal(T.maxpool3d(x, (4, 2, 1)).data, maxpool_windows(x, (4, 2, 1)))

    def test_gradient_routes_to_argmax(self, rng):
        x = rng.standard_normal((4, 4, 2, 2))
        (g,), (n,) = tape_and_numeric(lambda a: T.maxpool3d(a, 2), x)
        assert relative_error(g, n).max() < 1e-6

    def test_non_divisible_extent_names_axis(self):
        with pytest.raises(ConfigError, match="axis y"):
            T.maxpool3d(np.zeros((4, 3, 4, 1)), 2)

    def test_ceil_mode_partial_window(self):
        x = np.arange(3.0).reshape(3, 1, 1, 1)
        np.testing.assert_array_equal(T.maxpool3d(x, (2, 1, 1), ceil_mode=True).data.ravel(), [1.0, 2.0])


class TestElementwise:
    def test_constants(self):
        assert T.sigmoid(T.Tensor(0.0)).item() == 0.5
        assert T.tanh(T.Tensor(0.0)).item() == 0.0

    def test_softmax_uniform(self):
        out = T.softmax(T.Tensor(np.full(7, 3.3)))
        np.testing.assert_allclose(out.data, np.full(7, 1 / 7), rtol=0, atol=1e-15)

    def test_softmax_gradient(self, rng):
        (g,), (n,) = tape_and_numeric(lambda a: T.softmax(a, axis=1), rng.standard_normal((3, 5)))
        assert relative_error(g, n, floor=1e-8).max() < 1e-6

    @pytest.mark.parametrize("name,fn", [
        ("tanh", T.tanh), ("sigmoid", T.sigmoid), ("exp", T.exp), ("relu", T.relu),
        ("log_softmax", lambda a: T.log_softmax(a, axis=0)), ("logsumexp", lambda a: T.logsumexp(a, axis=1)),
        ("mean", lambda a: T.mean(a, axis=0)), ("transpose", lambda a: T.transpose(a)),
        ("getitem", lambda a: T.getitem(a, (np.array([0, 2, 2]), np.array([1, 0, 1])))),
        ("take", lambda a: T.take(a, np.array([2, 0, 0]), axis=0)),
        ("window_mean", lambda a: T.window_mean(a, 2, 1, axis=1)),
    ])
    def test_unary_gradients(self, rng, name, fn):
        x = rng.standard_normal((3, 4)) + (0.3 if name == "relu" else 0.0)
        (g,), (n,) = tape_and_numeric(fn, x)
        assert relative_error(g, n, floor=1e-8).max() < 1e-6, name

    @pytest.mark.parametrize("name,fn,shapes", [
        ("add_broadcast", T.add, ((3, 4), (4,))),
        ("mul_broadcast", T.mul, ((3, 1), (1, 4))),
        ("div", T.div, ((3, 4), (3, 4))),
        ("matmul", T.matmul, ((3, 4), (4, 2))),
        ("matmul_batched", T.matmul, ((2, 3, 4), (4,))),
        ("matvec_left", T.matmul, ((4,), (2, 4, 3))),
        ("linear", T.linear, ((2, 3, 4), (5, 4))),
        ("concat", lambda a, b: T.concat([a, b], axis=1), ((2, 3), (2, 2))),
        ("stack", lambda a, b: T.stack([a, b], axis=0), ((2, 3), (2, 3))),
    ])
    def test_binary_gradients(self, rng, name, fn, shapes):
        a = rng.standard_normal(shapes[0])
        b = rng.standard_normal(shapes[1]) + (3.0 if name == "div" else 0.0)
        (ga, gb), (na, nb) = tape_and_numeric(fn, a, b)
        assert relative_error(ga, na, floor=1e-8).max() < 1e-6
        assert relative_error(gb, nb, floor=1e-8).max() < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(np.zeros((2, 3)), np.zeros((4,)))

    def test_log_of_nonpositive_is_an_error(self):
        with pytest.raises(NumericError):
            T.log(T.Tensor([1.0, 0.0]))

    def test_dropout_is_inverted_and_identity_at_zero(self, rng):
        x = T.Tensor(np.ones((200, 50)))
        assert T.dropout(x, 0.0, rng) is x
        out = T.dropout(x, 0.5, rng).data
        assert set(np.unique(out)) <= {0.0, 2.0}
        assert abs(out.mean() - 1.0) < 0.05


class TestTape:
    def test_fan_out_accumulates(self):
        x = T.Tensor(np.array([2.0, -1.0]), requires_grad=True)
        y = x * x + x * 3.0
        T.sum_(y).backward()
        np.testing.assert_array_equal(x.grad, 2 * x.data + 3.0)

    def test_no_grad_records_nothing(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.tanh(x * 2.0)
        assert y.record is None
        assert T.is_grad_enabled()

    def test_leaves_without_grad_get_nothing(self):
        x = T.Tensor(np.ones(3))
        w = T.Tensor(np.ones(3), requires_grad=True)
        T.sum_(x * w).backward()
        assert x.grad is None and w.grad is not None

    def test_backward_needs_scalar_or_seed(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            (x * 2.0).backward()


class TestGradCheck:
    def test_quadratic(self):
        ps = ParameterStore()
        ps.add("theta", np.array([3.0]))
        ps.zero_grad()
        f = lambda p: T.sum_(p["theta"] * p["theta"])
        f(ps).backward()
        assert abs(ps.grad("theta")[0] - 6.0) < 1e-9
        rep = grad_check(f, ps)
        assert rep.passed and rep.worst < 1e-9

    def test_constant_function(self):
        ps = ParameterStore()
        ps.add("theta", np.array([1.0, 2.0]))
        rep = grad_check(lambda p: T.sum_(p["theta"] * 0.0) + 4.0, ps)
        assert rep.worst == 0.0
        assert np.all(ps.grad("theta") == 0.0)

    def test_detects_a_wrong_gradient(self):
        ps = ParameterStore()
        ps.add("theta", np.array([0.7]))

        def f(p):
            t = p["theta"]
            out = T._make("bad", t.data ** 2, (t,), lambda g: (g * 3.0 * t.data,))
            return T.sum_(out)
        rep = grad_check(f, ps)
        assert not rep.passed and "FAIL" in rep.lines()[0]


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_is_probability_vector(x):
    p = T.softmax(T.Tensor(x), axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-300, 300)))
def test_logsumexp_matches_scipy(x):
    np.testing.assert_allclose(T.logsumexp(T.Tensor(x), axis=1).data, scipy_logsumexp(x, axis=1),
                               rtol=1e-13, atol=1e-12)


@given(st.integers(0, 10 ** 6))
def test_random_op_chains_pass_finite_differences(seed):
    """Random small compositions: tape gradient agrees with central differences."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((3, 2))

    def fn(x, y):
        z = T.matmul(T.tanh(x), y)
        return T.log_softmax(z * T.sigmoid(z), axis=1)
    (ga, gb), (na, nb) = tape_and_numeric(fn, a, b)
    assert relative_error(ga, na).max() < 1e-4
    assert relative_error(gb, nb).max() < 1e-4
