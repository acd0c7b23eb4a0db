import numpy as np
import pytest

from cg2a.errors import StructuralError
from cg2a.gradtape import (
    ParamSet,
    QNetworkSpec,
    Tape,
    affine,
    backward,
    conv2d,
    critic_loss,
    finite_diff_grad,
    flatten_batch,
    init_params,
    load_checkpoint,
    mse_against,
    q_forward,
    relu,
    save_checkpoint,
    select_actions,
    sum_squares,
)

TINY_SPEC = QNetworkSpec(
    input_shape=(2, 7, 7),
    conv_channels=(3, 4),
    kernel_size=3,
    stride=2,
    hidden_sizes=(5,),
    num_actions=3,
)


def naive_conv(x, kernel, bias, stride):
    """Quadruple-loop convolution oracle."""
    b, c, h, w = x.shape
    f, _, k, _ = kernel.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    out = np.zeros((b, f, oh, ow))
    for bi in range(b):
        for fi in range(f):
            for i in range(oh):
                for j in range(ow):
                    window = x[bi, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[bi, fi, i, j] = (window * kernel[fi]).sum() + bias[fi]
    return out


def array_fd(loss_fn, x, h=1e-6):
    """Central differences over a raw array input."""
    flat = x.astype(np.float64).ravel().copy()
    grad = np.zeros_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        up = loss_fn(flat.reshape(x.shape))
        flat[j] = orig - h
        down = loss_fn(flat.reshape(x.shape))
        flat[j] = orig
        grad[j] = (up - down) / (2 * h)
    return grad.reshape(x.shape)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


class TestInitParams:
    def test_deterministic(self):
        a = init_params(TINY_SPEC, seed=3)
        b = init_params(TINY_SPEC, seed=3)
        for x, y in zip(a.arrays, b.arrays):
            assert np.array_equal(x, y)

    def test_seeds_differ(self):
        a = init_params(TINY_SPEC, seed=1).flatten()
        b = init_params(TINY_SPEC, seed=2).flatten()
        assert np.any(a != b)

    def test_fan_in_bound(self):
        spec = QNetworkSpec((1, 10, 10), conv_channels=(), hidden_sizes=(7,), num_actions=2)
        params = init_params(spec, seed=0)
        # dense0 weight has fan_in 100 -> bound 0.1
        assert np.abs(params["dense0.weight"]).max() <= 0.1


class TestForward:
    def test_zero_params_zero_input_gives_zero(self):
        params = init_params(TINY_SPEC, seed=0, dtype=np.float64)
        zeros = params.unflatten(np.zeros(params.size))
        obs = np.zeros((2,) + TINY_SPEC.input_shape)
        q, _ = q_forward(TINY_SPEC, zeros, obs)
        assert np.all(q.value == 0.0)

    def test_batch_rows_independent(self):
        params = init_params(TINY_SPEC, seed=5, dtype=np.float64)
        rng = np.random.default_rng(0)
        obs = rng.random((1,) + TINY_SPEC.input_shape)
        q1, _ = q_forward(TINY_SPEC, params, obs)
        q2, _ = q_forward(TINY_SPEC, params, np.repeat(obs, 2, axis=0))
        # duplicated rows inside one forward are bit-identical; across
        # different batch sizes BLAS blocking may round differently
        assert np.array_equal(q2.value[0], q2.value[1])
        np.testing.assert_allclose(q1.value[0], q2.value[0], rtol=1e-12, atol=1e-15)

    def test_forward_deterministic(self):
        params = init_params(TINY_SPEC, seed=5)
        obs = np.random.default_rng(1).random((3,) + TINY_SPEC.input_shape, dtype=np.float32)
        a, _ = q_forward(TINY_SPEC, params, obs)
        b, _ = q_forward(TINY_SPEC, params, obs)
        assert np.array_equal(a.value, b.value)

    def test_shape_mismatch_rejected(self):
        params = init_params(TINY_SPEC, seed=0)
        with pytest.raises(StructuralError):
            q_forward(TINY_SPEC, params, np.zeros((1, 2, 8, 8)))

    def test_hand_computed_single_channel_conv(self):
        x = np.arange(1.0, 17.0).reshape(1, 1, 4, 4)
        kernel = np.array([[[[1.0, 0.0, -1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 1.0]]]])
        bias = np.array([0.5])
        tape = Tape()
        out = conv2d(tape.leaf(x), tape.leaf(kernel), tape.leaf(bias), stride=1)
        expected = np.array([[[[6.5, 7.5], [10.5, 11.5]]]])
        np.testing.assert_array_equal(out.value, expected)

    def test_conv_matches_naive_oracle(self):
        rng = np.random.default_rng(9)
        for stride in (1, 2):
            x = rng.standard_normal((2, 3, 6, 6))
            kernel = rng.standard_normal((4, 3, 3, 3))
            bias = rng.standard_normal(4)
            tape = Tape()
            out = conv2d(tape.leaf(x), tape.leaf(kernel), tape.leaf(bias), stride=stride)
            np.testing.assert_allclose(out.value, naive_conv(x, kernel, bias, stride), atol=1e-12)

    def test_linearity_probe(self):
        # conv-free, relu-free spec with zero biases: doubling the head
        # weights doubles the outputs exactly
        spec = QNetworkSpec((2, 3, 3), conv_channels=(), hidden_sizes=(), num_actions=4)
        params = init_params(spec, seed=2, dtype=np.float64)
        params.arrays[params.names.index("head.bias")][:] = 0.0
        doubled = ParamSet(params.names, [a.copy() for a in params.arrays])
        doubled.arrays[doubled.names.index("head.weight")] *= 2.0
        obs = np.random.default_rng(3).standard_normal((5, 2, 3, 3))
        q1, _ = q_forward(spec, params, obs)
        q2, _ = q_forward(spec, doubled, obs)
        assert np.array_equal(q2.value, 2.0 * q1.value)


class TestCriticLoss:
    def test_zero_when_predictions_match(self):
        tape = Tape()
        q = tape.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
        loss = critic_loss(q, np.array([1, 0]), np.array([2.0, 3.0]))
        assert loss.value == 0.0

    def test_single_square(self):
        tape = Tape()
        q = tape.leaf(np.array([[2.0, 5.0]]))
        loss = critic_loss(q, np.array([0]), np.array([0.0]))
        assert loss.value == 4.0

    def test_batch_mean(self):
        tape = Tape()
        q = tape.leaf(np.array([[1.0, 9.0], [3.0, 9.0]]))
        loss = critic_loss(q, np.array([0, 0]), np.array([0.0, 1.0]))
        assert loss.value == 2.5

    def test_action_out_of_range(self):
        tape = Tape()
        q = tape.leaf(np.array([[1.0, 2.0]]))
        with pytest.raises(StructuralError):
            critic_loss(q, np.array([2]), np.array([0.0]))


class TestBackward:
    def test_constant_loss_gives_zero_gradient(self):
        tape = Tape()
        theta = tape.param_leaf(np.array([1.0, 2.0]))
        const = sum_squares(tape.leaf(np.array([3.0])))
        grad = backward(tape, const)
        np.testing.assert_array_equal(grad, [0.0, 0.0])
        assert theta.value is not None

    def test_sum_of_squares_gradient(self):
        tape = Tape()
        theta = tape.param_leaf(np.array([1.0, 2.0]))
        grad = backward(tape, sum_squares(theta))
        np.testing.assert_array_equal(grad, [2.0, 4.0])

    def test_non_scalar_root_rejected(self):
        tape = Tape()
        x = tape.param_leaf(np.array([1.0, 2.0]))
        with pytest.raises(StructuralError):
            backward(tape, relu(x))

    @pytest.mark.parametrize("primitive", ["conv2d", "relu", "affine", "select", "mse", "flatten"])
    def test_primitive_gradients_match_fd(self, primitive):
        rng = np.random.default_rng(hash(primitive) % 2**31)

        if primitive == "conv2d":
            x = rng.standard_normal((2, 2, 5, 5))

            def loss(arr):
                tape = Tape()
                out = conv2d(
                    tape.leaf(arr), tape.leaf(kernel), tape.leaf(bias), stride=2
                )
                return float(sum_squares(out).value)

            def grad(arr):
                tape = Tape()
                v = tape.param_leaf(arr)
                out = conv2d(v, tape.leaf(kernel), tape.leaf(bias), stride=2)
                return backward(tape, sum_squares(out)).reshape(arr.shape)

            kernel = rng.standard_normal((3, 2, 3, 3))
            bias = rng.standard_normal(3)
        elif primitive == "relu":
            x = rng.standard_normal((4, 6))
            x[np.abs(x) < 0.05] = 0.1  # keep away from the kink

            def loss(arr):
                tape = Tape()
                return float(sum_squares(relu(tape.leaf(arr))).value)

            def grad(arr):
                tape = Tape()
                v = tape.param_leaf(arr)
                return backward(tape, sum_squares(relu(v))).reshape(arr.shape)

        elif primitive == "affine":
            x = rng.standard_normal((3, 4))
            w = rng.standard_normal((4, 2))
            b = rng.standard_normal(2)

            def loss(arr):
                tape = Tape()
                return float(sum_squares(affine(tape.leaf(arr), tape.leaf(w), tape.leaf(b))).value)

            def grad(arr):
                tape = Tape()
                v = tape.param_leaf(arr)
                return backward(tape, sum_squares(affine(v, tape.leaf(w), tape.leaf(b)))).reshape(
                    arr.shape
                )

        elif primitive == "select":
            x = rng.standard_normal((5, 3))
            actions = rng.integers(0, 3, size=5)

            def loss(arr):
                tape = Tape()
                return float(sum_squares(select_actions(tape.leaf(arr), actions)).value)

            def grad(arr):
                tape = Tape()
                v = tape.param_leaf(arr)
                return backward(tape, sum_squares(select_actions(v, actions))).reshape(arr.shape)

        elif primitive == "mse":
            x = rng.standard_normal(6)
            targets = rng.standard_normal(6)

            def loss(arr):
                tape = Tape()
                return float(mse_against(tape.leaf(arr), targets).value)

            def grad(arr):
                tape = Tape()
                v = tape.param_leaf(arr)
                return backward(tape, mse_against(v, targets)).reshape(arr.shape)

        else:  # flatten
            x = rng.standard_normal((2, 3, 2, 2))

            def loss(arr):
                tape = Tape()
                return float(sum_squares(flatten_batch(tape.leaf(arr))).value)

            def grad(arr):
                tape = Tape()
                v = tape.param_leaf(arr)
                return backward(tape, sum_squares(flatten_batch(v))).reshape(arr.shape)

        assert rel_err(grad(x), array_fd(loss, x)) <= 1e-6

    def test_network_gradient_matches_fd(self):
        rng = np.random.default_rng(17)
        params = init_params(TINY_SPEC, seed=17, dtype=np.float64)
        obs = rng.random((4,) + TINY_SPEC.input_shape)
        actions = rng.integers(0, TINY_SPEC.num_actions, size=4)
        targets = rng.standard_normal(4)

        def loss_fn(p):
            q, _ = q_forward(TINY_SPEC, p, obs)
            return float(critic_loss(q, actions, targets).value)

        q, tape = q_forward(TINY_SPEC, params, obs)
        analytic = backward(tape, critic_loss(q, actions, targets))
        numeric = finite_diff_grad(loss_fn, params, h=1e-4)
        assert rel_err(analytic, numeric) <= 1e-5


class TestFiniteDiff:
    def test_exact_on_quadratic(self):
        spec = QNetworkSpec((1, 2, 2), conv_channels=(), hidden_sizes=(), num_actions=2)
        params = init_params(spec, seed=0, dtype=np.float64)

        def loss_fn(p):
            return float((p.flatten() ** 2).sum())

        grad = finite_diff_grad(loss_fn, params, h=1e-4)
        np.testing.assert_allclose(grad, 2 * params.flatten(), atol=1e-9)

    def test_zero_loss(self):
        spec = QNetworkSpec((1, 2, 2), conv_channels=(), hidden_sizes=(), num_actions=2)
        params = init_params(spec, seed=0, dtype=np.float64)
        grad = finite_diff_grad(lambda p: 0.0, params)
        assert np.all(grad == 0.0)


class TestParamSet:
    def test_flatten_round_trip_bit_exact(self):
        params = init_params(TINY_SPEC, seed=8)
        rebuilt = params.unflatten(params.flatten())
        for a, b in zip(params.arrays, rebuilt.arrays):
            assert np.array_equal(a, b) and a.dtype == b.dtype

    def test_unflatten_length_checked(self):
        params = init_params(TINY_SPEC, seed=8)
        with pytest.raises(StructuralError):
            params.unflatten(np.zeros(params.size + 1))

    def test_param_count_matches(self):
        params = init_params(TINY_SPEC, seed=0)
        assert params.size == TINY_SPEC.param_count()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_params(TINY_SPEC, seed=4)
        extra = {"adam_m": np.arange(5.0)}
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, TINY_SPEC, params, extra_arrays=extra, meta={"step": 12})
        spec, loaded, arrays, meta = load_checkpoint(path)
        assert spec == TINY_SPEC
        assert np.array_equal(loaded.flatten(), params.flatten())
        assert np.array_equal(arrays["adam_m"], extra["adam_m"])
        assert meta == {"step": 12}

    def test_rejects_non_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(StructuralError):
            load_checkpoint(path)
