import math

import numpy as np
import pytest

import gradcases
from radiomap import gradcheck
from radiomap import tensor as T
from radiomap.nn import Adam, AdamState, adam_step, load_checkpoint, save_checkpoint
from radiomap.tensor import Tensor, parameter


def conv_oracle(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation, (C, H, W) input."""
    C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = b[o]
                for c in range(C):
                    for di in range(k):
                        for dj in range(k):
                            acc += w[o, c, di, dj] * xp[c, i * stride + di, j * stride + dj]
                out[o, i, j] = acc
    return out


class TestForwardExamples:
    def test_matmul_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)

    def test_matmul_hand_product(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_matmul_shape_error(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_elementwise_identities(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(T.elementwise(Tensor(x), Tensor(0.0), "add").data, x)
        np.testing.assert_array_equal(T.elementwise(Tensor(x), Tensor(1.0), "mul").data, x)

    def test_incompatible_broadcast(self):
        with pytest.raises(ValueError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_activations(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
        assert T.silu(Tensor(0.0)).item() == 0.0
        assert T.activation(Tensor(0.0), "sigmoid").item() == 0.5
        with pytest.raises(ValueError):
            T.activation(Tensor(0.0), "tanh")

    def test_silu_gradient_at_one(self):
        x = parameter([1.0])
        T.backward(T.tsum(T.silu(x)))
        h = 1e-6
        silu = lambda v: v / (1 + math.exp(-v))
        fd = (silu(1 + h) - silu(1 - h)) / (2 * h)
        assert abs(x.grad[0] - fd) < 1e-8

    def test_softmax_examples(self):
        np.testing.assert_allclose(T.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3,
                                   atol=1e-15)
        p = T.softmax_lastdim(Tensor([1000.0, 0.0])).data
        assert p[0] == 1.0 and 0.0 <= p[1] < 1e-300
        z = [math.exp(v) for v in (2, 1, 0, -1)]
        oracle = [v / sum(z) for v in z]
        got = T.softmax_lastdim(Tensor([2.0, 1.0, 0.0, -1.0])).data
        np.testing.assert_allclose(got, oracle, rtol=1e-14)
        np.testing.assert_allclose(np.round(got, 4), [0.6439, 0.2369, 0.0871, 0.0321])

    def test_softmax_rows_sum_to_one(self, rng):
        p = T.softmax_lastdim(Tensor(10 * rng.normal(size=(50, 7)))).data
        assert np.abs(p.sum(axis=-1) - 1).max() < 1e-12
        assert ((p > 0) & (p < 1)).all()

    def test_layer_norm_examples(self):
        one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
        np.testing.assert_array_equal(T.layer_norm(Tensor(np.full((1, 4), 3.0)), one, zero).data, 0.0)
        out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-4)
        # with eps the magnitude is 1/sqrt(1 + 1e-5), slightly below 1
        assert abs(out[0, 1] - 1 / math.sqrt(1 + 1e-5)) < 1e-12

    def test_conv_identity_kernel(self, rng):
        x = rng.normal(size=(1, 5, 5))
        out = T.conv2d_im2col(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), 1, 0)
        np.testing.assert_array_equal(out.data, x)

    def test_conv_impulse_response(self):
        x = np.zeros((1, 5, 5))
        x[0, 2, 2] = 1.0
        out = T.conv2d_im2col(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), 1, 1).data[0]
        expect = np.zeros((5, 5))
        expect[1:4, 1:4] = 1.0
        np.testing.assert_array_equal(out, expect)

    @pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (1, 2, 0), (3, 1, 1), (3, 2, 1),
                                              (3, 1, 0), (3, 2, 0)])
    def test_conv_matches_nested_loops(self, rng, k, stride, pad):
        x = rng.normal(size=(3, 7, 6))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        got = T.conv2d_im2col(Tensor(x), Tensor(w), stride, pad, Tensor(b)).data
        expect = conv_oracle(x, w, b, stride, pad)
        assert got.shape == expect.shape
        assert np.abs(got - expect).max() < 1e-10

    def test_conv_batched_matches_single(self, rng):
        x = rng.normal(size=(2, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        batched = T.conv2d_im2col(Tensor(x), Tensor(w), 2, 1).data
        for i in range(2):
            np.testing.assert_allclose(batched[i], T.conv2d_im2col(Tensor(x[i]), Tensor(w), 2, 1).data,
                                       atol=1e-14)

    def test_conv_rejects_bad_configs(self):
        with pytest.raises(ValueError):
            T.conv2d_im2col(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 5, 5))))
        with pytest.raises(ValueError):
            T.conv2d_im2col(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), 1, 0)

    def test_upsample(self):
        np.testing.assert_array_equal(T.upsample_nearest2x(Tensor([[[1.0]]])).data,
                                      np.ones((1, 2, 2)))
        x = parameter(np.arange(6.0).reshape(1, 2, 3))
        T.backward(T.tsum(T.upsample_nearest2x(x)))
        np.testing.assert_array_equal(x.grad, np.full((1, 2, 3), 4.0))


class TestBackward:
    def test_linear_and_quadratic(self):
        x = parameter([1.0, 2.0])
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])
        y = parameter([1.0, 2.0])
        T.backward(T.tsum(T.mul(y, y)))
        np.testing.assert_array_equal(y.grad, [2.0, 4.0])

    def test_repeated_backward_accumulates(self):
        x = parameter([1.0, -2.0])
        for _ in range(3):
            T.backward(T.tsum(T.square(x)))
        np.testing.assert_array_equal(x.grad, [6.0, -12.0])

    def test_non_scalar_loss_rejected(self):
        x = parameter([1.0, 2.0])
        with pytest.raises(ValueError):
            T.backward(T.mul(x, 2.0))

    def test_no_grad_records_nothing(self):
        x = parameter([1.0])
        with T.no_grad():
            y = T.mul(x, 3.0)
        assert not y.requires_grad and len(T.get_graph()) == 0

    def test_non_finite_is_an_error(self):
        with pytest.raises(FloatingPointError):
            T.log(Tensor([0.0]))

    def test_each_node_visited_once(self):
        x = parameter([2.0])
        calls = []
        y = T.square(x)
        node = y.node
        orig = node.backward
        node.backward = lambda g: (calls.append(1), orig(g))[1]
        T.backward(T.tsum(T.add(T.mul(y, y), y)))
        assert len(calls) == 1
        # d/dx (x^4 + x^2) = 4x^3 + 2x
        assert x.grad[0] == 36.0


@pytest.mark.parametrize("name", sorted(gradcases.PRIMITIVES))
def test_primitive_gradients(name):
    worst = 0.0
    for seed in range(20):
        fn, arrays = gradcases.PRIMITIVES[name](np.random.default_rng(seed))
        worst = max(worst, gradcheck.check(fn, arrays, seed=seed))
    assert worst < 1e-5


def test_matmul_and_broadcast_gradients_tight(rng):
    for fn, arrays in [(T.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
                       (T.add, [rng.normal(size=(2, 3)), rng.normal(size=(1, 3))])]:
        assert gradcheck.check(fn, arrays) < 1e-6


def test_upsample_gradient_tight(rng):
    assert gradcheck.check(T.upsample_nearest2x, [rng.normal(size=(2, 3, 3))]) < 1e-8


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        p = parameter([1.0, -2.0])
        state = AdamState(lr=0.1)
        for _ in range(5):
            adam_step([p], [np.zeros(2)], state)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_magnitude(self):
        p = parameter([0.5])
        adam_step([p], [np.array([1.0])], AdamState(lr=0.1))
        # m_hat = 1, v_hat = 1 at t = 1
        assert abs((0.5 - p.data[0]) - 0.1 / (1 + 1e-8)) < 1e-15

    def test_quadratic_convergence(self):
        x = parameter([0.0])
        opt = Adam([x], lr=0.05)
        for _ in range(500):
            opt.zero_grad()
            T.backward(T.tsum(T.square(T.sub(x, 3.0))))
            opt.step()
        assert abs(x.data[0] - 3.0) < 1e-2

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step([parameter([1.0, 2.0])], [np.ones(3)], AdamState())

    def test_step_counter_increases(self):
        p = parameter([1.0])
        state = AdamState()
        adam_step([p], [np.ones(1)], state)
        adam_step([p], [np.ones(1)], state)
        assert state.step == 2 and state.m[0].shape == p.shape


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, rng):
        tensors = {"a": rng.normal(size=(3, 4)), "scalar": np.array(np.pi),
                   "名前": rng.normal(size=(2, 1, 2))}
        save_checkpoint(tmp_path / "x.rkck", tensors)
        back = load_checkpoint(tmp_path / "x.rkck")
        assert list(back) == list(tensors)
        for k in tensors:
            assert back[k].shape == tensors[k].shape
            assert back[k].tobytes() == tensors[k].tobytes()

    def test_header_layout(self, tmp_path):
        save_checkpoint(tmp_path / "x.rkck", {"w": np.array([1.5])})
        raw = (tmp_path / "x.rkck").read_bytes()
        assert raw[:4] == b"RKCK"
        assert int.from_bytes(raw[4:6], "little") == 1
        assert raw[-8:] == np.array([1.5], "<f8").tobytes()

    @pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "trailing"])
    def test_validation(self, tmp_path, mutate):
        path = tmp_path / "x.rkck"
        save_checkpoint(path, {"w": np.ones((2, 2))})
        raw = bytearray(path.read_bytes())
        if mutate == "magic":
            raw[0:4] = b"XXXX"
        elif mutate == "version":
            raw[4] = 9
        elif mutate == "truncate":
            raw = raw[:-3]
        else:
            raw += b"\0"
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            load_checkpoint(path)
