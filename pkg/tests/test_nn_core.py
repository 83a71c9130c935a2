import numpy as np
import pytest

from voxeldet import nn_core
from voxeldet.nn_core import (
    AdamW,
    BatchNorm,
    BatchNormState,
    Conv2d,
    ConvSpec,
    Tensor,
    batch_norm,
    clamp,
    concat_channels,
    conv2d,
    load_checkpoint,
    logsumexp,
    maxpool2,
    narrow,
    relu,
    save_checkpoint,
    sigmoid,
    softmax,
    upsample_nearest2,
)

from helpers import conv2d_naive, finite_diff_error, projected_loss, random_cotangent


def _param(arr):
    return Tensor(arr, requires_grad=True)


class TestConv2d:
    def test_identity_1x1(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 4, 4)))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        spec = ConvSpec(3, 3, kernel=1)
        out = conv2d(x, w, None, spec)
        np.testing.assert_allclose(out.data, x.data)

    def test_ones_kernel_on_one_hot(self):
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 2] = 1.0
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(Tensor(x), w, None, ConvSpec(1, 1, kernel=3, padding=1))
        expected = np.zeros((5, 5))
        expected[1:4, 1:4] = 1.0
        np.testing.assert_allclose(out.data[0, 0], expected)

    def test_dilated_shape(self):
        x = Tensor(np.random.default_rng(1).normal(size=(1, 2, 7, 7)))
        spec = ConvSpec(2, 4, kernel=3, padding=2, dilation=2)
        w = Tensor(np.random.default_rng(2).normal(size=(4, 2, 3, 3)))
        out = conv2d(x, w, None, spec)
        assert out.shape == (1, 4, 7, 7)

    def test_identity_kernel_is_identity_map(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 3, 6, 5)))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = conv2d(x, Tensor(w), None, ConvSpec(3, 3, kernel=3, padding=1))
        np.testing.assert_allclose(out.data, x.data)

    @pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 2, 2)])
    def test_matches_naive_oracle(self, stride, padding, dilation):
        rng = np.random.default_rng(stride * 10 + padding * 3 + dilation)
        x = rng.normal(size=(2, 3, 9, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        spec = ConvSpec(3, 4, kernel=3, stride=stride, padding=padding, dilation=dilation)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), spec)
        expected = conv2d_naive(x, w, b, stride, padding, dilation)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        x = _param(rng.normal(size=(2, 3, 8, 8)))
        w = _param(rng.normal(size=(4, 3, 3, 3)) * 0.3)
        b = _param(rng.normal(size=4))
        spec = ConvSpec(3, 4, kernel=3, stride=2, padding=1)
        cot = random_cotangent((2, 4, 4, 4), seed=8)

        def loss():
            return projected_loss(conv2d(x, w, b, spec), cot)

        assert finite_diff_error(loss, [x, w, b], max_entries=40) < 1e-5

    def test_shape_mismatch_raises(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        w = Tensor(np.zeros((2, 5, 3, 3)))
        with pytest.raises(ValueError):
            conv2d(x, w, None, ConvSpec(5, 2, kernel=3))


class TestBatchNorm:
    def test_constant_channel_zero_centered(self):
        bn = BatchNorm(2)
        x = Tensor(np.full((4, 2, 3, 3), 7.0))
        out = bn(x)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_eval_identity_with_unit_stats(self):
        bn = BatchNorm(3, eps=0.0).eval()
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
        out = bn(x)
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_train_normalizes_samples(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(5.0, 2.0, size=(8, 1, 25, 25)))
        gamma, beta = _param(np.ones(1)), _param(np.zeros(1))
        out = batch_norm(x, gamma, beta, BatchNormState(1), training=True, eps=1e-9)
        assert abs(out.data.mean()) < 1e-6
        assert abs(out.data.var() - 1.0) < 1e-6

    def test_zero_variance_channel_finite(self):
        bn = BatchNorm(1)
        out = bn(Tensor(np.full((2, 1, 2, 2), 3.0)))
        assert np.all(np.isfinite(out.data))

    def test_running_stats_update(self):
        bn = BatchNorm(1, momentum=0.9)
        x = Tensor(np.full((1, 1, 2, 2), 4.0))
        bn(x)
        np.testing.assert_allclose(bn.state.running_mean, [0.4])

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradcheck(self, mode):
        rng = np.random.default_rng(11)
        x = _param(rng.normal(size=(3, 2, 4, 4)))
        gamma = _param(rng.normal(1.0, 0.1, size=2))
        beta = _param(rng.normal(size=2))
        state = BatchNormState(2)
        state.running_mean[:] = rng.normal(size=2)
        state.running_var[:] = 1.0 + rng.random(2)
        cot = random_cotangent((3, 2, 4, 4), seed=12)

        def loss():
            out = batch_norm(x, gamma, beta, state if mode == "eval" else BatchNormState(2),
                             training=(mode == "train"))
            return projected_loss(out, cot)

        assert finite_diff_error(loss, [x, gamma, beta], max_entries=30) < 1e-4


class TestActivations:
    def test_relu_values(self):
        out = relu(Tensor([-1.0, 2.0]))
        np.testing.assert_allclose(out.data, [0.0, 2.0])

    def test_sigmoid_zero(self):
        assert sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_extreme_stable(self):
        out = sigmoid(Tensor([-800.0, 800.0]))
        assert np.all(np.isfinite(out.data))

    def test_softmax_equal_logits(self):
        out = softmax(Tensor(np.zeros((1, 2, 2, 2))), axis=1)
        np.testing.assert_allclose(out.data, 0.5)

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(3)
        out = softmax(Tensor(rng.normal(scale=30.0, size=(2, 5, 3, 3))), axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_logsumexp_matches_numpy(self):
        rng = np.random.default_rng(4)
        x = rng.normal(scale=50.0, size=(3, 4))
        out = logsumexp(Tensor(x), axis=1)
        expected = np.log(np.exp(x - x.max(axis=1, keepdims=True)).sum(axis=1)) + x.max(axis=1)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


class TestPoolingAndShape:
    def test_maxpool_values(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        np.testing.assert_allclose(maxpool2(x).data, [[[[4.0]]]])

    def test_upsample_replicates(self):
        x = Tensor(np.array([[7.0]]).reshape(1, 1, 1, 1))
        np.testing.assert_allclose(upsample_nearest2(x).data, np.full((1, 1, 2, 2), 7.0))

    def test_concat_channel_count(self):
        a = Tensor(np.zeros((1, 2, 3, 3)))
        b = Tensor(np.zeros((1, 3, 3, 3)))
        assert concat_channels([a, b]).shape == (1, 5, 3, 3)

    def test_narrow_roundtrip(self):
        x = Tensor(np.arange(24.0).reshape(1, 2, 3, 4))
        sl = narrow(x, 3, 1, 2)
        np.testing.assert_allclose(sl.data, x.data[:, :, :, 1:3])


class TestBackward:
    def test_relu_sum_gradient(self):
        x = _param(np.array([1.0, 2.0, 3.0]))
        relu(x).sum().backward()
        np.testing.assert_allclose(x.grad, 1.0)

    def test_backward_non_scalar_raises(self):
        x = _param(np.ones(3))
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_graph_reusable_after_reset(self):
        x = _param(np.array([2.0]))
        (x * x).sum().backward()
        first = x.grad.copy()
        x.zero_grad()
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, first)

    def test_grad_accumulates_across_uses(self):
        x = _param(np.array([3.0]))
        (x + x).sum().backward()
        np.testing.assert_allclose(x.grad, 2.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_elementwise_chain_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        x = _param(rng.normal(size=(3, 4)) + 3.0)
        y = _param(rng.normal(size=(3, 4)) + 3.0)
        cot = random_cotangent((3, 4), seed + 100)

        def loss():
            out = sigmoid(x * y - x / y + nn_core.log(clamp(x, 0.5, 10.0)))
            return projected_loss(out, cot)

        assert finite_diff_error(loss, [x, y]) < 1e-6


class TestAdamW:
    def test_zero_grad_zero_decay_keeps_params(self):
        p = _param(np.array([1.0, -2.0]))
        opt = AdamW({"w": p}, lr=0.1, weight_decay=0.0)
        opt.step()
        np.testing.assert_allclose(p.data, [1.0, -2.0])

    def test_descends_quadratic(self):
        p = _param(np.array([1.0]))
        opt = AdamW({"w": p}, lr=0.1, weight_decay=0.0)
        loss = (p * p).sum()
        loss.backward()
        opt.step()
        assert p.data[0] ** 2 < 1.0

    def test_decoupled_weight_decay(self):
        p = _param(np.array([1.0]))
        opt = AdamW({"w": p}, lr=0.1, weight_decay=0.01, no_decay=())
        opt.step()
        np.testing.assert_allclose(p.data, [1.0 * (1 - 0.001)])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "a.weight": rng.normal(size=(3, 2)),
            "b.bias": rng.normal(size=(5,)),
            "scalar": np.array(3.5),
        }
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, tensors)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(tensors)
        for k in tensors:
            np.testing.assert_array_equal(loaded[k], np.asarray(tensors[k], dtype=np.float64))

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, {"w": np.ones(4)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)


class TestModule:
    def test_state_dict_roundtrip(self):
        rng = np.random.default_rng(0)
        conv = Conv2d(ConvSpec(2, 3, kernel=3), rng)
        bn = BatchNorm(3)
        parent = nn_core.Module()
        parent.conv = conv
        parent.bn = bn
        state = {k: v.copy() for k, v in parent.state_dict().items()}
        for p in parent.named_parameters().values():
            p.data += 1.0
        parent.load_state_dict(state)
        for k, v in parent.state_dict().items():
            np.testing.assert_array_equal(v, state[k])

    def test_load_rejects_unknown_keys(self):
        bn = BatchNorm(2)
        state = bn.state_dict()
        state["bogus"] = np.zeros(1)
        with pytest.raises(KeyError):
            bn.load_state_dict(state)
