import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msfacedet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from msfacedet.gradcheck import finite_difference_check
from msfacedet.tensor import (
    ConvParams,
    LinearParams,
    ShapeError,
    Tensor,
    conv2d,
    conv2d_backward,
    conv_out_size,
    fully_connected,
    make_conv,
    maxpool2d,
    relu,
    smooth_l1,
    softmax_cross_entropy,
)


def _conv(weight, bias, stride=1, pad=0):
    return ConvParams(Tensor(weight, requires_grad=True), Tensor(bias, requires_grad=True), stride, pad)


class TestConv2d:
    def test_same_size_padding(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 1, 8, 8))
        p = make_conv(rng, 4, 1, 3, stride=1, pad=1)
        out, _ = conv2d(x, p)
        assert out.shape == (1, 4, 8, 8)

    def test_zero_weights_give_zero_output(self):
        x = np.random.default_rng(1).standard_normal((2, 3, 6, 6))
        p = _conv(np.zeros((5, 3, 3, 3)), np.zeros(5), 1, 1)
        out, _ = conv2d(x, p)
        assert np.all(out == 0.0)

    def test_channel_mismatch_rejected_with_both_shapes(self):
        x = np.zeros((1, 2, 5, 5))
        p = _conv(np.zeros((3, 4, 3, 3)), np.zeros(3))
        with pytest.raises(ShapeError, match=r"2.*\(1, 2, 5, 5\)|\(1, 2, 5, 5\).*4"):
            conv2d(x, p)

    def test_linearity_in_input(self):
        rng = np.random.default_rng(2)
        p = make_conv(rng, 3, 2, 3, stride=1, pad=1)
        p.weight.data[...] = rng.standard_normal(p.weight.data.shape)
        x = rng.standard_normal((1, 2, 7, 7))
        y = rng.standard_normal((1, 2, 7, 7))
        a, b = 1.7, -0.4
        p.bias.data[...] = 0.0
        lhs, _ = conv2d(a * x + b * y, p)
        rhs = a * conv2d(x, p)[0] + b * conv2d(y, p)[0]
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    @given(
        h=st.integers(3, 12),
        w=st.integers(3, 12),
        k=st.sampled_from([1, 3, 5]),
        stride=st.integers(1, 3),
        pad=st.integers(0, 2),
    )
    @settings(max_examples=40, deadline=None)
    def test_shape_algebra(self, h, w, k, stride, pad):
        if h + 2 * pad < k or w + 2 * pad < k:
            return
        x = np.zeros((1, 2, h, w))
        p = _conv(np.zeros((3, 2, k, k)), np.zeros(3), stride, pad)
        out, _ = conv2d(x, p)
        assert out.shape == (1, 3, conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 5, 5))
        p = make_conv(rng, 3, 2, 3, stride=1, pad=1)
        p.weight.data[...] = rng.standard_normal(p.weight.data.shape)
        out, cache = conv2d(x, p)
        proj = rng.standard_normal(out.shape)
        dx = conv2d_backward(proj, cache)
        err = finite_difference_check(
            lambda: float((conv2d(x, p)[0] * proj).sum()),
            [x, p.weight.data, p.bias.data],
            [dx, p.weight.grad, p.bias.grad],
        )
        assert err <= 1e-4


class TestMaxPool:
    def test_two_by_two(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out, _ = maxpool2d(x, 2, 2)
        assert out.reshape(-1).tolist() == [4.0]

    def test_tie_routes_to_first_element(self):
        x = np.full((1, 1, 4, 4), 2.5)
        out, (shape, flat) = maxpool2d(x, 2, 2)
        assert np.all(out == 2.5)
        # winner of each window is its lowest linear index
        assert flat.reshape(-1).tolist() == [0, 2, 8, 10]

    def test_window_too_large_rejected(self):
        with pytest.raises(ShapeError):
            maxpool2d(np.zeros((1, 1, 3, 3)), 4, 1)

    def test_gradcheck_away_from_ties(self):
        rng = np.random.default_rng(4)
        x = (rng.permutation(1 * 3 * 6 * 6) * 0.01).reshape(1, 3, 6, 6)
        out, cache = maxpool2d(x, 2, 2)
        proj = rng.standard_normal(out.shape)
        from msfacedet.tensor import maxpool2d_backward

        dx = maxpool2d_backward(proj, cache)
        err = finite_difference_check(lambda: float((maxpool2d(x, 2, 2)[0] * proj).sum()), [x], [dx])
        assert err <= 1e-4


class TestRelu:
    def test_values(self):
        out, _ = relu(np.array([-1.0, 0.0, 2.0]))
        assert out.tolist() == [0.0, 0.0, 2.0]

    def test_identity_on_positive(self):
        x = np.random.default_rng(5).uniform(0.5, 2.0, size=(3, 4))
        out, _ = relu(x)
        assert np.array_equal(out, x)

    def test_zero_subgradient_at_zero(self):
        from msfacedet.tensor import relu_backward

        _, cache = relu(np.array([0.0, -1.0, 1.0]))
        dx = relu_backward(np.ones(3), cache)
        assert dx.tolist() == [0.0, 0.0, 1.0]


class TestFullyConnected:
    def test_identity_weights(self):
        x = np.random.default_rng(6).standard_normal((3, 4))
        p = LinearParams(Tensor(np.eye(4)), Tensor(np.zeros(4)))
        out, _ = fully_connected(x, p)
        assert np.allclose(out, x)

    def test_zero_weights_bias_only(self):
        b = np.array([1.0, -2.0, 0.5])
        p = LinearParams(Tensor(np.zeros((4, 3))), Tensor(b))
        out, _ = fully_connected(np.ones((2, 4)), p)
        assert np.allclose(out, np.tile(b, (2, 1)))

    def test_dimension_mismatch_rejected(self):
        p = LinearParams(Tensor(np.zeros((4, 3))), Tensor(np.zeros(3)))
        with pytest.raises(ShapeError):
            fully_connected(np.zeros((2, 5)), p)


class TestSoftmaxCrossEntropy:
    def test_symmetric_two_way(self):
        loss, probs, _ = softmax_cross_entropy(np.zeros((1, 2)), np.array([0]))
        assert probs[0].tolist() == [0.5, 0.5]
        assert abs(loss - np.log(2.0)) < 1e-12

    def test_saturated_logit_near_zero_loss(self):
        logits = np.array([[1000.0, 0.0, 0.0]])
        loss, _, _ = softmax_cross_entropy(logits, np.array([0]))
        assert loss < 1e-9

    def test_rows_sum_to_one_for_huge_logits(self):
        rng = np.random.default_rng(7)
        logits = rng.uniform(-1e4, 1e4, size=(5, 6))
        _, probs, _ = softmax_cross_entropy(logits, np.zeros(5, dtype=int))
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-6

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError, match="range"):
            softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


class TestSmoothL1:
    def test_zero_difference(self):
        x = np.ones((2, 2))
        loss, _ = smooth_l1(x, x, np.ones_like(x))
        assert loss == 0.0

    def test_hand_values(self):
        pred = np.array([0.5, 2.0])
        target = np.zeros(2)
        loss, _ = smooth_l1(pred, target, np.array([1.0, 0.0]))
        assert abs(loss - 0.125) == 0.0
        loss2, _ = smooth_l1(pred, target, np.array([0.0, 1.0]))
        assert abs(loss2 - 1.5) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            smooth_l1(np.zeros(3), np.zeros(4), np.zeros(3))


class TestFiniteDifferenceHarness:
    def test_linear_map_is_exact(self):
        x = np.array([1.0, -2.0, 0.5])
        grad = np.full(3, 3.0)
        err = finite_difference_check(lambda: float(3.0 * x.sum()), [x], [grad])
        assert err < 1e-9

    def test_corrupted_backward_fails_loudly(self):
        x = np.array([0.7, -1.3])
        grad = 2.0 * np.array([2.0 * x[0], 2.0 * x[1]])  # doubled: wrong
        err = finite_difference_check(lambda: float((x**2).sum()), [x], [grad])
        assert err > 0.1


class TestTensor:
    def test_grad_shape_enforced(self):
        t = Tensor(np.zeros((2, 3)), requires_grad=True)
        t.grad = np.zeros((3, 2))
        with pytest.raises(ShapeError):
            t.ensure_grad()


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        params = {
            "backbone.s1.c1.weight": rng.standard_normal((4, 1, 3, 3)),
            "norm.tap3.gamma": rng.standard_normal(7),
            "det.cls.bias": np.array([np.pi, -0.0]),
        }
        path = tmp_path / "model.msfr"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert list(loaded) == list(params)
        for k in params:
            assert loaded[k].shape == params[k].shape
            assert np.array_equal(
                loaded[k].view(np.uint64), np.asarray(params[k]).view(np.uint64)
            )
        # saving the loaded dict reproduces the file byte for byte
        path2 = tmp_path / "model2.msfr"
        save_checkpoint(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.msfr"
        path.write_bytes(b"NOPE!")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "model.msfr"
        save_checkpoint(path, {"w": np.ones(4)})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
