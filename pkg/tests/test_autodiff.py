import numpy as np
import pytest

from abrkit import nn
from gradcheck import assert_gradients_match, generic_target_loss


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestGradientChecks:
    """Every layer's analytic gradient vs the finite-difference oracle."""

    @pytest.mark.parametrize("k", [3, 5, 7])
    def test_conv1d_same(self, rng, k):
        x = nn.Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True)
        w = nn.Tensor(rng.normal(size=(4, 3, k)) * 0.5, requires_grad=True)
        b = nn.Tensor(rng.normal(size=4), requires_grad=True)
        build = generic_target_loss(lambda: nn.conv1d(x, w, b, padding="same"), rng)
        assert_gradients_match(build, [x, w, b], what=f"conv1d same K={k}")

    def test_conv1d_valid_even_kernel(self, rng):
        x = nn.Tensor(rng.normal(size=(2, 2, 8)), requires_grad=True)
        w = nn.Tensor(rng.normal(size=(3, 2, 4)) * 0.5, requires_grad=True)
        b = nn.Tensor(rng.normal(size=3), requires_grad=True)
        build = generic_target_loss(lambda: nn.conv1d(x, w, b, padding="valid"), rng)
        assert_gradients_match(build, [x, w, b], what="conv1d valid K=4")

    def test_se_block(self, rng):
        se = nn.SEBlock(4, rng, reduction=2)
        x = nn.Tensor(rng.normal(size=(2, 4, 6)), requires_grad=True)
        params = list(se.parameters().values()) + [x]
        build = generic_target_loss(lambda: se(x), rng)
        assert_gradients_match(build, params, what="se_block")

    def test_batch_norm_training(self, rng):
        bn = nn.BatchNorm1d(3)
        bn.gamma.data[:] = rng.normal(1.0, 0.3, 3)
        bn.beta.data[:] = rng.normal(0.0, 0.3, 3)
        x = nn.Tensor(rng.normal(size=(4, 3, 5)), requires_grad=True)

        def forward():
            bn.running_mean[:] = 0.0  # pin buffer side effects for replays
            bn.running_var[:] = 1.0
            return bn(x)

        build = generic_target_loss(forward, rng)
        assert_gradients_match(build, [bn.gamma, bn.beta, x], what="batch_norm")

    def test_max_pool(self, rng):
        x = nn.Tensor(rng.normal(size=(2, 3, 7)), requires_grad=True)
        build = generic_target_loss(lambda: nn.max_pool1d(x, 2), rng)
        assert_gradients_match(build, [x], what="max_pool")

    def test_fully_connected_softmax_cross_entropy(self, rng):
        lin = nn.Linear(5, 4, rng)
        x = nn.Tensor(rng.normal(size=(6, 5)))
        labels = rng.integers(0, 4, size=6)
        weights = rng.uniform(0.5, 2.0, size=4)
        build = lambda: nn.cross_entropy(lin(x), labels, class_weights=weights)
        assert_gradients_match(build, list(lin.parameters().values()), what="fc+softmax/ce")

    def test_channel_shuffle_pass_through(self, rng):
        x = nn.Tensor(rng.normal(size=(2, 6, 4)), requires_grad=True)
        build = generic_target_loss(lambda: nn.channel_shuffle(x, 3), rng)
        assert_gradients_match(build, [x], what="channel_shuffle")

    def test_residual_and_elementwise(self, rng):
        a = nn.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = nn.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        build = generic_target_loss(lambda: nn.residual_add(nn.relu(a), nn.sigmoid(b)), rng)
        assert_gradients_match(build, [a, b], what="residual/relu/sigmoid")


class TestConvExamples:
    def test_identity_kernel(self):
        out = nn.conv1d(nn.Tensor([[1.0, 2.0, 3.0]]), nn.Tensor([[[0.0, 1.0, 0.0]]]))
        assert out.data.tolist() == [[1.0, 2.0, 3.0]]

    def test_shift_kernel_zero_pad(self):
        out = nn.conv1d(nn.Tensor([[1.0, 2.0, 3.0]]), nn.Tensor([[[0.0, 0.0, 1.0]]]))
        assert out.data.tolist() == [[2.0, 3.0, 0.0]]

    def test_even_kernel_same_padding_rejected(self):
        with pytest.raises(nn.ShapeMismatch):
            nn.conv1d(nn.Tensor([[1.0, 2.0, 3.0]]), nn.Tensor([[[1.0, 1.0]]]))

    def test_output_width_preserved(self, rng):
        x = nn.Tensor(rng.normal(size=(5, 3, 20)))
        w = nn.Tensor(rng.normal(size=(7, 3, 5)))
        assert nn.conv1d(x, w).shape == (5, 7, 20)


class TestSeBlockExamples:
    def test_zero_params_gate_half(self, rng):
        se = nn.SEBlock(4, rng, reduction=2)
        for p in se.parameters().values():
            p.data[:] = 0.0
        x = nn.Tensor(rng.normal(size=(2, 4, 5)))
        assert np.allclose(se(x).data, 0.5 * x.data)

    def test_zero_input_stays_zero(self, rng):
        se = nn.SEBlock(4, rng, reduction=2)
        x = nn.Tensor(np.zeros((2, 4, 5)))
        assert np.allclose(se(x).data, 0.0)

    def test_hand_computed_gates(self):
        rng = np.random.default_rng(1)
        se = nn.SEBlock(2, rng, reduction=1)
        se.fc1.w.data[:] = np.eye(2)
        se.fc1.b.data[:] = 0.0
        se.fc2.w.data[:] = np.array([[1.0, 0.0], [0.0, -1.0]])
        se.fc2.b.data[:] = 0.0
        x = nn.Tensor(np.array([[[2.0, 2.0, 2.0], [4.0, 4.0, 4.0]]]))
        # pool = [2, 4] -> relu(I @ pool) = [2, 4] -> fc2 -> [2, -4]
        gates = [1 / (1 + np.exp(-2.0)), 1 / (1 + np.exp(4.0))]
        expected = x.data * np.array(gates)[None, :, None]
        assert np.allclose(se(x).data, expected)


class TestChannelShuffle:
    def test_six_channels_three_groups(self):
        assert nn.shuffle_permutation(6, 3).tolist() == [0, 2, 4, 1, 3, 5]

    def test_groups_one_identity(self, rng):
        x = nn.Tensor(rng.normal(size=(2, 5, 3)))
        assert np.array_equal(nn.channel_shuffle(x, 1).data, x.data)

    def test_invertible(self, rng):
        x = rng.normal(size=(2, 12, 3))
        perm = nn.shuffle_permutation(12, 3)
        inv = np.argsort(perm)
        shuffled = nn.channel_shuffle(nn.Tensor(x), 3).data
        assert np.array_equal(shuffled[:, inv, :], x)

    def test_permutation_preserves_multiset(self, rng):
        x = rng.normal(size=(1, 9, 4))
        out = nn.channel_shuffle(nn.Tensor(x), 3).data
        assert np.array_equal(np.sort(out, axis=1), np.sort(x, axis=1))

    def test_indivisible_channels(self, rng):
        with pytest.raises(nn.IndivisibleChannels):
            nn.channel_shuffle(nn.Tensor(rng.normal(size=(1, 7, 3))), 3)


class TestResidual:
    def test_zero_branch(self, rng):
        x = nn.Tensor(rng.normal(size=(3, 4)))
        assert np.array_equal(nn.residual_add(x, nn.Tensor(np.zeros((3, 4)))).data, x.data)

    def test_cancellation(self, rng):
        x = rng.normal(size=(3, 4))
        out = nn.residual_add(nn.Tensor(x), nn.Tensor(-x))
        assert np.allclose(out.data, 0.0)

    def test_shape_mismatch(self, rng):
        with pytest.raises(nn.ShapeMismatch):
            nn.residual_add(nn.Tensor(np.zeros((2, 3))), nn.Tensor(np.zeros((3, 2))))

    def test_gradient_is_upstream(self, rng):
        a = nn.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        b = nn.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        nn.backward(nn.tsum(nn.residual_add(a, b)))
        assert np.allclose(a.grad, 1.0)
        assert np.allclose(b.grad, 1.0)


class TestStandardOps:
    def test_batch_norm_zero_variance_gives_shift(self):
        bn = nn.BatchNorm1d(2)
        bn.beta.data[:] = [3.0, -1.0]
        x = nn.Tensor(np.full((4, 2, 5), 7.0))
        out = bn(x)
        assert np.allclose(out.data[:, 0, :], 3.0)
        assert np.allclose(out.data[:, 1, :], -1.0)

    def test_softmax_uniform_on_zeros(self):
        out = nn.softmax(nn.Tensor(np.zeros(5)))
        assert np.allclose(out.data, 0.2)

    def test_softmax_simplex(self, rng):
        out = nn.softmax(nn.Tensor(rng.normal(size=(10, 6)) * 30))
        assert np.abs(out.data.sum(axis=-1) - 1.0).max() < 1e-12
        assert (out.data >= 0).all()

    def test_dropout_p0_identity_in_training(self, rng):
        x = nn.Tensor(rng.normal(size=(3, 3)))
        assert nn.dropout(x, 0.0, rng, training=True) is x

    def test_dropout_invalid_probability(self, rng):
        x = nn.Tensor(np.zeros(3))
        for p in (-0.1, 1.0, 1.5):
            with pytest.raises(nn.InvalidProbability):
                nn.dropout(x, p, rng, training=True)

    def test_dropout_scales_survivors(self, rng):
        x = nn.Tensor(np.ones((100, 100)))
        out = nn.dropout(x, 0.5, rng, training=True)
        kept = out.data[out.data != 0]
        assert np.allclose(kept, 2.0)

    def test_inference_forward_frozen_and_pure(self, rng):
        bn = nn.BatchNorm1d(3)
        bn.running_mean[:] = [1.0, 2.0, 3.0]
        bn.running_var[:] = [1.0, 4.0, 9.0]
        bn.eval()
        x = nn.Tensor(rng.normal(size=(2, 3, 4)))
        a = bn(x).data
        b = bn(x).data
        assert np.array_equal(a, b)
        assert bn.running_mean.tolist() == [1.0, 2.0, 3.0]


class TestBackwardMechanics:
    def test_linear_case(self, rng):
        x = rng.normal(size=(4,))
        w = nn.Tensor(rng.normal(size=(4,)), requires_grad=True)
        nn.backward(nn.tsum(nn.mul(w, nn.Tensor(x))))
        assert np.allclose(w.grad, x)

    def test_accumulation_doubles(self, rng):
        w = nn.Tensor(rng.normal(size=(3,)), requires_grad=True)
        x = nn.Tensor(rng.normal(size=(3,)))
        nn.backward(nn.tsum(nn.mul(w, x)))
        once = w.grad.copy()
        nn.backward(nn.tsum(nn.mul(w, x)))
        assert np.allclose(w.grad, 2 * once)

    def test_no_tape_in_inference(self, rng):
        w = nn.Tensor(rng.normal(size=(3,)), requires_grad=True)
        with nn.no_grad():
            loss = nn.tsum(nn.square(w))
        with pytest.raises(nn.NoTape):
            nn.backward(loss)

    def test_diamond_graph(self, rng):
        w = nn.Tensor(np.array([2.0]), requires_grad=True)
        y = nn.mul(w, w)  # w^2: both parents are the same tensor
        nn.backward(nn.tsum(y))
        assert np.allclose(w.grad, 4.0)

    def test_non_finite_forward_raises(self):
        with pytest.raises(nn.NonFiniteValue):
            nn.log(nn.Tensor(np.zeros(2)))


class TestAdam:
    def test_zero_grad_no_motion(self, rng):
        w = nn.Tensor(rng.normal(size=(3,)), requires_grad=True)
        before = w.data.copy()
        nn.Adam({"w": w}, lr=0.1).step()
        assert np.array_equal(w.data, before)

    def test_single_step_magnitude(self):
        w = nn.Tensor(np.array([1.0]), requires_grad=True)
        w.grad[:] = 1.0
        nn.Adam({"w": w}, lr=1e-2).step()
        assert w.data[0] == pytest.approx(1.0 - 1e-2, rel=1e-6)

    def test_grads_zeroed_after_step(self):
        w = nn.Tensor(np.array([1.0]), requires_grad=True)
        w.grad[:] = 1.0
        nn.Adam({"w": w}, lr=1e-2).step()
        assert w.grad[0] == 0.0

    def test_deterministic_trajectory(self, rng):
        def run():
            local = np.random.default_rng(3)
            w = nn.Tensor(local.normal(size=(4,)), requires_grad=True)
            opt = nn.Adam({"w": w}, lr=1e-3)
            for _ in range(5):
                nn.backward(nn.tsum(nn.square(w)))
                opt.step()
            return w.data.copy()

        assert np.array_equal(run(), run())

    def test_uninitialized_state(self):
        w = nn.Tensor(np.zeros(2))  # no grad buffer
        with pytest.raises(nn.UninitializedState):
            nn.Adam({"w": w}, lr=1e-3)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        state = {"a.w": rng.normal(size=(3, 4)), "b": rng.normal(size=(5,))}
        path = tmp_path / "model.ckpt"
        nn.save_params(path, state, meta={"kind": "test"})
        loaded, meta = nn.load_params(path)
        assert meta == {"kind": "test"}
        for k in state:
            assert np.array_equal(loaded[k], state[k])

    def test_truncated_payload(self, tmp_path, rng):
        path = tmp_path / "model.ckpt"
        nn.save_params(path, {"w": rng.normal(size=(4,))})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(nn.CheckpointError):
            nn.load_params(path)

    def test_module_state_round_trip(self, tmp_path, rng):
        lin = nn.Linear(3, 2, rng)
        path = tmp_path / "lin.ckpt"
        nn.save_params(path, lin.state_dict())
        state, _ = nn.load_params(path)
        other = nn.Linear(3, 2, np.random.default_rng(99))
        other.load_state_dict(state)
        assert np.array_equal(other.w.data, lin.w.data)
