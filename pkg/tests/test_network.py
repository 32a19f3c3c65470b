import numpy as np
import pytest

from conftest import check_gradients, random_net
from prune3d.errors import NumericError, PlanInconsistencyError, ShapeError, UsageError
from prune3d.groups import partition
from prune3d.network import (
    Conv3D,
    Dataset,
    Flatten,
    FullyConnected,
    MaxPool3D,
    Network,
    ReLU,
    SoftmaxCrossEntropy,
    TrainConfig,
    backward,
    build_toy_net,
    evaluate,
    sgd_step,
    train,
)
from prune3d.tensor_core import ConvSpec

# float64 toy net (seed 0) on the seed-42 batch below; recorded after the
# gradient checks in this file passed
GOLDEN_LOSS = 2.459204762338864


def fc_net(n_in, n_out, W=None, b=None):
    layers = [Flatten("flatten"), FullyConnected("fc", n_in, n_out, W, b, dtype=np.float64),
              SoftmaxCrossEntropy("loss")]
    return Network(layers, (n_in,))


class TestForward:
    def test_uniform_logits_give_log_k(self):
        net = fc_net(3, 5, np.zeros((5, 3)), np.zeros(5))
        _, loss = net.forward(np.ones((4, 3)), np.array([0, 1, 2, 3]))
        assert loss == pytest.approx(np.log(5), abs=1e-12)

    def test_large_margin_gives_near_zero_loss(self):
        b = np.zeros(4)
        b[2] = 20.0
        net = fc_net(2, 4, np.zeros((4, 2)), b)
        _, loss = net.forward(np.zeros((3, 2)), np.array([2, 2, 2]))
        assert loss <= 1e-3

    def test_golden_loss(self):
        net = build_toy_net(seed=0, dtype=np.float64)
        x = np.random.default_rng(42).normal(size=(4, 2, 8, 16, 16)).astype(np.float32).astype(np.float64)
        _, loss = net.forward(x, np.array([0, 1, 2, 3]))
        assert loss == pytest.approx(GOLDEN_LOSS, abs=1e-6)

    def test_shape_mismatch(self):
        net = build_toy_net(seed=0)
        with pytest.raises(ShapeError):
            net.forward(np.zeros((1, 2, 8, 16, 15), dtype=np.float32), [0])

    def test_non_finite_activation_names_layer(self):
        net = build_toy_net(seed=0)
        x = np.zeros((1, 2, 8, 16, 16), dtype=np.float32)
        x[0, 0, 0, 0, 0] = np.inf
        with pytest.raises(NumericError, match="conv1"):
            net.forward(x, [0])

    def test_loss_node_must_be_last(self):
        with pytest.raises(ShapeError):
            Network([SoftmaxCrossEntropy("loss"), Flatten("f")], (2,))


class TestBackward:
    def test_fc_bias_gradient_closed_form(self):
        # zero-weight conv feeding a zero FC: logits are uniform
        spec = ConvSpec(1, 2, (1, 1, 1))
        layers = [Conv3D("conv1", spec, np.zeros(spec.weight_shape), dtype=np.float64), ReLU("relu"),
                  Flatten("flatten"), FullyConnected("fc", 2 * 8, 4, np.zeros((4, 16)), dtype=np.float64),
                  SoftmaxCrossEntropy("loss")]
        net = Network(layers, (1, 2, 2, 2))
        labels = np.array([0, 1, 1])
        grads = backward(net, np.random.default_rng(0).normal(size=(3, 1, 2, 2, 2)), labels)
        onehot = np.eye(4)[labels]
        np.testing.assert_allclose(grads["fc"]["b"], (np.full((3, 4), 0.25) - onehot).mean(axis=0), atol=1e-12)

    def test_relu_blocks_negative_units(self):
        relu = ReLU("r")
        relu.forward(np.array([[-1.0, 2.0, -0.5]]))
        np.testing.assert_array_equal(relu.backward(np.ones((1, 3))), [[0.0, 1.0, 0.0]])

    def test_maxpool_routes_to_first_max_on_ties(self):
        pool = MaxPool3D("p", (2, 2, 2))
        x = np.ones((1, 1, 2, 2, 2))
        pool.forward(x)
        dx = pool.backward(np.ones((1, 1, 1, 1, 1)))
        assert dx[0, 0, 0, 0, 0] == 1.0 and dx.sum() == 1.0

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_check_random_nets(self, seed):
        net, x, labels = random_net(np.random.default_rng(seed), compact=seed % 2 == 1)
        errors = check_gradients(net, x, labels)
        assert max(errors.values()) < 1e-4, errors


class TestSGD:
    def conv_net(self, W):
        spec = ConvSpec(1, 2, (1, 1, 1))
        layers = [Conv3D("conv1", spec, W, dtype=np.float64), Flatten("flatten"),
                  FullyConnected("fc", 2, 2, dtype=np.float64), SoftmaxCrossEntropy("loss")]
        return Network(layers, (1, 1, 1, 1))

    def zero_grads(self, net):
        return {l.name: {k: np.zeros_like(v) for k, v in l.params.items()} for l in net.layers if l.params}

    def test_pure_structured_decay(self):
        net = self.conv_net(np.ones((2, 1, 1, 1, 1)))
        part = partition(net["conv1"].params["W"], "filter", "conv1")
        sgd_step(net, self.zero_grads(net), TrainConfig(0.1, 0.0), {"conv1": (part, np.array([1.0, 1.0]))})
        np.testing.assert_allclose(net["conv1"].params["W"], 0.9)

    def test_zero_lambda_matches_plain_step(self):
        rng = np.random.default_rng(0)
        a = self.conv_net(rng.normal(size=(2, 1, 1, 1, 1)))
        b = a.copy()
        grads = {l.name: {k: rng.normal(size=v.shape) for k, v in l.params.items()} for l in a.layers if l.params}
        cfg = TrainConfig(0.1, 0.01)
        part = partition(a["conv1"].params["W"], "filter", "conv1")
        sgd_step(a, grads, cfg, {"conv1": (part, np.zeros(2))})
        sgd_step(b, grads, cfg)
        for la, lb in zip(a.layers, b.layers):
            for k in la.params:
                np.testing.assert_array_equal(la.params[k], lb.params[k])

    def test_geometric_decay_per_group(self):
        net = self.conv_net(np.ones((2, 1, 1, 1, 1)))
        part = partition(net["conv1"].params["W"], "filter", "conv1")
        lr, lam, lam_g = 0.1, 0.01, np.array([0.0, 0.5])
        cfg = TrainConfig(lr, lam)
        for _ in range(100):
            sgd_step(net, self.zero_grads(net), cfg, {"conv1": (part, lam_g)})
        W = net["conv1"].params["W"].ravel()
        np.testing.assert_allclose(W, (1 - lr * (lam + lam_g)) ** 100, rtol=1e-12)
        assert W[1] < W[0]

    def test_tiny_learning_rate_is_a_no_op(self):
        net, x, labels = random_net(np.random.default_rng(3))
        before = net.copy()
        grads = backward(net, x, labels)
        sgd_step(net, grads, TrainConfig(1e-12, 5e-4))
        for la, lb in zip(net.layers, before.layers):
            for k in la.params:
                assert np.max(np.abs(la.params[k] - lb.params[k])) < 1e-10

    def test_small_step_does_not_increase_loss(self):
        for seed in range(20):
            net, x, labels = random_net(np.random.default_rng(100 + seed))
            _, before = net.forward(x, labels)
            sgd_step(net, net.backward(), TrainConfig(1e-4, 0.0))
            _, after = net.forward(x, labels)
            assert after <= before + 1e-12

    def test_lambda_map_group_count_mismatch(self):
        net = self.conv_net(np.ones((2, 1, 1, 1, 1)))
        part = partition(net["conv1"].params["W"], "filter", "conv1")
        with pytest.raises(PlanInconsistencyError):
            sgd_step(net, self.zero_grads(net), TrainConfig(), {"conv1": (part, np.zeros(3))})

    def test_lambda_map_unknown_layer(self):
        net = self.conv_net(np.ones((2, 1, 1, 1, 1)))
        part = partition(net["conv1"].params["W"], "filter", "conv1")
        with pytest.raises(PlanInconsistencyError):
            sgd_step(net, self.zero_grads(net), TrainConfig(), {"convX": (part, np.zeros(2))})

    def test_config_validation(self):
        with pytest.raises(UsageError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(UsageError):
            TrainConfig(batch_size=0)


class TestEvaluate:
    def test_constant_logits_pick_lowest_class(self):
        net = fc_net(2, 4, np.zeros((4, 2)), np.zeros(4))
        ds = Dataset(np.zeros((8, 2)), np.repeat(np.arange(4), 2), 4)
        assert evaluate(net, ds) == 0.25

    def test_memorizing_net_on_its_train_set(self):
        ds = Dataset(np.eye(3), np.arange(3), 3)
        net = fc_net(3, 3, 10 * np.eye(3), np.zeros(3))
        assert evaluate(net, ds) == 1.0

    def test_empty_dataset(self):
        with pytest.raises(UsageError):
            evaluate(fc_net(2, 2), Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 2))

    def test_training_is_deterministic(self):
        rng = np.random.default_rng(0)
        ds = Dataset(rng.normal(size=(20, 1, 3, 3, 3)).astype(np.float32), rng.integers(0, 2, 20), 2)
        spec = ConvSpec(1, 2, (3, 3, 3), padding=(1, 1, 1))

        def make():
            r = np.random.default_rng(5)
            return Network([Conv3D("conv1", spec, rng=r), ReLU("r"), Flatten("f"),
                            FullyConnected("fc", 54, 2, rng=r), SoftmaxCrossEntropy("loss")], (1, 3, 3, 3))

        cfg = TrainConfig(0.05, 5e-4, 4, 30, 7)
        a, b = make(), make()
        assert train(a, ds, cfg) == train(b, ds, cfg)
        np.testing.assert_array_equal(a["conv1"].params["W"], b["conv1"].params["W"])
