import numpy as np
import pytest

from conftest import toy_dataset
from prune3d.baselines import (
    baseline_prune,
    filter_plan_for_speedup,
    l1_filter_scores,
    select_filters,
    taylor_from_activations,
    taylor_scores,
)
from prune3d.errors import UsageError
from prune3d.flops_report import network_profile, speedup
from prune3d.groups import group_l1, partition
from prune3d.network import (
    Conv3D,
    Flatten,
    FullyConnected,
    Network,
    ReLU,
    SoftmaxCrossEntropy,
    TrainConfig,
    build_toy_net,
)
from prune3d.tensor_core import ConvSpec


def two_conv_net(n1=4, seed=0, dead_filter=None):
    rng = np.random.default_rng(seed)
    spec1 = ConvSpec(1, n1, (3, 3, 3), padding=(1, 1, 1))
    conv1 = Conv3D("conv1", spec1, rng=rng, dtype=np.float64)
    conv1.params["b"][...] = 0.1
    if dead_filter is not None:
        conv1.params["W"][dead_filter] = 0
        conv1.params["b"][dead_filter] = 0
    spec2 = ConvSpec(n1, 3, (3, 3, 3), padding=(1, 1, 1))
    layers = [conv1, ReLU("relu1"), Conv3D("conv2", spec2, rng=rng, dtype=np.float64), ReLU("relu2"),
              Flatten("flatten"), FullyConnected("fc", 3 * 27, 2, rng=rng, dtype=np.float64),
              SoftmaxCrossEntropy("loss")]
    return Network(layers, (1, 3, 3, 3))


class TestTaylor:
    def test_zero_gradient(self):
        a = np.random.default_rng(0).normal(size=(2, 3, 4))
        assert not taylor_from_activations(a, np.zeros_like(a)).any()

    def test_single_unit(self):
        assert taylor_from_activations(np.full((1, 1, 1), 2.0), np.full((1, 1, 1), 3.0))[0] == 6.0

    def test_dead_filter_scores_zero_and_ranks_last(self):
        net = two_conv_net(dead_filter=2)
        ds = toy_dataset(n=16, shape=(1, 3, 3, 3))
        scores = taylor_scores(net, [(ds.x[:8], ds.y[:8]), (ds.x[8:], ds.y[8:])])["conv1"].scores
        assert scores[2] == 0.0
        assert select_filters(scores, 1).tolist() == [2]

    def test_batch_order_invariance(self):
        net = two_conv_net()
        ds = toy_dataset(n=24, shape=(1, 3, 3, 3))
        batches = [(ds.x[i:i + 8], ds.y[i:i + 8]) for i in (0, 8, 16)]
        a = taylor_scores(net, batches)
        b = taylor_scores(net, batches[::-1])
        for name in a:
            np.testing.assert_allclose(a[name].scores, b[name].scores, rtol=1e-12)
            assert np.linalg.norm(a[name].scores) == pytest.approx(1.0)

    def test_needs_conv_layers(self):
        net = Network([Flatten("f"), FullyConnected("fc", 2, 2), SoftmaxCrossEntropy("loss")], (2,))
        with pytest.raises(UsageError):
            taylor_scores(net, [(np.zeros((1, 2)), np.zeros(1, dtype=int))])


class TestL1:
    def test_select_smallest(self):
        assert select_filters(np.array([5.0, 1.0, 3.0]), 1).tolist() == [1]

    def test_ties_go_to_lowest_index(self):
        assert select_filters(np.ones(4), 2).tolist() == [0, 1]

    def test_matches_filter_group_l1(self):
        net = build_toy_net(seed=3)
        scores = l1_filter_scores(net)
        for layer in net.conv_layers:
            part = partition(layer.params["W"], "filter")
            np.testing.assert_array_equal(scores[layer.name].scores, group_l1(layer.params["W"], part))


class TestBaselinePrune:
    cfg = TrainConfig(0.05, 5e-4, 8, 10, 0)

    def test_zero_ratio_leaves_net_unchanged(self):
        net = two_conv_net()
        ds = toy_dataset(n=16, shape=(1, 3, 3, 3))
        out, log = baseline_prune(net, {"conv1": 0.0, "conv2": 0.0}, "fp", ds, self.cfg, finetune_iterations=0)
        np.testing.assert_array_equal(out.logits(ds.x), net.logits(ds.x))
        assert all(m.n_pruned == 0 for m in log.masks.values())

    @pytest.mark.parametrize("criterion", ["tp", "fp"])
    def test_half_of_four_filters(self, criterion):
        net = two_conv_net()
        ds = toy_dataset(n=16, shape=(1, 3, 3, 3))
        out, log = baseline_prune(net, {"conv1": 0.5, "conv2": 0.0}, criterion, ds, self.cfg, 5, 3)
        assert out["conv1"].spec.out_filters == 2
        assert out["conv2"].spec.in_channels == 2
        assert log.phase.count("pre") == 3 and log.phase.count("finetune") == 5

    def test_ratio_one_rejected(self):
        with pytest.raises(UsageError):
            baseline_prune(two_conv_net(), {"conv1": 1.0, "conv2": 0.0}, "fp",
                           toy_dataset(shape=(1, 3, 3, 3)), self.cfg)

    def test_unknown_criterion(self):
        with pytest.raises(UsageError):
            baseline_prune(two_conv_net(), {"conv1": 0.5, "conv2": 0.0}, "random",
                           toy_dataset(shape=(1, 3, 3, 3)), self.cfg)

    def test_filter_plan_hits_two_x(self):
        net = build_toy_net(seed=0)
        plan = filter_plan_for_speedup(net, 2.0)
        counts = {l.name: round(plan.ratios[l.name] * l.spec.out_filters) for l in net.conv_layers}
        assert counts == {"conv1": 3, "conv2": 6, "conv3": 8}

    def test_planned_counts_and_flops_model(self):
        net = build_toy_net(seed=0)
        ds = toy_dataset(n=16, shape=(2, 8, 16, 16), classes=4)
        plan = filter_plan_for_speedup(net, 2.0)
        out, log = baseline_prune(net, plan, "fp", ds, self.cfg, finetune_iterations=0, pre_iterations=0)
        assert {n: m.n_pruned for n, m in log.masks.items()} == {"conv1": 3, "conv2": 6, "conv3": 8}
        assert speedup(network_profile(net), network_profile(out)) == 2.0
        keep = {"conv1": 5, "conv2": 10, "conv3": 24}
        macs = network_profile(out).macs()
        assert macs["conv2"] == keep["conv2"] * keep["conv1"] * 27 * 4 * 8 * 8
