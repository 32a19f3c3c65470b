"""Desk-scale end-to-end experiment: train, plan, prune (reg / TP / FP), fine-tune, compare."""

from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import baseline_prune, filter_plan_for_speedup
from .data import SyntheticDatasetSpec, synth_data
from .flops_report import network_profile, speedup
from .groups import shrink_network
from .network import TrainConfig, build_toy_net, evaluate, train
from .ratio_planner import plan_for_network
from .reg_pruner import PruneConfig, run_pruning

METHODS = ("dpr", "spr", "tp", "fp")


@dataclass
class ToyExperimentConfig:
    data: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    filters: tuple = (8, 16, 32)
    # baseline training; the smaller rate below drives pruning and fine-tuning
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(0.1, 5e-4, 16, 800, 0))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(0.05, 5e-4, 16, 400, 0))
    prune: PruneConfig = field(default_factory=lambda: PruneConfig(
        A=0.25, window=2, lambda_cap=0.25, finetune_iterations=200, max_iterations=6000, saturation_hold=160))
    pr: float = 0.5
    w_gflops: float = 0.8
    methods: tuple = METHODS
    pre_iterations: int = 20

    def for_seed(self, seed):
        return replace(self, data=replace(self.data, seed=seed), pretrain=replace(self.pretrain, seed=seed),
                       train=replace(self.train, seed=seed))


@dataclass
class MethodResult:
    method: str
    accuracy: float
    speedup: float
    log: object
    net: object
    masked_net: object = None
    plan: object = None
    targets: dict = None
    counts: dict = None

    def increased_error(self, baseline_accuracy):
        return baseline_accuracy - self.accuracy


@dataclass
class ExperimentResult:
    seed: int
    baseline_accuracy: float
    baseline_net: object
    baseline_losses: list
    results: dict
    plans: dict
    curves: list
    val: object
    train: object

    def increased_errors(self):
        return {m: r.increased_error(self.baseline_accuracy) for m, r in self.results.items()}


def window_loss_rise(log, window):
    """Largest rise between consecutive window-mean losses of the prune phase."""
    means = log.window_means(window, phases=("prune",))
    if len(means) < 2:
        return 0.0
    return float(max(0.0, np.max(np.diff(means))))


def prune_event_jump(log, window):
    """Mean loss of the first ``window`` fine-tune steps minus that of the last ``window`` pre-prune steps."""
    pre = [l for l, p in zip(log.loss, log.phase) if p == "pre"]
    post = [l for l, p in zip(log.loss, log.phase) if p == "finetune"]
    return float(np.mean(post[:window]) - np.mean(pre[-window:]))


def run_toy_experiment(seed=0, config=None, methods=None):
    cfg = (config or ToyExperimentConfig()).for_seed(seed)
    methods = methods or cfg.methods
    tr, va = synth_data(cfg.data)
    net = build_toy_net(cfg.data.clip_shape, cfg.data.num_classes, cfg.filters, seed=seed)
    losses = train(net, tr, cfg.pretrain)
    base_acc = evaluate(net, va)
    base_profile = network_profile(net)
    ft_cfg = replace(cfg.train, seed=seed + 1)

    plans = {}
    curves = []
    results = {}
    for method in methods:
        if method in ("dpr", "spr"):
            plan, c = plan_for_network(net, cfg.pr, method, cfg.w_gflops)
            if method == "dpr":
                curves = c
            plans[method] = plan
            masked, log = run_pruning(net.copy(), plan, tr, ft_cfg, cfg.prune, method=method)
            shrunk, _ = shrink_network(masked, log.masks)
            results[method] = MethodResult(
                method, evaluate(shrunk, va), speedup(base_profile, network_profile(shrunk)), log, shrunk,
                masked, plan, dict(log.targets), log.final_counts())
        elif method in ("tp", "fp"):
            if "filter" not in plans:
                plans["filter"] = filter_plan_for_speedup(net, 1.0 / (1.0 - cfg.pr))
            ft = cfg.prune.finetune_iterations or 200
            shrunk, log = baseline_prune(net, plans["filter"], method, tr, ft_cfg, ft, cfg.pre_iterations)
            results[method] = MethodResult(
                method, evaluate(shrunk, va), speedup(base_profile, network_profile(shrunk)), log, shrunk,
                None, plans["filter"], dict(log.targets), {n: m.n_pruned for n, m in log.masks.items()})
        else:
            raise ValueError(f"unknown method {method!r}")
    return ExperimentResult(seed, base_acc, net, losses, results, plans, curves, va, tr)
