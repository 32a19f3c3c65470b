"""One-shot filter pruning baselines: first-order Taylor (TP) and smallest-L1 (FP).

Both score whole filters, remove the lowest-scoring ``round(ratio * N)`` of
each conv layer in one shot, shrink the network and fine-tune it.
"""

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .groups import GroupMask, apply_mask, group_l1, partition, shrink_network
from .network import BatchStream, sgd_step
from .reg_pruner import RunLog


@dataclass
class FilterScore:
    layer: str
    scores: np.ndarray
    criterion: str


def taylor_from_activations(activation, gradient):
    """``|mean(a * dL/da)|`` per filter over batch and spatial positions.

    ``activation`` and ``gradient`` are ``(B, N, ...)`` arrays.
    """
    a = np.asarray(activation, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    prod = (a * g).reshape(a.shape[0], a.shape[1], -1)
    return np.abs(prod.mean(axis=(0, 2)))


def taylor_scores(net, batches, normalize=True):
    """Taylor importance of every filter, averaged over ``batches``.

    ``batches`` is an iterable of ``(x, labels)``. Activations are the conv
    outputs; gradients are those of the mean data loss.
    """
    convs = net.conv_layers
    if not convs:
        raise UsageError("taylor_scores: network has no conv layers")
    totals = {l.name: np.zeros(l.spec.out_filters) for l in convs}
    count = 0
    net.record = True
    try:
        for xb, yb in batches:
            net.forward(xb, yb)
            net.backward()
            for l in convs:
                totals[l.name] += taylor_from_activations(net.activations[l.name], net.output_grads[l.name])
            count += 1
    finally:
        net.record = False
        net.activations = {}
        net.output_grads = {}
    if count == 0:
        raise UsageError("taylor_scores: need at least one batch")
    out = {}
    for name, t in totals.items():
        s = t / count
        if normalize:
            norm = np.linalg.norm(s)
            if norm > 0:
                s = s / norm
        out[name] = FilterScore(name, s, "taylor")
    return out


def l1_filter_scores(net):
    """L1 norm of every filter's weights."""
    out = {}
    for l in net.conv_layers:
        part = partition(l.params["W"], "filter", layer=l.name)
        out[l.name] = FilterScore(l.name, group_l1(l.params["W"], part), "l1")
    return out


def select_filters(scores, count):
    """Indices of the ``count`` lowest scores; ties resolve to the lower index."""
    scores = np.asarray(scores)
    order = np.lexsort((np.arange(len(scores)), scores))
    return np.sort(order[:count])


def baseline_prune(net, plan, criterion, dataset, cfg, finetune_iterations=200, pre_iterations=20,
                   taylor_batches=10):
    """One-shot filter pruning followed by fine-tuning; returns ``(shrunk net, RunLog)``.

    ``pre_iterations`` forward-only batches are logged before the prune event
    (phase ``"pre"``) so the loss jump at the event is visible in the log.
    """
    criterion = criterion.lower()
    if criterion not in ("tp", "fp", "taylor", "l1"):
        raise UsageError(f"unknown criterion {criterion!r}; expected 'tp' or 'fp'")
    ratios = plan.ratios if hasattr(plan, "ratios") else dict(plan)
    for name, r in ratios.items():
        if not 0.0 <= r < 1.0:
            raise UsageError(f"{name}: filter ratio must lie in [0, 1), got {r}")
    net = net.copy()
    method = "tp" if criterion in ("tp", "taylor") else "fp"
    convs = net.conv_layers
    log = RunLog(method, [l.name for l in convs])
    stream = BatchStream(dataset, cfg.batch_size, cfg.seed)

    from .flops_report import network_profile

    base_macs = network_profile(net).total_macs
    for _ in range(pre_iterations):
        xb, yb = stream.next()
        _, loss = net.forward(xb, yb)
        log.append("pre", loss, base_macs, {})

    if method == "tp":
        probe = BatchStream(dataset, cfg.batch_size, cfg.seed + 104729)
        scores = taylor_scores(net, [probe.next() for _ in range(taylor_batches)])
    else:
        scores = l1_filter_scores(net)

    masks = {}
    for l in convs:
        n = l.spec.out_filters
        count = int(np.floor(ratios.get(l.name, 0.0) * n + 0.5))
        part = partition(l.params["W"], "filter", layer=l.name)
        mask = GroupMask.from_indices(part, select_filters(scores[l.name].scores, count))
        apply_mask(l, mask, freeze=False)
        masks[l.name] = mask
        log.targets[l.name] = count
    log.masks = masks
    log.events.append({"iteration": pre_iterations, "layer": "*",
                       "groups": {n: np.flatnonzero(m.pruned).tolist() for n, m in masks.items()}})
    shrunk, records = shrink_network(net, masks)
    log.records = records
    macs = network_profile(shrunk).total_macs
    counts = {n: m.n_pruned for n, m in masks.items()}
    for _ in range(finetune_iterations):
        xb, yb = stream.next()
        _, loss = shrunk.forward(xb, yb)
        grads = shrunk.backward()
        sgd_step(shrunk, grads, cfg)
        log.append("finetune", loss, macs, counts)
    return shrunk, log


def filter_plan_for_speedup(net, target_speedup=2.0, max_spread=0.15):
    """Per-layer filter ratios whose one-shot removal gives ``target_speedup``.

    Removing ``c_l`` of ``N_l`` filters scales layer ``l`` by ``(N_l - c_l)/N_l``
    and its conv successor by the same factor on the input side, so conv cost
    falls faster than linearly. Every integer count tuple whose ratios stay
    within ``max_spread`` of each other is scored on the exact MAC speedup;
    the closest to the target wins (then the most uniform one).
    Each returned ratio is ``count / N`` so rounding it back is exact.
    """
    import itertools

    from .flops_report import network_profile
    from .ratio_planner import LayerPlan, PruningPlan

    if target_speedup < 1.0:
        raise UsageError("target speedup must be >= 1")
    convs = net.conv_layers
    base = network_profile(net)
    macs = np.array([lc.macs for lc in base.layers], dtype=np.float64)
    n = [l.spec.out_filters for l in convs]
    # conv successor of each conv layer, if its input is the previous conv's output
    feeds_next = [i + 1 < len(convs) and convs[i + 1].spec.in_channels == n[i] for i in range(len(convs))]
    best = None
    for counts in itertools.product(*[range(k) for k in n]):
        ratios = np.array(counts) / n
        spread = ratios.max() - ratios.min()
        if spread > max_spread:
            continue
        keep = 1.0 - ratios
        scale = keep.copy()
        for i in range(1, len(convs)):
            if feeds_next[i - 1]:
                scale[i] *= keep[i - 1]
        achieved = macs.sum() / np.dot(macs, scale)
        key = (abs(achieved - target_speedup), spread, counts)
        if best is None or key < best[0]:
            best = (key, ratios)
    gflops = base.gflops()
    layers = [LayerPlan(l.name, gflops[l.name], float(r)) for l, r in zip(convs, best[1])]
    return PruningPlan(layers, 1.0 - 1.0 / target_speedup, "filter", None, None)
