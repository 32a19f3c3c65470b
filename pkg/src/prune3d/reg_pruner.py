"""Incremental, rank-driven group regularization pruning.

Each conv layer carries one regularization strength ``lambda_g`` per weight
group. Every ``window`` SGD iterations the per-iteration L1 ranks of the groups
are averaged, re-ranked to ``0..N_g-1`` and turned into an increment
``delta_lambda``: groups ranked below the target count ``R * N_g`` get pushed
towards zero harder, groups above it are released. Groups whose norm collapses
(or whose strength saturates) are hard-pruned until exactly
``round(R * N_g)`` groups per layer are gone, after which the structure is
frozen and the network is fine-tuned without the structured penalty.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ConvergenceError, UsageError
from .groups import GroupMask, apply_mask, group_l1, partition
from .network import BatchStream, sgd_step

__all__ = [
    "PruneConfig",
    "RankTracker",
    "RegState",
    "RunLog",
    "delta_lambda",
    "final_ranks",
    "rank_ascending",
    "run_pruning",
    "try_prune",
    "update_lambdas",
]


def rank_ascending(values):
    """Rank of each entry in ascending order; ties go to the lower index first."""
    values = np.asarray(values)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.int64)
    ranks[order] = np.arange(len(values))
    return ranks


class RankTracker:
    """Accumulates per-iteration L1 ranks over a window of iterations."""

    def __init__(self, n_groups, window=20):
        if window < 1:
            raise UsageError(f"rank window must be >= 1, got {window}")
        self.n_groups = int(n_groups)
        self.window = int(window)
        self.reset()

    def reset(self):
        self.history = []
        self._sum = np.zeros(self.n_groups, dtype=np.int64)

    def record(self, l1):
        l1 = np.asarray(l1)
        if l1.shape != (self.n_groups,):
            raise UsageError(f"expected {self.n_groups} group norms, got shape {l1.shape}")
        r = rank_ascending(l1)
        self.history.append(r)
        self._sum += r
        return r

    @property
    def count(self):
        return len(self.history)

    @property
    def full(self):
        return self.count >= self.window

    @property
    def mean_ranks(self):
        if not self.history:
            raise UsageError("rank window is empty")
        return self._sum / len(self.history)


def record_ranks(tracker, group_l1_values):
    tracker.record(group_l1_values)
    return tracker


def final_ranks(tracker_or_means):
    """Re-rank averaged ranks to the integers ``0..N_g-1`` (stable by index)."""
    if isinstance(tracker_or_means, RankTracker):
        means = tracker_or_means.mean_ranks
    else:
        means = np.asarray(tracker_or_means, dtype=np.float64)
        if means.size == 0:
            raise UsageError("no averaged ranks")
    return rank_ascending(means)


def delta_lambda(r, R, n_groups, A):
    """Piecewise-linear strength increment for final rank ``r``.

    ``A - A * r / (R*N_g)`` up to the zero crossing ``r = R*N_g``, then
    ``-A * (r - R*N_g) / (N_g*(1-R) - 1)``, reaching ``-A`` at ``r = N_g - 1``.
    Accepts scalars or arrays of ranks.
    """
    if not 0.0 < R < 1.0:
        raise ConfigurationError(f"pruning ratio R must lie in (0, 1), got {R}")
    r = np.asarray(r, dtype=np.float64)
    pivot = R * n_groups
    above = r > pivot
    tail = n_groups * (1.0 - R) - 1.0
    if np.any(above) and tail <= 0:
        raise ConfigurationError(
            f"N_g*(1-R)-1 = {tail:g} <= 0 for N_g={n_groups}, R={R}: use a smaller R or more groups")
    head = np.where(above, 0.0, -A / pivot * r + A)
    out = np.where(above, -A / (tail if tail > 0 else 1.0) * (r - pivot), head)
    return float(out) if out.ndim == 0 else out


@dataclass
class RegState:
    """Pruner state of one conv layer."""

    layer: str
    partition: object
    ratio: float
    A: float
    tau: float
    lambda_cap: float = 1.0
    lambdas: np.ndarray = None
    pruned: np.ndarray = None
    saturation_hold: int = 0
    saturated_for: np.ndarray = None

    def __post_init__(self):
        n = self.partition.n_groups
        if self.lambdas is None:
            self.lambdas = np.zeros(n)
        if self.pruned is None:
            self.pruned = np.zeros(n, dtype=bool)
        if self.saturated_for is None:
            self.saturated_for = np.zeros(n, dtype=np.int64)
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigurationError(f"{self.layer}: ratio must lie in [0, 1), got {self.ratio}")

    @property
    def n_groups(self):
        return self.partition.n_groups

    @property
    def target(self):
        return int(np.floor(self.ratio * self.n_groups + 0.5))

    @property
    def n_pruned(self):
        return int(self.pruned.sum())

    @property
    def done(self):
        return self.n_pruned >= self.target

    def mask(self):
        return GroupMask(self.partition, self.pruned.copy())


def update_lambdas(state, ranks, elapsed=0):
    """``lambda_g <- clip(lambda_g + delta_lambda(r_g), 0, cap)`` for unpruned groups.

    ``elapsed`` is the number of iterations the previous strengths were in
    force; it advances the per-group count of iterations spent at the cap.
    """
    if state.target == 0:
        return state
    at_cap = state.lambdas >= state.lambda_cap
    state.saturated_for = np.where(at_cap, state.saturated_for + elapsed, 0)
    delta = delta_lambda(ranks, state.ratio, state.n_groups, state.A)
    live = ~state.pruned
    state.lambdas[live] = np.clip(state.lambdas[live] + delta[live], 0.0, state.lambda_cap)
    return state


def try_prune(state, weights, part=None, on_saturation=True):
    """Hard-prune candidate groups while the layer is below its target count.

    A group is a candidate when its L1 norm is at most ``tau`` or, with
    ``on_saturation``, when its strength has sat at ``lambda_cap`` for at least
    ``state.saturation_hold`` iterations. When there
    are more candidates than remaining quota the lowest-L1 ones go first (ties
    by index). Pruned groups are zeroed in ``weights`` in place and their
    strength is frozen. Returns the newly pruned group ids.
    """
    part = state.partition if part is None else part
    quota = state.target - state.n_pruned
    if quota <= 0:
        return []
    l1 = group_l1(weights, part)
    cand = ~state.pruned & (l1 <= state.tau)
    if on_saturation:
        saturated = (state.lambdas >= state.lambda_cap) & (state.saturated_for >= state.saturation_hold)
        cand |= ~state.pruned & saturated
    idx = np.flatnonzero(cand)
    if idx.size == 0:
        return []
    order = idx[np.lexsort((idx, l1[idx]))][:quota]
    state.pruned[order] = True
    weights[...] = np.where(state.pruned[part.group_index], 0, weights)
    return sorted(int(g) for g in order)


@dataclass
class PruneConfig:
    """Knobs of the pruning run. ``A=None`` means half the weight decay.

    ``saturation_hold`` is the number of iterations a group must spend at
    ``lambda_cap`` before it may be hard-pruned on saturation.
    """

    A: float = None
    window: int = 20
    tau_factor: float = 1e-4
    lambda_cap: float = 1.0
    scheme: str = "shape"
    max_iterations: int = 20000
    finetune_iterations: int = None
    prune_on_saturation: bool = True
    saturation_hold: int = 40

    def resolve_A(self, cfg):
        return cfg.weight_decay / 2.0 if self.A is None else self.A


@dataclass
class RunLog:
    """Per-iteration record of a pruning run."""

    method: str
    layers: list
    iteration: list = field(default_factory=list)
    phase: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    macs: list = field(default_factory=list)
    pruned: dict = field(default_factory=dict)
    lambda_min: list = field(default_factory=list)
    lambda_max: list = field(default_factory=list)
    events: list = field(default_factory=list)
    group_l1: list = field(default_factory=list)
    lambda_trace: list = field(default_factory=list)
    masks: dict = field(default_factory=dict)
    targets: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.layers:
            self.pruned.setdefault(name, [])

    def append(self, phase, loss, macs, counts, lam_min=0.0, lam_max=0.0):
        self.iteration.append(len(self.iteration))
        self.phase.append(phase)
        self.loss.append(float(loss))
        self.macs.append(int(macs))
        for name in self.layers:
            self.pruned[name].append(int(counts.get(name, 0)))
        self.lambda_min.append(float(lam_min))
        self.lambda_max.append(float(lam_max))

    def header(self):
        return (["iteration", "phase", "loss", "macs"] + [f"pruned_{n}" for n in self.layers]
                + ["lambda_min", "lambda_max"])

    def csv_rows(self):
        rows = []
        for i in range(len(self.iteration)):
            rows.append([self.iteration[i], self.phase[i], self.loss[i], self.macs[i]]
                        + [self.pruned[n][i] for n in self.layers]
                        + [self.lambda_min[i], self.lambda_max[i]])
        return self.header(), rows

    def to_csv(self, path):
        header, rows = self.csv_rows()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r])

    @classmethod
    def from_csv(cls, path, method=None):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        layers = [h[len("pruned_"):] for h in header if h.startswith("pruned_")]
        log = cls(method or path, layers)
        for r in rows[1:]:
            rec = dict(zip(header, r))
            log.iteration.append(int(rec["iteration"]))
            log.phase.append(rec["phase"])
            log.loss.append(float(rec["loss"]))
            log.macs.append(int(rec["macs"]))
            for n in layers:
                log.pruned[n].append(int(rec[f"pruned_{n}"]))
            log.lambda_min.append(float(rec["lambda_min"]))
            log.lambda_max.append(float(rec["lambda_max"]))
        return log

    def window_means(self, window, phases=None):
        loss = np.array([l for l, p in zip(self.loss, self.phase) if phases is None or p in phases])
        n = len(loss) // window
        return loss[: n * window].reshape(n, window).mean(axis=1)

    def final_counts(self):
        return {n: (self.pruned[n][-1] if self.pruned[n] else 0) for n in self.layers}


def _layer_macs(net):
    from .flops_report import network_profile

    return {lc.name: lc.macs for lc in network_profile(net).layers}


def run_pruning(net, plan, dataset, cfg, prune_cfg=None, method="reg"):
    """Prune ``net`` in place to the per-layer ratios of ``plan``; returns ``(net, RunLog)``.

    Phase 1 alternates ``window`` SGD iterations (ranks recorded after every
    step) with one strength update and a prune check, until every layer holds
    exactly its target count. Phase 2 fine-tunes with the structured penalty
    off and the pruned groups frozen at zero. The returned network is masked,
    not shrunk; ``log.masks`` feeds :func:`prune3d.groups.shrink_network`.
    """
    pc = prune_cfg or PruneConfig()
    A = pc.resolve_A(cfg)
    ratios = plan.ratios if hasattr(plan, "ratios") else dict(plan)
    conv = {l.name: l for l in net.conv_layers}
    missing = set(conv) - set(ratios)
    if missing:
        raise UsageError(f"plan does not cover conv layers {sorted(missing)}")

    states = {}
    trackers = {}
    for name, layer in conv.items():
        part = partition(layer.params["W"], pc.scheme, layer=name)
        l1 = group_l1(layer.params["W"], part)
        tau = pc.tau_factor * float(l1.mean())
        st = RegState(name, part, float(ratios[name]), A, tau, pc.lambda_cap,
                      saturation_hold=pc.saturation_hold)
        if st.target > 0 and st.n_groups * (1.0 - st.ratio) - 1.0 <= 0:
            raise ConfigurationError(
                f"{name}: N_g*(1-R)-1 <= 0 (N_g={st.n_groups}, R={st.ratio}); use a smaller ratio")
        states[name] = st
        trackers[name] = RankTracker(part.n_groups, pc.window)

    log = RunLog(method, list(conv))
    log.targets = {n: s.target for n, s in states.items()}
    full_macs = _layer_macs(net)

    def current_macs():
        return sum(m // states[n].n_groups * (states[n].n_groups - states[n].n_pruned)
                   if pc.scheme == "shape" else m for n, m in full_macs.items())

    def lam_range():
        vals = np.concatenate([s.lambdas for s in states.values()])
        return float(vals.min()), float(vals.max())

    stream = BatchStream(dataset, cfg.batch_size, cfg.seed)
    iters = 0
    while not all(s.done for s in states.values()):
        if iters >= pc.max_iterations:
            detail = "; ".join(
                f"{n}: {s.n_pruned}/{s.target} pruned, lambda range "
                f"[{s.lambdas.min():.3g}, {s.lambdas.max():.3g}], smallest live L1 "
                f"{np.sort(group_l1(conv[n].params['W'], s.partition)[~s.pruned])[:3].round(6).tolist()}"
                for n, s in states.items() if not s.done)
            raise ConvergenceError(f"pruning did not reach its targets after {iters} iterations: {detail}")
        lambda_map = {n: (s.partition, s.lambdas) for n, s in states.items() if s.target > 0}
        for _ in range(pc.window):
            xb, yb = stream.next()
            _, loss = net.forward(xb, yb)
            grads = net.backward()
            sgd_step(net, grads, cfg, lambda_map)
            for n, s in states.items():
                if s.target > 0:
                    trackers[n].record(group_l1(conv[n].params["W"], s.partition))
            lo, hi = lam_range()
            log.append("prune", loss, current_macs(), {n: s.n_pruned for n, s in states.items()}, lo, hi)
            iters += 1
        snapshot = {}
        for n, s in states.items():
            if s.target == 0 or s.done:
                trackers[n].reset()
                continue
            update_lambdas(s, final_ranks(trackers[n]), elapsed=pc.window)
            trackers[n].reset()
            W = conv[n].params["W"]
            new = try_prune(s, W, on_saturation=pc.prune_on_saturation)
            if new:
                apply_mask(conv[n], s.mask())
                log.events.append({"iteration": iters, "layer": n, "groups": new})
            snapshot[n] = group_l1(W, s.partition)
        log.group_l1.append((iters, snapshot))
        log.lambda_trace.append((iters, {n: s.lambdas.copy() for n, s in states.items()}))

    for n, s in states.items():
        apply_mask(conv[n], s.mask())
        log.masks[n] = s.mask()

    ft_iters = iters if pc.finetune_iterations is None else pc.finetune_iterations
    counts = {n: s.n_pruned for n, s in states.items()}
    for _ in range(ft_iters):
        xb, yb = stream.next()
        _, loss = net.forward(xb, yb)
        grads = net.backward()
        sgd_step(net, grads, cfg)
        log.append("finetune", loss, current_macs(), counts)
    return net, log
