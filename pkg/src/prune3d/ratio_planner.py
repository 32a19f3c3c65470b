"""Per-layer pruning ratios from weight redundancy (PCA) and layer cost (GFLOPs).

The DPR plan blends a redundancy share ``alpha`` (inverse to the layer's PCA
reconstruction error) with a cost share ``beta`` (normalised GFLOPs) into
``gamma``, then scales ``gamma`` by the single factor ``v`` that makes the
GFLOPs-weighted pruning ratio hit the requested overall ratio ``pr``.
"""

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InfeasiblePlanError, UsageError
from .tensor_core import svd_components

K_GRID = np.round(np.linspace(0.0, 1.0, 21), 10)
DEFAULT_W_GFLOPS = 0.8
DEFAULT_RATIO_CAP = 0.95
ERROR_FLOOR = 1e-8


def component_count(k, n_rows, n_cols):
    """Number of leading components kept at ratio ``k``: ``round(k * min(N, CWHD))``.

    Rounds half up so the count never depends on banker's rounding.
    """
    return int(np.floor(k * min(n_rows, n_cols) + 0.5))


def reconstruction_error(weight_matrix, k):
    """Relative squared error of the rank-``m`` reconstruction of ``weight_matrix``.

    No centering is applied, so this is ``1 - sum_{i<=m} s_i^2 / sum_i s_i^2``.
    """
    m = np.asarray(weight_matrix, dtype=np.float64)
    if not 0.0 <= k <= 1.0:
        raise UsageError(f"k must lie in [0, 1], got {k}")
    s, _ = svd_components(m)
    energy = s ** 2
    total = energy.sum()
    if total == 0.0:
        raise DomainError("reconstruction error undefined for an all-zero matrix")
    keep = component_count(k, *m.shape)
    return float(max(0.0, 1.0 - energy[:keep].sum() / total))


@dataclass
class ErrorCurve:
    layer: str
    k_grid: np.ndarray
    errors: np.ndarray

    @property
    def interior_mean(self):
        return float(np.mean(self.errors[1:-1]))


def error_curve(weights, layer="conv"):
    """Reconstruction error over the 21-point ``k`` grid for one conv layer.

    The ``(N, C, kd, kh, kw)`` tensor is expanded to ``N x CWHD`` rows in the
    im2col column order. One SVD serves the whole grid.
    """
    w = np.asarray(weights, dtype=np.float64)
    m = w.reshape(w.shape[0], -1)
    s, _ = svd_components(m)
    energy = s ** 2
    total = energy.sum()
    if total == 0.0:
        raise DomainError(f"{layer}: reconstruction error undefined for all-zero weights")
    cum = np.concatenate([[0.0], np.cumsum(energy)])
    errs = []
    for k in K_GRID:
        keep = component_count(k, *m.shape)
        errs.append(max(0.0, 1.0 - cum[keep] / total))
    errs = np.array(errs)
    errs[-1] = 0.0  # every component kept
    return ErrorCurve(layer, K_GRID.copy(), errs)


def alpha_from_pca(curves):
    """Redundancy shares: inverse of each layer's mean interior reconstruction error."""
    if not curves:
        raise UsageError("alpha_from_pca: no curves")
    means = np.array([c.interior_mean for c in curves])
    low = means < ERROR_FLOOR
    if np.any(low):
        names = [c.layer for c, f in zip(curves, low) if f]
        warnings.warn(f"near-zero reconstruction error for {names}; floored at {ERROR_FLOOR}")
        means = np.maximum(means, ERROR_FLOOR)
    inv = 1.0 / means
    return inv / inv.sum()


def beta_from_gflops(gflops):
    """Cost shares ``G_l / sum G``."""
    g = np.asarray(gflops, dtype=np.float64)
    if g.size == 0 or np.any(g <= 0):
        raise UsageError(f"beta_from_gflops: every layer cost must be positive, got {g}")
    return g / g.sum()


def combine(alpha, beta, w_gflops=DEFAULT_W_GFLOPS):
    """``gamma = (1 - w) * alpha + w * beta``."""
    if not 0.0 <= w_gflops <= 1.0:
        raise UsageError(f"w_gflops must lie in [0, 1], got {w_gflops}")
    return (1.0 - w_gflops) * np.asarray(alpha, dtype=np.float64) + w_gflops * np.asarray(beta, dtype=np.float64)


@dataclass
class LayerPlan:
    name: str
    gflops: float
    ratio: float
    alpha: float = None
    beta: float = None
    gamma: float = None


@dataclass
class PruningPlan:
    layers: list
    pr: float
    mode: str = "dpr"
    v: float = None
    w_gflops: float = None
    warnings: list = field(default_factory=list)

    @property
    def ratios(self):
        return {l.name: l.ratio for l in self.layers}

    def ratio_array(self):
        return np.array([l.ratio for l in self.layers])

    def planned_fraction(self):
        """``sum G_l * ratio_l / sum G_l``."""
        g = np.array([l.gflops for l in self.layers])
        return float(np.dot(g, self.ratio_array()) / g.sum())

    def target_counts(self, n_groups):
        """Integer prune targets ``round(ratio_l * N_g)`` (half up) per layer."""
        return {l.name: int(np.floor(l.ratio * n_groups[l.name] + 0.5)) for l in self.layers}

    def to_dict(self):
        return {
            "format": "prune3d-plan/1",
            "global": {"pr": self.pr, "v": self.v, "w_gflops": self.w_gflops, "mode": self.mode},
            "layers": [{"name": l.name, "G_l": l.gflops, "alpha": l.alpha, "beta": l.beta,
                        "gamma": l.gamma, "ratio": l.ratio} for l in self.layers],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, doc):
        g = doc["global"]
        layers = [LayerPlan(l["name"], l["G_l"], l["ratio"], l.get("alpha"), l.get("beta"), l.get("gamma"))
                  for l in doc["layers"]]
        return cls(layers, g["pr"], g.get("mode", "dpr"), g.get("v"), g.get("w_gflops"),
                   list(doc.get("warnings", [])))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def solve_scale(gamma, gflops, pr, ratio_cap=DEFAULT_RATIO_CAP):
    """Solve ``v * sum(G * gamma) = pr * sum(G)`` with per-layer ratios capped.

    Layers whose ratio ``v * gamma_l`` would exceed ``ratio_cap`` are pinned at
    the cap and ``v`` is re-solved over the remaining layers until no new layer
    hits the cap. Returns ``(v, ratios)``.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    g = np.asarray(gflops, dtype=np.float64)
    if not 0.0 < pr < 1.0:
        raise UsageError(f"pr must lie in (0, 1), got {pr}")
    if np.any(g <= 0):
        raise UsageError("layer GFLOPs must be positive")
    budget = pr * g.sum()
    clamped = np.zeros(len(g), dtype=bool)
    while True:
        free = ~clamped
        remaining = budget - ratio_cap * g[clamped].sum()
        denom = np.dot(g[free], gamma[free])
        if not free.any() or denom <= 0:
            best = ratio_cap * g[clamped].sum() / g.sum()
            if remaining > 1e-12 * budget:
                raise InfeasiblePlanError(
                    f"pr={pr} is infeasible with ratio cap {ratio_cap}; max achievable pr={best:.6f}",
                    max_achievable_pr=best)
            v = 0.0 if denom <= 0 else remaining / denom
            break
        v = remaining / denom
        over = free & (v * gamma > ratio_cap)
        if not over.any():
            break
        clamped |= over
    ratios = np.where(clamped, ratio_cap, v * gamma)
    return float(v), ratios


def solve_plan(gamma, gflops, pr, ratio_cap=DEFAULT_RATIO_CAP, names=None, alpha=None, beta=None,
               w_gflops=None, mode="dpr"):
    """Build a :class:`PruningPlan` from proportions ``gamma`` and layer GFLOPs."""
    names = names or [f"conv{i + 1}" for i in range(len(gamma))]
    v, ratios = solve_scale(gamma, gflops, pr, ratio_cap)
    layers = []
    for i, name in enumerate(names):
        layers.append(LayerPlan(
            name, float(gflops[i]), float(ratios[i]),
            None if alpha is None else float(alpha[i]),
            None if beta is None else float(beta[i]),
            float(gamma[i])))
    return PruningPlan(layers, pr, mode, v, w_gflops)


def uniform_plan(names, gflops, pr):
    """SPR plan: the same ratio ``pr`` for every conv layer."""
    if not 0.0 < pr < 1.0:
        raise UsageError(f"pr must lie in (0, 1), got {pr}")
    g = np.asarray(gflops, dtype=np.float64)
    beta = g / g.sum()
    layers = [LayerPlan(n, float(gl), float(pr), None, float(b), None) for n, gl, b in zip(names, g, beta)]
    return PruningPlan(layers, pr, "spr", 1.0, None)


def dpr_plan(layer_weights, gflops, pr, w_gflops=DEFAULT_W_GFLOPS, ratio_cap=DEFAULT_RATIO_CAP):
    """Full DPR pipeline. ``layer_weights`` maps layer names to conv weight tensors.

    Returns ``(plan, curves)``.
    """
    names = list(layer_weights)
    curves = [error_curve(layer_weights[n], n) for n in names]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        alpha = alpha_from_pca(curves)
    g = np.array([gflops[n] for n in names], dtype=np.float64)
    beta = beta_from_gflops(g)
    gamma = combine(alpha, beta, w_gflops)
    plan = solve_plan(gamma, g, pr, ratio_cap, names, alpha, beta, w_gflops, "dpr")
    plan.warnings = [str(w.message) for w in caught]
    return plan, curves


def plan_for_network(net, pr, mode="dpr", w_gflops=DEFAULT_W_GFLOPS, ratio_cap=DEFAULT_RATIO_CAP):
    """DPR or SPR plan over the conv layers of ``net``. Returns ``(plan, curves)``."""
    from .flops_report import network_profile

    profile = network_profile(net)
    gflops = profile.gflops()
    names = [l.name for l in profile.layers]
    mode = mode.lower()
    if mode == "spr":
        return uniform_plan(names, [gflops[n] for n in names], pr), []
    if mode != "dpr":
        raise UsageError(f"unknown plan mode {mode!r}")
    weights = {l.name: l.params["W"] for l in net.conv_layers}
    return dpr_plan(weights, gflops, pr, w_gflops, ratio_cap)


def write_error_curves_csv(curves, path):
    """One row per layer, one column per ``k``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer"] + [f"k={k:.2f}" for k in K_GRID])
        for c in curves:
            w.writerow([c.layer] + [repr(float(v)) for v in c.errors])


def read_error_curves_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [ErrorCurve(r[0], K_GRID.copy(), np.array([float(v) for v in r[1:]])) for r in rows[1:]]
