"""MAC / GFLOPs accounting for conv layers, speedup, and report emission.

One MAC counts as two FLOPs. Only convolution layers are counted.
"""

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateNetworkError, PruneIOError, ShapeError, UsageError
from .network import CompactConv3D, Conv3D


@dataclass
class LayerCost:
    name: str
    macs: int

    @property
    def gflops(self):
        return 2.0 * self.macs / 1e9


@dataclass
class CostProfile:
    layers: list = field(default_factory=list)

    @property
    def total_macs(self):
        return sum(l.macs for l in self.layers)

    @property
    def total_gflops(self):
        return 2.0 * self.total_macs / 1e9

    def macs(self):
        return {l.name: l.macs for l in self.layers}

    def gflops(self):
        return {l.name: l.gflops for l in self.layers}


def layer_macs(spec, input_dhw, surviving_columns=None):
    """Integer MACs of one conv layer: ``N * (columns) * output positions``.

    ``surviving_columns`` replaces ``C*kw*kh*kd`` for a shape-pruned layer.
    """
    if len(input_dhw) != 3 or min(input_dhw) < 1:
        raise ShapeError(f"invalid input dims {input_dhw}")
    positions = spec.output_positions(*input_dhw)
    cols = spec.rows if surviving_columns is None else int(surviving_columns)
    if cols < 0 or cols > spec.rows:
        raise ShapeError(f"surviving columns {cols} outside [0, {spec.rows}]")
    return int(spec.out_filters) * cols * int(positions)


def layer_gflops(spec, input_dhw, surviving_columns=None, name="conv"):
    """Cost entry of one conv layer (MACs and GFLOPs = 2 * MACs / 1e9)."""
    return LayerCost(name, layer_macs(spec, input_dhw, surviving_columns))


def network_profile(net):
    """Cost profile of every conv layer of a network, following real input dims."""
    shapes = net.check_shapes()
    out = CostProfile()
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, Conv3D):
            continue
        dhw = shapes[i][1:]
        cols = len(layer.keep) if isinstance(layer, CompactConv3D) else None
        out.layers.append(layer_gflops(layer.spec, dhw, cols, name=layer.name))
    return out


# C3D conv stack on 3 x 16 x 112 x 112 clips: (name, in, out, input (d, h, w)).
# Every conv is 3x3x3, stride 1, pad 1; pool1 halves only h and w, the later
# pools halve all three dims.
C3D_CONVS = (
    ("conv1a", 3, 64, (16, 112, 112)),
    ("conv2a", 64, 128, (16, 56, 56)),
    ("conv3a", 128, 256, (8, 28, 28)),
    ("conv3b", 256, 256, (8, 28, 28)),
    ("conv4a", 256, 512, (4, 14, 14)),
    ("conv4b", 512, 512, (4, 14, 14)),
    ("conv5a", 512, 512, (2, 7, 7)),
    ("conv5b", 512, 512, (2, 7, 7)),
)


def c3d_profile():
    """Architecture-derived conv cost profile of C3D (no weights needed)."""
    from .tensor_core import ConvSpec

    out = CostProfile()
    for name, c, n, dhw in C3D_CONVS:
        spec = ConvSpec(c, n, (3, 3, 3), (1, 1, 1), (1, 1, 1))
        out.layers.append(layer_gflops(spec, dhw, name=name))
    return out


def speedup(before, after):
    """Ratio of total conv MACs before and after pruning."""
    if before.total_macs <= 0:
        raise UsageError("speedup: 'before' profile has no cost")
    if after.total_macs <= 0:
        raise DegenerateNetworkError("speedup: pruned network has zero conv cost")
    return before.total_macs / after.total_macs


def planned_shape_macs(profile, plan_counts, n_groups):
    """MACs after removing ``plan_counts[l]`` of ``n_groups[l]`` shape groups per layer.

    Shape-pruned MACs are linear in surviving groups, so this is exact.
    """
    total = 0
    for lc in profile.layers:
        ng = n_groups[lc.name]
        total += lc.macs // ng * (ng - plan_counts.get(lc.name, 0))
    return total


# ---------------------------------------------------------------------------
# report emission

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    # repr keeps full double precision so files round-trip exactly
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def emit_report(logs, plans, profiles, out_dir, summary=None, error_curves=None):
    """Write the report files into ``out_dir``; returns the list of paths written.

    ``logs`` maps a method name to its :class:`~prune3d.reg_pruner.RunLog`,
    ``plans`` maps a plan name to a :class:`~prune3d.ratio_planner.PruningPlan`,
    ``profiles`` maps a label (e.g. ``"baseline"``, a method name) to a
    :class:`CostProfile`, ``summary`` holds per-method accuracy records
    (``{"baseline_accuracy": ..., "methods": {name: {"accuracy": ...}}}``) and
    ``error_curves`` is a list of :class:`~prune3d.ratio_planner.ErrorCurve`.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write_probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise PruneIOError(f"cannot write to {out_dir!r}: {exc}") from exc

    written = []
    for method, log in logs.items():
        path = os.path.join(out_dir, f"loss_{method}.csv")
        header, rows = log.csv_rows()
        _write_csv(path, header, [[_fmt(v) for v in r] for r in rows])
        written.append(path)

    if plans:
        path = os.path.join(out_dir, "ratios.csv")
        rows = []
        for pname, plan in plans.items():
            for lp in plan.layers:
                rows.append([pname, plan.mode, _fmt(plan.pr), lp.name, _fmt(lp.ratio)])
        _write_csv(path, ["plan", "mode", "pr", "layer", "ratio"], rows)
        written.append(path)

        path = os.path.join(out_dir, "proportions.csv")
        rows = []
        for pname, plan in plans.items():
            for lp in plan.layers:
                rows.append([pname, lp.name, _fmt(lp.gflops), _fmt(lp.alpha), _fmt(lp.beta), _fmt(lp.gamma)])
        _write_csv(path, ["plan", "layer", "gflops", "alpha", "beta", "gamma"], rows)
        written.append(path)

    if error_curves:
        path = os.path.join(out_dir, "error_curves.csv")
        grid = error_curves[0].k_grid
        rows = [[c.layer] + [_fmt(v) for v in c.errors] for c in error_curves]
        _write_csv(path, ["layer"] + [f"k={k:.2f}" for k in grid], rows)
        written.append(path)

    doc = {"format": "prune3d-summary/1"}
    if not logs and not summary:
        doc["status"] = "no runs"
        doc["methods"] = {}
    else:
        summary = summary or {}
        base_acc = summary.get("baseline_accuracy")
        doc["baseline_accuracy"] = base_acc
        base_profile = profiles.get("baseline") if profiles else None
        methods = {}
        names = list(dict.fromkeys(list(logs) + list(summary.get("methods", {}))))
        for m in names:
            rec = dict(summary.get("methods", {}).get(m, {}))
            acc = rec.get("accuracy")
            if acc is not None and base_acc is not None:
                rec["increased_error"] = float(base_acc - acc)
            prof = profiles.get(m) if profiles else None
            if prof is not None and base_profile is not None:
                rec["speedup"] = speedup(base_profile, prof)
                rec["gflops"] = prof.total_gflops
            methods[m] = rec
        doc["methods"] = methods
        if base_profile is not None:
            doc["baseline_gflops"] = base_profile.total_gflops
    path = os.path.join(out_dir, "summary.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    written.append(path)
    return written
