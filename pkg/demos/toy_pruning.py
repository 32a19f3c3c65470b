"""Prune a small 3D CNN to 2x fewer conv FLOPs with four methods and compare.

Trains the three-conv-layer toy network on the synthetic moving-square task,
then prunes it with regularization (DPR and SPR ratio plans) and with the
one-shot Taylor and L1 filter baselines. Takes a minute or so on one core.

    python3 demos/toy_pruning.py [seed]
"""

import sys

from prune3d.experiment import prune_event_jump, run_toy_experiment, window_loss_rise

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
run = run_toy_experiment(seed)
print(f"baseline val accuracy: {run.baseline_accuracy:.3f}")

dpr = run.plans["dpr"]
print("\nDPR plan (per-layer ratios of shape groups):")
for layer in dpr.layers:
    print(f"  {layer.name}: ratio={layer.ratio:.3f} alpha={layer.alpha:.3f} beta={layer.beta:.3f}")

print(f"\n{'method':6s} {'accuracy':>9s} {'speedup':>8s} {'loss shock':>11s}")
for name, res in run.results.items():
    # gradual methods: worst window-to-window rise; one-shot methods: jump at the prune event
    shock = window_loss_rise(res.log, 10) if name in ("dpr", "spr") else prune_event_jump(res.log, 10)
    print(f"{name:6s} {res.accuracy:9.3f} {res.speedup:8.3f} {shock:11.4f}")

counts = run.results["dpr"].counts
print("\nDPR pruned groups per layer:", counts, "targets:", run.results["dpr"].targets)
