"""Per-layer pruning ratios for C3D, from architecture cost alone.

Only the GFLOPs term is available without trained C3D weights, so this demo
plans with beta (the cost share) and compares the result with the published
2x and 4x ratio rows. Cost alone is too aggressive on the heavy layers
(two of them hit the 0.95 cap at 4x), which is why the full planner mixes in
the PCA redundancy term. The published rows never clamp, so each 4x ratio
is 1.5 times its 2x ratio, as a single scale factor v predicts.
"""

import numpy as np

from prune3d.flops_report import c3d_profile
from prune3d.ratio_planner import beta_from_gflops, solve_plan

PUBLISHED_2X = [0.5129, 0.5279, 0.4684, 0.5273, 0.4414, 0.4676, 0.4222, 0.4222]
PUBLISHED_4X = [0.7694, 0.7918, 0.7026, 0.7909, 0.6621, 0.7015, 0.6333, 0.6333]

profile = c3d_profile()
names = [l.name for l in profile.layers]
g = np.array([l.gflops for l in profile.layers])
print(f"C3D conv cost: {g.sum():.2f} GFLOPs over {len(g)} layers\n")

beta = beta_from_gflops(g)
half = solve_plan(beta, g, 0.5, names=names, beta=beta, w_gflops=1.0)
three_q = solve_plan(beta, g, 0.75, names=names, beta=beta, w_gflops=1.0)

print(f"{'layer':8s} {'GFLOPs':>8s} {'beta':>7s} {'R@2x':>7s} {'pub 2x':>7s} {'R@4x':>7s} {'pub 4x':>7s}")
for i, name in enumerate(names):
    print(f"{name:8s} {g[i]:8.3f} {beta[i]:7.4f} {half.ratio_array()[i]:7.4f} {PUBLISHED_2X[i]:7.4f} "
          f"{three_q.ratio_array()[i]:7.4f} {PUBLISHED_4X[i]:7.4f}")

for label, row in (("2x", PUBLISHED_2X), ("4x", PUBLISHED_4X)):
    print(f"published {label} row removes {np.dot(g, row) / g.sum():.4f} of conv GFLOPs")
ratio = np.array(PUBLISHED_4X) / np.array(PUBLISHED_2X)
print(f"published 4x / 2x ratios lie in [{ratio.min():.4f}, {ratio.max():.4f}]")
