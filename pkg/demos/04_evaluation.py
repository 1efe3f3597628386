"""
Per-view accuracy and completeness
==================================

Each predicted view is rescaled onto its ground-truth cloud by the ratio of
median centred norms. The metrics are median nearest-neighbour distances
times 100.
"""

import numpy as np

from distillcache.evaluation import CloudPair, evaluate_pair, evaluate_per_view

rng = np.random.default_rng(0)
gt = rng.normal(size=(2000, 3))

# a prediction at half scale is recovered exactly
print(evaluate_pair(CloudPair(0.5 * gt, gt)))

# noise raises both metrics; a cropped prediction also skews the scale factor
noisy = gt + 0.01 * rng.normal(size=gt.shape)
print("noisy  ", evaluate_pair(CloudPair(noisy, gt)))
partial = gt[gt[:, 0] < 0.5]
print("partial", evaluate_pair(CloudPair(partial, gt)))

# per-view evaluation of (H, W, 3) maps with optional validity masks
h, w = 12, 16
maps = [rng.normal(size=(h, w, 3)) for _ in range(3)]
masks = [rng.uniform(size=(h, w)) > 0.2 for _ in range(3)]
clouds = [2.0 * m[k] for m, k in zip(maps, masks)]
report = evaluate_per_view(maps, clouds, masks=masks)
for row in report["views"]:
    print(row)
print("median", report["median"])
