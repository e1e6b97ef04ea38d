"""
Lesion segmentation metrics
===========================

Voxel overlap (DSC, PPV, TPR), lesion-wise detection (LTPR, LFPR on
26-connected lesions), volume correlation across a cohort, and the composite
score that weights them.
"""
import numpy as np

from uniself.metrics import evaluate_cohort, lesion_metrics, score, voxel_metrics
from uniself.volio import BinaryMask3D

print("score of a reported result row:", round(score(0.664, 0.882, 0.508, 0.100, 0.866), 5))

gt = np.zeros((20, 20, 20), bool)
gt[2:6, 2:6, 2:6] = True      # a large lesion
gt[12:14, 12:14, 12:14] = True  # a small one
pred = np.zeros_like(gt)
pred[3:7, 3:7, 3:7] = True    # hits the large lesion, misses the small one
pred[17, 17, 17] = True       # a false positive
print("dsc, ppv, tpr =", np.round(voxel_metrics(pred, gt), 3))
print("ltpr, lfpr    =", np.round(lesion_metrics(pred, gt), 3))

rng = np.random.default_rng(4)
preds, raters = [], []
for k in range(5):
    g = np.zeros((20, 20, 20), bool)
    g[5:8 + k, 5:9, 5:9] = True
    raters.append(BinaryMask3D(g))
    preds.append(BinaryMask3D(g | (rng.random(g.shape) < 0.001)))
report = evaluate_cohort(preds, raters)
print({k: round(v, 3) for k, v in report.row().items()})
