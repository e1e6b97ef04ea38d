"""
Detect-and-grow fusion of 24 votes
==================================

Voxels with more than tau1 votes are confident detections; voxels with more
than tau2 votes are candidates. The final mask keeps every 26-connected
candidate region that touches a detection.
"""
import numpy as np
from scipy import ndimage

from uniself.fusion import FusionParams, detect_masks, fuse, tau_grid
from uniself.volio import ConfidenceMap

line = ConfidenceMap(np.array([20, 18, 9, 3, 0, 9, 9]).reshape(-1, 1, 1), 24)
m1, m2 = detect_masks(line, FusionParams(16, 7))
print("votes    ", line.counts.ravel())
print("detected ", m1.voxels.ravel().astype(int))
print("candidate", m2.voxels.ravel().astype(int))
print("fused    ", fuse(line, FusionParams(16, 7)).voxels.ravel().astype(int))

# blobs of different heights plus vote noise: weak blobs without a confident
# core are dropped, halos around confident cores are kept
rng = np.random.default_rng(3)
field = np.zeros((24, 24, 24))
for _ in range(8):
    spot = np.zeros_like(field)
    spot[tuple(rng.integers(3, 21, 3))] = 1.0
    field += rng.uniform(0.3, 1.0) * ndimage.gaussian_filter(spot, 1.5) / ndimage.gaussian_filter(
        np.pad([[[1.0]]], 6), 1.5).max()
field += rng.normal(0, 0.05, field.shape)
cmap = ConfidenceMap(np.clip(np.rint(24 * field), 0, 24).astype(int), 24)
for t1, t2 in [(16, 7), (14, 8), (13, 13)]:
    a, b = detect_masks(cmap, FusionParams(t1, t2))
    print(f"tau=({t1},{t2})  |M1|={a.count:5d}  |M|={fuse(cmap, FusionParams(t1, t2)).count:5d}  |M2|={b.count:5d}")
print("valid (tau1, tau2) pairs for 24 votes:", len(tau_grid(24)))
