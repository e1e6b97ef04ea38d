"""
The 24 orientation transforms
=============================

Each volume is sliced along one of three planes and, within that plane, put
through one of the 8 rotations/flips of a square. Every transform has an
exact inverse, which is what lets the ensemble map its predictions back.
"""
import numpy as np

from uniself import orient
from uniself.volio import MultiContrastVolume

rng = np.random.default_rng(1)
v = rng.normal(size=(6, 7, 8))

for t in orient.catalog()[:9]:
    out = orient.apply(t, v)
    back = orient.apply(orient.inverse(t), out)
    print(f"{t!r:40s} shape {out.shape}  exact inverse: {np.array_equal(back, v)}")

# composing two in-plane elements stays in the group
a, b = orient.OrientTransform("axial", 1), orient.OrientTransform("axial", 5)
c = orient.compose(a, b)
print("rot90 then flip-rot90 =", c, np.array_equal(orient.apply(c, v), orient.apply(b, orient.apply(a, v))))

# 2.5D slabs: three neighbouring slices per contrast, zero-padded at the edges
mcv = MultiContrastVolume.from_arrays({"T1w": v, "T2w": v, "PDw": v, "FLAIR": v})
slab = orient.extract_slab(mcv, "sagittal", 0)
print("slab channels", slab.channels.shape, "first slice is padding:", not slab.channels[0].any())
print("slices per plane:", {p: orient.slice_count(mcv.dims, p) for p in orient.PLANES})
