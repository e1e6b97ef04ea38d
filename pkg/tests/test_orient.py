import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uniself import orient
from uniself.orient import OrientTransform, apply, catalog, compose, extract_slab, inverse
from uniself.volio import BinaryMask3D, MultiContrastVolume, Volume3D


def _rot90_table(shape):
    """Brute force: counter-clockwise quarter turn of an (h, w) grid, out[i, j] = a[j, w-1-i]."""
    h, w = shape
    table = {}
    for i in range(w):
        for j in range(h):
            table[(j, w - 1 - i)] = (i, j)
    return table


def test_catalog_has_24_distinct_elements():
    rng = np.random.default_rng(1)
    v = rng.normal(size=(4, 5, 6))
    ids = [t.id for t in catalog()]
    assert ids == list(range(24))
    images = {(t.plane, apply(t, v).tobytes(), apply(t, v).shape) for t in catalog()}
    assert len(images) == 24


def test_identity_is_exact():
    v = np.random.default_rng(0).normal(size=(3, 4, 5))
    for p in range(3):
        assert np.array_equal(apply(OrientTransform(p, 0), v), v)


def test_rot90_twice_is_rot180():
    v = np.random.default_rng(0).normal(size=(5, 6, 7))
    for p in range(3):
        r90 = OrientTransform(p, 1)
        assert np.array_equal(apply(r90, apply(r90, v)), apply(OrientTransform(p, 2), v))


def test_axial_rot90_permutation_table():
    v = np.arange(6, dtype=float).reshape(2, 3, 1)
    out = apply(OrientTransform("axial", 1), v)
    assert out.shape == (3, 2, 1)
    table = _rot90_table((2, 3))
    for (si, sj), (ti, tj) in table.items():
        assert out[ti, tj, 0] == v[si, sj, 0]
    # voxel (0, 0, 0) lands at (2, 0, 0)
    assert out[2, 0, 0] == v[0, 0, 0]


def test_inverse_examples():
    for p in range(3):
        assert inverse(OrientTransform(p, 0)) == OrientTransform(p, 0)
        assert inverse(OrientTransform(p, 1)) == OrientTransform(p, 3)
        assert inverse(OrientTransform(p, 5)) == OrientTransform(p, 5)


def test_roundtrip_all_transforms_50_volumes():
    rng = np.random.default_rng(2)
    for _ in range(50):
        dims = tuple(rng.integers(1, 7, 3))
        v = rng.normal(size=dims)
        for t in catalog():
            assert np.array_equal(apply(inverse(t), apply(t, v)), v)


def test_composition_table_closed_and_correct():
    v = np.random.default_rng(3).normal(size=(3, 4, 5))
    for p in range(3):
        elems = [OrientTransform(p, d) for d in range(8)]
        for a, b in itertools.product(elems, elems):
            c = compose(a, b)
            assert c in elems
            assert np.array_equal(apply(c, v), apply(b, apply(a, v)))


def test_mass_preserved_and_masks_stay_binary():
    rng = np.random.default_rng(4)
    v = rng.normal(size=(4, 5, 6))
    m = BinaryMask3D(rng.random((4, 5, 6)) > 0.6)
    for t in catalog():
        assert apply(t, v).sum() == pytest.approx(v.sum(), abs=1e-12)
        out = apply(t, m)
        assert isinstance(out, BinaryMask3D) and out.count == m.count


def test_spacing_follows_rotation():
    vol = Volume3D(np.zeros((2, 3, 4)), (1.0, 2.0, 3.0))
    assert apply(OrientTransform("axial", 1), vol).spacing == (2.0, 1.0, 3.0)
    assert apply(OrientTransform("sagittal", 1), vol).spacing == (1.0, 3.0, 2.0)
    assert apply(OrientTransform("coronal", 4), vol).spacing == (1.0, 2.0, 3.0)


@settings(max_examples=40, deadline=None)
@given(tid=st.integers(0, 23), dims=st.tuples(*[st.integers(1, 6)] * 3), seed=st.integers(0, 10_000))
def test_roundtrip_property(tid, dims, seed):
    v = np.random.default_rng(seed).normal(size=dims)
    t = OrientTransform.from_id(tid)
    assert np.array_equal(apply(inverse(t), apply(t, v)), v)


def _mcv(dims=(5, 6, 7), drop=()):
    rng = np.random.default_rng(5)
    arrays = {n: (None if n in drop else rng.normal(size=dims)) for n in ("T1w", "T2w", "PDw", "FLAIR")}
    return MultiContrastVolume.from_arrays(arrays)


def test_slab_boundary_zero_padding():
    slab = extract_slab(_mcv(), "axial", 0)
    assert slab.channels.shape == (12, 5, 6)
    for c in range(4):
        assert np.all(slab.channels[3 * c] == 0)


def test_slab_absent_contrast_is_zero():
    slab = extract_slab(_mcv(drop=("FLAIR",)), "coronal", 2)
    assert np.all(slab.channels[9:12] == 0)
    assert slab.availability == 0b0111


def test_slab_middle_of_ramp():
    dims = (4, 5, 6)
    ramp = np.arange(np.prod(dims), dtype=float).reshape(dims)
    mcv = MultiContrastVolume.from_arrays({n: ramp * (i + 1) for i, n in enumerate(("T1w", "T2w", "PDw", "FLAIR"))})
    slab = extract_slab(mcv, "sagittal", 2)
    for c in range(4):
        for j, k in enumerate((1, 2, 3)):
            assert np.array_equal(slab.channels[3 * c + j], ramp[k] * (c + 1))


def test_slab_index_out_of_range():
    with pytest.raises(IndexError):
        extract_slab(_mcv(), "axial", 7)


@pytest.mark.parametrize("plane", ["axial", "sagittal", "coronal"])
def test_restacking_center_slices_reproduces_volume(plane):
    mcv = _mcv()
    stack = mcv.stack()
    n = orient.slice_count(mcv.dims, plane)
    centers = np.stack([extract_slab(mcv, plane, k).channels[1::3] for k in range(n)])  # (n, 4, H, W)
    rebuilt = np.stack([orient.unstack_slices(centers[:, c], plane) for c in range(4)])
    assert np.array_equal(rebuilt, stack)
    assert np.array_equal(orient.stack_slabs(stack, plane), np.stack([extract_slab(mcv, plane, k).channels
                                                                     for k in range(n)]))
