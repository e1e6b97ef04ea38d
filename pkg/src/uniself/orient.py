"""The 24 plane x dihedral volume symmetries and 2.5D slab extraction.

A transform ``(plane, dihedral)`` acts on the two in-plane axes of a volume and
leaves the slicing axis alone, so after ``apply`` the network still slices the
result along ``NORMAL_AXIS[plane]``. Dihedral element ``d`` is
``rot90^(d % 4) . flip^(d // 4)``: flip first (reversing the first in-plane
axis), then rotate counter-clockwise from the first in-plane axis toward the
second.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .volio import BinaryMask3D, ConfidenceMap, MultiContrastVolume, Volume3D

PLANES = ("axial", "sagittal", "coronal")
NORMAL_AXIS = {0: 2, 1: 0, 2: 1}
IN_PLANE_AXES = {0: (0, 1), 1: (1, 2), 2: (0, 2)}


def plane_index(plane) -> int:
    if isinstance(plane, str):
        return PLANES.index(plane)
    if plane not in (0, 1, 2):
        raise ValueError(f"unknown plane {plane!r}")
    return int(plane)


@dataclass(frozen=True, order=True)
class OrientTransform:
    plane: int
    dihedral: int

    def __post_init__(self):
        object.__setattr__(self, "plane", plane_index(self.plane))
        if not 0 <= self.dihedral < 8:
            raise ValueError(f"dihedral index must be in 0..7, got {self.dihedral}")

    @property
    def id(self) -> int:
        return self.plane * 8 + self.dihedral

    @property
    def rotations(self) -> int:
        return self.dihedral % 4

    @property
    def flipped(self) -> bool:
        return self.dihedral >= 4

    @classmethod
    def from_id(cls, i: int) -> "OrientTransform":
        if not 0 <= i < 24:
            raise ValueError(f"transform id must be in 0..23, got {i}")
        return cls(i // 8, i % 8)

    def __repr__(self):
        flip = "+flip" if self.flipped else ""
        return f"OrientTransform({PLANES[self.plane]}, rot{90 * self.rotations}{flip})"


def catalog() -> list:
    return [OrientTransform.from_id(i) for i in range(24)]


def identity(plane=0) -> OrientTransform:
    return OrientTransform(plane, 0)


def three_plane() -> list:
    return [identity(p) for p in range(3)]


def inverse(t: OrientTransform) -> OrientTransform:
    if t.flipped:
        return t  # reflections are involutions
    return OrientTransform(t.plane, (4 - t.rotations) % 4)


def compose(first: OrientTransform, second: OrientTransform) -> OrientTransform:
    """Transform equal to applying ``first`` and then ``second`` (same plane only)."""
    if first.plane != second.plane:
        raise ValueError("only same-plane transforms compose inside the catalog")
    # F R = R^-1 F
    sign = -1 if second.flipped else 1
    k = (second.rotations + sign * first.rotations) % 4
    f = first.flipped ^ second.flipped
    return OrientTransform(first.plane, k + 4 * f)


def apply_array(t: OrientTransform, arr: np.ndarray) -> np.ndarray:
    """Apply to the last three axes of ``arr`` (leading axes are carried along)."""
    off = arr.ndim - 3
    a, b = (ax + off for ax in IN_PLANE_AXES[t.plane])
    out = np.flip(arr, axis=a) if t.flipped else arr
    return np.ascontiguousarray(np.rot90(out, t.rotations, axes=(a, b)))


def _spacing(t: OrientTransform, spacing) -> tuple:
    if t.rotations % 2 == 0:
        return tuple(spacing)
    s = list(spacing)
    a, b = IN_PLANE_AXES[t.plane]
    s[a], s[b] = s[b], s[a]
    return tuple(s)


Transformable = Union[Volume3D, BinaryMask3D, ConfidenceMap, MultiContrastVolume, np.ndarray]


def apply(t: OrientTransform, v: Transformable):
    """Permute voxels of ``v`` by ``t``; the result has the same type as ``v``."""
    if isinstance(v, np.ndarray):
        return apply_array(t, v)
    if isinstance(v, Volume3D):
        return Volume3D(apply_array(t, v.voxels), _spacing(t, v.spacing))
    if isinstance(v, BinaryMask3D):
        return BinaryMask3D(apply_array(t, v.voxels), _spacing(t, v.spacing))
    if isinstance(v, ConfidenceMap):
        return ConfidenceMap(apply_array(t, v.counts), v.n_votes, _spacing(t, v.spacing))
    if isinstance(v, MultiContrastVolume):
        return MultiContrastVolume({n: None if x is None else apply(t, x) for n, x in v.volumes.items()})
    raise TypeError(f"cannot transform {type(v).__name__}")


# ---------------------------------------------------------------- 2.5D slabs

@dataclass(frozen=True)
class Slab25D:
    """Three adjacent slices per contrast, contrast-major on the channel axis.

    Channel ``3 * c + j`` holds contrast ``c`` at slice offset ``j - 1``.
    """

    plane: int
    center_index: int
    channels: np.ndarray
    availability: int


def slice_count(dims, plane) -> int:
    return dims[NORMAL_AXIS[plane_index(plane)]]


def stack_slabs(stack: np.ndarray, plane) -> np.ndarray:
    """All slabs of a ``(n_contrasts, nx, ny, nz)`` stack along ``plane``.

    Returns ``(n_slices, 3 * n_contrasts, H, W)`` with zero-padded neighbours at
    both ends of the slice axis.
    """
    p = plane_index(plane)
    a = np.moveaxis(stack, NORMAL_AXIS[p] + 1, 1)  # (C, n, H, W)
    n = a.shape[1]
    padded = np.pad(a, ((0, 0), (1, 1), (0, 0), (0, 0)))
    trio = np.stack([padded[:, j:j + n] for j in range(3)], axis=2)  # (C, n, 3, H, W)
    trio = trio.transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(trio.reshape(n, -1, *a.shape[2:]))


def unstack_slices(slices: np.ndarray, plane) -> np.ndarray:
    """Inverse of slicing: ``(n_slices, H, W)`` back to an ``(nx, ny, nz)`` array."""
    return np.ascontiguousarray(np.moveaxis(slices, 0, NORMAL_AXIS[plane_index(plane)]))


def extract_slab(mcv: MultiContrastVolume, plane, index: int) -> Slab25D:
    p = plane_index(plane)
    n = slice_count(mcv.dims, p)
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} outside [0, {n}) for {PLANES[p]} plane")
    stack = mcv.stack()
    a = np.moveaxis(stack, NORMAL_AXIS[p] + 1, 1)
    blocks = []
    for c in range(a.shape[0]):
        for k in (index - 1, index, index + 1):
            blocks.append(a[c, k] if 0 <= k < n else np.zeros(a.shape[2:]))
    return Slab25D(p, index, np.stack(blocks), mcv.availability)
