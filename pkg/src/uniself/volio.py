"""Volumetric data types and a minimal NIfTI-1 reader/writer.

Arrays are indexed ``[x, y, z]``; on disk the voxel stream is x-fastest
(Fortran order of the ``(nx, ny, nz)`` array), which is the NIfTI convention.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

CONTRASTS = ("T1w", "T2w", "PDw", "FLAIR")

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"

# datatype code -> (numpy dtype, bitpix)
DATATYPES = {
    2: (np.dtype(np.uint8), 8),
    4: (np.dtype(np.int16), 16),
    16: (np.dtype(np.float32), 32),
}
_CODES = {dt: code for code, (dt, _) in DATATYPES.items()}


class NiftiFormatError(ValueError):
    """Header is not a valid single-file NIfTI-1 header."""


class NiftiUnsupportedError(ValueError):
    """Valid NIfTI-1, but outside the supported subset."""


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_spacing(spacing) -> tuple:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
        raise ValueError(f"spacing must be three positive numbers, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume3D:
    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "voxels", _frozen(v, np.float64))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple:
        return tuple(self.voxels.shape)

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)) -> "Volume3D":
        return cls(np.zeros(dims), spacing)


@dataclass(frozen=True)
class BinaryMask3D:
    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"mask must be a non-empty 3D array, got shape {v.shape}")
        if v.dtype != bool:
            if not np.all((v == 0) | (v == 1)):
                raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "voxels", _frozen(v, bool))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple:
        return tuple(self.voxels.shape)

    @property
    def count(self) -> int:
        return int(self.voxels.sum())

    def volume_mm3(self) -> float:
        return self.count * float(np.prod(self.spacing))


@dataclass(frozen=True)
class ConfidenceMap:
    """Per-voxel count of positive votes out of ``n_votes`` predictions."""

    counts: np.ndarray
    n_votes: int
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 3:
            raise ValueError("confidence map must be 3D")
        if self.n_votes < 1:
            raise ValueError("n_votes must be positive")
        if c.size and (c.min() < 0 or c.max() > self.n_votes):
            raise ValueError(f"counts must lie in [0, {self.n_votes}]")
        object.__setattr__(self, "counts", _frozen(c, np.int32))
        object.__setattr__(self, "n_votes", int(self.n_votes))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple:
        return tuple(self.counts.shape)


@dataclass(frozen=True)
class MultiContrastVolume:
    """Co-registered contrasts; absent ones are ``None`` and cleared in ``availability``.

    Bit ``i`` of ``availability`` corresponds to ``CONTRASTS[i]``.
    """

    volumes: Mapping[str, Optional[Volume3D]] = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.volumes) - set(CONTRASTS)
        if unknown:
            raise ValueError(f"unknown contrasts: {sorted(unknown)}")
        vols = {name: self.volumes.get(name) for name in CONTRASTS}
        present = [v for v in vols.values() if v is not None]
        if not present:
            raise ValueError("at least one contrast must be present")
        dims, spacing = present[0].dims, present[0].spacing
        for name, v in vols.items():
            if v is not None and (v.dims != dims or v.spacing != spacing):
                raise ValueError(f"contrast {name} has dims/spacing {v.dims}/{v.spacing}, "
                                 f"expected {dims}/{spacing}")
        object.__setattr__(self, "volumes", vols)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, Optional[np.ndarray]], spacing=(1.0, 1.0, 1.0)):
        return cls({k: None if a is None else Volume3D(a, spacing) for k, a in arrays.items()})

    @property
    def availability(self) -> int:
        return sum(1 << i for i, name in enumerate(CONTRASTS) if self.volumes[name] is not None)

    @property
    def present(self) -> tuple:
        return tuple(n for n in CONTRASTS if self.volumes[n] is not None)

    def _first(self) -> Volume3D:
        return next(v for v in self.volumes.values() if v is not None)

    @property
    def dims(self) -> tuple:
        return self._first().dims

    @property
    def spacing(self) -> tuple:
        return self._first().spacing

    def stack(self) -> np.ndarray:
        """Network-input array ``(4, nx, ny, nz)``; absent contrasts become zeros."""
        out = np.zeros((len(CONTRASTS),) + self.dims)
        for i, name in enumerate(CONTRASTS):
            if self.volumes[name] is not None:
                out[i] = self.volumes[name].voxels
        return out

    def keep(self, names) -> "MultiContrastVolume":
        """Copy with only ``names`` kept; everything else flagged absent."""
        names = set(names)
        if not names & set(self.present):
            raise ValueError("cannot drop every available contrast")
        return MultiContrastVolume({n: (v if n in names else None) for n, v in self.volumes.items()})

    def replace(self, name: str, vol: Volume3D) -> "MultiContrastVolume":
        vols = dict(self.volumes)
        vols[name] = vol
        return MultiContrastVolume(vols)


def mask_to_names(mask: int) -> tuple:
    return tuple(n for i, n in enumerate(CONTRASTS) if mask >> i & 1)


def names_to_mask(names) -> int:
    names = set(names)
    return sum(1 << i for i, n in enumerate(CONTRASTS) if n in names)


# ---------------------------------------------------------------- NIfTI-1

def _open(path, mode):
    path = str(path)
    return gzip.open(path, mode) if path.endswith(".gz") else open(path, mode)


def build_header(dims, spacing, datatype: int, scl_slope=1.0, scl_inter=0.0,
                 intent_p1=0.0, intent_name=b"", descrip=b"") -> bytes:
    """Pack a little-endian 348-byte NIfTI-1 header for a single-file ``.nii``."""
    _, bitpix = DATATYPES[datatype]
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<b", hdr, 38, ord("r"))
    dim = [3, *dims, 1, 1, 1, 1]
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<f", hdr, 56, intent_p1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, scl_slope)
    struct.pack_into("<f", hdr, 116, scl_inter)
    hdr[123] = 2  # xyzt_units: mm
    hdr[148:148 + min(len(descrip), 80)] = descrip[:80]
    struct.pack_into("<h", hdr, 252, 0)   # qform_code
    struct.pack_into("<h", hdr, 254, 1)   # sform_code: scanner
    sx, sy, sz = spacing
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, 0.0)
    hdr[328:328 + min(len(intent_name), 16)] = intent_name[:16]
    hdr[344:348] = MAGIC_SINGLE
    return bytes(hdr)


@dataclass
class NiftiHeader:
    dims: tuple
    spacing: tuple
    datatype: int
    vox_offset: int
    scl_slope: float
    scl_inter: float
    intent_p1: float
    intent_name: str
    endian: str


def parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError("file shorter than a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == HEADER_SIZE:
            break
    else:
        raise NiftiFormatError("sizeof_hdr is not 348")
    if raw[344:348] != MAGIC_SINGLE:
        raise NiftiFormatError(f"bad magic {raw[344:348]!r}; only single-file n+1 is supported")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"dim[0]={ndim} out of range")
    extra = [d for d in dim[4:ndim + 1] if d != 1]
    if ndim < 3 or extra:
        raise NiftiUnsupportedError(f"only 3D images are supported, got dim={dim[:ndim + 1]}")
    dims = tuple(int(d) for d in dim[1:4])
    if min(dims) < 1:
        raise NiftiFormatError(f"non-positive dims {dims}")
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    if datatype not in DATATYPES:
        raise NiftiUnsupportedError(f"datatype code {datatype} not supported")
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    spacing = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
    vox_offset = int(struct.unpack_from(endian + "f", raw, 108)[0])
    if vox_offset < VOX_OFFSET:
        raise NiftiFormatError(f"vox_offset {vox_offset} < {VOX_OFFSET}")
    slope, inter = struct.unpack_from(endian + "2f", raw, 112)
    intent_p1 = struct.unpack_from(endian + "f", raw, 56)[0]
    intent_name = raw[328:344].split(b"\x00")[0].decode("ascii", "replace")
    return NiftiHeader(dims, spacing, datatype, vox_offset, float(slope), float(inter),
                       float(intent_p1), intent_name, endian)


def _read_raw(path):
    with _open(path, "rb") as f:
        raw = f.read()
    hdr = parse_header(raw)
    dtype, _ = DATATYPES[hdr.datatype]
    n = int(np.prod(hdr.dims))
    need = hdr.vox_offset + n * dtype.itemsize
    if len(raw) < need:
        raise NiftiFormatError(f"truncated voxel data: {len(raw)} bytes, need {need}")
    data = np.frombuffer(raw, dtype=dtype.newbyteorder(hdr.endian), count=n, offset=hdr.vox_offset)
    return hdr, data.reshape(hdr.dims, order="F")


def read_nifti(path, kind: str = "auto") -> Union[Volume3D, BinaryMask3D]:
    """Read a ``.nii``/``.nii.gz`` file.

    ``kind`` is ``"volume"``, ``"mask"`` or ``"auto"``; auto returns a mask for
    uint8 data whose values are all 0/1, a volume otherwise.
    """
    hdr, data = _read_raw(path)
    # slope == 0 means "no scaling" in NIfTI-1
    if hdr.scl_slope not in (0.0, 1.0) or hdr.scl_inter != 0.0:
        slope = hdr.scl_slope or 1.0
        values = data.astype(np.float64) * slope + hdr.scl_inter
    else:
        values = data.astype(np.float64)
    is_binary = bool(np.all((values == 0) | (values == 1)))
    if kind == "mask" or (kind == "auto" and hdr.datatype == 2 and is_binary):
        if not is_binary:
            raise ValueError(f"{path}: mask file contains values other than 0/1")
        return BinaryMask3D(values.astype(bool), hdr.spacing)
    if kind not in ("auto", "volume", "mask"):
        raise ValueError(f"unknown kind {kind!r}")
    return Volume3D(values, hdr.spacing)


def read_header(path) -> NiftiHeader:
    with _open(path, "rb") as f:
        return parse_header(f.read(HEADER_SIZE))


def _atomic_write(path, payload: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    if path.name.endswith(".gz"):
        # empty name and mtime=0 keep gzip output byte-identical across runs
        with open(tmp, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as f:
            f.write(payload)
    else:
        with open(tmp, "wb") as f:
            f.write(payload)
    os.replace(tmp, path)


def write_nifti(vol, path, dtype=None) -> None:
    """Write a Volume3D (float32), BinaryMask3D (uint8) or ConfidenceMap (uint8).

    Confidence maps record ``n_votes`` in ``intent_p1`` with intent name
    ``"confidence"`` so :func:`read_confidence` can restore them.
    """
    intent_p1, intent_name = 0.0, b""
    if isinstance(vol, BinaryMask3D):
        arr, code = vol.voxels.astype(np.uint8), 2
    elif isinstance(vol, ConfidenceMap):
        if vol.n_votes > 255:
            raise ValueError("confidence maps with more than 255 votes do not fit uint8")
        arr, code = vol.counts.astype(np.uint8), 2
        intent_p1, intent_name = float(vol.n_votes), b"confidence"
    elif isinstance(vol, Volume3D):
        dt = np.dtype(dtype or np.float32)
        if dt not in _CODES:
            raise NiftiUnsupportedError(f"cannot write dtype {dt}")
        arr, code = vol.voxels.astype(dt), _CODES[dt]
    else:
        raise TypeError(f"cannot write {type(vol).__name__}")
    header = build_header(arr.shape, vol.spacing, code, intent_p1=intent_p1, intent_name=intent_name)
    payload = header + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="F")
    _atomic_write(path, payload)


def read_confidence(path) -> ConfidenceMap:
    hdr, data = _read_raw(path)
    if hdr.intent_name != "confidence":
        raise NiftiFormatError(f"{path} is not a confidence map")
    return ConfidenceMap(data.astype(np.int32), int(round(hdr.intent_p1)), hdr.spacing)
