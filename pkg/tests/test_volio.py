import gzip
import struct

import numpy as np
import pytest

from uniself.volio import (BinaryMask3D, ConfidenceMap, MultiContrastVolume, NiftiFormatError,
                           NiftiUnsupportedError, Volume3D, build_header, read_confidence,
                           read_nifti, write_nifti)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_float32_roundtrip_bit_exact(tmp_path, rng):
    data = rng.normal(size=(8, 8, 8)).astype(np.float32)
    vol = Volume3D(data, (1.0, 2.0, 0.5))
    write_nifti(vol, tmp_path / "v.nii")
    back = read_nifti(tmp_path / "v.nii")
    assert isinstance(back, Volume3D)
    assert back.dims == (8, 8, 8)
    assert back.spacing == (1.0, 2.0, 0.5)
    assert np.array_equal(back.voxels.astype(np.float32).view(np.uint32), data.view(np.uint32))


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_mask_roundtrip(tmp_path, rng, suffix):
    mask = BinaryMask3D(rng.random((5, 6, 7)) > 0.5)
    write_nifti(mask, tmp_path / f"m{suffix}")
    back = read_nifti(tmp_path / f"m{suffix}")
    assert isinstance(back, BinaryMask3D)
    assert np.array_equal(back.voxels, mask.voxels)


def test_all_zero_uint8_is_mask(tmp_path):
    write_nifti(BinaryMask3D(np.zeros((4, 4, 4), dtype=bool)), tmp_path / "z.nii")
    back = read_nifti(tmp_path / "z.nii")
    assert isinstance(back, BinaryMask3D)
    assert back.voxels.size == 64 and back.count == 0


def test_scaling_applied(tmp_path):
    # value = raw * slope + inter = 3 * 2 + 1
    hdr = build_header((2, 2, 2), (1, 1, 1), 4, scl_slope=2.0, scl_inter=1.0)
    raw = np.full((2, 2, 2), 3, dtype="<i2")
    (tmp_path / "s.nii").write_bytes(hdr + b"\0" * 4 + raw.tobytes(order="F"))
    back = read_nifti(tmp_path / "s.nii")
    assert np.all(back.voxels == 7.0)


def test_header_layout(tmp_path):
    write_nifti(Volume3D(np.zeros((3, 4, 5)), (1, 1, 3)), tmp_path / "h.nii")
    raw = (tmp_path / "h.nii").read_bytes()
    assert struct.unpack_from("<i", raw, 0)[0] == 348
    assert raw[344:348] == b"n+1\x00"
    assert struct.unpack_from("<f", raw, 108)[0] == 352.0
    assert struct.unpack_from("<8h", raw, 40)[:4] == (3, 3, 4, 5)
    assert struct.unpack_from("<h", raw, 70)[0] == 16     # float32
    assert struct.unpack_from("<h", raw, 72)[0] == 32     # bitpix
    assert struct.unpack_from("<3f", raw, 80) == (1.0, 1.0, 3.0)
    assert struct.unpack_from("<h", raw, 254)[0] == 1     # sform_code
    assert len(raw) == 352 + 3 * 4 * 5 * 4


def test_voxel_order_is_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_nifti(Volume3D(data), tmp_path / "o.nii")
    stream = np.frombuffer((tmp_path / "o.nii").read_bytes()[352:], dtype="<f4")
    assert stream[1] == data[1, 0, 0]
    assert stream[2] == data[0, 1, 0]
    assert stream[6] == data[0, 0, 1]


def test_big_endian_file(tmp_path):
    hdr = bytearray(build_header((2, 2, 2), (1, 1, 1), 16))
    # rewrite the fields read by the parser in big-endian order
    struct.pack_into(">i", hdr, 0, 348)
    struct.pack_into(">8h", hdr, 40, 3, 2, 2, 2, 1, 1, 1, 1)
    struct.pack_into(">h", hdr, 70, 16)
    struct.pack_into(">8f", hdr, 76, 1, 1, 1, 1, 1, 1, 1, 1)
    struct.pack_into(">3f", hdr, 108, 352.0, 1.0, 0.0)
    struct.pack_into(">f", hdr, 56, 0.0)
    data = np.arange(8, dtype=">f4")
    (tmp_path / "be.nii").write_bytes(bytes(hdr) + b"\0" * 4 + data.tobytes())
    back = read_nifti(tmp_path / "be.nii")
    assert np.array_equal(back.voxels.reshape(-1, order="F"), np.arange(8))


def test_bad_magic(tmp_path):
    hdr = bytearray(build_header((2, 2, 2), (1, 1, 1), 16))
    hdr[344:348] = b"ni1\x00"
    (tmp_path / "b.nii").write_bytes(bytes(hdr) + bytes(4 + 32))
    with pytest.raises(NiftiFormatError):
        read_nifti(tmp_path / "b.nii")


def test_bad_sizeof_hdr(tmp_path):
    (tmp_path / "b.nii").write_bytes(bytes(400))
    with pytest.raises(NiftiFormatError):
        read_nifti(tmp_path / "b.nii")


def test_unsupported_datatype(tmp_path):
    hdr = bytearray(build_header((2, 2, 2), (1, 1, 1), 16))
    struct.pack_into("<h", hdr, 70, 64)  # float64
    (tmp_path / "d.nii").write_bytes(bytes(hdr) + bytes(4 + 64))
    with pytest.raises(NiftiUnsupportedError):
        read_nifti(tmp_path / "d.nii")


def test_unsupported_4d(tmp_path):
    hdr = bytearray(build_header((2, 2, 2), (1, 1, 1), 16))
    struct.pack_into("<8h", hdr, 40, 4, 2, 2, 2, 3, 1, 1, 1)
    (tmp_path / "4d.nii").write_bytes(bytes(hdr) + bytes(4 + 96))
    with pytest.raises(NiftiUnsupportedError):
        read_nifti(tmp_path / "4d.nii")


def test_mask_kind_rejects_nonbinary(tmp_path):
    write_nifti(Volume3D(np.full((2, 2, 2), 3.0)), tmp_path / "v.nii")
    with pytest.raises(ValueError):
        read_nifti(tmp_path / "v.nii", kind="mask")


def test_gzip_output_deterministic(tmp_path, rng):
    vol = Volume3D(rng.normal(size=(4, 4, 4)))
    write_nifti(vol, tmp_path / "a.nii.gz")
    write_nifti(vol, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()
    with gzip.open(tmp_path / "a.nii.gz") as f:
        assert f.read(4) == struct.pack("<i", 348)


def test_confidence_map_roundtrip(tmp_path, rng):
    c = ConfidenceMap(rng.integers(0, 25, (5, 5, 5)), 24)
    write_nifti(c, tmp_path / "c.nii.gz")
    back = read_confidence(tmp_path / "c.nii.gz")
    assert back.n_votes == 24
    assert np.array_equal(back.counts, c.counts)


def test_confidence_map_bounds():
    with pytest.raises(ValueError):
        ConfidenceMap(np.full((2, 2, 2), 25), 24)
    with pytest.raises(ValueError):
        ConfidenceMap(np.full((2, 2, 2), -1), 24)


def test_volume_rejects_nonfinite():
    with pytest.raises(ValueError):
        Volume3D(np.array([[[np.nan]]]))


def test_types_immutable(rng):
    v = Volume3D(rng.normal(size=(2, 2, 2)))
    with pytest.raises(ValueError):
        v.voxels[0, 0, 0] = 1.0


def test_multicontrast_rejects_mismatched_dims():
    with pytest.raises(ValueError):
        MultiContrastVolume.from_arrays({"T1w": np.zeros((4, 4, 4)), "FLAIR": np.zeros((4, 4, 5))})


def test_multicontrast_rejects_empty():
    with pytest.raises(ValueError):
        MultiContrastVolume({"T1w": None})


def test_multicontrast_availability_and_stack():
    mcv = MultiContrastVolume.from_arrays({"T1w": np.ones((3, 3, 3)), "FLAIR": 2 * np.ones((3, 3, 3))})
    assert mcv.availability == 0b1001
    stack = mcv.stack()
    assert stack.shape == (4, 3, 3, 3)
    assert np.all(stack[1] == 0) and np.all(stack[2] == 0) and np.all(stack[3] == 2)
    assert mcv.keep(["T1w"]).availability == 0b0001
    with pytest.raises(ValueError):
        mcv.keep(["T2w"])
