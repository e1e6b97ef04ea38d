"""
Reading and writing NIfTI-1 volumes
===================================

Volumes, binary masks and vote-count maps all go through the same single-file
NIfTI-1 reader/writer. Voxels are stored x-fastest, gzip output is
byte-reproducible, and a confidence map remembers how many votes it counts.
"""
import tempfile
from pathlib import Path

import numpy as np

from uniself.volio import (BinaryMask3D, ConfidenceMap, MultiContrastVolume, Volume3D, read_confidence,
                           read_header, read_nifti, write_nifti)

tmp = Path(tempfile.mkdtemp())
rng = np.random.default_rng(0)

# a float32 volume with anisotropic voxels survives a round trip bit for bit
vol = Volume3D(rng.normal(size=(16, 12, 8)).astype(np.float32), spacing=(1.0, 1.0, 3.0))
write_nifti(vol, tmp / "t1.nii.gz")
back = read_nifti(tmp / "t1.nii.gz")
print("dims", back.dims, "spacing", back.spacing, "identical:", np.array_equal(back.voxels, vol.voxels))

hdr = read_header(tmp / "t1.nii.gz")
print("datatype code", hdr.datatype, "vox_offset", hdr.vox_offset)

# uint8 files holding only 0/1 come back as masks
mask = BinaryMask3D(vol.voxels > 1.0, vol.spacing)
write_nifti(mask, tmp / "lesions.nii.gz")
print("mask voxels:", read_nifti(tmp / "lesions.nii.gz").count, "volume mm^3:", mask.volume_mm3())

# vote counts out of 24
counts = ConfidenceMap(rng.integers(0, 25, size=(16, 12, 8)), n_votes=24)
write_nifti(counts, tmp / "confidence.nii.gz")
print("confidence votes:", read_confidence(tmp / "confidence.nii.gz").n_votes)

# a subject with FLAIR missing: the stacked input keeps a zero channel for it
mcv = MultiContrastVolume({"T1w": vol, "T2w": vol, "PDw": None, "FLAIR": None})
print("present:", mcv.present, "availability mask:", bin(mcv.availability), "stack:", mcv.stack().shape)
