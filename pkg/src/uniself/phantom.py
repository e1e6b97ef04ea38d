"""Seeded multicontrast brain-like phantoms with lesions, two raters and artifact corruptions."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .volio import (CONTRASTS, BinaryMask3D, MultiContrastVolume, Volume3D, read_nifti,
                    write_nifti)

# tissue -> (T1w, T2w, PDw, FLAIR). Lesions are bright on T2w/PDw/FLAIR and dark
# on T1w, but only FLAIR separates them cleanly from both grey matter and CSF.
DEFAULT_INTENSITIES = {
    "csf": (0.25, 1.00, 0.85, 0.15),
    "gm": (0.55, 0.65, 0.80, 0.55),
    "wm": (0.80, 0.45, 0.65, 0.45),
    "lesion": (0.60, 0.62, 0.78, 0.90),
}


class PhantomConfigError(ValueError):
    pass


@dataclass
class PhantomConfig:
    dims: tuple = (48, 48, 48)
    n_subjects: int = 4
    lesion_count: tuple = (3, 8)
    lesion_radius: tuple = (1.5, 4.0)
    noise_std: float = 0.03
    intensity_jitter: float = 0.05
    gain_jitter: float = 0.25
    rater_amplitude: float = 0.3
    intensities: dict = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.lesion_count = tuple(int(c) for c in self.lesion_count)
        self.lesion_radius = tuple(float(r) for r in self.lesion_radius)
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise PhantomConfigError(f"dims must be three sizes >= 8, got {self.dims}")
        if self.n_subjects < 1:
            raise PhantomConfigError("n_subjects must be positive")
        lo, hi = self.lesion_count
        if not 0 <= lo <= hi:
            raise PhantomConfigError(f"bad lesion_count range {self.lesion_count}")
        rlo, rhi = self.lesion_radius
        if not 0 < rlo <= rhi:
            raise PhantomConfigError(f"bad lesion_radius range {self.lesion_radius}")
        if self.noise_std < 0 or not 0 <= self.rater_amplitude <= 1:
            raise PhantomConfigError("noise_std must be >= 0 and rater_amplitude in [0, 1]")


@dataclass
class Subject:
    id: str
    mcv: MultiContrastVolume
    rater1: BinaryMask3D
    rater2: BinaryMask3D
    seed: list = field(default_factory=list)

    def as_tuple(self):
        return self.mcv, self.rater1, self.rater2


def _grid(dims):
    return np.meshgrid(*[np.arange(d, dtype=float) for d in dims], indexing="ij")


def _ellipsoid(grid, center, radii):
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def _smooth_field(rng, dims, sigma, amplitude):
    f = ndimage.gaussian_filter(rng.normal(size=dims), sigma)
    return 1.0 + amplitude * f / max(f.std(), 1e-12)


def _shell(mask, rng, amplitude, grow):
    """Random fraction ``amplitude`` of the one-voxel outer (grow) or inner shell."""
    ball = ndimage.generate_binary_structure(3, 1)
    if grow:
        ring = ndimage.binary_dilation(mask, ball) & ~mask
    else:
        ring = mask & ~ndimage.binary_erosion(mask, ball)
    return ring & (rng.random(mask.shape) < amplitude)


def _subject(cfg: PhantomConfig, rng, sid: str, seed) -> Subject:
    dims = cfg.dims
    grid = _grid(dims)
    center = (np.array(dims) - 1) / 2 + rng.uniform(-1, 1, 3)
    brain_r = np.array(dims) * rng.uniform(0.40, 0.45, 3)
    brain = _ellipsoid(grid, center, brain_r)
    wm = _ellipsoid(grid, center, brain_r * rng.uniform(0.72, 0.80))
    vent_r = brain_r * np.array([0.12, 0.25, 0.12]) * rng.uniform(0.8, 1.2)
    csf = _ellipsoid(grid, center, vent_r) | (brain & ~_ellipsoid(grid, center, brain_r - 1.5))

    # lesions inside white matter, away from the ventricles
    allowed = wm & ~ndimage.binary_dilation(csf, iterations=2)
    n_lesions = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    lesions = []
    candidates = np.argwhere(allowed)
    for _ in range(n_lesions):
        for _attempt in range(200):
            radii = rng.uniform(*cfg.lesion_radius, 3)
            c = candidates[rng.integers(len(candidates))] if len(candidates) else None
            if c is None:
                break
            blob = _ellipsoid(grid, c, radii)
            if blob.any() and np.all(allowed[blob]):
                lesions.append(blob)
                break
        else:
            raise PhantomConfigError(f"could not place lesion {len(lesions) + 1} of {n_lesions} in {sid}")
        if c is None:
            raise PhantomConfigError("no room for lesions inside white matter")

    rater1 = np.zeros(dims, dtype=bool)
    rater2 = np.zeros(dims, dtype=bool)
    for blob in lesions:
        rater1 |= blob
        grow = rng.random() < 0.5
        if grow:
            alt = blob | (_shell(blob, rng, cfg.rater_amplitude, True) & allowed)
        else:
            alt = blob & ~_shell(blob, rng, cfg.rater_amplitude, False)
            if not alt.any():
                alt = blob
        rater2 |= alt

    # soft tissue fractions give partial-volume edges
    frac = {
        "csf": csf.astype(float),
        "wm": (wm & ~csf).astype(float),
        "gm": (brain & ~wm & ~csf).astype(float),
        "lesion": rater1.astype(float),
    }
    frac = {k: ndimage.gaussian_filter(v, 0.6) for k, v in frac.items()}
    frac["wm"] = np.clip(frac["wm"] - frac["lesion"], 0, None)
    texture = _smooth_field(rng, dims, 4.0, 0.04)
    volumes = {}
    for ci, name in enumerate(CONTRASTS):
        img = np.zeros(dims)
        for tissue, f in frac.items():
            base = cfg.intensities[tissue][ci] * (1 + cfg.intensity_jitter * rng.uniform(-1, 1))
            img += base * f
        gain = 1 + cfg.gain_jitter * rng.uniform(-1, 1)
        img = gain * img * texture + rng.normal(0.0, cfg.noise_std, dims) * (img > 0.02)
        volumes[name] = Volume3D(img.astype(np.float32))  # exactly representable on disk
    return Subject(sid, MultiContrastVolume(volumes), BinaryMask3D(rater1), BinaryMask3D(rater2), list(seed))


def generate(cfg: PhantomConfig) -> list:
    """Cohort of :class:`Subject`; subject ``i`` draws from its own child seed."""
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_subjects)
    cohort = []
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        cohort.append(_subject(cfg, rng, f"sub-{i:03d}", [cfg.seed, i]))
    return cohort


# ---------------------------------------------------------------- corruptions

KINDS = ("gamma", "gaussian_noise", "bias_field", "blur", "anisotropy", "ghosting", "motion", "drop_contrast")


@dataclass(frozen=True)
class CorruptionSpec:
    """``strength`` meaning per kind: gamma exponent, noise std, bias-field
    log-amplitude, blur sigma (voxels), anisotropy factor, ghost attenuation,
    motion shift (voxels). Ignored for ``drop_contrast``."""

    kind: str
    strength: float = 1.0
    target: str = "FLAIR"
    axis: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {KINDS}")
        if self.target not in CONTRASTS:
            raise ValueError(f"unknown contrast {self.target!r}")


def gamma_transform(v, gamma):
    vmax = np.abs(v).max()
    if vmax == 0:
        return v.copy()
    return np.sign(v) * vmax * (np.abs(v) / vmax) ** gamma


def bias_field(dims, strength, rng, order=3):
    """Smooth multiplicative field ``exp(strength * poly)`` scaled to mean 1."""
    coords = [np.linspace(-1, 1, d) for d in dims]
    x, y, z = np.meshgrid(*coords, indexing="ij")
    log_field = np.zeros(dims)
    for i in range(order + 1):
        for j in range(order + 1 - i):
            for k in range(order + 1 - i - j):
                if i + j + k:
                    log_field += rng.uniform(-1, 1) * x ** i * y ** j * z ** k
    log_field /= max(log_field.std(), 1e-12)
    f = np.exp(strength * log_field)
    return f / f.mean()


def _anisotropy(v, factor, axis):
    k = max(int(round(factor)), 1)
    idx = (np.arange(v.shape[axis]) // k) * k
    return np.take(v, idx, axis=axis)


def _motion(v, shift, rng):
    n = int(rng.integers(2, 5))
    alpha = rng.uniform(0.2, 0.4)
    out = (1 - alpha) * v
    for _ in range(n):
        out += alpha / n * ndimage.shift(v, rng.uniform(-shift, shift, 3), order=1, mode="constant")
    return out


def corrupt(mcv: MultiContrastVolume, spec: CorruptionSpec, rng=None) -> MultiContrastVolume:
    """Apply one artifact to ``spec.target``; dims and labels are untouched."""
    rng = np.random.default_rng(rng)
    if spec.kind == "drop_contrast":
        if mcv.volumes[spec.target] is None:
            return mcv
        return mcv.keep(n for n in mcv.present if n != spec.target)
    vol = mcv.volumes[spec.target]
    if vol is None:
        raise ValueError(f"target contrast {spec.target} is absent")
    v = vol.voxels
    s = spec.strength
    if spec.kind == "gamma":
        out = gamma_transform(v, s)
    elif spec.kind == "gaussian_noise":
        out = v + rng.normal(0.0, s, v.shape) if s > 0 else v.copy()
    elif spec.kind == "bias_field":
        out = v * bias_field(v.shape, s, rng)
    elif spec.kind == "blur":
        out = ndimage.gaussian_filter(v, s) if s > 0 else v.copy()
    elif spec.kind == "anisotropy":
        out = _anisotropy(v, s, spec.axis)
    elif spec.kind == "ghosting":
        out = v + s * np.roll(v, v.shape[1] // 4, axis=1)
    else:  # motion
        out = _motion(v, s, rng)
    return mcv.replace(spec.target, Volume3D(out, vol.spacing))


# ---------------------------------------------------------------- on-disk cohorts

MANIFEST = "manifest.json"


def write_cohort(cohort, outdir, config: Optional[PhantomConfig] = None) -> Path:
    """NIfTI files per contrast and rater plus a JSON manifest; returns the manifest path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in cohort:
        files = {}
        for name in CONTRASTS:
            v = s.mcv.volumes[name]
            if v is not None:
                files[name] = f"{s.id}_{name}.nii.gz"
                write_nifti(v, outdir / files[name])
        write_nifti(s.rater1, outdir / f"{s.id}_rater1.nii.gz")
        write_nifti(s.rater2, outdir / f"{s.id}_rater2.nii.gz")
        entries.append({"id": s.id, "files": files, "rater1": f"{s.id}_rater1.nii.gz",
                        "rater2": f"{s.id}_rater2.nii.gz", "availability": s.mcv.availability,
                        "seed": s.seed})
    manifest = {"version": 1, "config": None if config is None else _jsonable(asdict(config)),
                "subjects": entries}
    path = outdir / MANIFEST
    tmp = path.with_name(MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(path)
    return path


def _jsonable(d):
    return json.loads(json.dumps(d, default=list))


def load_cohort(manifest_path) -> list:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    cohort = []
    for e in manifest["subjects"]:
        vols = {name: read_nifti(root / f, kind="volume") for name, f in e["files"].items()}
        mcv = MultiContrastVolume(vols)
        if mcv.availability != e["availability"]:
            raise ValueError(f"{e['id']}: availability mismatch between manifest and files")
        r1 = read_nifti(root / e["rater1"], kind="mask")
        r2 = read_nifti(root / e["rater2"], kind="mask")
        cohort.append(Subject(e["id"], mcv, r1, r2, e.get("seed", [])))
    return cohort
