"""Multi-orientation self-ensemble: vote counting, lesion detection and connected growth."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import orient
from .volio import BinaryMask3D, ConfidenceMap, MultiContrastVolume

CONNECTIVITY = 26
STRUCTURE_26 = np.ones((3, 3, 3), dtype=bool)

DEFAULT_TAUS = (16, 7)
ROBUSTNESS_TAUS = (14, 8)


class FusionParamError(ValueError):
    pass


@dataclass(frozen=True)
class FusionParams:
    tau1: int = DEFAULT_TAUS[0]
    tau2: int = DEFAULT_TAUS[1]
    n_votes: int = 24

    def __post_init__(self):
        if not 0 <= self.tau2 <= self.tau1 <= self.n_votes:
            raise FusionParamError(
                f"need 0 <= tau2 <= tau1 <= n_votes, got tau1={self.tau1}, tau2={self.tau2}, n_votes={self.n_votes}")

    @property
    def connectivity(self) -> int:
        return CONNECTIVITY


# ---------------------------------------------------------------- confidence map

class PassCounter:
    """Counts inference work: ``passes`` per transform, ``ensembles`` per subject."""

    def __init__(self):
        self.passes = 0
        self.ensembles = 0


def predict_mask(mcv: MultiContrastVolume, net, plane, batch_size=64) -> np.ndarray:
    """Slice-by-slice binary prediction along ``plane``, stacked back to 3D."""
    slabs = orient.stack_slabs(mcv.stack(), plane)
    prob = net.predict(slabs, mcv.availability, batch_size=batch_size)
    return orient.unstack_slices(prob > 0.5, plane)


def self_ensemble_predict(mcv: MultiContrastVolume, net, transforms: Optional[Sequence] = None,
                          stats: Optional[str] = None, counter: Optional[PassCounter] = None,
                          masks_out: Optional[dict] = None) -> ConfidenceMap:
    """Sum of binary predictions over ``transforms``, each mapped back to the original grid.

    When ``masks_out`` is a dict it receives each transform's back-mapped mask,
    keyed by the transform, so reductions such as the 3-plane majority can
    reuse the same passes.

    ``net`` is anything with ``predict(slabs, availability, batch_size=...)``
    returning probabilities; ``stats`` switches a :class:`UNet` between
    ``train_stats`` and ``instance_stats`` before predicting.
    """
    transforms = orient.catalog() if transforms is None else list(transforms)
    if not transforms:
        raise ValueError("need at least one transform")
    if stats is not None:
        net.set_inference_stats(stats)
    stack = mcv.stack()
    if counter is not None:
        counter.ensembles += 1
    counts = np.zeros(mcv.dims, dtype=np.int32)
    for t in transforms:
        aug = orient.apply_array(t, stack)
        slabs = orient.stack_slabs(aug, t.plane)
        mask = orient.unstack_slices(net.predict(slabs, mcv.availability) > 0.5, t.plane)
        back = orient.apply_array(orient.inverse(t), mask)
        counts += back
        if masks_out is not None:
            masks_out[t] = BinaryMask3D(back, mcv.spacing)
        if counter is not None:
            counter.passes += 1
    return ConfidenceMap(counts, len(transforms), mcv.spacing)


# ---------------------------------------------------------------- detection and growth

def detect_masks(c: ConfidenceMap, p: FusionParams):
    """``(M1, M2)`` with ``M1 = C > tau1`` and ``M2 = C > tau2`` (strict)."""
    if p.tau2 > p.tau1:
        raise FusionParamError("tau2 must not exceed tau1")
    counts = c.counts
    return (BinaryMask3D(counts > p.tau1, c.spacing), BinaryMask3D(counts > p.tau2, c.spacing))


def label26(mask) -> tuple:
    """26-connected component labels (0 = background) and component count."""
    return ndimage.label(np.asarray(mask, dtype=bool), structure=STRUCTURE_26)


def _grow(seeds: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    labels, n = label26(candidates)
    if n == 0:
        return np.zeros_like(candidates, dtype=bool)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[seeds])] = True
    keep[0] = False
    return keep[labels]


def grow_lesions(m1, m2) -> BinaryMask3D:
    """Union of the 26-connected components of ``m2`` that contain a voxel of ``m1``."""
    a = m1.voxels if isinstance(m1, BinaryMask3D) else np.asarray(m1, dtype=bool)
    b = m2.voxels if isinstance(m2, BinaryMask3D) else np.asarray(m2, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"dims differ: {a.shape} vs {b.shape}")
    if np.any(a & ~b):
        raise ValueError("seed mask is not contained in the candidate mask")
    spacing = m2.spacing if isinstance(m2, BinaryMask3D) else (1.0, 1.0, 1.0)
    return BinaryMask3D(_grow(a, b), spacing)


def fuse(c: ConfidenceMap, p: FusionParams) -> BinaryMask3D:
    m1, m2 = detect_masks(c, p)
    return grow_lesions(m1, m2)


def majority_vote_3plane(masks: Sequence[BinaryMask3D]) -> BinaryMask3D:
    if len(masks) != 3:
        raise ValueError("need exactly three masks")
    dims = {m.dims for m in masks}
    if len(dims) != 1:
        raise ValueError(f"dims differ: {sorted(dims)}")
    votes = sum(m.voxels.astype(np.int8) for m in masks)
    return BinaryMask3D(votes >= 2, masks[0].spacing)


# ---------------------------------------------------------------- threshold sweeps

SWEEP_COLUMNS = ("tau1", "tau2", "mean_score", "n_subjects")


@dataclass
class SweepRow:
    tau1: int
    tau2: int
    mean_score: float
    n_subjects: int


def tau_grid(n_votes: int, tau1_values: Optional[Iterable] = None, tau2_values: Optional[Iterable] = None):
    """All ``(tau1, tau2)`` pairs with ``0 <= tau2 <= tau1 <= n_votes``."""
    t1 = range(n_votes + 1) if tau1_values is None else tau1_values
    t2 = range(n_votes + 1) if tau2_values is None else tau2_values
    return [(a, b) for a in t1 for b in t2 if 0 <= b <= a <= n_votes]


def fused_masks_grid(cmap: ConfidenceMap, grid) -> dict:
    """Fused masks for every ``(tau1, tau2)`` in ``grid``, labelling each ``M2`` once."""
    out = {}
    by_tau2 = {}
    for t1, t2 in grid:
        by_tau2.setdefault(t2, []).append(t1)
    for t2, t1s in by_tau2.items():
        labels, n = label26(cmap.counts > t2)
        for t1 in t1s:
            FusionParams(t1, t2, cmap.n_votes)
            keep = np.zeros(n + 1, dtype=bool)
            keep[np.unique(labels[cmap.counts > t1])] = True
            keep[0] = False
            out[(t1, t2)] = BinaryMask3D(keep[labels], cmap.spacing)
    return out


def tau_sweep(cmaps: Sequence[ConfidenceMap], rater1, rater2=None, grid=None) -> list:
    """Mean composite score per threshold pair over a cohort.

    ``cmaps``/``rater1``/``rater2`` are aligned per subject; pairs violating
    ``tau1 >= tau2`` are dropped from ``grid``.
    """
    from .metrics import evaluate_cohort

    if not cmaps:
        raise ValueError("empty cohort")
    n_votes = cmaps[0].n_votes
    grid = tau_grid(n_votes) if grid is None else [(a, b) for a, b in grid if 0 <= b <= a <= n_votes]
    per_subject = [fused_masks_grid(c, grid) for c in cmaps]
    rows = []
    for cell in grid:
        preds = [masks[cell] for masks in per_subject]
        report = evaluate_cohort(preds, rater1, rater2)
        rows.append(SweepRow(cell[0], cell[1], report.score, len(cmaps)))
    return rows


def best_cell(rows: Sequence[SweepRow]) -> SweepRow:
    """Highest score; ties go to the first row in grid order."""
    return max(rows, key=lambda r: r.mean_score)


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(SWEEP_COLUMNS)
        for r in rows:
            wr.writerow([r.tau1, r.tau2, repr(r.mean_score), r.n_subjects])
