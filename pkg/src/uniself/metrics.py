"""Voxel-wise, lesion-wise and cohort-level segmentation measures.

Empty-set conventions (all in :func:`_ratio` call sites): PPV of an empty
prediction is 1, TPR and LTPR against an empty reference are 1, LFPR of an
empty prediction is 0, and DSC of two empty masks is 1.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fusion import label26
from .volio import BinaryMask3D

FIELDS = ("dsc", "ppv", "tpr", "lfpr", "ltpr", "vc", "score")
WEIGHTS = {"dsc": 1 / 8, "ppv": 1 / 8, "ltpr": 1 / 4, "one_minus_lfpr": 1 / 4, "vc": 1 / 4}


class UndefinedCorrelationError(ValueError):
    """Pearson correlation needs at least two values and nonzero variance on both sides."""


def _arr(m):
    return m.voxels if isinstance(m, BinaryMask3D) else np.asarray(m, dtype=bool)


def _pair(pred, gt):
    a, b = _arr(pred), _arr(gt)
    if a.shape != b.shape:
        raise ValueError(f"dims differ: {a.shape} vs {b.shape}")
    return a, b


def _ratio(num, den, empty):
    return float(num) / den if den else float(empty)


def voxel_metrics(pred, gt) -> tuple:
    """``(dsc, ppv, tpr)``."""
    a, b = _pair(pred, gt)
    tp = int(np.count_nonzero(a & b))
    fp = int(np.count_nonzero(a & ~b))
    fn = int(np.count_nonzero(~a & b))
    return (_ratio(2 * tp, 2 * tp + fp + fn, 1.0),
            _ratio(tp, tp + fp, 1.0),
            _ratio(tp, tp + fn, 1.0))


def lesion_metrics(pred, gt) -> tuple:
    """``(ltpr, lfpr)`` on 26-connected components; a lesion is hit by sharing one voxel."""
    a, b = _pair(pred, gt)
    gt_labels, n_gt = label26(b)
    pred_labels, n_pred = label26(a)
    hit_gt = np.unique(gt_labels[a & b]).size
    hit_pred = np.unique(pred_labels[a & b]).size
    return _ratio(hit_gt, n_gt, 1.0), _ratio(n_pred - hit_pred, n_pred, 0.0)


def volume_correlation(pred_volumes, gt_volumes) -> float:
    """Pearson correlation of lesion volumes across a cohort."""
    x = np.asarray(pred_volumes, dtype=float)
    y = np.asarray(gt_volumes, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("volume lists must be 1D and equally long")
    if x.size < 2:
        raise UndefinedCorrelationError("need at least two subjects")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("a volume list has zero variance")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def score(dsc, ppv, ltpr, lfpr, vc) -> float:
    """Composite score ``dsc/8 + ppv/8 + ltpr/4 + (1 - lfpr)/4 + vc/4``."""
    return dsc / 8 + ppv / 8 + ltpr / 4 + (1 - lfpr) / 4 + vc / 4


@dataclass
class MetricsReport:
    dsc: float
    ppv: float
    tpr: float
    lfpr: float
    ltpr: float
    vc: Optional[float]
    score: float
    partial: bool = False
    n_subjects: int = 0
    per_rater: list = field(default_factory=list)
    subjects: list = field(default_factory=list)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in FIELDS}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["connectivity"] = 26
        return d

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def to_csv(self, path):
        """One row per subject (rater-averaged), then the cohort row."""
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(("subject",) + FIELDS)
            for i, s in enumerate(self.subjects):
                wr.writerow([i] + [_fmt(s.get(k)) for k in FIELDS])
            wr.writerow(["cohort"] + [_fmt(getattr(self, k)) for k in FIELDS])


def _fmt(v):
    return "" if v is None else repr(float(v))


def evaluate_subject(pred, gt) -> dict:
    dsc, ppv, tpr = voxel_metrics(pred, gt)
    ltpr, lfpr = lesion_metrics(pred, gt)
    return {"dsc": dsc, "ppv": ppv, "tpr": tpr, "ltpr": ltpr, "lfpr": lfpr}


def _volume(m) -> float:
    if isinstance(m, BinaryMask3D):
        return m.volume_mm3()
    return float(np.count_nonzero(m))


def _single_rater(preds, gts) -> MetricsReport:
    subjects = [evaluate_subject(p, g) for p, g in zip(preds, gts)]
    mean = {k: float(np.mean([s[k] for s in subjects])) for k in ("dsc", "ppv", "tpr", "ltpr", "lfpr")}
    try:
        vc = volume_correlation([_volume(p) for p in preds], [_volume(g) for g in gts])
    except UndefinedCorrelationError as exc:
        warnings.warn(f"volume correlation undefined ({exc}); score excludes the VC term", stacklevel=3)
        vc = None
    s = score(mean["dsc"], mean["ppv"], mean["ltpr"], mean["lfpr"], 0.0 if vc is None else vc)
    for d in subjects:
        d["vc"] = vc
        d["score"] = score(d["dsc"], d["ppv"], d["ltpr"], d["lfpr"], 0.0 if vc is None else vc)
    return MetricsReport(vc=vc, score=s, partial=vc is None, n_subjects=len(subjects),
                         subjects=subjects, **mean)


def evaluate_cohort(preds: Sequence, rater1: Sequence, rater2: Optional[Sequence] = None) -> MetricsReport:
    """Cohort report averaged over raters.

    Per rater, voxel and lesion measures are averaged over subjects and VC is
    computed once over the cohort; the rater reports are then averaged. When VC
    is undefined (fewer than two subjects, or constant volumes) it is reported
    as ``None``, its term is left out of the score and the report is marked
    ``partial``.
    """
    if not preds:
        raise ValueError("empty cohort")
    raters = [rater1] if rater2 is None else [rater1, rater2]
    for r in raters:
        if len(r) != len(preds):
            raise ValueError("predictions and reference masks are not aligned")
    reports = [_single_rater(preds, r) for r in raters]
    avg = {k: float(np.mean([getattr(r, k) for r in reports])) for k in ("dsc", "ppv", "tpr", "ltpr", "lfpr", "score")}
    vcs = [r.vc for r in reports]
    vc = None if any(v is None for v in vcs) else float(np.mean(vcs))
    subjects = []
    for i in range(len(preds)):
        subjects.append({k: (None if any(r.subjects[i][k] is None for r in reports)
                             else float(np.mean([r.subjects[i][k] for r in reports])))
                         for k in FIELDS})
    return MetricsReport(vc=vc, partial=any(r.partial for r in reports), n_subjects=len(preds),
                         per_rater=[r.row() for r in reports], subjects=subjects, **avg)
