"""Batch, instance and conditional-instance normalization.

Normalized features are ``xhat = (x - mean) / sqrt(var + eps)`` followed by the
per-channel affine ``y = gamma * xhat + beta``. Variances are population
(biased) variances. What changes between modes is where ``mean``/``var`` come
from and which ``(gamma, beta)`` row is used:

* ``bn``: training uses statistics over ``(n, H, W)``; inference reads the
  moving averages unless ``inference_stats == "instance_stats"``.
* ``in`` / ``condin``: statistics over ``(H, W)`` of each sample in training.
  ``condin`` keeps one ``(gamma, beta)`` row per nonzero contrast-availability
  mask (15 rows for 4 contrasts), selected by that mask.

``inference_stats == "instance_stats"`` is test-time instance normalization:
every input is normalized by its own per-channel statistics and the moving
averages are never read.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MODES = ("bn", "in", "condin")
INFERENCE_STATS = ("train_stats", "instance_stats")
N_COMBOS = 15


class InvalidConditionError(ValueError):
    """CondIN called without a valid nonzero contrast-availability mask."""


@dataclass
class NormPolicy:
    channels: int
    mode: str = "bn"
    eps: float = 1e-5
    momentum: float = 0.1
    inference_stats: str = "train_stats"
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    dgamma: np.ndarray = field(init=False, repr=False)
    dbeta: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"norm mode must be one of {MODES}, got {self.mode!r}")
        if self.inference_stats not in INFERENCE_STATS:
            raise ValueError(f"inference_stats must be one of {INFERENCE_STATS}")
        if self.eps < 0 or not 0 < self.momentum < 1:
            raise ValueError("need eps >= 0 and 0 < momentum < 1")
        shape = (N_COMBOS, self.channels) if self.mode == "condin" else (self.channels,)
        self.gamma = np.ones(shape) if self.gamma is None else np.array(self.gamma, dtype=float)
        self.beta = np.zeros(shape) if self.beta is None else np.array(self.beta, dtype=float)
        if self.gamma.shape != shape or self.beta.shape != shape:
            raise ValueError(f"gamma/beta must have shape {shape}")
        c = self.channels
        self.running_mean = np.zeros(c) if self.running_mean is None else np.array(self.running_mean, dtype=float)
        self.running_var = np.ones(c) if self.running_var is None else np.array(self.running_var, dtype=float)
        self.dgamma = np.zeros(shape)
        self.dbeta = np.zeros(shape)

    @property
    def n_param_sets(self) -> int:
        return N_COMBOS if self.mode == "condin" else 1


@dataclass
class NormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    axes: Optional[tuple]      # reduction axes; None when statistics were constants
    rows: Optional[np.ndarray]  # condin row per sample


def _rows(policy: NormPolicy, combos, n: int):
    if policy.mode != "condin":
        return None
    if combos is None:
        raise InvalidConditionError("CondIN needs a contrast-availability mask")
    rows = np.broadcast_to(np.asarray(combos, dtype=int), (n,))
    if np.any(rows < 1) or np.any(rows > N_COMBOS):
        raise InvalidConditionError(f"availability masks must be in 1..{N_COMBOS}, got {np.unique(rows)}")
    return rows - 1


def _affine(policy: NormPolicy, rows):
    if rows is None:
        return policy.gamma[None, :, None, None], policy.beta[None, :, None, None]
    return policy.gamma[rows][:, :, None, None], policy.beta[rows][:, :, None, None]


def normalize_with_cache(x, policy: NormPolicy, phase="train", combos=None, update_stats=True):
    if x.ndim != 4 or x.shape[1] != policy.channels:
        raise ValueError(f"expected (n, {policy.channels}, H, W), got {x.shape}")
    if phase not in ("train", "infer"):
        raise ValueError(f"phase must be 'train' or 'infer', got {phase!r}")
    rows = _rows(policy, combos, x.shape[0])
    batch_axes = (0, 2, 3)
    if phase == "train" and update_stats:
        # tracked in every mode so an IN-trained net can still be probed with train stats
        m = policy.momentum
        policy.running_mean = (1 - m) * policy.running_mean + m * x.mean(axis=batch_axes)
        policy.running_var = (1 - m) * policy.running_var + m * x.var(axis=batch_axes)

    if phase == "infer" and policy.inference_stats == "train_stats":
        mean = policy.running_mean[None, :, None, None]
        inv = 1.0 / np.sqrt(policy.running_var[None, :, None, None] + policy.eps)
        axes = None
    else:
        axes = batch_axes if (phase == "train" and policy.mode == "bn") else (2, 3)
        mean = x.mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(x.var(axis=axes, keepdims=True) + policy.eps)
    xhat = (x - mean) * inv
    g, b = _affine(policy, rows)
    return g * xhat + b, NormCache(xhat, inv, axes, rows)


def normalize(x, policy: NormPolicy, phase="train", combo=None, update_stats=True):
    """Normalize ``x`` of shape ``(n, c, H, W)``; see the module docstring.

    ``combo`` is the contrast-availability mask (int or one per sample), used
    only by ``condin``.
    """
    return normalize_with_cache(x, policy, phase, combo, update_stats)[0]


def normalize_backward(dy, policy: NormPolicy, cache: NormCache):
    """Accumulate ``policy.dgamma``/``dbeta`` and return ``dL/dx``."""
    xhat, rows = cache.xhat, cache.rows
    if rows is None:
        policy.dgamma[...] = (dy * xhat).sum(axis=(0, 2, 3))
        policy.dbeta[...] = dy.sum(axis=(0, 2, 3))
    else:
        policy.dgamma[...] = 0.0
        policy.dbeta[...] = 0.0
        np.add.at(policy.dgamma, rows, (dy * xhat).sum(axis=(2, 3)))
        np.add.at(policy.dbeta, rows, dy.sum(axis=(2, 3)))
    g, _ = _affine(policy, rows)
    dxhat = dy * g
    if cache.axes is None:
        return dxhat * cache.inv_std
    axes = cache.axes
    count = np.prod([xhat.shape[a] for a in axes])
    s1 = dxhat.sum(axis=axes, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
    return cache.inv_std / count * (count * dxhat - s1 - xhat * s2)
