"""Training loop, contrast dropout, 3D spatial augmentation and Adam."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .. import orient
from ..volio import CONTRASTS, BinaryMask3D, MultiContrastVolume
from .net import NetConfig, UNet

log = logging.getLogger(__name__)


class UnsampleableError(ValueError):
    """No lesion-containing slab exists in the training data."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    iterations: int = 300
    contrast_dropout: bool = True
    rater_sampling: bool = True
    spatial_aug: bool = True
    aug_prob: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.iterations < 0:
            raise ValueError("lr and batch_size must be positive, iterations non-negative")
        if not 0 <= self.aug_prob <= 1:
            raise ValueError("aug_prob must be a probability")


class Adam:
    """Adam with bias-corrected moment estimates; updates parameters in place."""

    def __init__(self, params: dict, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict:
        out = {"t": self.t}
        out.update({f"m.{k}": v for k, v in self.m.items()})
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state: dict):
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"], dtype=float)
            self.v[k] = np.array(state[f"v.{k}"], dtype=float)


def l2_loss(prob, target):
    """Mean squared error and its gradient w.r.t. ``prob``."""
    diff = prob - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ---------------------------------------------------------------- contrast dropout

def nonempty_subsets(mask: int) -> list:
    """All nonzero sub-masks of ``mask``, ascending."""
    return [s for s in range(1, 16) if s & mask == s]


def sample_kept_mask(available: int, rng) -> int:
    """Uniformly sampled nonempty subset of the available contrasts."""
    if available == 0:
        raise ValueError("no contrast available")
    subsets = nonempty_subsets(available)
    return subsets[rng.integers(len(subsets))]


def contrast_dropout(mcv: MultiContrastVolume, rng) -> MultiContrastVolume:
    kept = sample_kept_mask(mcv.availability, rng)
    return mcv.keep(n for i, n in enumerate(CONTRASTS) if kept >> i & 1)


def zero_dropped(slab: np.ndarray, kept: int) -> np.ndarray:
    """Zero the three channels of every contrast not set in ``kept``."""
    out = slab.copy()
    for i in range(len(CONTRASTS)):
        if not kept >> i & 1:
            out[3 * i:3 * i + 3] = 0.0
    return out


# ---------------------------------------------------------------- 3D augmentation

def _rotation(angles):
    ax, ay, az = angles
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def random_warp(dims, rng, elastic_std=1.5, control=5, max_angle=np.deg2rad(10),
                scale=0.1, shear=0.05):
    """Random elastic or affine source-coordinate map, as a callable on points ``(3, ...)``."""
    center = (np.asarray(dims, dtype=float) - 1) / 2
    if rng.random() < 0.5:
        a = _rotation(rng.uniform(-max_angle, max_angle, 3))
        a = a @ np.diag(rng.uniform(1 - scale, 1 + scale, 3))
        sh = np.eye(3)
        sh[np.triu_indices(3, 1)] = rng.uniform(-shear, shear, 3)
        a = a @ sh

        def warp(p):
            q = p.reshape(3, -1) - center[:, None]
            return (a @ q + center[:, None]).reshape(p.shape)
        return warp

    grid = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (3,) + (control,) * 3), (0, 1, 1, 1))
    grid *= elastic_std / max(grid.std(), 1e-12)

    def warp(p):
        q = p.reshape(3, -1) * ((control - 1) / np.maximum(np.asarray(dims) - 1, 1))[:, None]
        disp = np.stack([ndimage.map_coordinates(grid[i], q, order=3, mode="nearest") for i in range(3)])
        return (p.reshape(3, -1) + disp).reshape(p.shape)
    return warp


def _slab_points(dims, plane, index):
    """Voxel coordinates ``(3, 3, H, W)`` of the three slices around ``index``."""
    p = orient.plane_index(plane)
    normal = orient.NORMAL_AXIS[p]
    a, b = orient.IN_PLANE_AXES[p]
    h, w = dims[a], dims[b]
    pts = np.zeros((3, 3, h, w))
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for k, off in enumerate((-1, 0, 1)):
        pts[normal, k] = index + off
        pts[a, k] = ii
        pts[b, k] = jj
    return pts


def sample_slab(stack, label, plane, index, warp=None):
    """Slab ``(3 * C, H, W)`` and center-slice label ``(H, W)``, optionally warped."""
    if warp is None:
        normal = orient.NORMAL_AXIS[orient.plane_index(plane)]
        a = np.moveaxis(stack, normal + 1, 1)
        n = a.shape[1]
        trio = [a[:, k] if 0 <= k < n else np.zeros((a.shape[0],) + a.shape[2:])
                for k in (index - 1, index, index + 1)]
        slab = np.stack(trio, axis=1).reshape(-1, *a.shape[2:])
        return slab, np.moveaxis(label, normal, 0)[index].astype(float)
    pts = warp(_slab_points(stack.shape[1:], plane, index))
    flat = pts.reshape(3, -1)
    chans = [ndimage.map_coordinates(stack[c], flat, order=1, mode="constant", cval=0.0).reshape(pts.shape[1:])
             for c in range(stack.shape[0])]
    slab = np.stack(chans, axis=0).reshape(-1, *pts.shape[2:])
    centre = pts[:, 1].reshape(3, -1)
    lab = ndimage.map_coordinates(label.astype(float), centre, order=0, mode="constant", cval=0.0)
    return slab, lab.reshape(pts.shape[2:])


def _dihedral_2d(t: orient.OrientTransform, arr):
    """Apply the in-plane part of ``t`` to the last two axes of ``arr``."""
    a = np.flip(arr, axis=-2) if t.flipped else arr
    return np.ascontiguousarray(np.rot90(a, t.rotations, axes=(-2, -1)))


# ---------------------------------------------------------------- training

class _Subject:
    def __init__(self, mcv: MultiContrastVolume, r1: BinaryMask3D, r2: BinaryMask3D):
        if r1.dims != mcv.dims or r2.dims != mcv.dims:
            raise ValueError("rater masks must match the volume dims")
        self.stack = mcv.stack()
        self.available = mcv.availability
        self.labels = (r1.voxels, r2.voxels)
        # lesion-containing center slices per (rater, plane)
        self.lesion_slices = [[np.flatnonzero(np.moveaxis(lab, orient.NORMAL_AXIS[p], 0).any(axis=(1, 2)))
                               for p in range(3)] for lab in self.labels]


class Trainer:
    """Stateful trainer so runs can be checkpointed and resumed."""

    def __init__(self, dataset, cfg: TrainConfig, net_cfg: NetConfig | None = None, net: UNet | None = None):
        if not dataset:
            raise ValueError("dataset is empty")
        self.subjects = [_Subject(*item) for item in dataset]
        dims = {s.stack.shape[1:] for s in self.subjects}
        if len(dims) != 1:
            raise ValueError(f"all subjects must share dims, got {sorted(dims)}")
        self.cfg = cfg
        self.net = net if net is not None else UNet(net_cfg or NetConfig())
        self.opt = Adam(self.net.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        # one stream per purpose so toggling a feature never shifts the others
        seeds = np.random.SeedSequence(cfg.seed).spawn(4)
        self.rng_sample, self.rng_rater, self.rng_drop, self.rng_aug = (np.random.default_rng(s) for s in seeds)
        self.iteration = 0
        self.losses = []
        if not any(len(ix) for s in self.subjects for per_rater in s.lesion_slices for ix in per_rater):
            raise UnsampleableError("no lesion voxels in any training subject")

    def _pick(self, plane):
        rng = self.rng_sample
        for _ in range(1000):
            s = rng.integers(len(self.subjects))
            rater = int(self.rng_rater.integers(2))
            if not self.cfg.rater_sampling:
                rater = 0
            idx = self.subjects[s].lesion_slices[rater][plane]
            if len(idx):
                return s, rater, int(idx[rng.integers(len(idx))])
        raise UnsampleableError(f"no lesion-containing slab in plane {orient.PLANES[plane]}")

    def make_batch(self):
        plane = int(self.rng_sample.integers(3))
        t = orient.OrientTransform(plane, int(self.rng_sample.integers(8)))
        xs, ys, combos = [], [], []
        for _ in range(self.cfg.batch_size):
            s, rater, idx = self._pick(plane)
            subj = self.subjects[s]
            warp = None
            if self.cfg.spatial_aug and self.rng_aug.random() < self.cfg.aug_prob:
                warp = random_warp(subj.stack.shape[1:], self.rng_aug)
            x, y = sample_slab(subj.stack, subj.labels[rater], plane, idx, warp)
            kept = subj.available
            if self.cfg.contrast_dropout:
                kept = sample_kept_mask(subj.available, self.rng_drop)
                x = zero_dropped(x, kept)
            xs.append(_dihedral_2d(t, x))
            ys.append(_dihedral_2d(t, y))
            combos.append(kept)
        return np.stack(xs), np.stack(ys), np.array(combos)

    def step(self) -> float:
        x, y, combos = self.make_batch()
        prob = self.net.forward(x, combos, train=True)
        loss, dprob = l2_loss(prob, y)
        self.net.backward(dprob)
        self.opt.step(self.net.grads())
        self.iteration += 1
        self.losses.append(loss)
        return loss

    def run(self, iterations: int | None = None, log_every=50):
        n = self.cfg.iterations if iterations is None else iterations
        for _ in range(n):
            self.step()
            if log_every and self.iteration % log_every == 0:
                log.info("iter %d loss %.5f", self.iteration, float(np.mean(self.losses[-log_every:])))
        return self.net

    def _rngs(self):
        return self.rng_sample, self.rng_rater, self.rng_drop, self.rng_aug

    def state(self) -> dict:
        """Iteration count, config and RNG state for resuming (JSON-able)."""
        return {
            "iteration": self.iteration,
            "train_config": asdict(self.cfg),
            "rng": [r.bit_generator.state for r in self._rngs()],
        }

    def load_state(self, state: dict, opt_state: dict | None = None):
        self.iteration = int(state["iteration"])
        for r, st in zip(self._rngs(), state["rng"]):
            r.bit_generator.state = st
        if opt_state is not None:
            self.opt.load_state(opt_state)


def train(dataset, cfg: TrainConfig | None = None, mode: str = "bn", net_cfg: NetConfig | None = None):
    """Train a fresh net; returns ``(net, losses)``."""
    cfg = cfg or TrainConfig()
    if net_cfg is None:
        net_cfg = NetConfig(norm=mode, seed=cfg.seed)
    elif net_cfg.norm != mode:
        raise ValueError(f"net_cfg.norm={net_cfg.norm!r} disagrees with mode={mode!r}")
    trainer = Trainer(dataset, cfg, net_cfg)
    trainer.run()
    return trainer.net, trainer.losses
