"""Micro 2.5D U-Net: configurable depth, swappable normalization."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..orient import Slab25D
from .layers import Conv2d, Identity, MaxPool2, Norm, ReLU, Sigmoid, Upsample2
from .norm import NormPolicy

N_CONTRASTS = 4
ALL_CONTRASTS = 0b1111


@dataclass
class NetConfig:
    channels: tuple = (8, 16, 32)
    in_channels: int = 3 * N_CONTRASTS
    kernel: int = 3
    norm: str = "bn"                    # bn | in | condin | none
    norm_order: str = "conv-norm-act"   # or conv-act-norm
    activation: str = "relu"            # relu | linear
    output: str = "sigmoid"             # sigmoid | linear
    eps: float = 1e-5
    momentum: float = 0.1
    inference_stats: str = "train_stats"
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 2:
            raise ValueError("need at least 2 levels")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must increase down the encoder, got {self.channels}")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.norm not in ("bn", "in", "condin", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.norm_order not in ("conv-norm-act", "conv-act-norm"):
            raise ValueError(f"unknown norm_order {self.norm_order!r}")
        if self.activation not in ("relu", "linear") or self.output not in ("sigmoid", "linear"):
            raise ValueError("activation must be relu|linear and output sigmoid|linear")

    @property
    def levels(self) -> int:
        return len(self.channels)


FULL_SCALE_CHANNELS = (64, 128, 256, 512, 1024)


class Block:
    """conv -> norm -> act (or conv -> act -> norm)."""

    def __init__(self, cin, cout, cfg: NetConfig, rng):
        self.conv = Conv2d(cin, cout, cfg.kernel, rng,
                           bias=cfg.norm == "none" or cfg.norm_order == "conv-act-norm")
        self.act = ReLU() if cfg.activation == "relu" else Identity()
        self.norm = None
        if cfg.norm != "none":
            self.norm = Norm(NormPolicy(cout, "bn" if cfg.norm == "bn" else cfg.norm, cfg.eps,
                                        cfg.momentum, cfg.inference_stats))
        order = [self.conv, self.norm, self.act]
        if cfg.norm_order == "conv-act-norm":
            order = [self.conv, self.act, self.norm]
        self.layers = [layer for layer in order if layer is not None]

    def forward(self, x, train, combos, update_stats=True):
        for layer in self.layers:
            if isinstance(layer, Norm):
                x = layer.forward(x, train, combos, update_stats)
            else:
                x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class UNet:
    """Encoder-decoder with skip connections predicting the center-slice probability map.

    Each level has two conv blocks; downsampling is 2x2 max pooling and
    upsampling is nearest-neighbour followed by a convolution. Inputs whose
    in-plane size is not a multiple of ``2**(levels-1)`` are zero-padded at the
    far edges and the output is cropped back.
    """

    def __init__(self, cfg: NetConfig | None = None):
        self.cfg = cfg = cfg or NetConfig()
        rng = np.random.default_rng(cfg.seed)
        ch = cfg.channels
        self.enc = []
        cin = cfg.in_channels
        for c in ch:
            self.enc.append([Block(cin, c, cfg, rng), Block(c, c, cfg, rng)])
            cin = c
        self.pools = [MaxPool2() for _ in ch[:-1]]
        self.ups = [Upsample2() for _ in ch[:-1]]
        self.up_convs = [Conv2d(ch[i + 1], ch[i], cfg.kernel, rng) for i in range(len(ch) - 1)]
        self.dec = [[Block(2 * ch[i], ch[i], cfg, rng), Block(ch[i], ch[i], cfg, rng)]
                    for i in range(len(ch) - 1)]
        self.head = Conv2d(ch[0], 1, 1, rng)
        self.out_act = Sigmoid() if cfg.output == "sigmoid" else Identity()

    # ------------------------------------------------------------ registry

    def named_layers(self):
        for i, level in enumerate(self.enc):
            for j, blk in enumerate(level):
                yield f"enc{i}.{j}", blk
        for i in reversed(range(len(self.dec))):
            yield f"up{i}", self.up_convs[i]
            for j, blk in enumerate(self.dec[i]):
                yield f"dec{i}.{j}", blk
        yield "head", self.head

    def norm_layers(self) -> list:
        """``(name, Norm)`` in forward order."""
        out = []
        for name, mod in self.named_layers():
            if isinstance(mod, Block) and mod.norm is not None:
                out.append((name, mod.norm))
        return out

    def params(self) -> dict:
        out = {}
        for name, mod in self.named_layers():
            if isinstance(mod, Block):
                out.update({f"{name}.conv.{k}": v for k, v in mod.conv.params().items()})
                if mod.norm is not None:
                    out.update({f"{name}.norm.{k}": v for k, v in mod.norm.params().items()})
            else:
                out.update({f"{name}.{k}": v for k, v in mod.params().items()})
        return out

    def grads(self) -> dict:
        out = {}
        for name, mod in self.named_layers():
            if isinstance(mod, Block):
                out.update({f"{name}.conv.{k}": v for k, v in mod.conv.grads().items()})
                if mod.norm is not None:
                    out.update({f"{name}.norm.{k}": v for k, v in mod.norm.grads().items()})
            else:
                out.update({f"{name}.{k}": v for k, v in mod.grads().items()})
        return out

    def buffers(self) -> dict:
        out = {}
        for name, norm in self.norm_layers():
            out[f"{name}.norm.running_mean"] = norm.policy.running_mean
            out[f"{name}.norm.running_var"] = norm.policy.running_var
        return out

    def set_inference_stats(self, stats: str):
        if stats not in ("train_stats", "instance_stats"):
            raise ValueError(f"unknown inference stats {stats!r}")
        self.cfg.inference_stats = stats
        for _, norm in self.norm_layers():
            norm.policy.inference_stats = stats

    @property
    def n_param_sets(self) -> int:
        return 15 if self.cfg.norm == "condin" else 1

    # ------------------------------------------------------------ compute

    def _pad(self, x):
        m = 2 ** (self.cfg.levels - 1)
        h, w = x.shape[2:]
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))
        return x, (h, w)

    def forward(self, x, combos=None, train=False, update_stats=True):
        """Probability maps ``(n, H, W)`` for slab batches ``(n, in_channels, H, W)``.

        ``combos`` holds each sample's contrast-availability mask (defaults to
        all four contrasts present).
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (n, {self.cfg.in_channels}, H, W), got {x.shape}")
        if combos is None:
            combos = ALL_CONTRASTS
        combos = np.broadcast_to(np.asarray(combos, dtype=int), (x.shape[0],))
        x, (h, w) = self._pad(x)
        self._in_shape = (h, w, x.shape[2:])
        skips = []
        for i, level in enumerate(self.enc):
            for blk in level:
                x = blk.forward(x, train, combos, update_stats)
            if i < len(self.pools):
                skips.append(x)
                x = self.pools[i].forward(x, train)
        for i in reversed(range(len(self.dec))):
            x = self.up_convs[i].forward(self.ups[i].forward(x, train), train)
            x = np.concatenate([skips[i], x], axis=1)
            for blk in self.dec[i]:
                x = blk.forward(x, train, combos, update_stats)
        x = self.out_act.forward(self.head.forward(x, train), train)
        return x[:, 0, :h, :w]

    def backward(self, dout):
        """Backpropagate ``dL/d(output)`` of shape ``(n, H, W)``; fills ``grads()``."""
        h, w, padded = self._in_shape
        g = np.zeros((dout.shape[0], 1) + padded)
        g[:, 0, :h, :w] = dout
        g = self.head.backward(self.out_act.backward(g))
        skip_grads = [None] * len(self.dec)
        for i in range(len(self.dec)):
            for blk in reversed(self.dec[i]):
                g = blk.backward(g)
            c = self.cfg.channels[i]
            skip_grads[i], g = g[:, :c], g[:, c:]
            g = self.ups[i].backward(self.up_convs[i].backward(g))
        for i in reversed(range(len(self.enc))):
            if i < len(self.pools):
                g = self.pools[i].backward(g) + skip_grads[i]
            for blk in reversed(self.enc[i]):
                g = blk.backward(g)
        return g[:, :, :h, :w]

    def predict(self, x, combos=None, batch_size=64) -> np.ndarray:
        """Inference-phase probabilities, evaluated in chunks."""
        x = np.asarray(x)
        out = [self.forward(x[i:i + batch_size], combos if np.ndim(combos) == 0 else combos[i:i + batch_size])
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)


def forward(slab: Slab25D, net: UNet, stats: str | None = None) -> np.ndarray:
    """Probability map ``(H, W)`` for one slab (batch size one)."""
    if stats is not None:
        net.set_inference_stats(stats)
    return net.forward(slab.channels[None], slab.availability)[0]


def binarize(prob) -> np.ndarray:
    """Lesion iff probability strictly above 0.5."""
    return np.asarray(prob) > 0.5


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"UNISELF\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, net: UNet, extra: dict | None = None, aux: dict | None = None) -> None:
    """Versioned binary blob: magic, version, JSON header, raw little-endian float64 tensors.

    Tensors are the parameters and running statistics in declaration order,
    then any ``aux`` arrays (e.g. optimizer moments) under an ``aux.`` prefix.
    """
    tensors = {**net.params(), **net.buffers()}
    tensors.update({f"aux.{k}": np.asarray(v, dtype=float) for k, v in (aux or {}).items()})
    entries, offset = [], 0
    for name, arr in tensors.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(net.cfg),
        "n_param_sets": net.n_param_sets,
        "tensors": entries,
        "extra": extra or {},
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in tensors.values())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hdr)) + hdr + blob)
    tmp.replace(path)


def read_checkpoint_header(path) -> dict:
    raw = Path(path).read_bytes()
    return _parse_checkpoint(raw)[0]


def _parse_checkpoint(raw: bytes):
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, n = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + n])
    return header, raw[16 + n:]


def load_checkpoint(path) -> tuple:
    """Return ``(net, extra, aux)``."""
    header, blob = _parse_checkpoint(Path(path).read_bytes())
    cfg = NetConfig(**header["config"])
    net = UNet(cfg)
    targets = {**net.params(), **net.buffers()}
    aux = {}
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        arr = np.frombuffer(blob, dtype="<f8", count=int(np.prod(shape)), offset=e["offset"]).reshape(shape)
        if e["name"].startswith("aux."):
            aux[e["name"][4:]] = arr.copy()
            continue
        if e["name"] not in targets or targets[e["name"]].shape != shape:
            raise ValueError(f"checkpoint tensor {e['name']} does not match the network")
        targets[e["name"]][...] = arr
    net.set_inference_stats(cfg.inference_stats)
    return net, header.get("extra", {}), aux
