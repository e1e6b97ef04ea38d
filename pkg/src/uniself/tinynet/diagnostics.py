"""Finite-difference gradient checks and normalization-statistics export."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .layers import ReLU
from .net import UNet


def _probe_loss(net: UNet, x, combos, weights):
    out = net.forward(x, combos, train=True, update_stats=False)
    return float(np.sum(out * weights))


def _piecewise_layers(net: UNet):
    out = list(net.pools)
    for _, mod in net.named_layers():
        out += [layer for layer in getattr(mod, "layers", ()) if isinstance(layer, ReLU)]
    return out


def _pattern(layers) -> bytes:
    """Which linear piece every ReLU and max-pool window sat on in the last forward."""
    parts = [layer._pos if isinstance(layer, ReLU) else layer._idx for layer in layers]
    return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


def backward_check(net: UNet, x=None, combos=None, n_samples=40, h=1e-4, seed=0) -> float:
    """Max relative error between backprop and central differences.

    The probe loss is ``sum(w * output)`` for a fixed random ``w``, evaluated in
    the training phase without touching running statistics. Sampled entries
    are drawn from every parameter tensor plus the input. Error per entry is
    ``|analytic - numeric| / (|analytic| + 1e-8)``.

    Central differences are only valid when the +h and -h evaluations stay on
    the same ReLU/max-pool piece as the base point; entries whose stencil
    crosses a kink are skipped and another entry of the tensor is drawn.
    """
    rng = np.random.default_rng(seed)
    if x is None:
        x = rng.normal(size=(2, net.cfg.in_channels, 8, 8))
    x = np.array(x, dtype=np.float64)
    w = rng.normal(size=(x.shape[0],) + x.shape[2:])

    pieces = _piecewise_layers(net)
    net.forward(x, combos, train=True, update_stats=False)
    base = _pattern(pieces)
    dx = net.backward(w)
    grads = {k: v.copy() for k, v in net.grads().items()}
    params = net.params()

    targets = [(k, params[k], grads[k]) for k in params] + [("input", x, dx)]
    per_tensor = max(1, n_samples // len(targets))
    worst = 0.0
    for name, arr, grad in targets:
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        checked = 0
        for i in rng.permutation(flat.size):
            if checked == per_tensor:
                break
            old = flat[i]
            flat[i] = old + h
            up = _probe_loss(net, x, combos, w)
            same = _pattern(pieces) == base
            flat[i] = old - h
            down = _probe_loss(net, x, combos, w)
            same = same and _pattern(pieces) == base
            flat[i] = old
            if not same:
                continue
            checked += 1
            numeric = (up - down) / (2 * h)
            worst = max(worst, abs(gflat[i] - numeric) / (abs(gflat[i]) + 1e-8))
    return worst


def layer_gradient_check(layer, x, h=1e-4, seed=0, forward_kwargs=None) -> float:
    """Same check for a single layer: input and every parameter entry."""
    kw = forward_kwargs or {}
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    y = layer.forward(x, train=True, **kw)
    w = rng.normal(size=y.shape)

    def loss():
        return float(np.sum(layer.forward(x, train=True, **kw) * w))

    layer.forward(x, train=True, **kw)
    dx = layer.backward(w)
    analytic = [(x, dx)] + [(p, layer.grads()[k].copy()) for k, p in layer.params().items()]
    worst = 0.0
    for arr, grad in analytic:
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            down = loss()
            flat[i] = old
            numeric = (up - down) / (2 * h)
            worst = max(worst, abs(gflat[i] - numeric) / (abs(gflat[i]) + 1e-8))
    return worst


@dataclass
class StatRecord:
    input_id: str
    layer_id: str
    channel: int
    mean: float
    var: float


def designated_layers(net: UNet) -> dict:
    """Shallow = first normalized block, deep = last block of the bottleneck level."""
    norms = dict(net.norm_layers())
    if not norms:
        raise ValueError("network has no normalization layers")
    deep = f"enc{net.cfg.levels - 1}.1"
    return {"shallow": next(iter(norms)), "deep": deep if deep in norms else list(norms)[-1]}


def export_norm_stats(net: UNet, inputs, combos=None, input_ids=None, layers=None) -> list:
    """Channel mean/variance of normalized (pre-affine) features per input.

    Each input is run on its own (batch size one) in the inference phase, so
    the net's current ``inference_stats`` decides whether moving averages or
    per-input statistics are used.
    """
    layers = layers or designated_layers(net)
    norms = dict(net.norm_layers())
    inputs = np.asarray(inputs)
    ids = input_ids or [str(i) for i in range(len(inputs))]
    cmb = np.broadcast_to(np.asarray(0b1111 if combos is None else combos), (len(inputs),))
    records = []
    for layer_id, name in layers.items():
        norms[name].capture = True
    try:
        for i, x in enumerate(inputs):
            net.forward(x[None], int(cmb[i]))
            for layer_id, name in layers.items():
                xhat = norms[name].last_xhat[0]
                means, vars_ = xhat.mean(axis=(1, 2)), xhat.var(axis=(1, 2))
                records += [StatRecord(ids[i], layer_id, c, float(m), float(v))
                            for c, (m, v) in enumerate(zip(means, vars_))]
    finally:
        for name in layers.values():
            norms[name].capture = False
            norms[name].last_xhat = None
    return records


STATS_COLUMNS = ("input_id", "layer_id", "channel", "mean", "var")


def write_stats_csv(records, path):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(STATS_COLUMNS)
        for r in records:
            wr.writerow([r.input_id, r.layer_id, r.channel, repr(r.mean), repr(r.var)])
