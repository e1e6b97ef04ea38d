"""Acceptance checks, one per criterion, each printing a PASS/FAIL line with its runtime.

Run alone with ``pytest tests/test_acceptance.py -v -s``. The two desk-scale
experiments train ten small nets and take roughly half an hour on one core.
"""
import time
import warnings

import numpy as np
import pytest

from desk_experiment import run_seed
from test_fusion import _random_cmap, bfs_grow
from test_metrics import brute_lesion, brute_voxel
from uniself import orient
from uniself.cli import main as cli
from uniself.fusion import FusionParams, detect_masks, fuse, grow_lesions
from uniself.metrics import lesion_metrics, score, voxel_metrics
from uniself.tinynet import NetConfig, NormPolicy, UNet, backward_check, layer_gradient_check
from uniself.tinynet.layers import Conv2d, MaxPool2, Norm, ReLU, Sigmoid, Upsample2
from uniself.tinynet.norm import normalize, normalize_with_cache
from uniself.volio import BinaryMask3D, Volume3D, read_nifti, write_nifti

SEEDS = (1, 2, 3, 4, 5)


@pytest.fixture
def verdict(capsys):
    """Print one result line outside pytest's capture, then assert."""
    start = time.perf_counter()

    def _report(name, ok, detail, budget=None):
        elapsed = time.perf_counter() - start
        within = budget is None or elapsed < budget
        status = "PASS" if ok and within else "FAIL"
        limit = "" if budget is None else f" (limit {budget:.0f} s)"
        with capsys.disabled():
            print(f"\n[{status}] {name}: {detail}; {elapsed:.1f} s{limit}")
        assert ok, detail
        assert within, f"{name} took {elapsed:.1f} s, limit {budget} s"
    return _report


def test_transform_group_suite(verdict):
    rng = np.random.default_rng(0)
    bad = 0
    for t in orient.catalog():
        for _ in range(50):
            v = rng.normal(size=tuple(rng.integers(1, 9, 3)))
            bad += not np.array_equal(orient.apply(orient.inverse(t), orient.apply(t, v)), v)
    v = rng.normal(size=(3, 4, 5))
    closed = True
    for p in range(3):
        elems = [orient.OrientTransform(p, d) for d in range(8)]
        for a in elems:
            for b in elems:
                c = orient.compose(a, b)
                closed &= c in elems and np.array_equal(orient.apply(c, v), orient.apply(b, orient.apply(a, v)))
    ids = {t.id for t in orient.catalog()}
    verdict("transform group", bad == 0 and closed and len(ids) == 24,
            f"24 transforms, {24 * 50} round trips, {bad} inexact, composition closed={closed}", budget=10)


def test_fusion_oracle(verdict):
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(200):
        cand = rng.random((16, 16, 16)) < rng.uniform(0.1, 0.4)
        seeds = cand & (rng.random((16, 16, 16)) < 0.02)
        mismatches += not np.array_equal(grow_lesions(seeds, cand).voxels, bfs_grow(seeds, cand))
    verdict("fusion vs BFS growth oracle", mismatches == 0, f"200 random 16^3 pairs, {mismatches} mismatches",
            budget=30)


def test_fusion_algebra(verdict):
    rng = np.random.default_rng(1)
    failures = 0
    for _ in range(100):
        c = _random_cmap(rng)
        t1 = int(rng.integers(1, 24))
        t2 = int(rng.integers(0, t1 + 1))
        m1, m2 = detect_masks(c, FusionParams(t1, t2))
        m = fuse(c, FusionParams(t1, t2)).voxels
        ok = np.all(m1.voxels <= m) and np.all(m <= m2.voxels)
        ok &= np.all(fuse(c, FusionParams(t1 + 1, t2)).voxels <= m)
        if t2 > 0:
            ok &= np.all(m <= fuse(c, FusionParams(t1, t2 - 1)).voxels)
        ok &= np.array_equal(fuse(c, FusionParams(t1, t1)).voxels, c.counts > t1)
        failures += not ok
    verdict("fusion algebra", failures == 0,
            f"sandwich, monotonicity, equal-threshold reduction on 100 maps, {failures} failures")


def test_score_reference(verdict):
    value = score(0.664, 0.882, 0.508, 0.100, 0.866)
    verdict("score reference row", abs(value - 0.76175) < 1e-12, f"score = {value!r}, expected 0.76175")


def test_metric_oracle(verdict):
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(100):
        p = rng.random((12, 12, 12)) < rng.uniform(0.02, 0.2)
        g = rng.random((12, 12, 12)) < rng.uniform(0.02, 0.2)
        mismatches += voxel_metrics(p, g) != brute_voxel(p, g) or lesion_metrics(p, g) != brute_lesion(p, g)
    verdict("metrics vs brute force", mismatches == 0, f"100 random 12^3 pairs, {mismatches} mismatches")


def test_gradient_suite(verdict):
    rng = np.random.default_rng(0)
    errors = {
        "conv": layer_gradient_check(Conv2d(3, 4, 3, rng), rng.normal(size=(2, 3, 5, 6))),
        "sigmoid": layer_gradient_check(Sigmoid(), rng.normal(size=(2, 1, 4, 4))),
        "upsample": layer_gradient_check(Upsample2(), rng.normal(size=(1, 2, 3, 4))),
        "maxpool": layer_gradient_check(MaxPool2(), rng.permutation(64).reshape(1, 1, 8, 8).astype(float)),
    }
    x = rng.normal(size=(2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5
    errors["relu"] = layer_gradient_check(ReLU(), x)
    for mode in ("bn", "in", "condin"):
        shape = (15, 3) if mode == "condin" else (3,)
        layer = Norm(NormPolicy(3, mode=mode, gamma=rng.normal(size=shape), beta=rng.normal(size=shape)))
        kw = {"combos": np.array([3, 15])} if mode == "condin" else {}
        errors[mode] = layer_gradient_check(layer, rng.normal(size=(2, 3, 4, 5)), forward_kwargs=kw)
        net = UNet(NetConfig(channels=(4, 8), norm=mode, seed=1))
        errors[f"unet-{mode}"] = backward_check(net, rng.normal(size=(2, 12, 8, 8)), combos=[7, 15])
    linear = UNet(NetConfig(channels=(4, 8), norm="none", activation="linear", output="linear", seed=2))
    lin_err = backward_check(linear, rng.normal(size=(2, 12, 8, 8)))
    worst = max(errors.values())
    verdict("gradient suite", worst < 1e-3 and lin_err < 1e-7,
            f"max relative error {worst:.2e} over {len(errors)} checks, linear net {lin_err:.2e}", budget=120)


def test_normalization_contracts(verdict):
    rng = np.random.default_rng(0)
    x = rng.normal(2.0, 3.0, size=(4, 5, 9, 7))
    p = NormPolicy(5, mode="bn", inference_stats="instance_stats")
    _, cache = normalize_with_cache(50 * x + 100, p, phase="infer")
    mean_err = np.abs(cache.xhat.mean(axis=(2, 3))).max()
    var_err = np.abs(cache.xhat.var(axis=(2, 3)) - 1).max()
    p_in = NormPolicy(5, mode="in")
    a = np.array([3.7, 0.5, 2.0, 10.0, 1.3])[None, :, None, None]
    c = np.array([-2.1, 4.0, 0.0, -7.5, 1.0])[None, :, None, None]
    inv_err = np.abs(normalize(a * x + c, p_in, update_stats=False) - normalize(x, p_in, update_stats=False)).max()
    g, b = rng.normal(size=5), rng.normal(size=5)
    tied = NormPolicy(5, mode="condin", gamma=np.tile(g, (15, 1)), beta=np.tile(b, (15, 1)))
    plain = NormPolicy(5, mode="in", gamma=g, beta=b)
    bitwise = all(np.array_equal(normalize(x, tied, combo=k), normalize(x, plain)) for k in range(1, 16))
    ok = mean_err < 1e-3 and var_err < 1e-2 and inv_err < 1e-4 and bitwise
    verdict("normalization contracts", ok,
            f"TTIN mean err {mean_err:.1e}, var err {var_err:.1e}; IN affine err {inv_err:.1e}; "
            f"tied CondIN == IN bitwise: {bitwise}")


def test_nifti_and_cli_determinism(verdict, tmp_path):
    rng = np.random.default_rng(0)
    data = rng.normal(size=(9, 8, 7)).astype(np.float32)
    write_nifti(Volume3D(data, (1.0, 1.0, 2.0)), tmp_path / "v.nii.gz")
    mask = BinaryMask3D(rng.random((9, 8, 7)) > 0.7)
    write_nifti(mask, tmp_path / "m.nii")
    nifti_ok = (np.array_equal(read_nifti(tmp_path / "v.nii.gz").voxels.astype(np.float32).view(np.uint32),
                               data.view(np.uint32))
                and np.array_equal(read_nifti(tmp_path / "m.nii").voxels, mask.voxels))

    def pipeline(root):
        steps = [
            ["phantom", "--out", root / "ph", "--seed", 3, "--subjects", 3, "--dims", "24,24,24",
             "--lesions", "2,4", "--radius", "1.5,3"],
            ["train", "--data", root / "ph", "--out", root / "tr", "--iterations", 10, "--lr", 3e-3, "--seed", 3],
            ["infer", "--checkpoint", root / "tr" / "model.ckpt", "--data", root / "ph", "--out", root / "inf"],
            ["eval", "--pred", root / "inf", "--data", root / "ph", "--out", root / "ev"],
            ["sweep", "--cmaps", root / "inf", "--data", root / "ph", "--out", root / "sw"],
        ]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            codes = [cli([str(a) for a in s]) for s in steps]
        files = {}
        for p in sorted(root.rglob("*")):
            if p.is_file() and p.name != "resolved_config.json":
                files[str(p.relative_to(root))] = p.read_bytes()
        return codes, files

    codes_a, a = pipeline(tmp_path / "a")
    codes_b, b = pipeline(tmp_path / "b")
    same = a == b
    verdict("NIfTI round trip and CLI determinism", nifti_ok and codes_a == codes_b == [0] * 5 and same,
            f"NIfTI bit-exact={nifti_ok}; exit codes {codes_a}; {len(a)} output files identical={same}")


# ---------------------------------------------------------------- desk-scale experiments

@pytest.fixture(scope="module")
def desk_results():
    return [run_seed(seed) for seed in SEEDS]


@pytest.mark.slow
def test_desk_generalization(verdict, desk_results):
    wins = 0
    lines = []
    for r in desk_results:
        bn, ttin = r["flair_dropped"]["bn_train_stats"], r["flair_dropped"]["condin_ttin"]
        wins += ttin > bn
        lines.append(f"seed {r['seed']}: TTIN {ttin:.3f} vs BN {bn:.3f}")
    total = sum(r["seconds"] for r in desk_results)
    verdict("desk generalization (FLAIR removed)", wins >= 4 and total < 3600,
            f"TTIN wins {wins}/5 [{'; '.join(lines)}]; experiment time {total:.0f} s of 3600")


@pytest.mark.slow
def test_desk_ensemble(verdict, desk_results):
    wins = 0
    lines = []
    for r in desk_results:
        t1, t2, best = r["swept_best"]
        wins += best >= r["majority_3plane"]
        lines.append(f"seed {r['seed']}: 24-way best ({t1},{t2}) {best:.3f} vs 3-plane {r['majority_3plane']:.3f}")
    verdict("desk ensemble (24-way swept vs 3-plane majority)", wins >= 4, f"{wins}/5 [{'; '.join(lines)}]")
