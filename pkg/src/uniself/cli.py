"""Command-line pipeline: ``phantom``, ``train``, ``infer``, ``eval`` and ``sweep``.

Every command reads an optional JSON config (``--config``) whose keys are the
command's option names, then applies flag overrides. Unknown keys are
rejected. The resolved configuration is echoed to stdout and saved as
``resolved_config.json`` in the output directory.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import fusion, orient
from .metrics import evaluate_cohort
from .phantom import (CorruptionSpec, PhantomConfig, PhantomConfigError, corrupt, generate, load_cohort,
                      write_cohort)
from .tinynet import NetConfig, TrainConfig, Trainer, UnsampleableError, load_checkpoint, save_checkpoint
from .volio import CONTRASTS, NiftiFormatError, read_confidence, read_nifti, write_nifti

log = logging.getLogger("uniself")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- option parsing helpers

def _ints(text):
    return [int(v) for v in str(text).split(",") if v != ""]


def _names(text):
    return [v for v in str(text).split(",") if v != ""]


def _onoff(text):
    if text in ("on", "true", "1", True):
        return True
    if text in ("off", "false", "0", False):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


TRANSFORM_SETS = ("all24", "identity", "3plane")
STATS = {"train": "train_stats", "ttin": "instance_stats"}

DEFAULTS = {
    "phantom": {
        "out": None, "seed": 0, "subjects": 4, "dims": [48, 48, 48], "lesions": [3, 8],
        "radius": [1.5, 4.0], "noise": 0.03,
    },
    "train": {
        "data": None, "out": None, "ids": None, "norm": "condin", "channels": [8, 16, 32],
        "contrast_dropout": True, "spatial_aug": True, "rater_sampling": True, "iterations": 300,
        "lr": 1e-4, "batch_size": 4, "seed": 0, "resume": None, "log_every": 50,
    },
    "infer": {
        "checkpoint": None, "data": None, "out": None, "ids": None, "stats": "ttin",
        "transforms": "all24", "tau1": None, "tau2": None, "drop": [], "jobs": 1,
    },
    "eval": {
        "pred": None, "data": None, "out": None, "ids": None, "raters": 2,
    },
    "sweep": {
        "data": None, "out": None, "checkpoint": None, "cmaps": None, "ids": None, "stats": "ttin",
        "transforms": "all24", "drop": [], "tau1_values": None, "tau2_values": None, "jobs": 1,
    },
}

REQUIRED = {
    "phantom": ("out",),
    "train": ("data", "out"),
    "infer": ("checkpoint", "data", "out"),
    "eval": ("pred", "data", "out"),
    "sweep": ("data", "out"),
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uniself", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with option values")
        sp.add_argument("--out", help="output directory")
        return sp

    sp = common(sub.add_parser("phantom", help="generate a seeded phantom cohort"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--subjects", type=int)
    sp.add_argument("--dims", type=_ints, help="e.g. 48,48,48")
    sp.add_argument("--lesions", type=_ints, help="lesion count range lo,hi")
    sp.add_argument("--radius", type=lambda t: [float(v) for v in t.split(",")], help="radius range lo,hi")
    sp.add_argument("--noise", type=float)

    sp = common(sub.add_parser("train", help="train a network on a phantom manifest"))
    sp.add_argument("--data", help="manifest.json or its directory")
    sp.add_argument("--ids", type=_names, help="subject ids to train on (default all)")
    sp.add_argument("--norm", choices=("bn", "in", "condin"))
    sp.add_argument("--channels", type=_ints, help="channels per level, e.g. 8,16,32")
    sp.add_argument("--contrast-dropout", dest="contrast_dropout", type=_onoff)
    sp.add_argument("--spatial-aug", dest="spatial_aug", type=_onoff)
    sp.add_argument("--rater-sampling", dest="rater_sampling", type=_onoff)
    sp.add_argument("--iterations", type=int, help="total iterations (including resumed ones)")
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--log-every", dest="log_every", type=int)

    def inference(sp):
        sp.add_argument("--data", help="manifest.json or its directory")
        sp.add_argument("--ids", type=_names, help="subject ids (default all)")
        sp.add_argument("--stats", choices=tuple(STATS), help="normalization statistics at inference")
        sp.add_argument("--transforms", choices=TRANSFORM_SETS)
        sp.add_argument("--drop", type=_names, help="contrasts to remove before inference, e.g. FLAIR")
        sp.add_argument("--jobs", type=int, help="subjects processed in parallel")

    sp = common(sub.add_parser("infer", help="self-ensemble inference and fusion"))
    sp.add_argument("--checkpoint")
    inference(sp)
    sp.add_argument("--tau1", type=int)
    sp.add_argument("--tau2", type=int)

    sp = common(sub.add_parser("eval", help="score predicted masks against both raters"))
    sp.add_argument("--pred", help="directory with <id>_mask.nii.gz files")
    sp.add_argument("--data", help="manifest.json or its directory")
    sp.add_argument("--ids", type=_names)
    sp.add_argument("--raters", type=int, choices=(1, 2))

    sp = common(sub.add_parser("sweep", help="grid search over (tau1, tau2)"))
    sp.add_argument("--checkpoint", help="network used to build confidence maps")
    sp.add_argument("--cmaps", help="directory of cached <id>_confidence.nii.gz maps")
    inference(sp)
    sp.add_argument("--tau1-values", dest="tau1_values", type=_ints)
    sp.add_argument("--tau2-values", dest="tau2_values", type=_ints)
    return p


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join('--' + m for m in missing)}")
    return cfg


def _echo(cfg: dict, outdir: Path, command: str):
    outdir.mkdir(parents=True, exist_ok=True)
    text = json.dumps({"command": command, **cfg}, indent=2, sort_keys=True)
    print(text)
    _write_text(outdir / "resolved_config.json", text + "\n")


def _write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _load_subjects(data, ids):
    try:
        cohort = load_cohort(data)
    except (OSError, KeyError, json.JSONDecodeError, NiftiFormatError, ValueError) as exc:
        raise DataError(f"cannot load cohort from {data}: {exc}") from exc
    if ids:
        by_id = {s.id: s for s in cohort}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DataError(f"unknown subject ids: {', '.join(missing)}")
        cohort = [by_id[i] for i in ids]
    if not cohort:
        raise DataError("no subjects selected")
    return cohort


# ---------------------------------------------------------------- phantom

def cmd_phantom(cfg: dict) -> int:
    try:
        pcfg = PhantomConfig(dims=tuple(cfg["dims"]), n_subjects=cfg["subjects"], lesion_count=tuple(cfg["lesions"]),
                             lesion_radius=tuple(cfg["radius"]), noise_std=cfg["noise"], seed=cfg["seed"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(cfg["out"])
    _echo(cfg, out, "phantom")
    try:
        cohort = generate(pcfg)
    except PhantomConfigError as exc:
        raise ConfigError(str(exc)) from exc
    path = write_cohort(cohort, out, pcfg)
    log.info("wrote %d subjects to %s", len(cohort), path)
    return EXIT_OK


# ---------------------------------------------------------------- train

CHECKPOINT_NAME = "model.ckpt"
PATH_KEYS = ("data", "out", "resume")


def _opt_aux(trainer: Trainer) -> dict:
    state = trainer.opt.state()
    aux = {"adam.t": np.array([state.pop("t")], dtype=float), "losses": np.array(trainer.losses)}
    aux.update({f"adam.{k}": v for k, v in state.items()})
    return aux


def _opt_state(aux: dict) -> dict:
    state = {"t": int(aux["adam.t"][0])}
    state.update({k[5:]: v for k, v in aux.items() if k.startswith("adam.") and k != "adam.t"})
    return state


def cmd_train(cfg: dict) -> int:
    resume = None
    if cfg["resume"]:
        try:
            net, extra, aux = load_checkpoint(cfg["resume"])
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot resume from {cfg['resume']}: {exc}") from exc
        if "trainer" not in extra:
            raise DataError(f"{cfg['resume']} holds no training state")
        # the run's own settings win; only paths, length and logging may change
        saved = extra["config"]
        cfg = {**saved, **{k: cfg[k] for k in PATH_KEYS + ("iterations", "log_every")}}
        resume = (net, extra, aux)
    try:
        tcfg = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"], iterations=cfg["iterations"],
                           contrast_dropout=cfg["contrast_dropout"], rater_sampling=cfg["rater_sampling"],
                           spatial_aug=cfg["spatial_aug"], seed=cfg["seed"])
        ncfg = NetConfig(channels=tuple(cfg["channels"]), norm=cfg["norm"], seed=cfg["seed"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(cfg["out"])
    _echo(cfg, out, "train")
    cohort = _load_subjects(cfg["data"], cfg["ids"])
    dataset = [s.as_tuple() for s in cohort]
    try:
        if resume is None:
            trainer = Trainer(dataset, tcfg, ncfg)
        else:
            net, extra, aux = resume
            trainer = Trainer(dataset, tcfg, net=net)
            trainer.load_state(extra["trainer"], _opt_state(aux))
            trainer.losses = [float(v) for v in aux["losses"]]
    except UnsampleableError as exc:
        raise DataError(str(exc)) from exc
    remaining = tcfg.iterations - trainer.iteration
    if remaining < 0:
        raise ConfigError(f"checkpoint is already at iteration {trainer.iteration} > {tcfg.iterations}")
    trainer.run(remaining, log_every=cfg["log_every"])
    # paths stay out of the checkpoint so identical runs give identical bytes wherever they live
    extra = {"config": {k: v for k, v in cfg.items() if k not in PATH_KEYS}, "trainer": trainer.state(),
             "subjects": [s.id for s in cohort]}
    save_checkpoint(out / CHECKPOINT_NAME, trainer.net, extra=extra, aux=_opt_aux(trainer))
    lines = ["iteration,loss"] + [f"{i + 1},{loss!r}" for i, loss in enumerate(trainer.losses)]
    _write_text(out / "loss.csv", "\n".join(lines) + "\n")
    log.info("trained %d iterations; checkpoint %s (%d parameter sets)",
             trainer.iteration, out / CHECKPOINT_NAME, trainer.net.n_param_sets)
    return EXIT_OK


# ---------------------------------------------------------------- inference

def _transforms(name: str) -> list:
    if name == "all24":
        return orient.catalog()
    if name == "identity":
        return [orient.identity("axial")]
    if name == "3plane":
        return orient.three_plane()
    raise ConfigError(f"unknown transform set {name!r}")


def _fusion_params(cfg: dict, n_votes: int) -> fusion.FusionParams:
    """Explicit thresholds, else the default pair for 24 votes, else a plain majority."""
    tau1, tau2 = cfg["tau1"], cfg["tau2"]
    if n_votes == 24:
        default = fusion.DEFAULT_TAUS
    else:
        default = (n_votes // 2, n_votes // 2)
    tau1 = default[0] if tau1 is None else tau1
    tau2 = min(default[1], tau1) if tau2 is None else tau2
    try:
        return fusion.FusionParams(tau1, tau2, n_votes)
    except fusion.FusionParamError as exc:
        raise ConfigError(str(exc)) from exc


def _drop(mcv, names):
    for name in names:
        if name not in CONTRASTS:
            raise ConfigError(f"unknown contrast {name!r}; expected one of {CONTRASTS}")
        if len(mcv.present) == 1 and mcv.present[0] == name:
            raise DataError("dropping would leave no contrast")
        mcv = corrupt(mcv, CorruptionSpec("drop_contrast", target=name))
    return mcv


def _ensemble_job(checkpoint, mcv, transform_set, stats):
    net = load_checkpoint(checkpoint)[0]
    counter = fusion.PassCounter()
    cmap = fusion.self_ensemble_predict(mcv, net, _transforms(transform_set), STATS[stats], counter)
    return cmap, counter.passes


def _confidence_maps(cfg, cohort, counter: fusion.PassCounter) -> list:
    if cfg["stats"] not in STATS:
        raise ConfigError(f"stats must be one of {tuple(STATS)}")
    _transforms(cfg["transforms"])
    try:
        load_checkpoint(cfg["checkpoint"])
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {cfg['checkpoint']}: {exc}") from exc
    inputs = [_drop(s.mcv, cfg["drop"]) for s in cohort]
    args = [(cfg["checkpoint"], m, cfg["transforms"], cfg["stats"]) for m in inputs]
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            results = list(pool.map(_ensemble_job, *zip(*args)))
    else:
        results = [_ensemble_job(*a) for a in args]
    for s, (_, passes) in zip(cohort, results):
        counter.ensembles += 1
        counter.passes += passes
        log.info("%s: %d passes", s.id, passes)
    return [c for c, _ in results]


def cmd_infer(cfg: dict) -> int:
    n_votes = len(_transforms(cfg["transforms"]))
    params = _fusion_params(cfg, n_votes)
    if cfg["jobs"] < 1:
        raise ConfigError("--jobs must be >= 1")
    out = Path(cfg["out"])
    _echo({**cfg, "tau1": params.tau1, "tau2": params.tau2}, out, "infer")
    cohort = _load_subjects(cfg["data"], cfg["ids"])
    counter = fusion.PassCounter()
    cmaps = _confidence_maps(cfg, cohort, counter)
    for s, c in zip(cohort, cmaps):
        write_nifti(c, out / f"{s.id}_confidence.nii.gz")
        write_nifti(fusion.fuse(c, params), out / f"{s.id}_mask.nii.gz")
    log.info("inference done: %d subjects, %d passes", counter.ensembles, counter.passes)
    return EXIT_OK


# ---------------------------------------------------------------- evaluation

def cmd_eval(cfg: dict) -> int:
    out = Path(cfg["out"])
    _echo(cfg, out, "eval")
    cohort = _load_subjects(cfg["data"], cfg["ids"])
    pred_dir = Path(cfg["pred"])
    try:
        preds = [read_nifti(pred_dir / f"{s.id}_mask.nii.gz", kind="mask") for s in cohort]
    except (OSError, NiftiFormatError, ValueError) as exc:
        raise DataError(f"cannot read predictions: {exc}") from exc
    for s, p in zip(cohort, preds):
        if p.dims != s.rater1.dims:
            raise DataError(f"{s.id}: prediction dims {p.dims} differ from reference {s.rater1.dims}")
    r2 = [s.rater2 for s in cohort] if cfg["raters"] == 2 else None
    report = evaluate_cohort(preds, [s.rater1 for s in cohort], r2)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    print(json.dumps(report.row(), sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- sweeps

def cmd_sweep(cfg: dict) -> int:
    if cfg["checkpoint"] is None and cfg["cmaps"] is None:
        raise ConfigError("sweep needs --checkpoint or --cmaps")
    out = Path(cfg["out"])
    _echo(cfg, out, "sweep")
    cohort = _load_subjects(cfg["data"], cfg["ids"])
    counter = fusion.PassCounter()
    if cfg["cmaps"] is not None:
        try:
            cmaps = [read_confidence(Path(cfg["cmaps"]) / f"{s.id}_confidence.nii.gz") for s in cohort]
        except (OSError, NiftiFormatError) as exc:
            raise DataError(f"cannot read cached confidence maps: {exc}") from exc
    else:
        cmaps = _confidence_maps(cfg, cohort, counter)
        cache = out / "confidence"
        cache.mkdir(exist_ok=True)
        for s, c in zip(cohort, cmaps):
            write_nifti(c, cache / f"{s.id}_confidence.nii.gz")
    n_votes = cmaps[0].n_votes
    grid = fusion.tau_grid(n_votes, cfg["tau1_values"], cfg["tau2_values"])
    if not grid:
        raise ConfigError("threshold grid is empty (need 0 <= tau2 <= tau1 <= n_votes)")
    rows = fusion.tau_sweep(cmaps, [s.rater1 for s in cohort], [s.rater2 for s in cohort], grid)
    fusion.write_sweep_csv(rows, out / "sweep.csv")
    best = fusion.best_cell(rows)
    summary = {"best": {"tau1": best.tau1, "tau2": best.tau2, "mean_score": best.mean_score},
               "cells": len(rows), "subjects": len(cohort),
               "inference": {"ensembles": counter.ensembles, "passes": counter.passes}}
    _write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary["best"], sort_keys=True))
    return EXIT_OK


COMMANDS = {"phantom": cmd_phantom, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"uniself {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"uniself {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal-error code
        log.debug("internal error", exc_info=True)
        print(f"uniself {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
