"""Command-line interface.

Subcommands: generate-data, train, detect, noise-paradox, size-strata, ablate.
Settings come from an INI config file (--config) with --set section.key=value
overrides; every command persists its resolved configuration next to its
outputs. Exit codes: 0 success, 1 usage/config error, 2 data error, 3 trend
assertion failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments
from .checkpoint import CheckpointError, load_unet, save_unet
from .config import ConfigError, load_config, save_config
from .imgio import FormatError, read_image
from .nn.unet import TinyUNet
from .pipeline import detect, save_detection
from .seeding import derive_rng
from .synthdata import DatasetError, dataset_load
from .training import LossCurve, train

log = logging.getLogger("anodiff")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _common_flags(p: argparse.ArgumentParser, out_required=True) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config option")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--force", action="store_true",
                   help="overwrite existing outputs")
    p.add_argument("--workers", type=int, help="parallel evaluation workers")
    p.add_argument("--verbose", action="store_true")


def build_parser() -> _Parser:
    p = _Parser(prog="anodiff",
                description="diffusion-based anomaly detection experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write train/test phantom datasets")
    _common_flags(g)

    t = sub.add_parser("train", help="train the noise predictor")
    _common_flags(t)
    t.add_argument("--data", required=True, help="dataset root directory")
    t.add_argument("--resume", help="checkpoint to continue from")

    d = sub.add_parser("detect", help="run the pipeline on one image")
    _common_flags(d)
    d.add_argument("--image", required=True, help="input image container")
    d.add_argument("--checkpoint", help="unet checkpoint (overrides config)")

    for name in ("noise-paradox", "size-strata", "ablate"):
        e = sub.add_parser(name, help=f"run the {name.replace('-', ' ')} experiment")
        _common_flags(e)
        e.add_argument("--data", required=True, help="dataset root directory")
        e.add_argument("--checkpoint", help="unet checkpoint (overrides config)")
    return p


def _load_cfg(args):
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.workers is not None:
        cfg = dataclasses.replace(
            cfg, eval=dataclasses.replace(cfg.eval, workers=args.workers))
    ckpt = getattr(args, "checkpoint", None)
    if ckpt:
        cfg = dataclasses.replace(
            cfg, denoiser=dataclasses.replace(cfg.denoiser, type="unet",
                                              checkpoint=ckpt))
    return cfg


def cmd_generate_data(args) -> int:
    cfg = _load_cfg(args)
    status = experiments.build_datasets(cfg, args.out, force=args.force)
    log.info("generate-data: %s", status)
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    data = dataset_load(Path(args.data) / "train")
    images = np.stack([s.image for s in data])
    schedule = experiments.schedule_from(cfg)
    if args.resume:
        net, opt_state, start_epoch = load_unet(args.resume, expect=cfg.arch)
        log.info("resuming from %s at epoch %d", args.resume, start_epoch)
    else:
        net = TinyUNet(cfg.arch, derive_rng(cfg.train.seed, "init"))
        opt_state, start_epoch = {}, 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    curve, opt_state = train(net, images, schedule, cfg.train,
                             opt_state=opt_state, start_epoch=start_epoch)
    log.info("training took %.1f s", time.perf_counter() - t0)
    save_unet(out / "checkpoint.ckpt", net, opt_state, epoch=cfg.train.epochs)
    if args.resume and (Path(args.resume).parent / "loss_curve.csv").exists():
        prev = (Path(args.resume).parent / "loss_curve.csv").read_text()
        rows = prev.strip().splitlines()[1:]
        merged = LossCurve()
        merged.records = curve.records
        (out / "loss_curve.csv").write_text(
            "epoch,train_loss,val_loss\n" + "\n".join(rows) + "\n"
            + "\n".join(f"{r.epoch},{r.train_loss!r},{r.val_loss!r}"
                        for r in curve.records) + "\n")
    else:
        curve.write_csv(out / "loss_curve.csv")
    save_config(cfg, out / "config.resolved.ini")
    return 0


def cmd_detect(args) -> int:
    cfg = _load_cfg(args)
    x = read_image(args.image)
    schedule = experiments.schedule_from(cfg)
    denoiser = experiments.build_denoiser(cfg, schedule)
    t0 = time.perf_counter()
    result = detect(x, denoiser, schedule, cfg.pipeline, seed=cfg.seed)
    out = Path(args.out)
    save_detection(result, out,
                   timings={"detect_seconds": round(time.perf_counter() - t0, 3)})
    save_config(cfg, out / "config.resolved.ini")
    return 0


def _cmd_experiment(args, runner) -> int:
    cfg = _load_cfg(args)
    trends = runner(cfg, args.data, args.out)
    for name, t in trends.items():
        if isinstance(t, dict) and "passed" in t:
            log.info("trend %s: %s", name, "pass" if t["passed"] else "FAIL")
    return 0 if trends.get("passed", False) else 3


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate-data":
            return cmd_generate_data(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "detect":
            return cmd_detect(args)
        if args.command == "noise-paradox":
            return _cmd_experiment(args, experiments.run_noise_paradox)
        if args.command == "size-strata":
            return _cmd_experiment(args, experiments.run_size_strata)
        if args.command == "ablate":
            return _cmd_experiment(args, experiments.run_ablate)
        raise AssertionError(args.command)
    except (_UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, FileExistsError, DatasetError, CheckpointError,
            FormatError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
