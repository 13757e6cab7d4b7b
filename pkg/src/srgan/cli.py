"""Command-line entry point: ``srgan <command> ...``.

Every command writes ``config.json`` (its arguments plus, for training, the
resolved configuration) into its output directory. Exit status is 0 on
success and the error class's ``exit_code`` otherwise.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plotting
from .config import PRESETS, load_config
from .errors import DataError, InvalidArgument, SRError
from .image_pipeline import (
    DegradeConfig,
    ImageF,
    center_crop_to_multiple,
    degrade,
    from_float,
    from_tensor,
    load_image,
    save_image,
    to_float,
    to_tensor,
    upsample_bicubic,
    upsample_nearest,
)
from .metrics import evaluate, list_pngs
from .models import (
    GeneratorConfig,
    build_feature_extractor,
    build_generator,
    generator_forward,
    param_count,
)
from .synthetic import write_toy_dataset
from .trainer import (
    load_generator_checkpoint,
    models_from_config,
    pretrain_srresnet,
    train_srgan,
    train_srresnet_feature,
)

log = logging.getLogger("srgan")


def _echo(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _args_dict(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v)
            for k, v in vars(args).items() if k != "func"}


# --------------------------------------------------------------------------
# degrade / baseline / eval

def cmd_degrade(args) -> int:
    sources = list_pngs(args.in_dir) if args.in_dir.is_dir() else []
    if not sources:
        raise DataError(f"no PNG files in {args.in_dir}")
    cfg = DegradeConfig(args.factor, args.sigma)
    _echo(args.out_dir, {"command": "degrade", "args": _args_dict(args)})
    for path in sources:
        hr = to_float(center_crop_to_multiple(load_image(path), args.factor))
        save_image(from_float(degrade(hr, cfg)), args.out_dir / path.name)
    print(f"wrote {len(sources)} LR images to {args.out_dir}")
    return 0


def _infer_factor(lr_shape, hr_shape, name) -> int:
    (lh, lw), (hh, hw) = lr_shape, hr_shape
    # references need not be multiples of r; the metric step modcrops them
    ry, rx = hh // lh, hw // lw
    if ry != rx or ry < 1 or hh - ry * lh >= ry or hw - rx * lw >= rx:
        raise DataError(f"{name}: HR {hh}x{hw} is not an integer multiple of LR {lh}x{lw}")
    return ry


def cmd_baseline(args) -> int:
    lr_files = {p.name: p for p in list_pngs(args.lr_dir)} if args.lr_dir.is_dir() else {}
    hr_files = {p.name: p for p in list_pngs(args.hr_dir)} if args.hr_dir.is_dir() else {}
    if not lr_files or set(lr_files) != set(hr_files):
        raise DataError(f"LR and HR directories do not hold the same PNG names: "
                        f"{sorted(set(lr_files) ^ set(hr_files))[:10]}")
    sr_dir = args.out_dir / "sr"
    sr_dir.mkdir(parents=True, exist_ok=True)
    _echo(args.out_dir, {"command": "baseline", "args": _args_dict(args)})
    for name in sorted(lr_files):
        lr = load_image(lr_files[name])
        hr = load_image(hr_files[name])
        r = _infer_factor((lr.height, lr.width), (hr.height, hr.width), name)
        lr_f = to_float(lr)
        sr = upsample_nearest(lr_f, r) if args.method == "nearest" else upsample_bicubic(lr_f, r)
        save_image(from_float(sr), sr_dir / name)
    report = evaluate(sr_dir, args.hr_dir, border=args.border, label=args.method)
    report.write(args.out_dir)
    _print_summary(report)
    return 0


def cmd_eval(args) -> int:
    report = evaluate(args.sr_dir, args.hr_dir, border=args.border, label=args.label,
                      allow_missing=args.allow_missing)
    _echo(args.out_dir, {"command": "eval", "args": _args_dict(args)})
    report.write(args.out_dir)
    _print_summary(report)
    return 0


def _print_summary(report) -> None:
    s = report.summary()
    psnr = "inf" if s["mean_psnr_db"] is None else f"{s['mean_psnr_db']:.4f}"
    print(f"{s['label'] or 'method'}: {s['count']} images, PSNR {psnr} dB, SSIM {s['mean_ssim']:.4f}")


# --------------------------------------------------------------------------
# training / inference

def cmd_train(args) -> int:
    cfg, effective = load_config(args.config, args.preset, args.set or (), args.seed)
    out = args.out_dir
    _echo(out, {"command": f"train {args.mode}", "args": _args_dict(args), "config": effective})
    gen, disc = models_from_config(cfg)
    if args.mode == "srresnet":
        spec = cfg.pretrain_loss
        if spec.content == "feature":
            ext = build_feature_extractor(replace(cfg.feature, tap=spec.tap), cfg.feature_seed,
                                          cfg.feature_weights)
            loss_log = train_srresnet_feature(gen, args.data, spec, cfg.pretrain, ext,
                                              out_dir=out, config=effective)
        else:
            loss_log = pretrain_srresnet(gen, args.data, spec, cfg.pretrain, out_dir=out,
                                         config=effective)
        curves = {"content": loss_log.column("content")}
    else:
        provenance = None
        if args.init is not None:
            gen, ckpt = load_generator_checkpoint(args.init)
            provenance = ckpt.config.get("phase")
        spec = cfg.gan_loss
        ext = None
        if spec.content == "feature":
            ext = build_feature_extractor(replace(cfg.feature, tap=spec.tap), cfg.feature_seed,
                                          cfg.feature_weights)
        loss_log = train_srgan(gen, disc, args.data, spec, cfg.gan, extractor=ext,
                               provenance=provenance, allow_unpretrained=args.allow_unpretrained,
                               adam_cfg=cfg.adam, out_dir=out, config=effective)
        curves = {"d_loss": loss_log.column("d_loss"), "content": loss_log.column("content")}
    plotting.plot_loss_curves(curves, loss_log.column("iteration"), out / "loss.png",
                              title=f"{args.mode} training")
    print(f"{args.mode}: {len(loss_log.rows)} iterations, final checkpoint {out / 'final.srck'}")
    return 0


def _infer_one(gen, src: Path, dst: Path) -> None:
    lr = to_float(load_image(src))
    if lr.channels == 1:
        lr = ImageF(np.repeat(lr.data, 3, axis=2), lr.value_range)
    sr = generator_forward(gen, to_tensor(lr).astype(np.float32), mode="eval")
    save_image(from_float(from_tensor(sr, (-1.0, 1.0))), dst)


def cmd_infer(args) -> int:
    gen, _ = load_generator_checkpoint(args.checkpoint)
    if args.input.is_dir():
        sources = list_pngs(args.input)
        if not sources:
            raise DataError(f"no PNG files in {args.input}")
        args.out.mkdir(parents=True, exist_ok=True)
        _echo(args.out, {"command": "infer", "args": _args_dict(args)})
        for src in sources:
            _infer_one(gen, src, args.out / src.name)
        print(f"wrote {len(sources)} SR images to {args.out}")
    else:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        _echo(args.out.parent, {"command": "infer", "args": _args_dict(args)})
        _infer_one(gen, args.input, args.out)
        print(f"wrote {args.out}")
    return 0


# --------------------------------------------------------------------------
# depth profile

def _parse_blocks(text: str) -> list[int]:
    try:
        blocks = [int(b) for b in text.split(",") if b.strip()]
    except ValueError as exc:
        raise InvalidArgument(f"bad block list {text!r}") from exc
    if not blocks or any(b < 1 for b in blocks):
        raise InvalidArgument("block list must be non-empty positive integers")
    return blocks


def profile_depth(blocks: list[int], skip: str = "both", input_size: int = 64, repeats: int = 5,
                  width: int = 64, seed: int = 0) -> list[dict]:
    """Median eval-mode forward time per (block count, skip setting).

    Settings are measured round-robin, one forward each per round in a
    shuffled order, so load drifts and position effects hit every setting
    alike.
    """
    if skip not in ("on", "off", "both"):
        raise InvalidArgument(f"skip must be on, off or both, not {skip!r}")
    if not blocks:
        raise InvalidArgument("block list is empty")
    if repeats < 1 or input_size < 1:
        raise InvalidArgument("repeats and input size must be positive")
    skips = ["on", "off"] if skip == "both" else [skip]
    x = np.random.default_rng(seed).random((1, 3, input_size, input_size)).astype(np.float32)
    nets = {}
    for b in blocks:
        for s in skips:
            nets[(b, s)] = build_generator(GeneratorConfig(blocks=b, width=width, global_skip=s == "on"),
                                           seed)
    times = {key: [] for key in nets}
    for key, net in nets.items():  # warm-up
        generator_forward(net, x, mode="eval")
    keys = list(nets)
    order_rng = np.random.default_rng(seed)
    for _ in range(repeats):
        for k in order_rng.permutation(len(keys)):
            key = keys[k]
            t0 = time.perf_counter()
            generator_forward(nets[key], x, mode="eval")
            times[key].append(time.perf_counter() - t0)
    return [{"blocks": b, "skip": s, "params": param_count(nets[(b, s)]),
             "median_s": statistics.median(times[(b, s)]), "repeats": repeats}
            for (b, s) in nets]


def linear_fit_r2(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, icept = np.polyfit(x, y, 1)
    resid = y - (slope * x + icept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0


def cmd_profile_depth(args) -> int:
    blocks = _parse_blocks(args.blocks)
    _echo(args.out_dir, {"command": "profile-depth", "args": _args_dict(args)})
    rows = profile_depth(blocks, args.skip, args.input_size, args.repeats, args.width, args.seed)
    with open(args.out_dir / "depth_profile.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["blocks", "skip", "params", "median_s", "repeats"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    fits = {}
    for s in ("on", "off"):
        sel = [r for r in rows if r["skip"] == s]
        if len(sel) >= 2:
            fits[s] = linear_fit_r2([r["blocks"] for r in sel], [r["median_s"] for r in sel])
    (args.out_dir / "depth_profile.json").write_text(
        json.dumps({"rows": rows, "linear_fit_r2": fits}, indent=2, sort_keys=True) + "\n")
    plotting.plot_depth_profile(rows, args.out_dir / "depth_profile.png")
    for r in rows:
        print(f"B={r['blocks']:>3} skip={r['skip']:<3} params={r['params']:>9} "
              f"median={r['median_s'] * 1e3:8.1f} ms")
    return 0


def cmd_toy_data(args) -> int:
    manifest = write_toy_dataset(args.out_dir, args.count, args.size, args.seed)
    _echo(args.out_dir, {"command": "toy-data", "args": _args_dict(args)})
    print(f"wrote {args.count} images and {manifest}")
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srgan", description="Super-resolution networks in numpy.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("degrade", help="HR PNGs -> bicubic-downsampled LR PNGs")
    d.add_argument("in_dir", type=Path)
    d.add_argument("out_dir", type=Path)
    d.add_argument("--factor", type=int, default=4)
    d.add_argument("--sigma", type=float, default=None, help="optional Gaussian blur before downsampling")
    d.set_defaults(func=cmd_degrade)

    b = sub.add_parser("baseline", help="nearest / bicubic upsampling, scored against HR")
    b.add_argument("lr_dir", type=Path)
    b.add_argument("hr_dir", type=Path)
    b.add_argument("out_dir", type=Path)
    b.add_argument("--method", choices=["nearest", "bicubic"], default="bicubic")
    b.add_argument("--border", type=int, default=4)
    b.set_defaults(func=cmd_baseline)

    t = sub.add_parser("train", help="SRResNet pretraining or SRGAN training")
    t.add_argument("mode", choices=["srresnet", "srgan"])
    t.add_argument("data", type=Path, help="manifest listing HR training PNGs")
    t.add_argument("out_dir", type=Path)
    t.add_argument("--config", type=Path)
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
    t.add_argument("--init", type=Path, help="pretrained generator checkpoint (srgan mode)")
    t.add_argument("--allow-unpretrained", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run a generator checkpoint on LR PNG(s)")
    i.add_argument("checkpoint", type=Path)
    i.add_argument("input", type=Path, help="PNG file or directory")
    i.add_argument("out", type=Path, help="output PNG file or directory")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="luma PSNR/SSIM of SR PNGs against HR PNGs")
    e.add_argument("sr_dir", type=Path)
    e.add_argument("hr_dir", type=Path)
    e.add_argument("out_dir", type=Path)
    e.add_argument("--border", type=int, default=4)
    e.add_argument("--label", default="")
    e.add_argument("--allow-missing", action="store_true")
    e.set_defaults(func=cmd_eval)

    pd = sub.add_parser("profile-depth", help="forward time against residual-block count")
    pd.add_argument("out_dir", type=Path)
    pd.add_argument("--blocks", default="1,2,4,8,16")
    pd.add_argument("--skip", choices=["on", "off", "both"], default="both")
    pd.add_argument("--input-size", type=int, default=64)
    pd.add_argument("--repeats", type=int, default=5)
    pd.add_argument("--width", type=int, default=64)
    pd.add_argument("--seed", type=int, default=0)
    pd.set_defaults(func=cmd_profile_depth)

    y = sub.add_parser("toy-data", help="write a small synthetic training set")
    y.add_argument("out_dir", type=Path)
    y.add_argument("--count", type=int, default=8)
    y.add_argument("--size", type=int, default=64)
    y.add_argument("--seed", type=int, default=0)
    y.set_defaults(func=cmd_toy_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SRError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
