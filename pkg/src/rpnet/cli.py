"""Command-line entry points: ``rpnet {train,eval,infer,profile,synth}``.

Every command writes into a fresh run directory ``<out>/<hash>-<timestamp>``
where ``hash`` identifies the command's inputs, and prints tab-delimited
results on stdout. The device comes from ``RPNET_DEVICE`` (``cpu``, ``cuda``,
``cuda:N`` or ``auto``; default ``cpu``).

Exit codes: 0 success, 1 other rpnet error, 2 usage error, 3 config error,
4 data error, 5 training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import config as config_io
from . import plotting
from .data import (
    DatasetSpec,
    SegmentationFolder,
    SyntheticSpec,
    export_prediction,
    generate_synthetic,
    load_image,
    write_dataset,
)
from .errors import ConfigError, DataError, DivergenceError, RPNetError
from .model import RPNet, count_parameters, load_checkpoint, save_checkpoint
from .profiling import (
    LATENCY_SIZES,
    ProfileReport,
    benchmark_latency,
    count_macs,
    format_accounting_table,
    format_latency_table,
    write_reports,
)
from .pyramid import final_prediction
from .training import LOSS_MODES, evaluate_levels, train

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3, 4, 5

log = logging.getLogger("rpnet")


# ---------------------------------------------------------------------------
# helpers


def get_device() -> torch.device:
    name = os.environ.get("RPNET_DEVICE", "cpu").strip() or "cpu"
    if name == "auto":
        name = "cuda" if torch.cuda.is_available() else "cpu"
    try:
        device = torch.device(name)
    except RuntimeError as exc:
        raise ConfigError(f"RPNET_DEVICE: {exc}") from exc
    if device.type == "cuda" and not torch.cuda.is_available():
        raise ConfigError(f"RPNET_DEVICE={name} but CUDA is not available")
    return device


def make_run_dir(base, key: dict) -> Path:
    digest = hashlib.sha256(json.dumps(key, sort_keys=True, default=str).encode()).hexdigest()[:10]
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = Path(base) / f"{digest}-{stamp}"
    n = 1
    while run.exists():
        run = Path(base) / f"{digest}-{stamp}-{n}"
        n += 1
    run.mkdir(parents=True)
    return run


def _clean(v):
    """NaN -> None recursively so the JSON stays standard."""
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (float, np.floating)):
        return None if math.isnan(v) else round(float(v), 6)
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_json(path, data) -> Path:
    Path(path).write_text(json.dumps(_clean(data), indent=2, sort_keys=True) + "\n")
    return Path(path)


def dataset_info(ds_cfg: config_io.DatasetConfig, split: str):
    """Dataset for one split plus its class names and palette."""
    if ds_cfg.kind == "synthetic":
        spec = ds_cfg.synthetic
        if split == ds_cfg.val_split:
            spec = replace(spec, seed=spec.seed + 1, num_images=ds_cfg.val_images)
        elif split != ds_cfg.train_split:
            raise ConfigError(f"synthetic data has splits {ds_cfg.train_split!r} and {ds_cfg.val_split!r}")
        ds = generate_synthetic(spec)
        return ds, list(spec.class_names), [list(c) for c in spec.palette]
    try:
        if ds_cfg.kind == "camvid":
            spec = DatasetSpec.camvid(ds_cfg.root, split)
        elif ds_cfg.kind == "cityscapes":
            spec = DatasetSpec.cityscapes(ds_cfg.root, split)
        else:
            spec = DatasetSpec.folder(ds_cfg.root, split)
    except ValueError as exc:
        raise ConfigError(f"dataset: {exc}") from exc
    return SegmentationFolder(spec), list(spec.class_names), [list(c) for c in spec.palette]


def _require_samples(ds, split):
    if len(ds) == 0:
        raise DataError(f"no samples in split {split!r}")


def level_predictions(model: RPNet, image: torch.Tensor, max_level=None):
    """Per-level label maps at native scale plus the final full-size map.

    Inputs whose size is not a multiple of the coarsest stride are
    reflect-padded at the bottom/right and the outputs cropped back.
    """
    factor = model.level_scale(1).denominator
    h, w = image.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    x = image[None]
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    model.eval()
    with torch.no_grad():
        targets = model(x, max_level=max_level).targets()
        final = final_prediction(targets[-1], x.shape[-2:])[0, :h, :w]
        levels = []
        for lvl, t in enumerate(targets, start=1):
            s = model.level_scale(lvl)
            pred = final_prediction(t, t.shape[-2:])[0]
            levels.append(pred[: math.ceil(h * s), : math.ceil(w * s)])
    return [p.cpu() for p in levels], final.cpu()


def _format_iou(results, class_names) -> str:
    lines = ["level\tclass\tiou"]
    for lvl, res in results.items():
        for name, v in zip(class_names, res.per_class):
            lines.append(f"{lvl}\t{name}\t{'nan' if math.isnan(v) else f'{v:.4f}'}")
        lines.append(f"{lvl}\tmIoU\t{res.mean:.4f}")
    return "\n".join(lines) + "\n"


def _iou_dict(results):
    return {str(k): {"miou": r.mean, "per_class": list(r.per_class)} for k, r in results.items()}


# ---------------------------------------------------------------------------
# commands


def build_model(cfg: config_io.RunConfig, num_classes: int) -> RPNet:
    torch.manual_seed(cfg.seed)
    m = cfg.model
    return RPNet(num_classes, residual_mode=m.residual_mode, predictor=m.predictor,
                 num_levels=m.num_levels, dropout=m.dropout, early_dropout=m.early_dropout)


def _apply_overrides(cfg: config_io.RunConfig, args) -> config_io.RunConfig:
    train_kw = {}
    for name in ("base_lr", "weight_decay", "batch_size", "lr_power", "class_weight_k", "loss_mode"):
        v = getattr(args, name, None)
        if v is not None:
            train_kw[name] = v
    if args.epochs is not None:
        train_kw["stage_plan"] = [(lvl, args.epochs) for lvl, _ in cfg.train.stage_plan]
    data = cfg.to_dict()
    data["train"].update({k: ([list(s) for s in v] if k == "stage_plan" else v) for k, v in train_kw.items()})
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out_dir is not None:
        data["out_dir"] = args.out_dir
    return config_io.from_dict(data)


def cmd_train(args) -> int:
    if args.dump_config:
        sys.stdout.write(config_io.dumps(config_io.RunConfig()))
        return EXIT_OK
    cfg = config_io.load(args.config) if args.config else config_io.RunConfig()
    cfg = _apply_overrides(cfg, args)
    device = get_device()
    train_set, class_names, palette = dataset_info(cfg.dataset, cfg.dataset.train_split)
    _require_samples(train_set, cfg.dataset.train_split)
    val_set, _, _ = dataset_info(cfg.dataset, cfg.dataset.val_split)
    eval_set, eval_split = (val_set, cfg.dataset.val_split) if len(val_set) else (train_set, cfg.dataset.train_split)

    model = build_model(cfg, len(class_names)).to(device)
    run = make_run_dir(cfg.out_dir, {"cmd": "train", "config": cfg.hash()})
    config_io.save(cfg, run / "config.yaml")
    extra = {"config": cfg.to_dict(), "config_hash": cfg.hash(),
             "class_names": class_names, "palette": palette}

    def on_stage_end(stage, net):
        save_checkpoint(net, run / f"stage{stage}.pt", {**extra, "stage": stage})

    log.info("training into %s", run)
    result = train(model, train_set, cfg.train, val_set=val_set if len(val_set) else None,
                   log_path=run / "train_log.jsonl", on_stage_end=on_stage_end)
    save_checkpoint(model, run / "model.pt", extra)

    top = cfg.train.top_level
    results = evaluate_levels(model, eval_set, range(1, top + 1), len(class_names),
                              batch_size=cfg.train.eval_batch_size)
    image, label = eval_set[0]
    size = tuple(image.shape)
    summary = {
        "config_hash": cfg.hash(),
        "model": model.config(),
        "params": count_parameters(model),
        "macs": count_macs(model, size),
        "macs_input": list(size),
        "loss_mode": cfg.train.loss_mode,
        "stages": [list(s) for s in cfg.train.stages()],
        "iterations": len(result.iteration_losses()),
        "eval_split": eval_split,
        "levels": _iou_dict(results),
        "final_level": str(top),
        "final_miou": results[top].mean,
    }
    write_json(run / "summary.json", summary)
    (run / "summary.tsv").write_text(_format_iou(results, class_names))
    plotting.training_curves(result.history, run / "curves.png")
    plotting.iou_bars(results, class_names, run / "iou.png")
    levels, final = level_predictions(model.cpu(), image, top)
    plotting.pyramid_panel(image.numpy(), [p.numpy() for p in levels], final.numpy(),
                           palette, run / "pyramid.png", gt=label.numpy())

    sys.stdout.write(_format_iou(results, class_names))
    sys.stdout.write(f"params\t{summary['params']}\nmacs\t{summary['macs']}\nrun_dir\t{run}\n")
    return EXIT_OK


def _load_for_eval(path, device):
    model, payload = load_checkpoint(path, map_location=device)
    return model.to(device), payload.get("extra", {})


def _eval_dataset_config(args, extra) -> config_io.DatasetConfig:
    if args.config:
        return config_io.load(args.config).dataset
    if args.kind:
        return config_io.DatasetConfig(kind=args.kind, root=args.root)
    if "config" in extra:
        return config_io.from_dict(extra["config"]).dataset
    raise ConfigError("eval needs --config or --kind/--root to locate the dataset")


def cmd_eval(args) -> int:
    device = get_device()
    model, extra = _load_for_eval(args.checkpoint, device)
    ds_cfg = _eval_dataset_config(args, extra)
    split = args.split or ds_cfg.val_split
    ds, class_names, palette = dataset_info(ds_cfg, split)
    if len(class_names) != model.num_classes:
        raise ConfigError(
            f"checkpoint predicts {model.num_classes} classes, dataset has {len(class_names)}"
        )
    _require_samples(ds, split)
    levels = [lvl if lvl == "final" else int(lvl) for lvl in (args.level or ["final"])]
    bad = [lvl for lvl in levels if lvl != "final" and not 1 <= lvl <= model.num_levels]
    if bad:
        raise ConfigError(f"--level {bad[0]}: model has levels 1..{model.num_levels}")
    results = evaluate_levels(model, ds, levels, model.num_classes)
    run = make_run_dir(args.out_dir, {"cmd": "eval", "checkpoint": str(Path(args.checkpoint).resolve()),
                                      "split": split, "levels": levels})
    write_json(run / "eval.json", {"split": split, "num_samples": len(ds), "levels": _iou_dict(results)})
    (run / "eval.tsv").write_text(_format_iou(results, class_names))
    plotting.iou_bars(results, class_names, run / "iou.png")
    sys.stdout.write(_format_iou(results, class_names))
    sys.stdout.write(f"run_dir\t{run}\n")
    return EXIT_OK


def _palette_for(model, extra):
    palette = extra.get("palette")
    if palette and len(palette) == model.num_classes:
        return palette
    rng = np.random.default_rng(0)
    return rng.integers(0, 256, size=(model.num_classes, 3)).tolist()


def cmd_infer(args) -> int:
    device = get_device()
    model, extra = _load_for_eval(args.checkpoint, device)
    palette = _palette_for(model, extra)
    images = [(p, load_image(p).to(device)) for p in args.images]
    run = make_run_dir(args.out_dir, {"cmd": "infer", "checkpoint": str(Path(args.checkpoint).resolve()),
                                      "images": [str(p) for p in args.images]})
    print("image\tfile")
    for img_path, image in images:
        levels, final = level_predictions(model, image)
        stem = Path(img_path).stem
        out = export_prediction(final.numpy(), palette, run / f"{stem}.png")
        print(f"{img_path}\t{out}")
        if args.dump_pyramid:
            for lvl, pred in enumerate(levels, start=1):
                out = export_prediction(pred.numpy(), palette, run / f"{stem}_level{lvl}.png")
                print(f"{img_path}\t{out}")
        if args.panel:
            plotting.pyramid_panel(image.cpu().numpy(), [p.numpy() for p in levels], final.numpy(),
                                   palette, run / "panels" / f"{stem}.png")
    print(f"run_dir\t{run}")
    return EXIT_OK


def parse_size(text: str) -> tuple[int, int]:
    """``WxH`` (as in 480x320) to ``(H, W)``."""
    parts = text.lower().replace("×", "x").split("x")
    try:
        w, h = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 480x320, got {text!r}")
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def cmd_profile(args) -> int:
    device = get_device()
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        name = Path(args.checkpoint).stem
    else:
        cfg = config_io.load(args.config) if args.config else config_io.RunConfig()
        model = build_model(cfg, args.num_classes)
        name = f"rpnet-{cfg.model.residual_mode}-{'gp' if model.predictor_kind == 'guided' else 'bp'}"
    h, w = args.input
    size = (3, h, w)
    net = ProfileReport(name, count_parameters(model), count_macs(model, size), size)
    enc = ProfileReport("encoder", count_parameters(model.backbone), count_macs(model.backbone, size), size)
    if not args.no_latency:
        net.latency = benchmark_latency(model.to(device), args.sizes, args.warmup, args.repeats)
    reports = [enc, net]
    run = make_run_dir(args.out_dir, {"cmd": "profile", "name": name, "input": size,
                                      "sizes": args.sizes, "latency": not args.no_latency})
    write_reports(reports, run)
    if net.latency:
        plotting.latency_chart([net], run / "latency.png")
    sys.stdout.write(format_accounting_table(reports))
    if net.latency:
        sys.stdout.write("\n" + format_latency_table([net]))
    sys.stdout.write(f"\nrun_dir\t{run}\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SyntheticSpec(seed=args.seed, num_images=args.num_images, image_size=tuple(args.image_size),
                         num_classes=args.classes, thin_prob=args.thin_prob, noise=args.noise)
    root = Path(args.out)
    train_ds = generate_synthetic(spec)
    write_dataset(train_ds, root, "train")
    if args.val_images:
        write_dataset(generate_synthetic(replace(spec, seed=spec.seed + 1, num_images=args.val_images)),
                      root, "val")
    print("split\timages\troot")
    print(f"train\t{len(train_ds)}\t{root}")
    if args.val_images:
        print(f"val\t{args.val_images}\t{root}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rpnet", description="Residual pyramid segmentation network.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network from a run config")
    t.add_argument("--config", help="YAML run config (default: built-in synthetic config)")
    t.add_argument("--dump-config", action="store_true", help="print the default config and exit")
    t.add_argument("--out-dir", help="parent of the run directory (config: out_dir, default runs)")
    t.add_argument("--seed", type=int, help="override the config seed (default 0)")
    t.add_argument("--epochs", type=int, help="epochs for every stage of the plan")
    t.add_argument("--loss-mode", choices=LOSS_MODES, help="level_wise (default) or a joint mode")
    t.add_argument("--lr", dest="base_lr", type=float, help="base learning rate (default 5e-4)")
    t.add_argument("--lr-power", type=float, help="poly decay power (default 0.9)")
    t.add_argument("--weight-decay", type=float, help="Adam weight decay (default 1e-4)")
    t.add_argument("--batch-size", type=int, help="batch size (default 3)")
    t.add_argument("--class-weight-k", type=float, help="k in 1/ln(P+k) (default 1.12)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="run config whose dataset section to use")
    e.add_argument("--kind", choices=config_io.DATASET_KINDS, help="dataset kind, instead of --config")
    e.add_argument("--root", help="dataset root for --kind")
    e.add_argument("--split", help="split to score (default: the config's val split)")
    e.add_argument("--level", action="append", choices=["1", "2", "3", "final"],
                   help="pyramid level to score; repeatable (default final)")
    e.add_argument("--out-dir", default="runs")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict label maps for images")
    i.add_argument("checkpoint")
    i.add_argument("images", nargs="+")
    i.add_argument("--dump-pyramid", action="store_true", help="also write every level's prediction")
    i.add_argument("--panel", action="store_true", help="also render a side-by-side figure per image")
    i.add_argument("--out-dir", default="runs")
    i.set_defaults(func=cmd_infer)

    f = sub.add_parser("profile", help="parameter, MAC and latency accounting")
    f.add_argument("--checkpoint")
    f.add_argument("--config")
    f.add_argument("--num-classes", type=int, default=12, help="classes when no checkpoint (default 12)")
    f.add_argument("--input", type=parse_size, default=(360, 480), help="WxH for MACs (default 480x360)")
    f.add_argument("--sizes", type=parse_size, nargs="+", default=list(LATENCY_SIZES),
                   help="WxH latency sizes (default 480x320 640x360 1280x720 1920x1080)")
    f.add_argument("--warmup", type=int, default=3)
    f.add_argument("--repeats", type=int, default=10)
    f.add_argument("--no-latency", action="store_true", help="skip timing")
    f.add_argument("--out-dir", default="runs")
    f.set_defaults(func=cmd_profile)

    s = sub.add_parser("synth", help="write the synthetic shapes dataset to disk")
    s.add_argument("out")
    d = SyntheticSpec()
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--num-images", type=int, default=d.num_images)
    s.add_argument("--val-images", type=int, default=32)
    s.add_argument("--image-size", type=int, nargs=2, default=list(d.image_size), metavar=("H", "W"))
    s.add_argument("--classes", type=int, default=d.num_classes)
    s.add_argument("--thin-prob", type=float, default=d.thin_prob)
    s.add_argument("--noise", type=float, default=d.noise)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except RPNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
