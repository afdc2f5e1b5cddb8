"""Command-line entry point: ``pseudoseg <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as C
from .data import load_image_directory, read_split_manifest, render_synthetic_image, split_dataset, \
    stack_gt, stack_pixels, write_image_directory, write_split_manifest
from .exceptions import ConfigurationError, DataError, DivergenceError, PseudoSegError, ShapeError
from .maskgen import generate_mask_set, load_auxiliary_masks, write_mask_set
from .metrics import evaluate, save_overlay
from .nets import load_checkpoint, save_checkpoint
from .records import read_manifest, write_manifest
from .stage1 import PseudoLabelGenerator, pretrain_vae
from .stage2 import NoisyLabelSegmenter, write_round_report

log = logging.getLogger("pseudoseg")


# --- helpers -------------------------------------------------------------------

def _parse_set(items) -> dict:
    """``["stage1.lr=0.001", ...]`` -> nested mapping with YAML-typed values."""
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def _config(args) -> C.PipelineConfig:
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return C.load_config(args.config, args.preset, overrides)


def _out(args, cfg) -> Path:
    out = C.output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    C.save_config(cfg, out)
    return out


def _splits(data_dir, cfg) -> dict:
    """Samples of ``data_dir`` grouped by ``split.csv``; everything is train without one."""
    samples = load_image_directory(data_dir, cfg.data.resize_to, cfg.data.crop)
    manifest = Path(data_dir) / "split.csv"
    table = read_split_manifest(manifest) if manifest.is_file() else {s.id: "train" for s in samples}
    groups = {"train": [], "val": [], "test": []}
    for s in samples:
        name = table.get(s.id)
        if name is None:
            continue
        groups[name].append(s.without_gt() if name == "train" else s)
    return groups


def _aux_masks(path, cfg) -> np.ndarray:
    return load_auxiliary_masks(path, cfg.net.image_size, cfg.canvas.pixel_size).to_array()


def _val(groups):
    val = [s for s in groups["val"] if s.gt_mask is not None]
    return (stack_pixels(val), stack_gt(val)) if val else (None, None)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=lambda o: o.item() if hasattr(o, "item") else str(o)))


# --- commands ------------------------------------------------------------------

def cmd_maskgen_generate(args, cfg):
    out = _out(args, cfg)
    n = args.n if args.n is not None else cfg.data.n_aux_masks
    ms = generate_mask_set(n, cfg.prior, cfg.canvas, cfg.seeds()["aux"])
    write_mask_set(ms, out)
    with open(out / "params.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "center_x", "center_y", "minor_axis_mm", "aspect_ratio", "orientation"])
        for i, p in enumerate(ms.params):
            writer.writerow([f"mask_{i:05d}.png", p.center_x, p.center_y, p.minor_axis, p.aspect_ratio,
                             p.orientation])
    print(f"wrote {n} masks to {out}")


def cmd_synth_render(args, cfg):
    out = _out(args, cfg)
    seeds = cfg.seeds()
    if args.masks is not None:
        masks = load_auxiliary_masks(args.masks, cfg.net.image_size, cfg.canvas.pixel_size).masks
    else:
        n = args.n if args.n is not None else cfg.data.n_images
        masks = generate_mask_set(n, cfg.prior, cfg.canvas, seeds["masks"]).masks
    rng = np.random.default_rng(seeds["render"])
    samples = [render_synthetic_image(m, cfg.render, rng, id=f"img{i:05d}") for i, m in enumerate(masks)]
    write_image_directory(samples, out)
    split = split_dataset(samples, cfg.data.split, seeds["split"])
    write_split_manifest(split, out / "split.csv")
    print(f"rendered {len(samples)} images to {out} "
          f"(train {len(split.train)}, val {len(split.val)}, test {len(split.test)})")


def cmd_vae_pretrain(args, cfg):
    out = _out(args, cfg)
    history = []
    vae = pretrain_vae(_aux_masks(args.masks, cfg), cfg.net, cfg.stage1.vae, cfg.seeds()["vae"], history,
                       cfg.device)
    save_checkpoint(out / "vae.pt", vae, epoch=cfg.stage1.vae.epochs)
    with open(out / "vae_history.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "mse", "kl"])
        writer.writeheader()
        writer.writerows({k: repr(v) if isinstance(v, float) else v for k, v in row.items()} for row in history)
    print(f"vae final loss {history[-1]['loss']:.6f}; saved {out / 'vae.pt'}")


def cmd_train_stage1(args, cfg):
    out = _out(args, cfg)
    groups = _splits(args.data, cfg)
    if not groups["train"]:
        raise DataError(f"{args.data} has no training images")
    vae = None
    if args.vae is not None:
        if not Path(args.vae).is_file():
            raise DataError(f"VAE checkpoint {args.vae} does not exist")
        vae, _ = load_checkpoint(args.vae, cfg.device)
    X_val, y_val = _val(groups)
    est = PseudoLabelGenerator(cfg.net, cfg.stage1, vae, cfg.seeds()["stage1"], out / "metrics.csv",
                               out / "checkpoints", cfg.device)
    est.fit(stack_pixels(groups["train"]), _aux_masks(args.masks, cfg), X_val, y_val)
    _write_json(out / "history.json", est.history_)
    print(f"stage 1 trained for {cfg.stage1.total_epochs} epochs; checkpoints in {out / 'checkpoints'}")


def cmd_pseudo_export(args, cfg):
    out = _out(args, cfg)
    ckpt = Path(args.checkpoint)
    if not (ckpt / "G_A.pt").is_file():
        raise DataError(f"{ckpt} holds no stage-1 checkpoint")
    est = PseudoLabelGenerator.from_checkpoint(ckpt, cfg.net, cfg.stage1, cfg.device)
    train = _splits(args.data, cfg)["train"]
    if not train:
        raise DataError(f"{args.data} has no training images")
    records = est.generate_pseudo_labels(stack_pixels(train), [s.id for s in train], args.turns)
    path = write_manifest(records, out)
    print(f"wrote {len(records)} pseudo labels; manifest {path}")


def cmd_train_stage2(args, cfg):
    out = _out(args, cfg)
    groups = _splits(args.data, cfg)
    images_by_id = {s.id: s.pixels for s in groups["train"]}
    records = read_manifest(args.manifest)
    X_val, y_val = _val(groups)
    stage2 = cfg.stage2
    if X_val is None and stage2.validation == "gt":
        log.warning("no validation ground truth; falling back to agreement validation")
        stage2 = dataclasses.replace(stage2, validation="agreement")
    seg = NoisyLabelSegmenter(cfg.net, stage2, cfg.lqss, cfg.seeds()["stage2"], cfg.device)
    seg.fit_records(images_by_id, records, X_val, y_val)
    seg.save(out / "model.pt")
    write_round_report(seg.rounds_, out / "rounds.csv")
    (out / "selected_ids.txt").write_text("\n".join(seg.selected_ids_) + "\n")
    print(f"stage 2 finished after {len(seg.rounds_)} rounds; model {out / 'model.pt'}")


def cmd_evaluate(args, cfg):
    out = _out(args, cfg)
    if not Path(args.model).is_file():
        raise DataError(f"model {args.model} does not exist")
    seg = NoisyLabelSegmenter.load(args.model, cfg.device)
    samples = _splits(args.data, cfg)[args.split]
    if not samples:
        raise DataError(f"{args.data} has no {args.split} images")
    report = evaluate(seg, samples, cfg.metrics.spacing)
    report.to_csv(out / "eval.csv")
    report.to_json(out / "eval.json")
    if args.overlays:
        probs = seg.predict_proba(stack_pixels(samples))
        for s, p in zip(samples[:args.overlays], probs):
            save_overlay(s.pixels, p >= 0.5, s.gt_mask.pixels, out / "overlays" / f"{s.id}.png", s.id)
    summary = report.summary()
    print(json.dumps(summary))


def cmd_bench_synthetic(args, cfg):
    from .bench import bench_synthetic

    out = _out(args, cfg)
    report = bench_synthetic(cfg, out=out)
    print(json.dumps({k: report[k] for k in ("stage1_pseudo_dice", "final_test_dice")}
                     | {f"final_test_dice_{k}": v["final_test_dice"] for k, v in report["stage2"].items()}))


# --- parser ----------------------------------------------------------------------

def _common(p, out_required=True):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--preset", choices=C.PRESETS, help="base preset (default: the config's, else full)")
    p.add_argument("--seed", type=int, help="top-level seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. stage1.lr=1e-4")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pseudoseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    maskgen = sub.add_parser("maskgen", help="auxiliary mask generation").add_subparsers(dest="action", required=True)
    p = maskgen.add_parser("generate", help="sample ellipse masks from the shape prior")
    _common(p)
    p.add_argument("--n", type=int, help="number of masks (default: data.n_aux_masks)")
    p.set_defaults(func=cmd_maskgen_generate)

    synth = sub.add_parser("synth", help="synthetic images").add_subparsers(dest="action", required=True)
    p = synth.add_parser("render", help="render images from masks and write a data directory with a split")
    _common(p)
    p.add_argument("--masks", help="mask directory (default: sample data.n_images masks)")
    p.add_argument("--n", type=int, help="number of masks to sample when --masks is absent")
    p.set_defaults(func=cmd_synth_render)

    vae = sub.add_parser("vae", help="shape VAE").add_subparsers(dest="action", required=True)
    p = vae.add_parser("pretrain", help="pretrain the shape VAE on auxiliary masks")
    _common(p)
    p.add_argument("--masks", required=True)
    p.set_defaults(func=cmd_vae_pretrain)

    p = sub.add_parser("train-stage1", help="train the image/mask translator")
    _common(p)
    p.add_argument("--data", required=True, help="directory with images/ [labels/] [split.csv]")
    p.add_argument("--masks", required=True, help="auxiliary mask directory")
    p.add_argument("--vae", help="pretrained vae.pt (pretrained on --masks when omitted)")
    p.set_defaults(func=cmd_train_stage1)

    pseudo = sub.add_parser("pseudo", help="pseudo labels").add_subparsers(dest="action", required=True)
    p = pseudo.add_parser("export", help="write pseudo labels and their manifest for the training split")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint directory")
    p.add_argument("--data", required=True)
    p.add_argument("--turns", type=int, help="calibration turns (default: stage1.dgcc_turns)")
    p.set_defaults(func=cmd_pseudo_export)

    p = sub.add_parser("train-stage2", help="train the segmenter from a pseudo-label manifest")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True, help="CSV with id, mask_path, score")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("evaluate", help="Dice/ASSD of a stage-2 model on a labelled split")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--overlays", type=int, default=0, help="write contour overlays for the first N samples")
    p.set_defaults(func=cmd_evaluate)

    bench = sub.add_parser("bench", help="benchmarks").add_subparsers(dest="action", required=True)
    p = bench.add_parser("synthetic", help="whole pipeline on generated data")
    _common(p, out_required=False)
    p.set_defaults(func=cmd_bench_synthetic, out_default="bench")
    return parser


def run_command(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out", None) is None:
        args.out = getattr(args, "out_default", "out")
    if args.command == "bench" and args.preset is None and args.config is None:
        args.preset = "tiny"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except (ConfigurationError, ShapeError) as exc:
        return _fail(exc, 2)
    except DivergenceError as exc:
        return _fail(exc, 4)
    except (DataError, FileNotFoundError) as exc:
        return _fail(exc, 3)
    except PseudoSegError as exc:
        return _fail(exc, exc.exit_code)
    return 0


def _fail(exc, code) -> int:
    message = " ".join(str(exc).split())
    print(f"pseudoseg: error[{code}] {type(exc).__name__}: {message}", file=sys.stderr)
    return code


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
