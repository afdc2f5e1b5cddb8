"""Synthetic end-to-end benchmark: every stage of the pipeline on generated data."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np

from .config import PipelineConfig, preset, save_config
from .data import SyntheticCorpus, render_synthetic_image, split_dataset, stack_gt, stack_pixels, write_split_manifest
from .maskgen import generate_mask_set
from .metrics import evaluate, mean_dice
from .records import write_manifest
from .stage1 import PseudoLabelGenerator, pretrain_vae
from .stage2 import NoisyLabelSegmenter, write_round_report

log = logging.getLogger(__name__)

STAGE2_LOSSES = ("noise_weighted_dice", "dice")


def synthetic_corpus(cfg: PipelineConfig) -> tuple[SyntheticCorpus, np.ndarray]:
    """Rendered images split into train/val/test, plus unpaired auxiliary masks.

    The training part carries no ground truth; the hidden masks are returned
    in ``hidden_train_gt`` for scoring pseudo labels only.
    """
    seeds = cfg.seeds()
    masks = generate_mask_set(cfg.data.n_images, cfg.prior, cfg.canvas, seeds["masks"])
    rng = np.random.default_rng(seeds["render"])
    samples = [render_synthetic_image(m, cfg.render, rng, id=f"img{i:05d}") for i, m in enumerate(masks.masks)]
    split = split_dataset(samples, cfg.data.split, seeds["split"])
    by_id = {s.id: s.gt_mask.pixels for s in samples}
    hidden = {s.id: by_id[s.id] for s in split.train}
    aux = generate_mask_set(cfg.data.n_aux_masks, cfg.prior, cfg.canvas, seeds["aux"]).to_array()
    return SyntheticCorpus(split, hidden), aux


def bench_synthetic(cfg: PipelineConfig | str = "tiny", seed: int | None = None, out=None,
                    losses=STAGE2_LOSSES) -> dict:
    """Run masks -> images -> VAE -> stage 1 -> pseudo labels -> LQSS -> stage 2 -> test.

    Stage 2 runs once per entry of ``losses`` from the same pseudo labels and
    seed. Returns the report dict, also written to ``out/report.json`` when
    ``out`` is given.
    """
    if isinstance(cfg, str):
        cfg = preset(cfg)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    out = Path(out) if out is not None else None
    if out is not None:
        save_config(cfg, out)
    seeds = cfg.seeds()
    timings = {}
    t0 = time.perf_counter()

    corpus, aux = synthetic_corpus(cfg)
    split = corpus.split
    if out is not None:
        write_split_manifest(split, out / "split.csv")
    train_ids = [s.id for s in split.train]
    X_train = stack_pixels(split.train)
    X_val, y_val = stack_pixels(split.val), stack_gt(split.val)
    X_test = stack_pixels(split.test)
    hidden = np.stack([corpus.hidden_train_gt[i] for i in train_ids])

    vae_history = []
    vae = pretrain_vae(aux, cfg.net, cfg.stage1.vae, seeds["vae"], vae_history, cfg.device)
    timings["vae"] = time.perf_counter() - t0

    t = time.perf_counter()
    stage1 = PseudoLabelGenerator(
        cfg.net, cfg.stage1, vae, seeds["stage1"], log_path=out / "stage1_metrics.csv" if out else None,
        checkpoint_dir=out / "stage1" if out else None, device=cfg.device)
    stage1.fit(X_train, aux, X_val, y_val)
    records = stage1.generate_pseudo_labels(X_train, train_ids)
    timings["stage1"] = time.perf_counter() - t
    pseudo = np.stack([r.mask for r in records])
    report = {
        "preset": cfg.preset,
        "seed": cfg.seed,
        "n_train": len(split.train), "n_val": len(split.val), "n_test": len(split.test),
        "vae_final_loss": vae_history[-1]["loss"] if vae_history else None,
        "stage1_pseudo_dice": mean_dice(pseudo, hidden),
        "stage1_test_dice": evaluate(stage1.predict_proba, split.test, cfg.metrics.spacing).summary()["dice_mean"],
        "stage1_history": stage1.history_,
        "stage2": {},
    }
    if out is not None:
        write_manifest(records, out)

    images_by_id = dict(zip(train_ids, X_train))
    for loss in losses:
        t = time.perf_counter()
        seg = NoisyLabelSegmenter(cfg.net, dataclasses.replace(cfg.stage2, loss=loss), cfg.lqss,
                                  seeds["stage2"], cfg.device)
        seg.fit_records(images_by_id, records, X_val, y_val)
        if loss == losses[0]:
            selected = [corpus.hidden_train_gt[i] for i in seg.selected_ids_]
            chosen = {r.image_id: r.mask for r in records}
            report["lqss_selected_dice"] = mean_dice(np.stack([chosen[i] for i in seg.selected_ids_]),
                                                     np.stack(selected))
            report["lqss_n_selected"] = len(seg.selected_ids_)
        ev = evaluate(seg.predict_proba, split.test, cfg.metrics.spacing)
        summary = ev.summary()
        report["stage2"][loss] = {
            "final_test_dice": summary["dice_mean"],
            "final_test_assd": summary["assd_mean"],
            "assd_excluded": summary["assd_excluded"],
            "rounds": [dataclasses.asdict(r) for r in seg.rounds_],
        }
        timings[f"stage2_{loss}"] = time.perf_counter() - t
        if out is not None:
            write_round_report(seg.rounds_, out / f"stage2_{loss}_rounds.csv")
            ev.to_csv(out / f"eval_{loss}.csv")
            ev.to_json(out / f"eval_{loss}.json")
            seg.save(out / f"stage2_{loss}.pt")
        log.info("stage2 %s: test dice %.4f", loss, summary["dice_mean"])
    report["final_test_dice"] = report["stage2"][losses[0]]["final_test_dice"]
    timings["total"] = time.perf_counter() - t0
    if out is not None:
        (out / "report.json").write_text(json.dumps(report, indent=2, default=_json_default))
        (out / "timings.json").write_text(json.dumps(timings, indent=2))
    report["timings"] = timings
    return report


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
