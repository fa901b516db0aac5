"""Command-line pipeline: data generation, pretraining, embeddings, probes,
expert analysis, sparsity census, and reconstruction previews.

Configuration precedence per flag: explicit flag > --config JSON > built-in
default. Exit codes: 0 success, 1 runtime failure, 2 usage error. Every
output file is accompanied by a manifest JSON with resolved settings and
artifact checksums.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import analysis, artifacts, probe as probe_mod
from .config import PROFILES, ModelConfig, TrainConfig
from .data import (ArchiveError, SyntheticSpec, generate_synthetic,
                   holdout_split, load_archive, write_archive)
from .model import ChipMAE, patchify, random_mask, unpatchify
from .train import (CheckpointError, NonFiniteLossError, load_checkpoint,
                    pretrain, save_checkpoint)


class _Resolver:
    """Merges flag values over a config-file dict over defaults."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file: dict = {}
        path = getattr(args, "config", None)
        if path:
            with open(path, "r", encoding="utf-8") as f:
                self.file = json.load(f)
            if not isinstance(self.file, dict):
                raise ValueError(f"config file {path} must hold a JSON object")
        self.resolved: dict = {}

    def get(self, key: str, default):
        flag = getattr(self.args, key.replace("-", "_"), None)
        if flag is not None:
            value = flag
        elif key in self.file:
            value = self.file[key]
        else:
            value = default
        self.resolved[key] = value
        return value


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file of setting overrides")
    parser.add_argument("--threads", type=int,
                        help="cap torch intra-op worker threads")


def _model_config(res: _Resolver) -> ModelConfig:
    from dataclasses import replace
    profile = res.get("profile", "default")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = PROFILES[profile]()
    overrides = {key: float(res.get(key, getattr(cfg, key)))
                 for key in ("mask_ratio", "alpha", "beta")}
    return replace(cfg, **overrides)


def _train_config(res: _Resolver) -> TrainConfig:
    base = TrainConfig()
    return TrainConfig(
        epochs=int(res.get("epochs", base.epochs)),
        batch_size=int(res.get("batch_size", base.batch_size)),
        base_lr=float(res.get("lr", base.base_lr)),
        min_lr=float(res.get("min_lr", base.min_lr)),
        warmup_frac=float(res.get("warmup_frac", base.warmup_frac)),
        weight_decay=float(res.get("weight_decay", base.weight_decay)),
        seed=int(res.get("seed", base.seed)),
        decay_all_params=bool(res.get("decay_all_params",
                                      base.decay_all_params)),
    )


def _load_model(path: str) -> tuple[ChipMAE, "object"]:
    ckpt = load_checkpoint(path)
    return ckpt.build_model(), ckpt


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    spec = SyntheticSpec(
        count=int(res.get("count", 512)),
        height=int(res.get("height", 40)),
        width=int(res.get("width", 40)),
        bands=int(res.get("bands", 7)),
        label_mode=res.get("label_mode", "none"),
        class_count=int(res.get("classes", 0)),
        seed=int(res.get("seed", 0)),
        metadata=not bool(res.get("no_metadata", False)),
    )
    chips = generate_synthetic(spec)
    write_archive(chips, args.out, class_count=spec.class_count or None)
    manifest = artifacts.RunManifest("gen-data", res.resolved, seed=spec.seed)
    manifest.add_output("archive", args.out)
    manifest.write(artifacts.manifest_path_for(args.out))
    print(f"wrote {len(chips)} chips to {args.out}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    model_cfg = _model_config(res)
    train_cfg = _train_config(res)
    archive = load_archive(args.data)
    if len(archive) == 0:
        raise ValueError(f"archive {args.data} is empty")
    if (archive.header.height, archive.header.width,
            archive.header.bands) != (model_cfg.height, model_cfg.width,
                                      model_cfg.bands):
        raise ValueError(
            f"archive geometry {archive.header.height}x{archive.header.width}"
            f"x{archive.header.bands} does not match profile "
            f"{model_cfg.height}x{model_cfg.width}x{model_cfg.bands}")
    chips = list(archive)
    stats = archive.stats()

    model = ChipMAE(model_cfg)
    opt, log = pretrain(model, chips, train_cfg, stats=stats)

    os.makedirs(args.out_dir, exist_ok=True)
    ckpt_path = os.path.join(args.out_dir, "checkpoint.gmoe")
    metrics_path = os.path.join(args.out_dir, "metrics.csv")
    record = {"epochs": train_cfg.epochs, "seed": train_cfg.seed,
              "chips": len(chips)}
    save_checkpoint(ckpt_path, model, train_record=record, band_stats=stats,
                    optimizer=opt if args.save_optimizer else None)
    log.write(metrics_path)
    manifest = artifacts.RunManifest(
        "pretrain", {**res.resolved, "model": model_cfg.to_dict()},
        seed=train_cfg.seed, inputs={"archive": args.data})
    manifest.add_output("checkpoint", ckpt_path)
    manifest.add_output("metrics", metrics_path)
    manifest.write(os.path.join(args.out_dir, "manifest.json"))
    if log.rows:
        print(f"pretrained {train_cfg.epochs} epochs; "
              f"final l_total {log.rows[-1].l_total:.6f}")
    else:
        print("pretrained 0 epochs; checkpoint equals initialization")
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    model, ckpt = _load_model(args.checkpoint)
    archive = load_archive(args.data)
    chips = list(archive)
    mode = res.get("mode", "cls")
    feats = probe_mod.extract_embeddings(model, chips, mode,
                                         stats=ckpt.band_stats)
    if args.out.endswith(".csv"):
        artifacts.save_matrix_csv(args.out, feats)
    else:
        artifacts.save_raw_tensor(args.out, feats.astype(np.float32))
    manifest = artifacts.RunManifest("embed", res.resolved,
                                     inputs={"archive": args.data,
                                             "checkpoint": args.checkpoint})
    manifest.add_output("embeddings", args.out)
    manifest.write(artifacts.manifest_path_for(args.out))
    print(f"wrote {feats.shape[0]}x{feats.shape[1]} embeddings ({mode}) to {args.out}")
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    model, ckpt = _load_model(args.checkpoint)
    archive = load_archive(args.data)
    if archive.header.label_mode == "none":
        raise ValueError("probe needs a labelled archive")
    task = res.get("task", "multi" if archive.header.label_mode == "multi"
                   else "single")
    chips = list(archive)
    mode = res.get("mode", "cls")
    seed = int(res.get("seed", 0))
    holdout = float(res.get("holdout_frac", 0.25))
    feats = probe_mod.extract_embeddings(model, chips, mode,
                                         stats=ckpt.band_stats)
    targets = probe_mod.labels_to_targets(chips, archive.header.class_count,
                                          task)
    train_idx, test_idx = holdout_split(archive, holdout, seed)
    linear = probe_mod.train_probe(
        feats[train_idx], targets[train_idx], task,
        reg_c=float(res.get("reg_c", 1.0)),
        max_iter=int(res.get("max_iter", 1000)))
    report = probe_mod.evaluate_probe(linear, feats[test_idx],
                                      targets[test_idx], mode=mode)
    artifacts.atomic_write_text(args.out_json, report.to_json())
    outputs = {"report_json": args.out_json}
    if args.out_csv:
        artifacts.atomic_write_text(args.out_csv, report.to_csv())
        outputs["report_csv"] = args.out_csv
    manifest = artifacts.RunManifest("probe", res.resolved, seed=seed,
                                     inputs={"archive": args.data,
                                             "checkpoint": args.checkpoint})
    for name, path in outputs.items():
        manifest.add_output(name, path)
    manifest.write(artifacts.manifest_path_for(args.out_json))
    summary = (f"OA {report.oa:.4f}" if report.oa is not None
               else f"micro mAP {report.map_micro:.4f}")
    print(f"probe ({task}, {mode}): {summary}")
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    model, ckpt = _load_model(args.checkpoint)
    archive = load_archive(args.data)
    index = int(res.get("chip_index", 0))
    if not 0 <= index < len(archive):
        raise ValueError(f"chip index {index} outside archive of {len(archive)}")
    layer = int(res.get("layer", 0))
    chip = archive[index]
    os.makedirs(args.out_dir, exist_ok=True)
    manifest = artifacts.RunManifest("analyze", res.resolved,
                                     inputs={"archive": args.data,
                                             "checkpoint": args.checkpoint})
    parts = res.get("parts", "contribution,ablation").split(",")
    if "contribution" in parts:
        maps = analysis.contribution_maps(model, chip, layer,
                                          stats=ckpt.band_stats)
        path = os.path.join(args.out_dir, f"contribution_layer{layer}.csv")
        artifacts.atomic_write_text(path, analysis.maps_to_csv(maps, "contribution"))
        manifest.add_output("contribution_csv", path)
        if args.ppm:
            for e in range(maps.experts):
                img = os.path.join(args.out_dir,
                                   f"contribution_layer{layer}_expert{e}.pgm")
                artifacts.write_pgm(img, maps.contribution[:, :, e])
                manifest.add_output(f"contribution_pgm_{e}", img)
    if "ablation" in parts:
        maps = analysis.ablation_maps(model, chip, layer,
                                      stats=ckpt.band_stats,
                                      mode=res.get("ablate_mode", "renormalize"))
        path = os.path.join(args.out_dir, f"ablation_layer{layer}.csv")
        artifacts.atomic_write_text(path, analysis.maps_to_csv(maps, "ablation"))
        manifest.add_output("ablation_csv", path)
        if args.ppm:
            for e in range(maps.experts):
                img = os.path.join(args.out_dir,
                                   f"ablation_layer{layer}_expert{e}.pgm")
                artifacts.write_pgm(img, maps.ablation[:, :, e])
                manifest.add_output(f"ablation_pgm_{e}", img)
    if "histogram" in parts:
        hist = analysis.routing_histogram(model, list(archive), layer,
                                          stats=ckpt.band_stats)
        path = os.path.join(args.out_dir, f"routing_layer{layer}.csv")
        artifacts.atomic_write_text(path, analysis.histogram_to_csv(hist))
        manifest.add_output("routing_csv", path)
    manifest.write(os.path.join(args.out_dir, "manifest.json"))
    print(f"analysis for chip {index}, layer {layer} in {args.out_dir}")
    return 0


def cmd_sparsity(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    _, ckpt = _load_model(args.checkpoint)
    report = analysis.sparsity_report(ckpt.model_config)
    artifacts.atomic_write_text(args.out, report.to_json())
    manifest = artifacts.RunManifest("sparsity", res.resolved,
                                     inputs={"checkpoint": args.checkpoint})
    manifest.add_output("report", args.out)
    manifest.write(artifacts.manifest_path_for(args.out))
    print(f"sparsity report ({len(report.layers)} layers) at {args.out}")
    return 0


def cmd_reconstruct(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    model, ckpt = _load_model(args.checkpoint)
    model.eval()
    archive = load_archive(args.data)
    index = int(res.get("chip_index", 0))
    if not 0 <= index < len(archive):
        raise ValueError(f"chip index {index} outside archive of {len(archive)}")
    ratio = float(res.get("mask_ratio", model.config.mask_ratio))
    seed = int(res.get("seed", 0))
    chip = archive[index]
    stats = ckpt.band_stats or archive.stats()
    from .train import chips_to_tensors
    pixels, meta = chips_to_tensors([chip], stats)
    cfg = model.config

    def _predict(mask_ratio: float) -> np.ndarray:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            pred, _, _, _ = model(pixels, meta, generator=gen,
                                  mask_ratio=mask_ratio, noise=False)
        img = unpatchify(pred, cfg.patch, cfg.height, cfg.width)[0].cpu().numpy()
        return img * stats.std + stats.mean  # back to pixel units

    original = chip.pixels.astype(np.float64)
    full = _predict(0.0)
    masked = _predict(ratio)

    os.makedirs(args.out_dir, exist_ok=True)
    manifest = artifacts.RunManifest("reconstruct", res.resolved, seed=seed,
                                     inputs={"archive": args.data,
                                             "checkpoint": args.checkpoint})
    lo = float(original.min())
    hi = float(original.max())
    for name, img in (("original", original), ("full", full),
                      ("masked", masked)):
        raw = os.path.join(args.out_dir, f"{name}.f32")
        artifacts.save_raw_tensor(raw, img.astype(np.float32))
        manifest.add_output(f"{name}_raw", raw)
        ppm = os.path.join(args.out_dir, f"{name}.ppm")
        artifacts.write_ppm(ppm, artifacts.chip_to_rgb(img), lo=lo, hi=hi)
        manifest.add_output(f"{name}_ppm", ppm)
    manifest.write(os.path.join(args.out_dir, "manifest.json"))
    print(f"reconstructions for chip {index} in {args.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chipmae",
        description="Metadata-aware MoE masked autoencoder for "
                    "multispectral chips")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic chip archive")
    _add_common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--bands", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--label-mode", choices=("none", "single", "multi"))
    p.add_argument("--seed", type=int)
    p.add_argument("--no-metadata", action="store_const", const=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--min-lr", type=float)
    p.add_argument("--warmup-frac", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--save-optimizer", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("embed", help="extract frozen-encoder embeddings")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=probe_mod.MODES)
    p.add_argument("--out", required=True,
                   help=".csv writes text; anything else raw f32 + sidecar")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("probe", help="train and score a linear probe")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=probe_mod.MODES)
    p.add_argument("--task", choices=("single", "multi"))
    p.add_argument("--holdout-frac", type=float)
    p.add_argument("--reg-c", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-json", required=True)
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("analyze", help="expert contribution/ablation maps")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--chip-index", type=int)
    p.add_argument("--layer", type=int)
    p.add_argument("--parts", help="comma list: contribution,ablation,histogram")
    p.add_argument("--ablate-mode", choices=("renormalize", "reroute"))
    p.add_argument("--ppm", action="store_true",
                   help="also write per-expert grayscale maps")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sparsity", help="capacity-usage census of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sparsity)

    p = sub.add_parser("reconstruct", help="write reconstruction previews")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--chip-index", type=int)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_reconstruct)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None):
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (ArchiveError, CheckpointError, NonFiniteLossError, ValueError,
            OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
