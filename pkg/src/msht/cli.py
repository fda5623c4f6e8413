"""Command-line entry point: synthetic data, training, evaluation, ablation
sweeps, and heatmap export.

Configuration comes from a flat key = value text file (see DEFAULT_CONFIG for
the schema); command-line flags override file values. All randomness flows
from --seed, which defaults to 0. Every artifact is written under --out.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from .backbone import BackboneConfig
from .datapipe import (AugmentConfig, SynthSpec, load_dataset, preprocess_eval,
                       synth_generate, write_synth_dataset)
from .fgd import FgdConfig, VARIANT_NAMES, resolve_variant
from .trainer import Hyperparams, run_experiment

DEFAULT_SEED = 0

# every recognized config-file key with its default; values in the file are
# written exactly like CLI literals (ints, floats, true/false, comma lists)
DEFAULT_CONFIG = {
    # backbone
    "input_edge": "384",
    "stage_channels": "256,512,1024,2048",
    "block_counts": "3,4,6,3",
    # token stack
    "token_dim": "768",
    "heads": "12",
    "patch_size": "1",
    "ffn_hidden": "",
    "num_classes": "2",
    "attention_variant": "simam",
    "simam_lambda": "1e-4",
    "use_class_token": "true",
    "use_positional_encoding": "true",
    "dropout": "0.0",
    "projection_scaled_attention": "false",
    # optimization
    "learning_rate": "6e-5",
    "weight_decay": "0.05",
    "epochs": "50",
    "batch_size": "32",
    "lr_final_factor": "0.1",
    # augmentation
    "rotation_degrees": "180",
    "crop_edge": "700",
    "flip_prob": "0.5",
    "brightness": "0.15",
    "contrast": "0.3",
    "saturation": "0.3",
    "hue": "0.06",
    "resize_edge": "384",
    # synthetic data
    "synth_edge": "64",
    "synth_per_class": "256",
    "synth_blob_count": "8",
    "synth_blob_radius": "3.0",
    # ablation sweep
    "variants": ",".join(VARIANT_NAMES),
}


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 1."""


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULT_CONFIG:
            raise UsageError(f"{path}:{line_no}: unknown config key {key!r}")
        values[key] = value
    return values


def _as_int(cfg, key):
    try:
        return int(cfg[key])
    except ValueError:
        raise UsageError(f"config key {key}: expected an integer, got {cfg[key]!r}") from None


def _as_float(cfg, key):
    try:
        return float(cfg[key])
    except ValueError:
        raise UsageError(f"config key {key}: expected a number, got {cfg[key]!r}") from None


def _as_bool(cfg, key):
    value = cfg[key].lower()
    if value in ("true", "1", "yes"):
        return True
    if value in ("false", "0", "no"):
        return False
    raise UsageError(f"config key {key}: expected true/false, got {cfg[key]!r}")


def _as_ints(cfg, key):
    try:
        return tuple(int(part) for part in cfg[key].split(","))
    except ValueError:
        raise UsageError(f"config key {key}: expected a comma list of integers, got {cfg[key]!r}") from None


def load_config(path: str | None) -> dict[str, str]:
    merged = dict(DEFAULT_CONFIG)
    if path:
        merged.update(parse_config_file(path))
    return merged


def build_backbone_config(cfg) -> BackboneConfig:
    try:
        return BackboneConfig.from_input_edge(
            _as_int(cfg, "input_edge"),
            stage_channels=_as_ints(cfg, "stage_channels"),
            block_counts=_as_ints(cfg, "block_counts"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def build_fgd_config(cfg, backbone: BackboneConfig) -> FgdConfig:
    from .fgd import derive_pool_windows

    try:
        return FgdConfig(
            token_dim=_as_int(cfg, "token_dim"),
            heads=_as_int(cfg, "heads"),
            patch_size=_as_int(cfg, "patch_size"),
            pool_windows=derive_pool_windows(backbone, 4),
            ffn_hidden=_as_int(cfg, "ffn_hidden") if cfg["ffn_hidden"] else None,
            num_classes=_as_int(cfg, "num_classes"),
            attention_variant=cfg["attention_variant"],
            simam_lambda=_as_float(cfg, "simam_lambda"),
            use_class_token=_as_bool(cfg, "use_class_token"),
            use_positional_encoding=_as_bool(cfg, "use_positional_encoding"),
            dropout=_as_float(cfg, "dropout"),
            projection_scaled_attention=_as_bool(cfg, "projection_scaled_attention"),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def build_hyperparams(cfg, seed: int) -> Hyperparams:
    try:
        return Hyperparams(
            learning_rate=_as_float(cfg, "learning_rate"),
            weight_decay=_as_float(cfg, "weight_decay"),
            epochs=_as_int(cfg, "epochs"),
            batch_size=_as_int(cfg, "batch_size"),
            lr_final_factor=_as_float(cfg, "lr_final_factor"),
            seed=seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def build_augment_config(cfg) -> AugmentConfig:
    try:
        return AugmentConfig(
            rotation_degrees=_as_float(cfg, "rotation_degrees"),
            crop_edge=_as_int(cfg, "crop_edge"),
            flip_prob=_as_float(cfg, "flip_prob"),
            brightness=_as_float(cfg, "brightness"),
            contrast=_as_float(cfg, "contrast"),
            saturation=_as_float(cfg, "saturation"),
            hue=_as_float(cfg, "hue"),
            resize_edge=_as_int(cfg, "resize_edge"),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def build_synth_spec(cfg, args) -> SynthSpec:
    try:
        return SynthSpec(
            edge=args.edge if args.edge is not None else _as_int(cfg, "synth_edge"),
            per_class=args.per_class if args.per_class is not None else _as_int(cfg, "synth_per_class"),
            blob_count=args.blobs if args.blobs is not None else _as_int(cfg, "synth_blob_count"),
            blob_radius=_as_float(cfg, "synth_blob_radius"),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_images(data_path):
    try:
        return load_dataset(data_path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    spec = build_synth_spec(cfg, args)
    images = synth_generate(spec, args.seed)
    out_dir = Path(args.out)
    manifest = write_synth_dataset(images, out_dir)
    with open(out_dir / "synth_spec.json", "w", encoding="utf-8") as handle:
        json.dump({"spec": dataclasses.asdict(spec), "seed": args.seed}, handle,
                  indent=2, sort_keys=True)
        handle.write("\n")
    print(f"wrote {len(images)} images and {manifest}")
    return 0


def _experiment_pieces(args):
    cfg = load_config(args.config)
    backbone = build_backbone_config(cfg)
    fgd = build_fgd_config(cfg, backbone)
    hp = build_hyperparams(cfg, args.seed)
    augment = build_augment_config(cfg)
    return cfg, backbone, fgd, hp, augment


def cmd_train(args) -> int:
    try:
        variant = resolve_variant(args.variant)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _, backbone, fgd, hp, augment = _experiment_pieces(args)
    images = _load_images(args.data)
    report = run_experiment(variant, images, hp, args.seed, args.out,
                            backbone_config=backbone, fgd_config=fgd,
                            augment_config=augment, workers=args.workers)
    aggregate = report["aggregate"]["test"]
    print(f"{variant}: test acc " +
          ("n/a" if aggregate["acc"] is None else f"{aggregate['acc']:.4f}"))
    print(f"report written to {Path(args.out) / 'report.json'}")
    return 0


def cmd_eval(args) -> int:
    import torch

    from .datapipe import label_index
    from .fgd import load_checkpoint
    from .trainer import compute_metrics, evaluate

    cfg = load_config(args.config)
    augment = build_augment_config(cfg)
    model, _meta = load_checkpoint(args.checkpoint)
    images = _load_images(args.data)
    inputs = torch.stack([preprocess_eval(img, augment) for img in images])
    labels = torch.tensor([label_index(img.label) for img in images])
    counts = evaluate(model, inputs, labels)
    metrics = compute_metrics(counts).as_dict()
    payload = {"checkpoint": str(args.checkpoint), "counts": counts._asdict(), "metrics": metrics}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.json", "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_cam(args) -> int:
    from .explain import grad_cam, save_overlay
    from .fgd import load_checkpoint

    cfg = load_config(args.config)
    augment = build_augment_config(cfg)
    model, _meta = load_checkpoint(args.checkpoint)
    images = _load_images(args.data)
    if args.ids:
        wanted = set(args.ids.split(","))
        images = [img for img in images if img.source_id in wanted]
        found = {img.source_id for img in images}
        if wanted - found:
            raise UsageError(f"ids not present in the dataset: {', '.join(sorted(wanted - found))}")
    if not images:
        raise UsageError("no images selected for heatmap export")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for image in images:
        tensor = preprocess_eval(image, augment)
        heatmap = grad_cam(model, tensor, args.target_class, source_id=image.source_id)
        # overlay against the network-input view of the image
        view = (tensor.permute(1, 2, 0).numpy() * 255).round().astype("uint8")
        save_overlay(out_dir / f"{image.source_id.replace('/', '_')}_cam.png", heatmap, view)
    print(f"wrote {len(images)} heatmaps to {out_dir}")
    return 0


def cmd_ablate(args) -> int:
    cfg, backbone, fgd, hp, augment = _experiment_pieces(args)
    names = [name.strip() for name in cfg["variants"].split(",") if name.strip()]
    try:
        variants = [resolve_variant(name) for name in names]  # fail before any training
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    images = _load_images(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for variant in variants:
        report = run_experiment(variant, images, hp, args.seed, out_dir / variant,
                                backbone_config=backbone, fgd_config=fgd,
                                augment_config=augment, workers=args.workers)
        test = report["aggregate"]["test"]
        rows.append([variant] + [("" if test[m] is None else f"{test[m]:.6f}")
                                 for m in ("acc", "spe", "sen", "ppv", "npv", "f1")])
        print(f"{variant}: test acc {rows[-1][1] or 'n/a'}")

    table_path = out_dir / "ablation.csv"
    with open(table_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(("variant", "acc", "spe", "sen", "ppv", "npv", "f1"))
        writer.writerows(rows)
    print(f"ablation table written to {table_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msht", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED,
                       help=f"master random seed (default {DEFAULT_SEED})")
        p.add_argument("--out", required=True, help="output directory for all artifacts")
        if data:
            p.add_argument("--data", required=True,
                           help="dataset: a manifest.csv, its directory, or a tree with positive/ and negative/")

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset with a manifest")
    common(p_synth, data=False)
    p_synth.add_argument("--edge", type=int, help="image edge in pixels")
    p_synth.add_argument("--per-class", type=int, dest="per_class", help="images per class")
    p_synth.add_argument("--blobs", type=int, help="texture blobs per image")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="run the 5-fold protocol for one variant")
    common(p_train)
    p_train.add_argument("--variant", default="MSHT", help=f"one of: {', '.join(VARIANT_NAMES)}")
    p_train.add_argument("--workers", type=int, default=0, help="data-loading worker threads")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_cam = sub.add_parser("cam", help="export Grad-CAM heatmap overlays")
    common(p_cam)
    p_cam.add_argument("--checkpoint", required=True)
    p_cam.add_argument("--ids", help="comma-separated source ids (default: all)")
    p_cam.add_argument("--target-class", type=int, default=1, dest="target_class",
                       help="class index for the heatmap (default 1 = positive)")
    p_cam.set_defaults(func=cmd_cam)

    p_ablate = sub.add_parser("ablate", help="train every variant and emit a comparison table")
    common(p_ablate)
    p_ablate.add_argument("--workers", type=int, default=0, help="data-loading worker threads")
    p_ablate.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits with 2 on usage errors
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - single boundary for runtime failures
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
