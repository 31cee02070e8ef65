"""Command-line entry point.

Every subcommand honors --seed and is reproducible under it; report-style
commands (train, eval, fuse, ablate, analyze) write figures next to their
delimited/JSON outputs. Exit status: 0 success, 2 for bad flags or config
validation, 1 for runtime failures.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import AXES, run_ablation, write_ablation
from .align import FEATURE_CACHE_FORMAT
from .analysis import feature_noise_curve, map_noise_curve
from .backbone import VideoTransformer, count_macs
from .checkpoint import (CHECKPOINT_FORMAT, load_checkpoint, save_checkpoint,
                         strip_checkpoint)
from .config import (apply_overrides, fusion_config, load_config, patch_config,
                     synthetic_spec, train_config)
from .data import (DATASET_FORMAT, POSE_SCHEMA_FORMAT, generate_synthetic,
                   load_dataset, save_dataset)
from .errors import ConfigError, SkelVitError
from .evaluation import (EvalReport, FusedModel, compare_runs, dump_predictions,
                         evaluate, joint_token_distance_profile)
from .jointmap import (MAP_CACHE_FORMAT, build_pixel_map, make_variant,
                       pool_token_map, write_map_cache)
from .reporting import (render_curves, text_table, write_csv, write_eval_report,
                        write_json)
from .skeleton_model import (PROVIDER_FORMAT, load_provider,
                             pretrain_skeleton_encoder, save_provider)
from .trainer import build_model, train

FORMAT_TAGS = {
    "checkpoint": CHECKPOINT_FORMAT,
    "dataset": DATASET_FORMAT,
    "pose-schema": POSE_SCHEMA_FORMAT,
    "map-cache": MAP_CACHE_FORMAT,
    "feature-cache": FEATURE_CACHE_FORMAT,
    "provider": PROVIDER_FORMAT,
}


def _version_text() -> str:
    lines = [f"skelvit {__version__}"]
    lines += [f"{name}: {tag}" for name, tag in sorted(FORMAT_TAGS.items())]
    return "\n".join(lines)


def _add_config_args(parser):
    parser.add_argument("--config", help="nested YAML/JSON config document")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="PATH=VALUE",
                        help="dotted-path config override; last writer wins")
    parser.add_argument("--seed", type=int, default=None,
                        help="seed override for this run")
    parser.add_argument("--workers", type=int, default=1,
                        help="internal parallelism (1 keeps runs deterministic)")


def _load_doc(args) -> dict:
    doc = load_config(args.config)
    apply_overrides(doc, args.overrides)
    if args.seed is not None:
        doc.setdefault("data", {})["seed"] = args.seed
        doc.setdefault("train", {})["seed"] = args.seed
    if getattr(args, "workers", 1) != 1:
        doc.setdefault("train", {})["workers"] = args.workers
    return doc


def _load_backbone(path) -> VideoTransformer:
    model, _ = load_checkpoint(path)
    return model if isinstance(model, VideoTransformer) else model.backbone


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skelvit",
        description="Video transformer training with removable "
                    "skeleton-guided auxiliary heads.")
    parser.add_argument("--version", action="version", version=_version_text())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    _add_config_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("build-maps", help="precompute token-map cache files")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="full", choices=["full", "flat"])

    p = sub.add_parser("pretrain-provider",
                       help="train and freeze the skeleton feature provider")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--cache-dir", help="also write per-sample feature "
                                       "cache files for the dataset")

    p = sub.add_parser("train", help="train the composed model")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--provider", help="provider checkpoint (needed for "
                                      "alignment or distillation baselines)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--report-dir", help="where to write the loss log and "
                                        "curves (default: alongside --out)")

    p = sub.add_parser("eval", help="evaluate a checkpoint, pose-free")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("ckpt")
    p.add_argument("--out", required=True, help="report directory")

    p = sub.add_parser("strip", help="drop train-only parameters")
    p.add_argument("input")
    p.add_argument("output")

    p = sub.add_parser("fuse", help="late-fuse RGB and skeleton logits")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--provider", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="sweep one design-choice axis")
    _add_config_args(p)
    p.add_argument("--axis", required=True,
                   help=f"one of {', '.join(AXES)} (or letters a-f)")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", help="held-out split (default: --data)")
    p.add_argument("--provider", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("analyze", help="noise curves / distance profile / "
                                       "run comparison")
    _add_config_args(p)
    p.add_argument("--what", required=True,
                   choices=["map-noise", "feature-noise", "distance-profile",
                            "compare"])
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--provider")
    p.add_argument("--levels", default=None,
                   help="comma-separated noise levels")
    p.add_argument("--num-seeds", type=int, default=None)
    p.add_argument("--report-a", help="baseline eval report (compare)")
    p.add_argument("--report-b", help="comparison eval report (compare)")
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# Subcommand bodies.
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    doc = _load_doc(args)
    spec = synthetic_spec(doc)
    samples = generate_synthetic(spec)
    save_dataset(samples, args.out, num_classes=spec.num_classes,
                 meta={"synthetic_spec": asdict(spec)})
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_build_maps(args) -> int:
    doc = _load_doc(args)
    samples, _ = load_dataset(args.data)
    cfg = patch_config(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": MAP_CACHE_FORMAT, "variant": args.variant, "maps": {}}
    for sample in samples:
        if sample.pose2d is None:
            raise ConfigError(f"sample {sample.clip.id} has no 2D pose file")
        pixel = build_pixel_map(sample.pose2d, cfg.height, cfg.width)
        token_map = make_variant(pool_token_map(pixel, cfg), args.variant)
        path = out / f"{sample.clip.id}.svmap"
        write_map_cache(path, token_map)
        manifest["maps"][sample.clip.id] = path.name
    write_json(out / "manifest.json", manifest)
    print(f"wrote {len(samples)} map caches to {out}")
    return 0


def _cmd_pretrain_provider(args) -> int:
    doc = _load_doc(args)
    samples, meta = load_dataset(args.data)
    seed = doc.get("train", {}).get("seed", 0)
    provider, stats = pretrain_skeleton_encoder(
        samples, num_classes=meta["num_classes"],
        feature_dim=args.feature_dim, epochs=args.epochs, seed=seed)
    save_provider(args.out, provider, stats)
    print(f"provider {provider.name} (hash {provider.weight_hash}) "
          f"train acc {stats.train_accuracy:.3f} "
          f"holdout acc {stats.holdout_accuracy:.3f}")
    if stats.holdout_accuracy < 0.9:
        print("warning: holdout accuracy below the 0.9 quality gate",
              file=sys.stderr)
    return 0


def _cmd_train(args) -> int:
    doc = _load_doc(args)
    samples, meta = load_dataset(args.data)
    patch_cfg = patch_config(doc, num_classes=meta["num_classes"])
    cfg = train_config(doc)
    provider = load_provider(args.provider) if args.provider else None
    if cfg.uses_provider and provider is None:
        raise ConfigError("this configuration needs --provider")
    num_joints = None
    if cfg.uses_maps:
        with_pose = [s for s in samples if s.pose2d is not None]
        if not with_pose:
            raise ConfigError("map heads are enabled but no sample has 2D poses")
        num_joints = with_pose[0].pose2d.num_joints
    model = build_model(patch_cfg, cfg, num_joints=num_joints,
                        provider_dim=provider.feature_dim if provider else None)
    report_dir = Path(args.report_dir or Path(args.out).parent)
    report_dir.mkdir(parents=True, exist_ok=True)
    history = train(model, samples, provider=provider,
                    log_path=report_dir / "train_log.jsonl")
    save_checkpoint(args.out, model, meta={"data": str(args.data)})
    steps = np.arange(len(history))
    series = {
        "total": np.array([h.total for h in history]),
        "cls": np.array([h.cls_loss for h in history]),
        "map": np.array([h.map_loss for h in history]),
        "align": np.array([h.align_loss for h in history]),
        "aux-cls": np.array([h.aux_cls_loss for h in history]),
    }
    render_curves(steps, series, report_dir / "train_curves.png",
                  xlabel="step", ylabel="loss", title="training losses")
    write_csv(report_dir / "train_curves.csv",
              ["step"] + list(series),
              [[int(s)] + [float(series[k][s]) for k in series] for s in steps])
    print(f"trained {len(history)} steps; checkpoint at {args.out}")
    return 0


def _cmd_eval(args) -> int:
    samples, meta = load_dataset(args.data)
    backbone = _load_backbone(args.ckpt)
    report, records = evaluate(backbone, samples, meta["num_classes"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_eval_report(out, "eval", report)
    dump_predictions(out / "predictions.jsonl", records)
    print(f"top1 {report.top1:.4f}  mCA {report.mca:.4f}  ({len(samples)} samples)")
    return 0


def _cmd_strip(args) -> int:
    strip_checkpoint(args.input, args.output)
    backbone = _load_backbone(args.output)
    print(f"stripped checkpoint -> {args.output} "
          f"({sum(p.numel() for p in backbone.parameters())} parameters, "
          f"{count_macs(backbone.cfg)} MACs per clip)")
    return 0


def _cmd_fuse(args) -> int:
    doc = _load_doc(args)
    samples, meta = load_dataset(args.data)
    backbone = _load_backbone(args.ckpt)
    provider = load_provider(args.provider)
    fusion = fusion_config(doc)
    fused = FusedModel(backbone, provider, fusion, samples)
    report, records = evaluate(fused, samples, meta["num_classes"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_eval_report(out, "fused", report)
    dump_predictions(out / "predictions.jsonl", records)
    print(f"fused top1 {report.top1:.4f}  mCA {report.mca:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    doc = _load_doc(args)
    train_samples, meta = load_dataset(args.data)
    eval_samples = (load_dataset(args.eval_data)[0] if args.eval_data
                    else train_samples)
    patch_cfg = patch_config(doc, num_classes=meta["num_classes"])
    base_cfg = train_config(doc)
    provider = load_provider(args.provider)
    num_joints = train_samples[0].pose2d.num_joints \
        if train_samples[0].pose2d else 0
    table = run_ablation(args.axis, train_samples, eval_samples, patch_cfg,
                         base_cfg, provider, num_joints)
    write_ablation(table, args.out)
    print(text_table([table.axis] + table.col_labels, table.rows()))
    return 0


def _parse_levels(raw, default):
    if raw is None:
        return list(default)
    return [float(x) for x in raw.split(",")]


def _cmd_analyze(args) -> int:
    doc = _load_doc(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = doc.get("train", {}).get("seed", 0)

    if args.what == "compare":
        if not args.report_a or not args.report_b:
            raise ConfigError("compare needs --report-a and --report-b")
        a = EvalReport.from_dict(json.loads(Path(args.report_a).read_text()))
        b = EvalReport.from_dict(json.loads(Path(args.report_b).read_text()))
        result = compare_runs(a, b)
        write_json(out / "compare.json", result)
        rows = [[c, f"{d:+.4f}"] for c, d in result["class_deltas"]]
        (out / "compare.txt").write_text(
            text_table(["class", "recall delta"], rows) + "\n" +
            text_table(["pair", "improvement"],
                       [[f"{i}->{j}", n]
                        for (i, j), n in result["pair_improvements"]]))
        write_csv(out / "compare.csv", ["class", "recall_delta"], rows)
        print(f"wrote comparison to {out}")
        return 0

    if not args.data:
        raise ConfigError(f"analyze --what {args.what} needs --data")
    samples, meta = load_dataset(args.data)

    if args.what == "map-noise":
        patch_cfg = patch_config(doc, num_classes=meta["num_classes"])
        levels = _parse_levels(args.levels, (0.0, 20.0, 40.0, 80.0))
        curve = map_noise_curve(samples, patch_cfg, levels,
                                num_seeds=args.num_seeds or 50, seed=seed)
        write_csv(out / "map_noise.csv", ["level_px", "mean_iou"],
                  [[l, float(v)] for l, v in zip(levels, curve)])
        render_curves(levels, {"mean IoU": curve}, out / "map_noise.png",
                      xlabel="pixel noise level", ylabel="clean-vs-noisy IoU",
                      title="token map robustness to joint noise")
        write_json(out / "map_noise.json",
                   {"levels": levels, "mean_iou": curve.tolist()})
        print(text_table(["level", "mean IoU"],
                         [[l, f"{v:.4f}"] for l, v in zip(levels, curve)]))
        return 0

    if args.what == "feature-noise":
        if not args.ckpt or not args.provider:
            raise ConfigError("feature-noise needs --ckpt and --provider")
        model, _ = load_checkpoint(args.ckpt)
        if isinstance(model, VideoTransformer):
            raise ConfigError("feature-noise needs a training checkpoint with "
                              "alignment heads, not a stripped one")
        provider = load_provider(args.provider)
        levels = _parse_levels(args.levels, (0.0, 0.5, 1.0, 2.0))
        curve = feature_noise_curve(model, samples, provider, levels,
                                    num_seeds=args.num_seeds or 20, seed=seed)
        write_csv(out / "feature_noise.csv", ["level_std", "align_loss"],
                  [[l, float(v)] for l, v in zip(levels, curve)])
        render_curves(levels, {"alignment loss": curve},
                      out / "feature_noise.png",
                      xlabel="noise level (channel-std multiples)",
                      ylabel="alignment loss",
                      title="alignment robustness to feature noise")
        write_json(out / "feature_noise.json",
                   {"levels": levels, "align_loss": curve.tolist()})
        print(text_table(["level", "align loss"],
                         [[l, f"{v:.5f}"] for l, v in zip(levels, curve)]))
        return 0

    # distance-profile
    if not args.ckpt:
        raise ConfigError("distance-profile needs --ckpt")
    backbone = _load_backbone(args.ckpt)
    profile = joint_token_distance_profile(backbone, samples)
    layers = list(range(1, len(profile) + 1))
    write_csv(out / "distance_profile.csv", ["layer", "mean_pair_distance"],
              [[l, float(v)] for l, v in zip(layers, profile)])
    render_curves(layers, {"joint-token distance": profile},
                  out / "distance_profile.png",
                  xlabel="layer", ylabel="mean pairwise distance",
                  title="feature distance between joint tokens")
    write_json(out / "distance_profile.json",
               {"layers": layers, "distance": profile.tolist()})
    print(text_table(["layer", "distance"],
                     [[l, f"{v:.4f}"] for l, v in zip(layers, profile)]))
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "build-maps": _cmd_build_maps,
    "pretrain-provider": _cmd_pretrain_provider,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "strip": _cmd_strip,
    "fuse": _cmd_fuse,
    "ablate": _cmd_ablate,
    "analyze": _cmd_analyze,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SkelVitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
