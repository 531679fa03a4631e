"""Operator surface: data generation, staged training, scale adaptation,
evaluation, plotting, and artifact verification.

Every command resolves one declarative config (preset, then config file,
then dotted --set overrides), stamps its hash into all artifacts it
writes, and works inside a run directory named by hash + timestamp.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .adaptation import (
    DepthRange,
    ToyClassifier,
    embed_crops,
    load_mined_background,
    median_cost_epsilon,
    mine_foreground_patches,
    object_scale_adaptation,
    save_mined_background,
    save_mined_foreground,
    sinkhorn_distance,
)
from .config import RunConfig, config_hash, load_config, parse_override_value, save_config
from .evaluation import annotation_quality, average_precision, fid, kid, pr_curve
from .synthnet import compute_labels
from .toyworld import (
    DatasetManifest,
    generate_background_collection,
    generate_source_collection,
    generate_target_collection,
    sample_scene_spec,
    scene_oracle_boxes,
)
from .training import (
    Models,
    build_models,
    collect_detections,
    load_checkpoint,
    run_coupled_stage,
    run_uncoupled_detector_half,
    run_uncoupled_stage,
    run_uncoupled_synth_half,
    CoupledVariant,
)
from .utils import image_grid, read_png_metadata, save_png, to_uint8, to_unit_range


def data_root(config: RunConfig) -> Path:
    if config.data.data_root:
        return Path(config.data.data_root)
    return Path(os.environ.get("SSOD_DATA_ROOT", "data"))


def make_run_dir(out_root: Path, digest: str, force: bool) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = out_root / f"run-{digest}-{stamp}"
    if run_dir.exists() and not force:
        raise FileExistsError(f"{run_dir} exists; pass --force to reuse")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _load_manifest(config: RunConfig, split: str) -> DatasetManifest:
    return DatasetManifest.load(data_root(config) / split)


def _build_models(config: RunConfig) -> Models:
    return build_models(config.world, config.synth, config.critic, config.detector,
                        seed=config.seed)


def _load_into(config: RunConfig, checkpoint: str, with_classifier: bool = False
               ) -> tuple[Models, ToyClassifier | None]:
    models = _build_models(config)
    modules = models.named_modules_dict()
    classifier = None
    if with_classifier:
        classifier = ToyClassifier(config.classifier)
        modules = dict(modules, classifier=classifier)
    load_checkpoint(checkpoint, modules)
    if classifier is not None:
        classifier.eval()
    return models, classifier


def cmd_gen_data(config: RunConfig, args: argparse.Namespace) -> None:
    root = Path(args.out) if args.out else data_root(config)
    digest = config_hash(config)
    for split in (config.data.source_split, config.data.target_split,
                  config.data.val_split, config.data.background_split):
        if (root / split).exists() and not args.force:
            raise FileExistsError(f"{root / split} exists; pass --force to regenerate")
    world, seed = config.world, config.seed
    generate_source_collection(world, config.data.n_source, seed, root,
                               config.data.source_split, config_hash=digest)
    generate_target_collection(world, config.data.n_target, seed + 1, root,
                               config.data.target_split, config_hash=digest)
    generate_target_collection(world, config.data.n_target_val, seed + 2, root,
                               config.data.val_split, config_hash=digest)
    generate_background_collection(world, config.data.n_background, seed + 3, root,
                                   config.data.background_split, config_hash=digest)
    save_config(config, root / "config.json")
    print(f"wrote 4 splits under {root} (config {digest})")


def cmd_pretrain_synth(config: RunConfig, args: argparse.Namespace) -> None:
    run_dir = make_run_dir(Path(args.out) if args.out else data_root(config) / "runs",
                           config_hash(config), args.force)
    digest = save_config(config, run_dir / "config.json")
    models = _build_models(config)
    source = _load_manifest(config, config.data.source_split)
    run_uncoupled_synth_half(models, source, config.train, config.world,
                             config.critic, run_dir, digest)
    print(f"synthesizer pretraining done; artifacts in {run_dir}")


def cmd_pretrain_det(config: RunConfig, args: argparse.Namespace) -> None:
    run_dir = make_run_dir(Path(args.out) if args.out else data_root(config) / "runs",
                           config_hash(config), args.force)
    digest = save_config(config, run_dir / "config.json")
    models, _ = _load_into(config, args.checkpoint)
    source = _load_manifest(config, config.data.source_split)
    target = _load_manifest(config, config.data.target_split)
    background = _load_manifest(config, config.data.background_split)
    result = run_uncoupled_detector_half(
        models, source, target, background, config.train, config.world,
        config.classifier, run_dir, digest,
    )
    if result.mined_background is not None:
        save_mined_background(run_dir / "mined_background", result.mined_background, digest)
    print(f"detector pretraining done; artifacts in {run_dir}")


def _variant_from_name(name: str) -> tuple[CoupledVariant, bool]:
    """Returns (ablation switches, use scale adaptation)."""
    table = {
        "full": (CoupledVariant(), True),
        "no_fg_bg": (CoupledVariant(use_fg_bg=False), True),
        "no_mso": (CoupledVariant(use_mso=False), True),
        "no_osa": (CoupledVariant(), False),
    }
    if name not in table:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(table)}")
    return table[name]


def cmd_train_coupled(config: RunConfig, args: argparse.Namespace) -> None:
    run_dir = make_run_dir(Path(args.out) if args.out else data_root(config) / "runs",
                           config_hash(config), args.force)
    digest = save_config(config, run_dir / "config.json")
    variant, use_osa = _variant_from_name(args.variant)
    models, _ = _load_into(config, args.checkpoint, with_classifier=True)
    source = _load_manifest(config, config.data.source_split)
    target = _load_manifest(config, config.data.target_split)

    depth_range = None
    if use_osa and args.adapt_report:
        report = json.loads(Path(args.adapt_report).read_text())
        depth_range = tuple(report["chosen"])

    mined_fg = mined_bg = None
    if variant.use_fg_bg:
        mined_fg = mine_foreground_patches(
            target.hidden(), models.detector, models.anchors,
            confidence=config.train.mining_confidence,
        )
        save_mined_foreground(run_dir / "mined_foreground", mined_fg, digest)
        mined_bg = load_mined_background(Path(args.mined_background)) if (
            args.mined_background) else None
        if mined_bg is None:
            from .adaptation import mine_background_patches

            classifier = ToyClassifier(config.classifier)
            load_checkpoint(args.checkpoint, {"classifier": classifier})
            classifier.eval()
            mined_bg = mine_background_patches(
                target.hidden(), classifier, confidence=config.train.mining_confidence
            )
        save_mined_background(run_dir / "mined_background", mined_bg, digest)

    run_coupled_stage(models, source, mined_fg, mined_bg, config.train, config.world,
                      config.critic, variant, depth_range, run_dir, digest)
    print(f"coupled training ({args.variant}) done; artifacts in {run_dir}")


def cmd_adapt_scale(config: RunConfig, args: argparse.Namespace) -> None:
    run_dir = make_run_dir(Path(args.out) if args.out else data_root(config) / "runs",
                           config_hash(config), args.force)
    digest = save_config(config, run_dir / "config.json")
    models, classifier = _load_into(config, args.checkpoint, with_classifier=True)
    target = _load_manifest(config, config.data.target_split)
    ranges = [DepthRange(lo, hi) for lo, hi in config.depth_ranges]
    report = object_scale_adaptation(
        models.synth, ranges, target.hidden(), classifier, config.detector,
        config.scale_search, config.world, seed=config.seed,
    )
    payload = dict(report.as_dict(), config_hash=digest)
    path = run_dir / "scale_adaptation.json"
    path.write_text(json.dumps(payload, indent=1))
    print(f"chose depth range {report.chosen.as_tuple()}; report at {path}")


def _depth_terciles(manifest: DatasetManifest) -> list[list[int]]:
    """Image indices grouped by mean oracle object depth terciles."""
    depths = []
    for i in range(len(manifest)):
        poses = manifest.oracle_poses(i)
        depths.append(np.mean([p.depth for p in poses]) if poses else np.nan)
    depths = np.asarray(depths)
    valid = np.where(np.isfinite(depths))[0]
    if len(valid) < 3:
        return [list(valid)]
    cuts = np.quantile(depths[valid], [1 / 3, 2 / 3])
    groups = [[], [], []]
    for i in valid:
        tier = int(np.searchsorted(cuts, depths[i]))
        groups[tier].append(int(i))
    return groups


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> None:
    run_dir = make_run_dir(Path(args.out) if args.out else data_root(config) / "runs",
                           config_hash(config), args.force)
    digest = save_config(config, run_dir / "config.json")
    models, classifier = _load_into(config, args.checkpoint, with_classifier=True)
    manifest = _load_manifest(config, args.split or config.data.val_split)
    world, seed = config.world, config.seed

    dets, gts = collect_detections(models, manifest)
    metrics: dict = {"config_hash": digest, "split": manifest.split}
    curves = {}
    for thresh in (0.5, 0.45):
        metrics[f"ap_{thresh}"] = average_precision(dets, gts, thresh)
        curve = pr_curve(dets, gts, thresh)
        curves[str(thresh)] = {
            "recalls": curve.recalls.tolist(),
            "precisions": curve.precisions.tolist(),
        }
    tercile_aps = []
    for group in _depth_terciles(manifest):
        if group:
            tercile_aps.append(average_precision(
                [dets[i] for i in group], [gts[i] for i in group], 0.5))
    metrics["ap_by_depth_tercile"] = tercile_aps

    # Self-labeling audit on renderer-matched scenes.
    rng = np.random.default_rng([seed, 61])
    labels, oracle = [], []
    for _ in range(max(args.audit_scenes, 1)):
        spec = sample_scene_spec(rng, world, world.source, 1)
        oracle.append(scene_oracle_boxes(spec, world.source, world))
        labels.append(compute_labels([o.pose for o in spec.objects],
                                     world.camera(), world.mean_box()))
    metrics["annotation_quality_map"] = annotation_quality(labels, oracle)

    # Distribution metrics between synthesized and real object crops.
    if classifier is not None:
        from .training import synthesize_labeled_images

        n_dist = 96
        synth_imgs, synth_boxes = synthesize_labeled_images(
            models.synth, world, n_dist, (1,), seed=seed + 71,
            batch_size=config.scale_search.synth_batch,
        )
        alpha = embed_crops(classifier, synth_imgs,
                            [b[0].center for b in synth_boxes],
                            config.scale_search.crop_size)
        real_imgs, real_centers = [], []
        for i in range(len(manifest)):
            for box in manifest.oracle_boxes(i):
                real_imgs.append(manifest.load_image(i))
                real_centers.append(box.center)
        if real_imgs:
            beta = embed_crops(classifier, np.stack(real_imgs), real_centers,
                               config.scale_search.crop_size)
            eps = median_cost_epsilon(alpha, beta)
            metrics["sinkhorn"] = sinkhorn_distance(alpha, beta, eps, max_iters=5000)
            metrics["kid"] = kid(alpha, beta)
            metrics["fid"] = fid(alpha, beta)

    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=1))
    (run_dir / "pr_curves.json").write_text(json.dumps(
        {"config_hash": digest, "curves": curves}, indent=1))
    with (run_dir / "metrics.csv").open("w", newline="") as fh:
        fh.write(f"# config_hash={digest}\n")
        writer = csv.writer(fh)
        scalar_keys = [k for k, v in metrics.items() if isinstance(v, (int, float, str))]
        writer.writerow(scalar_keys)
        writer.writerow([metrics[k] for k in scalar_keys])

    # Qualitative sample grid: synthesized scenes next to real target images.
    gen = torch.Generator().manual_seed(seed)
    poses = [[sample_scene_spec(rng, world, world.target, 1).objects[0].pose]
             for _ in range(8)]
    z_fg, z_bg = models.synth.sample_styles(8, 1, gen)
    with torch.no_grad():
        sample = models.synth.synthesize(z_fg, z_bg, poses)
    synth_tiles = to_uint8(sample.images)
    real_tiles = np.stack([manifest.load_image(i) for i in range(min(8, len(manifest)))])
    grid = image_grid(np.concatenate([synth_tiles, real_tiles]), cols=4)
    save_png(run_dir / "samples.png", grid, {"config_hash": digest})
    print(json.dumps({k: v for k, v in metrics.items() if not isinstance(v, dict)},
                     indent=1))
    print(f"evaluation artifacts in {run_dir}")


def cmd_plot(config: RunConfig, args: argparse.Namespace) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    source_dir = Path(args.run_dir)
    out_dir = Path(args.out) if args.out else source_dir
    digest = config_hash(config)
    wrote = []

    pr_path = source_dir / "pr_curves.json"
    if pr_path.exists():
        payload = json.loads(pr_path.read_text())
        fig, ax = plt.subplots(figsize=(5, 5))
        styles = {"0.5": "-", "0.45": "--"}
        for thresh, curve in payload["curves"].items():
            ax.plot(curve["recalls"], curve["precisions"],
                    styles.get(thresh, "-"), label=f"IoU {thresh}")
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.05)
        ax.legend()
        fig.tight_layout()
        path = out_dir / "pr_curves.png"
        fig.savefig(path, metadata={"config_hash": digest})
        plt.close(fig)
        wrote.append(path)

    for csv_name in ("uncoupled_synth.csv", "coupled.csv"):
        csv_path = source_dir / csv_name
        if not csv_path.exists():
            continue
        with csv_path.open() as fh:
            fh.readline()  # hash comment
            rows = list(csv.DictReader(fh))
        fig, ax = plt.subplots(figsize=(6, 4))
        numeric = [k for k in rows[0] if k not in ("iteration", "phase")]
        for key in numeric:
            pts = [(int(r["iteration"]), float(r[key])) for r in rows if r.get(key)]
            if pts:
                ax.plot(*zip(*pts), label=key, linewidth=0.8)
        ax.set_xlabel("iteration")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / csv_name.replace(".csv", "_losses.png")
        fig.savefig(path, metadata={"config_hash": digest})
        plt.close(fig)
        wrote.append(path)

    if not wrote:
        raise FileNotFoundError(f"nothing to plot under {source_dir}")
    print("wrote " + ", ".join(str(p) for p in wrote))


def _artifact_hash(path: Path) -> str | None:
    if path.suffix == ".png":
        return read_png_metadata(path).get("config_hash")
    if path.suffix == ".csv":
        first = path.open().readline().strip()
        if first.startswith("# config_hash="):
            return first.split("=", 1)[1]
        return None
    if path.suffix == ".json":
        payload = json.loads(path.read_text())
        return payload.get("config_hash")
    if path.suffix == ".pt":
        return torch.load(path, weights_only=True).get("config_hash")
    return None


def cmd_verify(config: RunConfig, args: argparse.Namespace) -> None:
    root = Path(args.run_dir)
    config_path = root / "config.json"
    if not config_path.exists():
        raise FileNotFoundError(f"{config_path} not found")
    expected = json.loads(config_path.read_text())["config_hash"]
    checked = failures = 0
    for path in sorted(root.rglob("*")):
        if not path.is_file() or path == config_path:
            continue
        found = _artifact_hash(path)
        if found is None:
            continue
        checked += 1
        if found != expected:
            failures += 1
            print(f"MISMATCH {path}: {found} != {expected}")
    print(f"verified {checked} artifacts against {expected}: "
          f"{'OK' if failures == 0 else f'{failures} mismatches'}")
    if failures:
        raise RuntimeError("config hash verification failed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synthdet",
        description="Pose-conditioned synthesis coupled with self-labeled detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--preset", choices=sorted(config_mod.PRESETS), default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--force", action="store_true")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override")

    p = sub.add_parser("gen-data", help="render source/target/val/background splits")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-synth", help="uncoupled synthesizer pretraining")
    common(p)
    p.set_defaults(func=cmd_pretrain_synth)

    p = sub.add_parser("pretrain-det", help="classifier + mining + detector pretraining")
    common(p)
    p.add_argument("--checkpoint", required=True, help="uncoupled_synth.pt path")
    p.set_defaults(func=cmd_pretrain_det)

    p = sub.add_parser("train-coupled", help="alternating coupled training")
    common(p)
    p.add_argument("--checkpoint", required=True, help="uncoupled.pt path")
    p.add_argument("--variant", default="full",
                   choices=["full", "no_fg_bg", "no_mso", "no_osa"])
    p.add_argument("--adapt-report", default=None,
                   help="scale_adaptation.json from adapt-scale")
    p.add_argument("--mined-background", default=None,
                   help="reuse a mined_background directory")
    p.set_defaults(func=cmd_train_coupled)

    p = sub.add_parser("adapt-scale", help="object-scale search over depth ranges")
    common(p)
    p.add_argument("--checkpoint", required=True, help="uncoupled.pt path")
    p.set_defaults(func=cmd_adapt_scale)

    p = sub.add_parser("eval", help="detection metrics, audits, sample grids")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--audit-scenes", type=int, default=260)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render PR and loss curves to PNG")
    common(p)
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("verify", help="check artifact config hashes")
    common(p)
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        for item in args.overrides:
            if "=" not in item:
                raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
            key, raw = item.split("=", 1)
            overrides[key] = parse_override_value(raw)
        config = load_config(args.config, args.preset, overrides, args.seed)
        args.func(config, args)
    except Exception as exc:  # noqa: BLE001 - single operator-facing boundary
        if os.environ.get("SYNTHDET_DEBUG"):
            traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
