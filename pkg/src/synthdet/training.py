"""Two-stage training: uncoupled pretraining of the synthesizer and the
detector, then coupled alternating training of the synthesizer against all
critics, the detector, and the target-appearance losses."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from . import losses
from .adaptation import (
    ClassifierConfig,
    EmptyMiningError,
    MinedBackground,
    MinedForeground,
    ToyClassifier,
    mine_background_patches,
    mine_foreground_patches,
    train_toy_classifier,
)
from .critics import CriticConfig, PatchCritic, SceneCritic, differentiable_crop, downscale_mask
from .detector import (
    AnchorDetector,
    DetectorConfig,
    build_anchors,
    detect,
    detection_loss,
    fit_detector,
)
from .geometry import BBox2D, Pose
from .synthnet import SynthConfig, Synthesizer, mask_from_boxes
from .toyworld import DatasetManifest, DomainParams, WorldConfig, iterate_batches, sample_pose
from .utils import to_uint8, to_unit_range

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Optimization schedule; defaults follow the reference recipe."""

    learning_rate: float = 5e-5
    adam_betas: tuple[float, float] = (0.9, 0.99)
    batch_size: int = 16
    synth_epochs: int = 20
    detector_train_images: int = 10_000
    detector_epochs: int = 10
    coupled_iterations: int = 25_000
    generator_updates_per_critic: int = 2
    seed: int = 0
    critic_objective: str = "wasserstein"
    lambda_scn: float = 0.5
    lambda_mso: float = 0.5
    lambda_det: float = 0.4
    fg_bg_ramp: losses.RampSchedule = field(default_factory=losses.RampSchedule)
    synth_counts: tuple[int, ...] = (1,)
    detector_data_counts: tuple[int, ...] = (1, 2)
    coupled_counts: tuple[int, ...] = (1, 2)
    mining_confidence: float = 0.9

    def __post_init__(self) -> None:
        for name in ("batch_size", "synth_epochs", "detector_train_images",
                     "detector_epochs", "coupled_iterations",
                     "generator_updates_per_critic"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class CoupledVariant:
    """Ablation switches for the coupled stage; scale adaptation is applied
    by passing its chosen depth range (or None) to run_coupled_stage."""

    use_fg_bg: bool = True
    use_mso: bool = True


@dataclass
class Models:
    synth: Synthesizer
    d_scn: SceneCritic
    d_mso: SceneCritic
    d_fg: PatchCritic
    d_bg: PatchCritic
    detector: AnchorDetector
    anchors: np.ndarray

    def named_modules_dict(self) -> dict[str, torch.nn.Module]:
        return {
            "synth": self.synth,
            "d_scn": self.d_scn,
            "d_mso": self.d_mso,
            "d_fg": self.d_fg,
            "d_bg": self.d_bg,
            "detector": self.detector,
        }


def build_models(
    world: WorldConfig,
    synth_cfg: SynthConfig,
    critic_cfg: CriticConfig,
    detector_cfg: DetectorConfig,
    seed: int = 0,
) -> Models:
    torch.manual_seed(seed)
    synth = Synthesizer(synth_cfg, world.camera(), world.mean_box())
    d_scn = SceneCritic(critic_cfg)
    d_mso = SceneCritic(critic_cfg, input_size=critic_cfg.mso_crop_size)
    d_fg = PatchCritic(critic_cfg)
    d_bg = PatchCritic(critic_cfg)
    detector = AnchorDetector(detector_cfg)
    return Models(synth, d_scn, d_mso, d_fg, d_bg, detector, build_anchors(detector_cfg))


def save_checkpoint(
    path: Path | str,
    modules: dict[str, torch.nn.Module],
    config_hash: str = "",
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config_hash": config_hash,
            "state": {name: module.state_dict() for name, module in modules.items()},
            "extra": extra or {},
        },
        path,
    )
    return path


def load_checkpoint(path: Path | str, modules: dict[str, torch.nn.Module]) -> dict:
    payload = torch.load(Path(path), weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    for name, module in modules.items():
        if name not in payload["state"]:
            raise KeyError(f"checkpoint is missing weights for {name!r}")
        module.load_state_dict(payload["state"][name])
    return payload


class MetricsWriter:
    """Collects per-iteration rows and optionally appends them to a CSV
    whose first line records the producing config hash."""

    def __init__(self, fieldnames: Sequence[str], path: Path | str | None = None,
                 config_hash: str = "") -> None:
        self.fieldnames = list(fieldnames)
        self.rows: list[dict] = []
        self._file: io.TextIOBase | None = None
        self._writer = None
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            self._file = path.open("w", newline="")
            self._file.write(f"# config_hash={config_hash}\n")
            self._writer = csv.DictWriter(self._file, fieldnames=self.fieldnames)
            self._writer.writeheader()

    def write(self, **row) -> None:
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow({k: row.get(k, "") for k in self.fieldnames})

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows if name in row]

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None


def _cycle_batches(manifest: DatasetManifest, batch_size: int, seed: int) -> Iterator:
    epoch = 0
    while True:
        yield from iterate_batches(manifest, batch_size, seed, hide_labels=True, epoch=epoch)
        epoch += 1


def _cycle_array(data: np.ndarray, batch_size: int, seed: int,
                 companions: Sequence[np.ndarray] = ()) -> Iterator:
    epoch = 0
    while True:
        order = np.random.default_rng([seed, epoch, 13]).permutation(len(data))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            yield (data[idx], *[c[idx] for c in companions])
        epoch += 1


def _sample_scene_batch(
    synth: Synthesizer,
    world: WorldConfig,
    domain: DomainParams,
    n: int,
    counts: tuple[int, ...],
    rng: np.random.Generator,
    gen: torch.Generator,
):
    k = int(counts[rng.integers(len(counts))]) if len(counts) > 1 else counts[0]
    poses = [[sample_pose(rng, world, domain) for _ in range(k)] for _ in range(n)]
    z_fg, z_bg = synth.sample_styles(n, k, gen)
    return synth.synthesize(z_fg, z_bg, poses)


def _object_crops(images: torch.Tensor, boxes: list[list[BBox2D]],
                  dilation: float, out_size: int) -> torch.Tensor:
    """One dilated square crop per object, gradient-preserving."""
    index, flat = [], []
    for i, sample in enumerate(boxes):
        for b in sample:
            index.append(i)
            flat.append(b)
    return differentiable_crop(images[index], flat, dilation, out_size)


def synthesize_labeled_images(
    synth: Synthesizer,
    world: WorldConfig,
    n_images: int,
    counts: tuple[int, ...],
    seed: int,
    batch_size: int = 16,
    depth_range: tuple[float, float] | None = None,
) -> tuple[np.ndarray, list[list[BBox2D]]]:
    """Self-labeled training data for the detector."""
    domain = world.source if depth_range is None else replace(
        world.source, depth_range=depth_range
    )
    rng = np.random.default_rng([seed, 17])
    gen = torch.Generator().manual_seed(seed)
    images, boxes = [], []
    with torch.no_grad():
        for start in range(0, n_images, batch_size):
            n = min(batch_size, n_images - start)
            sample = _sample_scene_batch(synth, world, domain, n, counts, rng, gen)
            images.append(to_uint8(sample.images))
            boxes.extend(sample.boxes)
    return np.concatenate(images), boxes


def pretrain_synthesizer(
    models: Models,
    source_manifest: DatasetManifest,
    config: TrainConfig,
    world: WorldConfig,
    critic_cfg: CriticConfig,
    metrics: MetricsWriter | None = None,
    seed: int | None = None,
) -> MetricsWriter:
    """Stage 1a: adversarial pretraining of the synthesizer against the
    scene and object-crop critics on the source collection, with the
    configured generator:critic update ratio."""
    seed = config.seed if seed is None else seed
    if metrics is None:
        metrics = MetricsWriter(["iteration", "critic_loss", "gen_scn", "gen_mso"])
    synth, d_scn, d_mso = models.synth, models.d_scn, models.d_mso
    objective = losses.critic_objective(config.critic_objective)
    opt_s = torch.optim.Adam(synth.parameters(), lr=config.learning_rate,
                             betas=config.adam_betas)
    opt_d = torch.optim.Adam(
        list(d_scn.parameters()) + list(d_mso.parameters()),
        lr=config.learning_rate, betas=config.adam_betas,
    )
    rng = np.random.default_rng([seed, 29])
    gen = torch.Generator().manual_seed(seed + 1)
    iteration = 0
    for epoch in range(config.synth_epochs):
        for batch in iterate_batches(source_manifest, config.batch_size, seed,
                                     hide_labels=True, epoch=epoch):
            real = to_unit_range(batch.images)
            n = real.shape[0]
            with torch.no_grad():
                fake = _sample_scene_batch(synth, world, world.source, n,
                                           config.synth_counts, rng, gen)
                fake_crops = _object_crops(fake.images, fake.boxes,
                                           critic_cfg.dilation_factor,
                                           critic_cfg.mso_crop_size)
            real_mso = real if real.shape[-1] == critic_cfg.mso_crop_size else (
                torch.nn.functional.interpolate(real, critic_cfg.mso_crop_size,
                                                mode="bilinear", align_corners=False))
            d_loss = objective(d_scn(real), d_scn(fake.images)) + objective(
                d_mso(real_mso), d_mso(fake_crops))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            gen_scn = gen_mso = 0.0
            for _ in range(config.generator_updates_per_critic):
                sample = _sample_scene_batch(synth, world, world.source, n,
                                             config.synth_counts, rng, gen)
                l_scn = losses.loss_scn(d_scn(sample.images))
                crops = _object_crops(sample.images, sample.boxes,
                                      critic_cfg.dilation_factor,
                                      critic_cfg.mso_crop_size)
                l_mso = losses.loss_mso(d_mso(crops))
                g_loss = config.lambda_scn * l_scn + config.lambda_mso * l_mso
                opt_s.zero_grad()
                g_loss.backward()
                opt_s.step()
                gen_scn, gen_mso = float(l_scn), float(l_mso)
            metrics.write(iteration=iteration, critic_loss=float(d_loss),
                          gen_scn=gen_scn, gen_mso=gen_mso)
            iteration += 1
    return metrics


def pretrain_detector(
    models: Models,
    synth_images: np.ndarray,
    synth_boxes: list[list[BBox2D]],
    background_patches: np.ndarray | None,
    config: TrainConfig,
    seed: int | None = None,
) -> list[float]:
    """Stage 1b: train the detector on self-labeled synthesized images plus
    mined object-free target patches as pure negatives."""
    seed = config.seed if seed is None else seed
    images = synth_images
    boxes: list[list[BBox2D]] = list(synth_boxes)
    if background_patches is not None and len(background_patches):
        images = np.concatenate([synth_images, background_patches])
        boxes = boxes + [[] for _ in range(len(background_patches))]
    return fit_detector(
        models.detector, models.anchors, images, boxes,
        epochs=config.detector_epochs, lr=config.learning_rate,
        batch_size=config.batch_size, seed=seed, betas=config.adam_betas,
    )


@dataclass
class UncoupledResult:
    classifier: ToyClassifier
    mined_background: MinedBackground | None
    synth_metrics: MetricsWriter | None
    detector_history: list[float]
    checkpoint: Path | None


def run_uncoupled_synth_half(
    models: Models,
    source_manifest: DatasetManifest,
    config: TrainConfig,
    world: WorldConfig,
    critic_cfg: CriticConfig,
    out_dir: Path | str | None = None,
    config_hash: str = "",
) -> MetricsWriter:
    """Stage 1a plus checkpointing, the pretrain-synth command's payload."""
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics = MetricsWriter(
        ["iteration", "critic_loss", "gen_scn", "gen_mso"],
        path=None if out_dir is None else out_dir / "uncoupled_synth.csv",
        config_hash=config_hash,
    )
    pretrain_synthesizer(models, source_manifest, config, world, critic_cfg, metrics)
    metrics.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "uncoupled_synth.pt", models.named_modules_dict(),
                        config_hash, extra={"stage": "uncoupled_synth"})
    return metrics


def run_uncoupled_detector_half(
    models: Models,
    source_manifest: DatasetManifest,
    target_manifest: DatasetManifest,
    background_manifest: DatasetManifest,
    config: TrainConfig,
    world: WorldConfig,
    classifier_cfg: ClassifierConfig,
    out_dir: Path | str | None = None,
    config_hash: str = "",
) -> UncoupledResult:
    """Stage 1b: classifier training, background mining, self-labeled
    detector pretraining, checkpointing."""
    out_dir = Path(out_dir) if out_dir is not None else None
    classifier = train_toy_classifier(
        source_manifest.hidden(), background_manifest.hidden(), classifier_cfg,
        seed=config.seed,
    )
    image_size = world.image_size
    try:
        detector_negatives = mine_background_patches(
            target_manifest.hidden(), classifier,
            confidence=config.mining_confidence,
            window=image_size, stride=image_size,
        )
    except EmptyMiningError:
        detector_negatives = None
    try:
        mined_background = mine_background_patches(
            target_manifest.hidden(), classifier, confidence=config.mining_confidence
        )
    except EmptyMiningError:
        mined_background = None

    synth_images, synth_boxes = synthesize_labeled_images(
        models.synth, world, config.detector_train_images,
        config.detector_data_counts, seed=config.seed + 3,
        batch_size=config.batch_size,
    )
    negatives = detector_negatives.patches if detector_negatives is not None else None
    history = pretrain_detector(models, synth_images, synth_boxes, negatives, config)

    checkpoint = None
    if out_dir is not None:
        modules = dict(models.named_modules_dict(), classifier=classifier)
        checkpoint = save_checkpoint(
            out_dir / "uncoupled.pt", modules, config_hash,
            extra={"stage": "uncoupled"},
        )
    return UncoupledResult(classifier, mined_background, None, history, checkpoint)


def run_uncoupled_stage(
    models: Models,
    source_manifest: DatasetManifest,
    target_manifest: DatasetManifest,
    background_manifest: DatasetManifest,
    config: TrainConfig,
    world: WorldConfig,
    critic_cfg: CriticConfig,
    classifier_cfg: ClassifierConfig,
    out_dir: Path | str | None = None,
    config_hash: str = "",
) -> UncoupledResult:
    """Full uncoupled stage: synthesizer pretraining, classifier training,
    background mining, detector pretraining, checkpointing."""
    metrics = run_uncoupled_synth_half(
        models, source_manifest, config, world, critic_cfg, out_dir, config_hash
    )
    result = run_uncoupled_detector_half(
        models, source_manifest, target_manifest, background_manifest, config,
        world, classifier_cfg, out_dir, config_hash,
    )
    result.synth_metrics = metrics
    return result


def run_coupled_stage(
    models: Models,
    source_manifest: DatasetManifest,
    mined_fg: MinedForeground | None,
    mined_bg: MinedBackground | None,
    config: TrainConfig,
    world: WorldConfig,
    critic_cfg: CriticConfig,
    variant: CoupledVariant | None = None,
    depth_range: tuple[float, float] | None = None,
    out_dir: Path | str | None = None,
    config_hash: str = "",
) -> MetricsWriter:
    """Alternate one synthesizer update with one update of every other
    network. The appearance losses ramp per the schedule and update only
    the synthesizer's style pathway; when a chosen depth range is given,
    synthesis samples object depths from it."""
    variant = variant or CoupledVariant()
    if variant.use_fg_bg and (mined_fg is None or mined_bg is None):
        raise ValueError("appearance losses need mined foreground and background patches")
    out_dir = Path(out_dir) if out_dir is not None else None
    synth = models.synth
    objective = losses.critic_objective(config.critic_objective)
    domain = world.source if depth_range is None else replace(
        world.source, depth_range=depth_range
    )

    lr, betas = config.learning_rate, config.adam_betas
    opt_s = torch.optim.Adam(synth.parameters(), lr=lr, betas=betas)
    opt_scn = torch.optim.Adam(models.d_scn.parameters(), lr=lr, betas=betas)
    opt_mso = torch.optim.Adam(models.d_mso.parameters(), lr=lr, betas=betas)
    opt_fg = torch.optim.Adam(models.d_fg.parameters(), lr=lr, betas=betas)
    opt_bg = torch.optim.Adam(models.d_bg.parameters(), lr=lr, betas=betas)
    opt_det = torch.optim.Adam(models.detector.parameters(), lr=lr, betas=betas)

    seed = config.seed
    rng = np.random.default_rng([seed, 37])
    gen = torch.Generator().manual_seed(seed + 2)
    source_batches = _cycle_batches(source_manifest, config.batch_size, seed + 5)
    fg_batches = (
        _cycle_array(mined_fg.patches, config.batch_size, seed + 7, (mined_fg.masks,))
        if mined_fg is not None else None
    )
    bg_batches = (
        _cycle_array(mined_bg.patches, config.batch_size, seed + 9)
        if mined_bg is not None else None
    )

    fields = ["iteration", "phase", "lambda_fg", "scn", "mso", "det", "fg", "bg",
              "critic", "detector"]
    metrics = MetricsWriter(
        fields, path=None if out_dir is None else out_dir / "coupled.csv",
        config_hash=config_hash,
    )
    style_params = list(synth.style_parameters())
    synth_updates = other_updates = 0
    grid = (critic_cfg.patch_grid, critic_cfg.patch_grid)

    for iteration in range(config.coupled_iterations):
        ramp = config.fg_bg_ramp.value(iteration)
        weights = losses.LossWeights(
            scn=config.lambda_scn,
            mso=config.lambda_mso if variant.use_mso else 0.0,
            det=config.lambda_det,
            fg=ramp if variant.use_fg_bg else 0.0,
            bg=ramp if variant.use_fg_bg else 0.0,
        )
        if iteration % 2 == 0:
            sample = _sample_scene_batch(synth, world, domain, config.batch_size,
                                         config.coupled_counts, rng, gen)
            parts = losses.LossParts()
            parts.scn = losses.loss_scn(models.d_scn(sample.images))
            if variant.use_mso:
                crops = _object_crops(sample.images, sample.boxes,
                                      critic_cfg.dilation_factor,
                                      critic_cfg.mso_crop_size)
                parts.mso = losses.loss_mso(models.d_mso(crops))
            logits, deltas = models.detector(sample.images)
            parts.det = detection_loss(logits, deltas, models.anchors, sample.boxes)
            if variant.use_fg_bg:
                mask_small = downscale_mask(sample.masks, grid)
                parts.fg = losses.loss_fg(models.d_fg(sample.images), mask_small)
                parts.bg = losses.loss_bg(models.d_bg(sample.images), mask_small)
            opt_s.zero_grad()
            main = weights.scn * parts.scn + weights.mso * parts.mso + weights.det * parts.det
            main.backward(inputs=list(synth.parameters()),
                          retain_graph=variant.use_fg_bg)
            if variant.use_fg_bg:
                style_loss = weights.fg * parts.fg + weights.bg * parts.bg
                style_loss.backward(inputs=style_params)
            opt_s.step()
            synth_updates += 1
            metrics.write(iteration=iteration, phase="synth", lambda_fg=ramp,
                          scn=float(parts.scn), mso=float(parts.mso),
                          det=float(parts.det), fg=float(parts.fg),
                          bg=float(parts.bg))
        else:
            with torch.no_grad():
                sample = _sample_scene_batch(synth, world, domain, config.batch_size,
                                             config.coupled_counts, rng, gen)
            images = sample.images
            real = to_unit_range(next(source_batches).images)
            critic_total = 0.0

            d_loss = objective(models.d_scn(real), models.d_scn(images))
            opt_scn.zero_grad()
            d_loss.backward()
            opt_scn.step()
            critic_total += float(d_loss)

            if variant.use_mso:
                crops = _object_crops(images, sample.boxes,
                                      critic_cfg.dilation_factor,
                                      critic_cfg.mso_crop_size)
                real_mso = real if real.shape[-1] == critic_cfg.mso_crop_size else (
                    torch.nn.functional.interpolate(real, critic_cfg.mso_crop_size,
                                                    mode="bilinear", align_corners=False))
                d_loss = objective(models.d_mso(real_mso), models.d_mso(crops))
                opt_mso.zero_grad()
                d_loss.backward()
                opt_mso.step()
                critic_total += float(d_loss)

            if variant.use_fg_bg:
                mask_small = downscale_mask(sample.masks, grid)
                fg_patches, fg_masks = next(fg_batches)
                real_fg = to_unit_range(fg_patches)
                real_fg_mask = downscale_mask(
                    torch.from_numpy(fg_masks).unsqueeze(1), grid
                )
                d_loss = losses.loss_d_fg(models.d_fg(real_fg), real_fg_mask,
                                          models.d_fg(images), mask_small)
                opt_fg.zero_grad()
                d_loss.backward()
                opt_fg.step()
                critic_total += float(d_loss)

                (bg_patches,) = next(bg_batches)
                real_bg = to_unit_range(bg_patches)
                d_loss = losses.loss_d_bg(models.d_bg(real_bg),
                                          models.d_bg(images), mask_small)
                opt_bg.zero_grad()
                d_loss.backward()
                opt_bg.step()
                critic_total += float(d_loss)

            logits, deltas = models.detector(images)
            det_loss = detection_loss(logits, deltas, models.anchors, sample.boxes)
            opt_det.zero_grad()
            det_loss.backward()
            opt_det.step()
            other_updates += 1
            metrics.write(iteration=iteration, phase="others", lambda_fg=ramp,
                          critic=critic_total, detector=float(det_loss))

    if abs(synth_updates - other_updates) > 1:
        raise RuntimeError("alternation parity violated")
    metrics.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "coupled.pt", models.named_modules_dict(),
                        config_hash, extra={"stage": "coupled",
                                            "synth_updates": synth_updates,
                                            "other_updates": other_updates})
    return metrics


def mine_foreground_for_coupled(
    models: Models,
    target_manifest: DatasetManifest,
    config: TrainConfig,
) -> MinedForeground:
    """Confident-detection foreground mining with the pretrained detector."""
    return mine_foreground_patches(
        target_manifest.hidden(), models.detector, models.anchors,
        confidence=config.mining_confidence,
    )


def evaluate_detector(
    models: Models,
    manifest: DatasetManifest,
    iou_thresh: float = 0.5,
    batch_size: int = 16,
) -> float:
    """mAP of the current detector against the manifest's oracle labels;
    evaluation-only access."""
    from .evaluation import average_precision

    dets, gts = collect_detections(models, manifest, batch_size)
    return average_precision(dets, gts, iou_thresh)


def collect_detections(
    models: Models,
    manifest: DatasetManifest,
    batch_size: int = 16,
) -> tuple[list, list]:
    dets: list = []
    gts: list = []
    for start in range(0, len(manifest), batch_size):
        indices = range(start, min(start + batch_size, len(manifest)))
        images = np.stack([manifest.load_image(i) for i in indices])
        batch_dets = detect(models.detector, to_unit_range(images), models.anchors)
        dets.extend(batch_dets)
        gts.extend(manifest.oracle_boxes(i) for i in indices)
    return dets, gts
