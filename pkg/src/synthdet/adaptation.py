"""Target-data adaptation: an image-level object classifier trained from
composition labels only, Grad-CAM localization, confident-patch mining for
the appearance critics, entropic optimal transport, and the object-scale
search over candidate depth ranges."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import logsumexp
from torch import nn

from .critics import differentiable_crop
from .detector import AnchorDetector, Detection, DetectorConfig, build_anchors, detect, fit_detector
from .geometry import BBox2D, Pose
from .synthnet import Synthesizer
from .toyworld import DatasetManifest, WorldConfig, sample_pose
from .utils import to_unit_range

CLASS_ABSENT = 0
CLASS_PRESENT = 1


class EmptyMiningError(RuntimeError):
    """No patch satisfied the mining thresholds."""


class SinkhornConvergenceError(RuntimeError):
    def __init__(self, violation: float, max_iters: int) -> None:
        super().__init__(
            f"sinkhorn failed to converge within {max_iters} iterations "
            f"(marginal violation {violation:.3e})"
        )
        self.violation = violation


@dataclass
class ClassifierConfig:
    image_size: int = 64
    channels: tuple[int, ...] = (8, 16, 32)
    learning_rate: float = 1e-3
    epochs: int = 6
    batch_size: int = 32
    brightness_jitter: tuple[float, float] = (0.55, 1.2)
    init_std: float = 0.05
    leak: float = 0.2


class ToyClassifier(nn.Module):
    """Object present/absent classifier with a named final conv layer whose
    pooled activations double as the crop embedding."""

    def __init__(self, config: ClassifierConfig) -> None:
        super().__init__()
        self.config = config
        self.leak = config.leak
        convs = []
        ch = 3
        for out_ch in config.channels:
            conv = nn.Conv2d(ch, out_ch, 3, stride=2, padding=1)
            nn.init.normal_(conv.weight, std=config.init_std)
            nn.init.zeros_(conv.bias)
            convs.append(conv)
            ch = out_ch
        self.features = nn.ModuleList(convs)
        self.head = nn.Linear(ch, 2)
        nn.init.normal_(self.head.weight, std=config.init_std)
        nn.init.zeros_(self.head.bias)

    @property
    def feature_dim(self) -> int:
        return self.config.channels[-1]

    def feature_maps(self, images: torch.Tensor) -> torch.Tensor:
        x = images
        for conv in self.features:
            x = F.leaky_relu(conv(x), self.leak)
        return x

    def logits_from_features(self, feats: torch.Tensor) -> torch.Tensor:
        return self.head(feats.mean(dim=(2, 3)))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.logits_from_features(self.feature_maps(images))


def _prepare_classifier_batch(images: np.ndarray, rng: np.random.Generator,
                              jitter: tuple[float, float]) -> torch.Tensor:
    tensor = to_unit_range(images)
    factors = torch.from_numpy(
        rng.uniform(jitter[0], jitter[1], size=(tensor.shape[0], 1, 1, 1))
    ).to(tensor.dtype)
    # Jitter in [0, 1] intensity space, then back to [-1, 1].
    return ((tensor + 1.0) * 0.5 * factors).clamp(0.0, 1.0) * 2.0 - 1.0


def train_toy_classifier(
    object_manifest: DatasetManifest,
    background_manifest: DatasetManifest,
    config: ClassifierConfig,
    seed: int = 0,
) -> ToyClassifier:
    """Binary classifier from image-level composition labels only; object
    presence comes from which collection an image belongs to, never from
    boxes. Brightness jitter makes it usable across lighting shifts."""
    n_pos, n_neg = len(object_manifest), len(background_manifest)
    if max(n_pos, n_neg) > 10 * max(min(n_pos, n_neg), 1):
        warnings.warn(f"classifier classes are imbalanced ({n_pos} vs {n_neg})")
    torch.manual_seed(seed)
    model = ToyClassifier(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    entries = [(object_manifest, i, CLASS_PRESENT) for i in range(n_pos)]
    entries += [(background_manifest, i, CLASS_ABSENT) for i in range(n_neg)]
    for epoch in range(config.epochs):
        rng = np.random.default_rng([seed, epoch, 7])
        order = rng.permutation(len(entries))
        for start in range(0, len(order), config.batch_size):
            chunk = [entries[i] for i in order[start : start + config.batch_size]]
            images = np.stack([m.load_image(i) for m, i, _ in chunk])
            labels = torch.tensor([lab for _, _, lab in chunk])
            batch = _prepare_classifier_batch(images, rng, config.brightness_jitter)
            loss = F.cross_entropy(model(batch), labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


def gradcam(classifier: ToyClassifier, image: torch.Tensor, class_index: int) -> torch.Tensor:
    """Gradient-weighted activation map for one image, upsampled to the
    input resolution; nonnegative by the final ReLU."""
    if image.dim() == 3:
        image = image.unsqueeze(0)
    feats = classifier.feature_maps(image).detach().requires_grad_(True)
    score = classifier.logits_from_features(feats)[0, class_index]
    grads = torch.autograd.grad(score, feats)[0]
    weights = grads.mean(dim=(2, 3))
    cam = F.relu((weights[:, :, None, None] * feats).sum(dim=1, keepdim=True))
    out = F.interpolate(cam, size=image.shape[-2:], mode="bilinear", align_corners=False)
    return out[0, 0].detach()


def _resize_uint8(patch: np.ndarray, out_size: int) -> np.ndarray:
    if patch.shape[0] == out_size and patch.shape[1] == out_size:
        return patch.copy()
    tensor = torch.from_numpy(patch.astype(np.float32)).permute(2, 0, 1)[None]
    resized = F.interpolate(tensor, size=(out_size, out_size), mode="bilinear",
                            align_corners=False)
    return resized[0].permute(1, 2, 0).clamp(0, 255).round().to(torch.uint8).numpy()


def _square_window(cx: float, cy: float, side: int, image_size: int) -> tuple[int, int]:
    """Top-left corner of a side x side window centered near (cx, cy) and
    clamped inside the image."""
    x0 = int(round(cx - side / 2.0))
    y0 = int(round(cy - side / 2.0))
    x0 = min(max(x0, 0), image_size - side)
    y0 = min(max(y0, 0), image_size - side)
    return x0, y0


@dataclass
class MinedBackground:
    patches: np.ndarray  # (M, S, S, 3) uint8
    sources: list[tuple[int, BBox2D]] = field(default_factory=list)


def mine_background_patches(
    manifest: DatasetManifest,
    classifier: ToyClassifier,
    confidence: float = 0.9,
    window: int | None = None,
    stride: int | None = None,
    cam_fraction: float = 0.3,
    out_size: int | None = None,
) -> MinedBackground:
    """Sliding windows over the target collection whose object-absent
    probability exceeds ``confidence`` and whose share of the image's
    activation-map mass stays low. Patches keep their native window
    resolution unless ``out_size`` says otherwise; the classifier is fully
    convolutional, so it scores windows at native size."""
    image_size = classifier.config.image_size
    window = window if window is not None else image_size // 2
    stride = stride if stride is not None else max(window // 2, 1)
    out_size = out_size if out_size is not None else window
    patches: list[np.ndarray] = []
    sources: list[tuple[int, BBox2D]] = []
    offsets = list(range(0, image_size - window + 1, stride))
    for index in range(len(manifest)):
        image = manifest.load_image(index)
        tensor = to_unit_range(image)
        cam = gradcam(classifier, tensor, CLASS_PRESENT)
        cam_peak = float(cam.max()) + 1e-8
        crops, boxes = [], []
        for y0 in offsets:
            for x0 in offsets:
                crop = image[y0 : y0 + window, x0 : x0 + window]
                cam_mass = float(cam[y0 : y0 + window, x0 : x0 + window].mean()) / cam_peak
                if cam_mass >= cam_fraction:
                    continue
                crops.append(_resize_uint8(crop, out_size))
                boxes.append(BBox2D(x0, y0, x0 + window, y0 + window))
        if not crops:
            continue
        with torch.no_grad():
            logits = classifier(to_unit_range(np.stack(crops)))
            p_absent = torch.softmax(logits, dim=1)[:, CLASS_ABSENT]
        for crop, box, p in zip(crops, boxes, p_absent.tolist()):
            if p > confidence:
                patches.append(crop)
                sources.append((index, box))
    if not patches:
        raise EmptyMiningError("no background patch passed the mining thresholds")
    return MinedBackground(np.stack(patches), sources)


@dataclass
class MinedForeground:
    patches: np.ndarray  # (M, S, S, 3) uint8
    masks: np.ndarray  # (M, S, S) float32 in {0, 1}
    sources: list[tuple[int, Detection]] = field(default_factory=list)


def mine_foreground_patches(
    manifest: DatasetManifest,
    model: AnchorDetector,
    anchors: np.ndarray,
    confidence: float = 0.9,
    crop_size: int | None = None,
    batch_size: int = 16,
) -> MinedForeground:
    """Square crops centered on strictly-confident detections, paired with
    the filled detection-box mask inside the crop."""
    image_size = model.config.image_size
    crop_size = crop_size if crop_size is not None else image_size
    crop_size = min(crop_size, image_size)
    patches, masks, sources = [], [], []
    for start in range(0, len(manifest), batch_size):
        indices = range(start, min(start + batch_size, len(manifest)))
        images = np.stack([manifest.load_image(i) for i in indices])
        detections = detect(model, to_unit_range(images), anchors)
        for offset, dets in enumerate(detections):
            index = start + offset
            for det in dets:
                if det.confidence <= confidence:
                    continue
                cx, cy = det.bbox.center
                x0, y0 = _square_window(cx, cy, crop_size, image_size)
                crop = images[offset, y0 : y0 + crop_size, x0 : x0 + crop_size]
                mask = np.zeros((crop_size, crop_size), dtype=np.float32)
                bx0 = int(np.floor(max(det.bbox.x_min - x0, 0)))
                by0 = int(np.floor(max(det.bbox.y_min - y0, 0)))
                bx1 = int(np.ceil(min(det.bbox.x_max - x0, crop_size)))
                by1 = int(np.ceil(min(det.bbox.y_max - y0, crop_size)))
                if bx1 > bx0 and by1 > by0:
                    mask[by0:by1, bx0:bx1] = 1.0
                patches.append(crop.copy())
                masks.append(mask)
                sources.append((index, det))
    if not patches:
        raise EmptyMiningError("no detection passed the foreground mining threshold")
    return MinedForeground(np.stack(patches), np.stack(masks), sources)


def save_mined_background(directory, mined: MinedBackground, config_hash: str = "") -> None:
    """Patch directory with a JSON sidecar recording provenance."""
    import json
    from pathlib import Path

    from .utils import save_png

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, patch in enumerate(mined.patches):
        save_png(directory / f"{i:05d}.png", patch, {"config_hash": config_hash})
    sidecar = {
        "kind": "background",
        "config_hash": config_hash,
        "sources": [[idx, list(box.as_tuple())] for idx, box in mined.sources],
    }
    (directory / "manifest.json").write_text(json.dumps(sidecar, indent=1))


def load_mined_background(directory) -> MinedBackground:
    import json
    from pathlib import Path

    from .utils import load_png

    directory = Path(directory)
    sidecar = json.loads((directory / "manifest.json").read_text())
    patches = np.stack(
        [load_png(directory / f"{i:05d}.png") for i in range(len(sidecar["sources"]))]
    )
    sources = [(int(idx), BBox2D(*box)) for idx, box in sidecar["sources"]]
    return MinedBackground(patches, sources)


def save_mined_foreground(directory, mined: MinedForeground, config_hash: str = "") -> None:
    import json
    from pathlib import Path

    from PIL import Image

    from .utils import save_png

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, (patch, mask) in enumerate(zip(mined.patches, mined.masks)):
        save_png(directory / f"{i:05d}.png", patch, {"config_hash": config_hash})
        Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(
            directory / f"{i:05d}_mask.png"
        )
    sidecar = {
        "kind": "foreground",
        "config_hash": config_hash,
        "sources": [
            [idx, list(det.bbox.as_tuple()), det.confidence] for idx, det in mined.sources
        ],
    }
    (directory / "manifest.json").write_text(json.dumps(sidecar, indent=1))


def load_mined_foreground(directory) -> MinedForeground:
    import json
    from pathlib import Path

    from PIL import Image

    from .utils import load_png

    directory = Path(directory)
    sidecar = json.loads((directory / "manifest.json").read_text())
    n = len(sidecar["sources"])
    patches = np.stack([load_png(directory / f"{i:05d}.png") for i in range(n)])
    masks = np.stack(
        [
            (np.asarray(Image.open(directory / f"{i:05d}_mask.png")) > 127).astype(np.float32)
            for i in range(n)
        ]
    )
    sources = [
        (int(idx), Detection(BBox2D(*box), float(conf)))
        for idx, box, conf in sidecar["sources"]
    ]
    return MinedForeground(patches, masks, sources)


def sinkhorn_distance(
    a: np.ndarray,
    b: np.ndarray,
    epsilon: float,
    max_iters: int = 1000,
    tol: float = 1e-6,
) -> float:
    """Entropic-regularized transport cost <T, C> between two uniformly
    weighted point clouds with squared Euclidean ground cost, by log-domain
    alternating marginal scaling."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("feature sets must be finite")
    n, m = a.shape[0], b.shape[0]
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    log_mu = -np.log(n)
    log_nu = -np.log(m)
    f = np.zeros(n)
    g = np.zeros(m)
    violation = np.inf
    for _ in range(max_iters):
        f = epsilon * (log_mu - logsumexp((g[None, :] - cost) / epsilon, axis=1))
        g = epsilon * (log_nu - logsumexp((f[:, None] - cost) / epsilon, axis=0))
        plan = np.exp((f[:, None] + g[None, :] - cost) / epsilon)
        violation = float(np.abs(plan.sum(axis=1) - 1.0 / n).max())
        if violation < tol:
            return float((plan * cost).sum())
    raise SinkhornConvergenceError(violation, max_iters)


def median_cost_epsilon(a: np.ndarray, b: np.ndarray, scale: float = 0.05) -> float:
    """Epsilon relative to the median pairwise squared distance."""
    cost = ((np.atleast_2d(a)[:, None, :] - np.atleast_2d(b)[None, :, :]) ** 2).sum(axis=2)
    return max(scale * float(np.median(cost)), 1e-12)


def embed_crops(
    classifier: ToyClassifier,
    images: np.ndarray,
    centers: list[tuple[float, float]],
    crop_size: int,
) -> np.ndarray:
    """Pooled final-conv features of fixed-size windows around the given
    centers; the window keeps object scale information intact."""
    image_size = images.shape[1]
    crops = []
    for image, (cx, cy) in zip(images, centers):
        x0, y0 = _square_window(cx, cy, crop_size, image_size)
        crops.append(_resize_uint8(image[y0 : y0 + crop_size, x0 : x0 + crop_size],
                                   classifier.config.image_size))
    with torch.no_grad():
        feats = classifier.feature_maps(to_unit_range(np.stack(crops)))
        return feats.mean(dim=(2, 3)).numpy()


@dataclass
class DepthRange:
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not 0 < self.lo < self.hi:
            raise ValueError(f"invalid depth range [{self.lo}, {self.hi})")

    def as_tuple(self) -> tuple[float, float]:
        return (self.lo, self.hi)


@dataclass
class ScaleSearchConfig:
    n_synth_images: int = 160
    synth_batch: int = 16
    detector_epochs: int = 4
    detector_lr: float = 2e-4
    detector_batch: int = 16
    harvest_confidence: float = 0.85
    crop_size: int = 32
    max_embed: int = 256
    sinkhorn_epsilon_scale: float = 0.05
    sinkhorn_max_iters: int = 5000
    sinkhorn_tol: float = 1e-6


@dataclass
class RangeResult:
    depth_range: DepthRange
    sinkhorn: float | None
    n_detections: int
    excluded: bool


@dataclass
class ScaleAdaptationReport:
    chosen_index: int
    chosen: DepthRange
    results: list[RangeResult]

    def as_dict(self) -> dict:
        return {
            "chosen_index": self.chosen_index,
            "chosen": self.chosen.as_tuple(),
            "ranges": [
                {
                    "range": r.depth_range.as_tuple(),
                    "sinkhorn": r.sinkhorn,
                    "n_detections": r.n_detections,
                    "excluded": r.excluded,
                }
                for r in self.results
            ],
        }


def _synthesize_range_dataset(
    synth: Synthesizer,
    world: WorldConfig,
    depth_range: DepthRange,
    n_images: int,
    batch: int,
    seed: int,
) -> tuple[np.ndarray, list[list[BBox2D]]]:
    from dataclasses import replace

    from .utils import to_uint8

    rng = np.random.default_rng([seed, 11])
    gen = torch.Generator().manual_seed(seed)
    domain = replace(world.source, depth_range=depth_range.as_tuple())
    images, boxes = [], []
    with torch.no_grad():
        for start in range(0, n_images, batch):
            n = min(batch, n_images - start)
            poses = [[sample_pose(rng, world, domain)] for _ in range(n)]
            z_fg, z_bg = synth.sample_styles(n, 1, gen)
            sample = synth.synthesize(z_fg, z_bg, poses)
            images.append(to_uint8(sample.images))
            boxes.extend(sample.boxes)
    return np.concatenate(images), boxes


def object_scale_adaptation(
    synth: Synthesizer,
    depth_ranges: list[DepthRange],
    target_manifest: DatasetManifest,
    classifier: ToyClassifier,
    detector_config: DetectorConfig,
    search: ScaleSearchConfig,
    world: WorldConfig,
    seed: int = 0,
) -> ScaleAdaptationReport:
    """Find the synthesis depth range whose detector-harvested target crops
    best match its own synthesized object crops in feature space.

    Per range: synthesize labeled data at that depth, train a fresh
    detector on it, harvest strictly-confident target detections, and
    compare the two crop feature clouds by Sinkhorn distance. Smallest
    distance wins; ties break toward the lowest range index. Ranges with no
    confident target detections are excluded with a warning.
    """
    if not depth_ranges:
        raise ValueError("at least one depth range required")
    if len(depth_ranges) == 1:
        only = RangeResult(depth_ranges[0], None, 0, False)
        return ScaleAdaptationReport(0, depth_ranges[0], [only])

    target_images = np.stack([target_manifest.load_image(i)
                              for i in range(len(target_manifest))])
    results: list[RangeResult] = []
    for r_index, depth_range in enumerate(depth_ranges):
        range_seed = seed * 1009 + r_index
        images, boxes = _synthesize_range_dataset(
            synth, world, depth_range, search.n_synth_images, search.synth_batch,
            range_seed,
        )
        torch.manual_seed(range_seed)
        model = AnchorDetector(detector_config)
        anchors = build_anchors(detector_config)
        fit_detector(model, anchors, images, boxes, epochs=search.detector_epochs,
                     lr=search.detector_lr, batch_size=search.detector_batch,
                     seed=range_seed)
        harvested: list[tuple[int, Detection]] = []
        for start in range(0, len(target_images), search.detector_batch):
            block = target_images[start : start + search.detector_batch]
            for offset, dets in enumerate(detect(model, to_unit_range(block), anchors)):
                harvested.extend(
                    (start + offset, d) for d in dets
                    if d.confidence > search.harvest_confidence
                )
        if not harvested:
            warnings.warn(
                f"range {depth_range.as_tuple()} yielded no confident target "
                "detections; excluded from the scale search"
            )
            results.append(RangeResult(depth_range, None, 0, True))
            continue
        rng = np.random.default_rng([range_seed, 23])
        alpha_centers = [boxes[i][0].center for i in range(len(boxes))]
        alpha = embed_crops(classifier, images, alpha_centers, search.crop_size)
        beta_imgs = np.stack([target_images[i] for i, _ in harvested])
        beta_centers = [d.bbox.center for _, d in harvested]
        beta = embed_crops(classifier, beta_imgs, beta_centers, search.crop_size)
        if alpha.shape[0] > search.max_embed:
            alpha = alpha[rng.choice(alpha.shape[0], search.max_embed, replace=False)]
        if beta.shape[0] > search.max_embed:
            beta = beta[rng.choice(beta.shape[0], search.max_embed, replace=False)]
        epsilon = median_cost_epsilon(alpha, beta, search.sinkhorn_epsilon_scale)
        value = sinkhorn_distance(alpha, beta, epsilon,
                                  max_iters=search.sinkhorn_max_iters,
                                  tol=search.sinkhorn_tol)
        results.append(RangeResult(depth_range, value, len(harvested), False))

    valid = [(i, r.sinkhorn) for i, r in enumerate(results) if not r.excluded]
    if not valid:
        raise EmptyMiningError("every depth range was excluded from the scale search")
    chosen_index = min(valid, key=lambda pair: (pair[1], pair[0]))[0]
    return ScaleAdaptationReport(chosen_index, depth_ranges[chosen_index], results)
