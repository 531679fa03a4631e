"""Procedural toy scenes: shaded cuboids over textured backgrounds.

Produces the single-object source collection, the domain-shifted
multi-object target collection, and held-out reference labels that are
reserved for evaluation. Oracle boxes ride along in the manifest but are
guarded by a capability flag so that training code can never read them.
"""

from __future__ import annotations

import colorsys
import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import (
    BBox2D,
    Box3D,
    CameraIntrinsics,
    Pose,
    clip_bbox,
    make_camera,
    pose_to_transform,
    project_box3d,
)
from .utils import load_png, save_png

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
IMAGE_DIR = "images"

# Unit direction from surfaces toward the light, camera-side and above.
_LIGHT = np.array([0.35, -0.5, -0.79])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)

# Cuboid faces as corner indices into Box3D.corners(), with outward normals.
_FACES = (
    ((0, 1, 3, 2), (-1.0, 0.0, 0.0)),
    ((4, 6, 7, 5), (1.0, 0.0, 0.0)),
    ((0, 4, 5, 1), (0.0, -1.0, 0.0)),
    ((2, 3, 7, 6), (0.0, 1.0, 0.0)),
    ((0, 2, 6, 4), (0.0, 0.0, -1.0)),
    ((1, 5, 7, 3), (0.0, 0.0, 1.0)),
)


class LabelAccessError(RuntimeError):
    """Raised when oracle labels are read through a hidden manifest."""


@dataclass
class DomainParams:
    """Appearance and layout preset for one domain."""

    name: str
    texture_family: str  # "stripes" or "blobs"
    palette_low: tuple[float, float, float]
    palette_high: tuple[float, float, float]
    object_saturation: tuple[float, float]
    object_value: tuple[float, float]
    depth_range: tuple[float, float]
    lighting: float


def source_domain_default() -> DomainParams:
    return DomainParams(
        name="source",
        texture_family="stripes",
        palette_low=(0.52, 0.48, 0.42),
        palette_high=(0.82, 0.79, 0.70),
        object_saturation=(0.55, 0.95),
        object_value=(0.65, 0.95),
        depth_range=(4.0, 5.6),
        lighting=1.0,
    )


def target_domain_default() -> DomainParams:
    return DomainParams(
        name="target",
        texture_family="blobs",
        palette_low=(0.10, 0.14, 0.18),
        palette_high=(0.30, 0.38, 0.44),
        object_saturation=(0.55, 0.95),
        object_value=(0.65, 0.95),
        depth_range=(5.4, 7.4),
        lighting=0.72,
    )


@dataclass
class WorldConfig:
    """Geometry and domain presets shared by the renderer and the synthesizer."""

    image_size: int = 64
    focal_mm: float = 35.0
    sensor_mm: float = 32.0
    box_half_extents: tuple[float, float, float] = (0.55, 0.7, 1.15)
    size_jitter: float = 0.10
    k_max: int = 3
    target_count_probs: tuple[float, ...] = (0.1, 0.4, 0.3, 0.2)
    max_x_translation: float = 1.5
    x_frustum_frac: float = 0.6
    source: DomainParams = field(default_factory=source_domain_default)
    target: DomainParams = field(default_factory=target_domain_default)

    def camera(self) -> CameraIntrinsics:
        return make_camera(self.focal_mm, self.sensor_mm, self.image_size)

    def mean_box(self) -> Box3D:
        return Box3D(tuple(self.box_half_extents))


@dataclass
class SceneObject:
    kind: str
    pose: Pose
    appearance_seed: int


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    background_seed: int
    camera: CameraIntrinsics


def sample_pose(rng: np.random.Generator, world: WorldConfig, domain: DomainParams) -> Pose:
    depth = float(rng.uniform(*domain.depth_range))
    camera = world.camera()
    frustum_halfwidth = (world.image_size / 2.0) * depth / camera.focal_px
    limit = min(world.max_x_translation, world.x_frustum_frac * frustum_halfwidth)
    x = float(rng.uniform(-limit, limit))
    azimuth = float(rng.uniform(0.0, 2.0 * math.pi))
    return Pose(azimuth, x, depth)


def sample_scene_spec(
    rng: np.random.Generator, world: WorldConfig, domain: DomainParams, object_count: int
) -> SceneSpec:
    objects = [
        SceneObject("car", sample_pose(rng, world, domain), int(rng.integers(2**31)))
        for _ in range(object_count)
    ]
    return SceneSpec(objects, int(rng.integers(2**31)), world.camera())


def _object_appearance(
    seed: int, world: WorldConfig, domain: DomainParams
) -> tuple[Box3D, np.ndarray]:
    """Per-instance jittered box and RGB albedo derived from the seed."""
    rng = np.random.default_rng(seed)
    scale = 1.0 + float(rng.uniform(-world.size_jitter, world.size_jitter))
    box = Box3D(tuple(h * scale for h in world.box_half_extents))
    hue = float(rng.uniform(0.0, 1.0))
    sat = float(rng.uniform(*domain.object_saturation))
    val = float(rng.uniform(*domain.object_value))
    return box, np.array(colorsys.hsv_to_rgb(hue, sat, val))


def scene_oracle_boxes(
    spec: SceneSpec, domain: DomainParams, world: WorldConfig
) -> list[BBox2D]:
    """Reference boxes of a scene: the true per-instance (jittered) box of
    each object projected and clipped, exactly as render_scene records them."""
    boxes = []
    for obj in spec.objects:
        box, _ = _object_appearance(obj.appearance_seed, world, domain)
        clipped = clip_bbox(project_box3d(spec.camera, obj.pose, box), spec.camera.image_size)
        if clipped is not None:
            boxes.append(clipped)
    return boxes


def _render_background(
    seed: int, domain: DomainParams, size: int
) -> np.ndarray:
    rng = np.random.default_rng(seed)
    lo = np.array(domain.palette_low)
    hi = np.array(domain.palette_high)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if domain.texture_family == "stripes":
        freq = rng.uniform(1.0, 3.5)
        angle = rng.uniform(0.0, math.pi)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        wave = (xx * math.cos(angle) + yy * math.sin(angle)) / size
        t = 0.5 + 0.5 * np.sin(2.0 * math.pi * freq * wave + phase)
    elif domain.texture_family == "blobs":
        noise = rng.standard_normal((size, size))
        smooth = gaussian_filter(noise, sigma=size / 10.0)
        lo_q, hi_q = np.quantile(smooth, [0.02, 0.98])
        t = np.clip((smooth - lo_q) / max(hi_q - lo_q, 1e-8), 0.0, 1.0)
    else:
        raise ValueError(f"unknown texture family {domain.texture_family!r}")
    img = lo + t[..., None] * (hi - lo)
    img += rng.normal(0.0, 0.01, img.shape)
    return img


def render_scene(
    spec: SceneSpec, domain: DomainParams, world: WorldConfig
) -> tuple[np.ndarray, list[BBox2D]]:
    """Rasterize a scene; returns an 8-bit RGB image and one clipped oracle
    box per visible object (computed from the true per-instance box)."""
    size = spec.camera.image_size
    camera = spec.camera
    img = _render_background(spec.background_seed, domain, size)
    zbuf = np.full((size, size), np.inf)

    # Pixel-center ray directions, z component 1.
    us = (np.arange(size) + 0.5 - camera.cx) / camera.focal_px
    vs = (np.arange(size) + 0.5 - camera.cy) / camera.focal_px
    ray_x, ray_y = np.meshgrid(us, vs, indexing="xy")

    for obj in spec.objects:
        box, albedo = _object_appearance(obj.appearance_seed, world, domain)
        transform = pose_to_transform(obj.pose)
        corners = transform.apply(box.corners())
        proj_u = camera.cx + camera.focal_px * corners[:, 0] / corners[:, 2]
        proj_v = camera.cy + camera.focal_px * corners[:, 1] / corners[:, 2]

        for indices, local_normal in _FACES:
            normal = transform.rotation @ np.asarray(local_normal)
            center = corners[list(indices)].mean(axis=0)
            if normal @ center >= 0:  # facing away from the camera
                continue
            quad_u = proj_u[list(indices)]
            quad_v = proj_v[list(indices)]
            x0 = max(int(np.floor(quad_u.min())), 0)
            x1 = min(int(np.ceil(quad_u.max())) + 1, size)
            y0 = max(int(np.floor(quad_v.min())), 0)
            y1 = min(int(np.ceil(quad_v.max())) + 1, size)
            if x0 >= x1 or y0 >= y1:
                continue
            px = np.arange(x0, x1) + 0.5
            py = np.arange(y0, y1) + 0.5
            gx, gy = np.meshgrid(px, py, indexing="xy")
            inside = np.ones(gx.shape, dtype=bool)
            sign = 0.0
            for k in range(4):
                ax, ay = quad_u[k], quad_v[k]
                bx, by = quad_u[(k + 1) % 4], quad_v[(k + 1) % 4]
                cross = (bx - ax) * (gy - ay) - (by - ay) * (gx - ax)
                if sign == 0.0:
                    sign = math.copysign(1.0, (bx - ax) * (quad_v[(k + 2) % 4] - ay)
                                         - (by - ay) * (quad_u[(k + 2) % 4] - ax))
                inside &= sign * cross >= 0
            if not inside.any():
                continue
            # Depth along each ray from the face plane n.p = n.c.
            dir_x = ray_x[y0:y1, x0:x1]
            dir_y = ray_y[y0:y1, x0:x1]
            denom = normal[0] * dir_x + normal[1] * dir_y + normal[2]
            with np.errstate(divide="ignore", invalid="ignore"):
                depth = (normal @ center) / denom
            valid = inside & np.isfinite(depth) & (depth > 0)
            patch_z = zbuf[y0:y1, x0:x1]
            closer = valid & (depth < patch_z)
            if not closer.any():
                continue
            shade = 0.35 + 0.65 * max(0.0, float(normal @ _LIGHT))
            patch = img[y0:y1, x0:x1]
            patch[closer] = albedo * shade
            patch_z[closer] = depth[closer]

    img *= domain.lighting
    annotations = scene_oracle_boxes(spec, domain, world)
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8), annotations


@dataclass
class ImageRecord:
    file_name: str
    object_count: int


@dataclass
class DatasetManifest:
    """On-disk index of one split; oracle labels guarded by ``labels_hidden``."""

    root: Path
    split: str
    domain: str
    records: list[ImageRecord]
    version: int = MANIFEST_VERSION
    config_hash: str = ""
    labels_hidden: bool = False
    _boxes: list[list[BBox2D]] = field(default_factory=list, repr=False)
    _poses: list[list[Pose]] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def hidden(self) -> "DatasetManifest":
        """A label-hidden view sharing the underlying records."""
        view = copy.copy(self)
        view.labels_hidden = True
        return view

    def _check_visible(self) -> None:
        if self.labels_hidden:
            raise LabelAccessError(
                f"oracle labels of split {self.split!r} are hidden; "
                "evaluation-only access required"
            )

    def oracle_boxes(self, index: int) -> list[BBox2D]:
        self._check_visible()
        return self._boxes[index]

    def oracle_poses(self, index: int) -> list[Pose]:
        self._check_visible()
        return self._poses[index]

    def image_path(self, index: int) -> Path:
        return self.root / self.split / self.records[index].file_name

    def load_image(self, index: int) -> np.ndarray:
        return load_png(self.image_path(index))

    def save(self) -> Path:
        path = self.root / self.split / MANIFEST_NAME
        payload = {
            "version": self.version,
            "split": self.split,
            "domain": self.domain,
            "config_hash": self.config_hash,
            "records": [
                {
                    "file": rec.file_name,
                    "object_count": rec.object_count,
                    "boxes": [list(b.as_tuple()) for b in boxes],
                    "poses": [[p.azimuth, p.x_translation, p.depth] for p in poses],
                }
                for rec, boxes, poses in zip(self.records, self._boxes, self._poses)
            ],
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=1))
        return path

    @classmethod
    def load(cls, split_dir: Path | str) -> "DatasetManifest":
        split_dir = Path(split_dir)
        payload = json.loads((split_dir / MANIFEST_NAME).read_text())
        records, boxes, poses = [], [], []
        for entry in payload["records"]:
            file_name = entry["file"]
            if not (split_dir / file_name).exists():
                raise FileNotFoundError(f"manifest lists missing file {file_name}")
            records.append(ImageRecord(file_name, int(entry["object_count"])))
            boxes.append([BBox2D(*b) for b in entry["boxes"]])
            poses.append([Pose(*p) for p in entry["poses"]])
        return cls(
            root=split_dir.parent,
            split=payload["split"],
            domain=payload["domain"],
            records=records,
            version=int(payload["version"]),
            config_hash=payload.get("config_hash", ""),
            _boxes=boxes,
            _poses=poses,
        )


def _generate_collection(
    world: WorldConfig,
    domain: DomainParams,
    counts: Sequence[int],
    seed: int,
    out_root: Path | str,
    split: str,
    config_hash: str = "",
) -> DatasetManifest:
    out_root = Path(out_root)
    image_dir = out_root / split / IMAGE_DIR
    image_dir.mkdir(parents=True, exist_ok=True)
    records, all_boxes, all_poses = [], [], []
    seq = np.random.SeedSequence([seed, len(counts)])
    for index, (count, child) in enumerate(zip(counts, seq.spawn(len(counts)))):
        rng = np.random.default_rng(child)
        spec = sample_scene_spec(rng, world, domain, count)
        image, boxes = render_scene(spec, domain, world)
        file_name = f"{IMAGE_DIR}/{index:06d}.png"
        save_png(image_dir / f"{index:06d}.png", image, {"config_hash": config_hash})
        records.append(ImageRecord(file_name, count))
        all_boxes.append(boxes)
        all_poses.append([obj.pose for obj in spec.objects])
    manifest = DatasetManifest(
        root=out_root,
        split=split,
        domain=domain.name,
        records=records,
        config_hash=config_hash,
        _boxes=all_boxes,
        _poses=all_poses,
    )
    manifest.save()
    return manifest


def generate_source_collection(
    world: WorldConfig,
    n_images: int,
    seed: int,
    out_root: Path | str,
    split: str = "source_train",
    config_hash: str = "",
) -> DatasetManifest:
    """N single-object images in the source domain."""
    return _generate_collection(
        world, world.source, [1] * n_images, seed, out_root, split, config_hash
    )


def generate_target_collection(
    world: WorldConfig,
    n_images: int,
    seed: int,
    out_root: Path | str,
    split: str = "target_train",
    domain: DomainParams | None = None,
    count_probs: Sequence[float] | None = None,
    config_hash: str = "",
) -> DatasetManifest:
    """N images with 0..k_max objects drawn from the configured count
    distribution, rendered with the target preset."""
    domain = domain if domain is not None else world.target
    probs = np.asarray(
        count_probs if count_probs is not None else world.target_count_probs, dtype=float
    )
    if len(probs) != world.k_max + 1:
        raise ValueError("count_probs must cover 0..k_max")
    rng = np.random.default_rng([seed, 41])
    counts = rng.choice(len(probs), size=n_images, p=probs / probs.sum())
    return _generate_collection(
        world, domain, [int(c) for c in counts], seed, out_root, split, config_hash
    )


def generate_background_collection(
    world: WorldConfig,
    n_images: int,
    seed: int,
    out_root: Path | str,
    split: str = "source_bg",
    domain: DomainParams | None = None,
    config_hash: str = "",
) -> DatasetManifest:
    """Object-free images, used as image-level negatives for the classifier."""
    domain = domain if domain is not None else world.source
    return _generate_collection(
        world, domain, [0] * n_images, seed, out_root, split, config_hash
    )


@dataclass
class Batch:
    """Images only; served when labels are withheld."""

    images: np.ndarray  # (N, H, W, 3) uint8
    indices: list[int]


@dataclass
class LabeledBatch(Batch):
    annotations: list[list[BBox2D]]


def iterate_batches(
    manifest: DatasetManifest,
    batch_size: int,
    seed: int,
    hide_labels: bool = False,
    epoch: int = 0,
) -> Iterator[Batch]:
    """One shuffled epoch; order is a pure function of (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(manifest) == 0:
        raise ValueError(f"manifest for split {manifest.split!r} is empty")
    source = manifest.hidden() if hide_labels else manifest
    order = np.random.default_rng([seed, epoch]).permutation(len(source))
    for start in range(0, len(order), batch_size):
        chunk = [int(i) for i in order[start : start + batch_size]]
        images = np.stack([source.load_image(i) for i in chunk])
        if hide_labels:
            yield Batch(images, chunk)
        else:
            yield LabeledBatch(images, chunk, [source.oracle_boxes(i) for i in chunk])
