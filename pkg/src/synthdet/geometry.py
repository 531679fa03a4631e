"""Pinhole camera model, rigid object poses, and box projection.

Coordinate conventions used throughout the package:

* World/camera frame is right-handed with y up and the camera at the
  origin looking down +z.  Azimuth rotates about the y axis.
* Image coordinates are continuous pixels with the origin at the top-left
  corner, u to the right and v downward; the principal point sits at the
  image center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Boxes whose clipped intersection with the image falls below this area are
# discarded as unusable for detector training.
MIN_CLIPPED_AREA = 4.0


class BehindCameraError(ValueError):
    """Raised when a point or box corner has non-positive camera depth."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Square pinhole camera with the principal point at the image center."""

    focal_mm: float
    sensor_mm: float
    image_size: int

    def __post_init__(self) -> None:
        if self.focal_mm <= 0:
            raise ValueError(f"focal_mm must be positive, got {self.focal_mm}")
        if self.sensor_mm <= 0:
            raise ValueError(f"sensor_mm must be positive, got {self.sensor_mm}")
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")

    @property
    def focal_px(self) -> float:
        return self.focal_mm / self.sensor_mm * self.image_size

    @property
    def cx(self) -> float:
        return self.image_size / 2.0

    @property
    def cy(self) -> float:
        return self.image_size / 2.0


def make_camera(focal_mm: float, sensor_mm: float, image_size: int) -> CameraIntrinsics:
    return CameraIntrinsics(float(focal_mm), float(sensor_mm), int(image_size))


@dataclass(frozen=True)
class Pose:
    """Object pose: yaw about the vertical axis plus in-plane translation.

    ``depth`` is measured along the camera axis and must be positive;
    ``azimuth`` is wrapped into [0, 2*pi).
    """

    azimuth: float
    x_translation: float
    depth: float

    def __post_init__(self) -> None:
        if self.depth <= 0:
            raise ValueError(f"depth must be positive, got {self.depth}")
        object.__setattr__(self, "azimuth", float(self.azimuth) % (2.0 * math.pi))


@dataclass(frozen=True)
class Box3D:
    """Axis-aligned 3D box given by half-extents, centered at the object origin."""

    half_extents: tuple[float, float, float]

    def __post_init__(self) -> None:
        if any(h <= 0 for h in self.half_extents):
            raise ValueError(f"half extents must be positive, got {self.half_extents}")

    def corners(self) -> np.ndarray:
        """The 8 corners, shape (8, 3)."""
        hx, hy, hz = self.half_extents
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=np.float64,
        )
        return signs * np.array([hx, hy, hz], dtype=np.float64)


@dataclass(frozen=True)
class BBox2D:
    """Axis-aligned 2D box in continuous pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation followed by translation: p -> R @ p + t."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


def rotation_about_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]], dtype=np.float64)


def pose_to_transform(pose: Pose) -> RigidTransform:
    """Yaw by azimuth about y, then translate to (x_translation, 0, depth)."""
    translation = np.array([pose.x_translation, 0.0, pose.depth], dtype=np.float64)
    return RigidTransform(rotation_about_y(pose.azimuth), translation)


def project_point(camera: CameraIntrinsics, point: np.ndarray) -> tuple[float, float]:
    """Pinhole projection of a single camera-frame point with z > 0."""
    x, y, z = (float(v) for v in np.asarray(point, dtype=np.float64))
    if z <= 0:
        raise BehindCameraError(f"point has non-positive depth z={z}")
    f = camera.focal_px
    return (camera.cx + f * x / z, camera.cy + f * y / z)


def project_box3d(camera: CameraIntrinsics, pose: Pose, box: Box3D) -> BBox2D:
    """Axis-aligned hull of the 8 projected box corners, unclipped."""
    corners = pose_to_transform(pose).apply(box.corners())
    if np.any(corners[:, 2] <= 0):
        raise BehindCameraError(
            f"box corner behind camera at pose depth {pose.depth}"
        )
    f = camera.focal_px
    u = camera.cx + f * corners[:, 0] / corners[:, 2]
    v = camera.cy + f * corners[:, 1] / corners[:, 2]
    return BBox2D(float(u.min()), float(v.min()), float(u.max()), float(v.max()))


def clip_bbox(bbox: BBox2D, image_size: int | tuple[int, int]) -> BBox2D | None:
    """Intersect with the image rectangle; None if too little remains."""
    if isinstance(image_size, tuple):
        width, height = image_size
    else:
        width = height = image_size
    x_min = max(bbox.x_min, 0.0)
    y_min = max(bbox.y_min, 0.0)
    x_max = min(bbox.x_max, float(width))
    y_max = min(bbox.y_max, float(height))
    if x_min >= x_max or y_min >= y_max:
        return None
    clipped = BBox2D(x_min, y_min, x_max, y_max)
    if clipped.area < MIN_CLIPPED_AREA:
        return None
    return clipped
