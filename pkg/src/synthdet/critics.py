"""Adversaries: scalar scene and object-crop critics, fully convolutional
patch critics, spectral weight normalization, and the differentiable
dilated square crop feeding the object critic."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .geometry import BBox2D


def spectral_normalize(
    weight: torch.Tensor, u: torch.Tensor, n_iters: int = 1, eps: float = 1e-12
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Divide a 2D-reshaped weight by its power-iteration estimate of the
    top singular value.

    Returns (normalized weight, u, v, sigma); ``u``/``v`` are the updated
    left/right singular vector estimates and carry no gradient.
    """
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        v = None
        for _ in range(max(n_iters, 1)):
            v = F.normalize(mat.t() @ u, dim=0, eps=eps)
            u = F.normalize(mat @ v, dim=0, eps=eps)
    sigma = u @ mat @ v
    return weight / sigma, u, v, sigma


class _SpectralConv2d(nn.Conv2d):
    """Conv2d whose weight is spectrally normalized with persistent power
    iteration vectors, updated once per training-mode forward."""

    def __init__(self, *args, init_std: float = 0.02, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        nn.init.normal_(self.weight, std=init_std)
        if self.bias is not None:
            nn.init.zeros_(self.bias)
        u = F.normalize(torch.randn(self.out_channels), dim=0)
        self.register_buffer("weight_u", u)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n_iters = 1 if self.training else 0
        if n_iters == 0:
            mat = self.weight.reshape(self.out_channels, -1)
            with torch.no_grad():
                v = F.normalize(mat.t() @ self.weight_u, dim=0)
            sigma = self.weight_u @ mat @ v
            weight = self.weight / sigma
        else:
            weight, u, _, _ = spectral_normalize(self.weight, self.weight_u, n_iters)
            self.weight_u.copy_(u)
        return self._conv_forward(x, weight, self.bias)


@dataclass
class CriticConfig:
    image_size: int = 64
    from_rgb_channels: int = 8
    scene_channels: tuple[int, ...] = (16, 32, 64, 128)
    patch_channels: tuple[int, ...] = (12, 16, 24, 32, 48)
    mso_crop_size: int = 64
    dilation_factor: float = 1.2
    leak: float = 0.2
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.image_size % 2 ** len(self.scene_channels) != 0:
            raise ValueError("scene critic stages must divide the image size")
        if self.image_size < 2 ** len(self.patch_channels):
            raise ValueError("too many patch critic stages for this image size")

    @property
    def patch_grid(self) -> int:
        return self.image_size // 2 ** len(self.patch_channels)


class SceneCritic(nn.Module):
    """Strided conv stack with spectral normalization down to 4x4, then a
    fully connected scalar head. Also used for the object-crop critic."""

    def __init__(self, config: CriticConfig, input_size: int | None = None) -> None:
        super().__init__()
        size = input_size if input_size is not None else config.image_size
        self.leak = config.leak
        self.from_rgb = nn.Conv2d(3, config.from_rgb_channels, 4, padding="same")
        nn.init.normal_(self.from_rgb.weight, std=config.init_std)
        nn.init.zeros_(self.from_rgb.bias)
        stages = []
        ch = config.from_rgb_channels
        for out_ch in config.scene_channels:
            stages.append(_SpectralConv2d(ch, out_ch, 5, stride=2, padding=2,
                                          init_std=config.init_std))
            ch = out_ch
        self.stages = nn.ModuleList(stages)
        final = size // 2 ** len(stages)
        if final < 1:
            raise ValueError("too many scene critic stages for this input size")
        self.head = nn.Linear(ch * final * final, 1)
        nn.init.normal_(self.head.weight, std=config.init_std)
        nn.init.zeros_(self.head.bias)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = F.leaky_relu(self.from_rgb(images), self.leak)
        for stage in self.stages:
            x = F.leaky_relu(stage(x), self.leak)
        return self.head(x.flatten(1)).squeeze(1)


class PatchCritic(nn.Module):
    """Fully convolutional stack emitting one realism score per patch site."""

    def __init__(self, config: CriticConfig) -> None:
        super().__init__()
        self.leak = config.leak
        self.from_rgb = nn.Conv2d(3, config.from_rgb_channels, 4, padding="same")
        nn.init.normal_(self.from_rgb.weight, std=config.init_std)
        nn.init.zeros_(self.from_rgb.bias)
        stages = []
        ch = config.from_rgb_channels
        for out_ch in config.patch_channels:
            stages.append(_SpectralConv2d(ch, out_ch, 4, stride=2, padding=1,
                                          init_std=config.init_std))
            ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.to_score = nn.Conv2d(ch, 1, 1)
        nn.init.normal_(self.to_score.weight, std=config.init_std)
        nn.init.zeros_(self.to_score.bias)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Score map of shape (N, 1, G, G)."""
        x = F.leaky_relu(self.from_rgb(images), self.leak)
        for stage in self.stages:
            x = F.leaky_relu(stage(x), self.leak)
        return self.to_score(x)

    def receptive_field(self, site: tuple[int, int]) -> tuple[int, int, int, int]:
        """Input pixel interval (y0, y1, x0, x1), half-open, that score site
        (i, j) can depend on. Interval arithmetic over the conv stack; the
        size-4 stride-1 from-RGB conv under 'same' padding pads 1 left/top."""
        lo_y = hi_y = site[0]
        lo_x = hi_x = site[1]
        # (kernel, stride, left-pad) innermost first: to_score, stages, from_rgb.
        layers = [(1, 1, 0)] + [(4, 2, 1)] * len(self.stages) + [(4, 1, 1)]
        for kernel, stride, pad in layers:
            lo_y = lo_y * stride - pad
            hi_y = hi_y * stride - pad + kernel - 1
            lo_x = lo_x * stride - pad
            hi_x = hi_x * stride - pad + kernel - 1
        return (lo_y, hi_y + 1, lo_x, hi_x + 1)


def differentiable_crop(
    images: torch.Tensor,
    boxes: list[BBox2D],
    dilation_factor: float,
    out_size: int,
) -> torch.Tensor:
    """Square window of side dilation_factor * max(box w, h) around each box
    center, clamped inside the image, bilinearly resampled to out_size**2.

    Linear in the image for fixed boxes, so gradients flow through the crop.
    """
    n, _, height, width = images.shape
    if len(boxes) != n:
        raise ValueError("one box per image required")
    grids = []
    for box in boxes:
        side = dilation_factor * max(box.width, box.height)
        if min(box.width, box.height) < 1.0:
            raise ValueError(f"degenerate box {box}")
        side = min(side, float(min(width, height)))
        cx = min(max(box.center[0], side / 2.0), width - side / 2.0)
        cy = min(max(box.center[1], side / 2.0), height - side / 2.0)
        steps = (torch.arange(out_size, dtype=images.dtype, device=images.device)
                 + 0.5) / out_size
        us = cx - side / 2.0 + steps * side
        vs = cy - side / 2.0 + steps * side
        gx = us * 2.0 / width - 1.0
        gy = vs * 2.0 / height - 1.0
        grid = torch.stack(torch.meshgrid(gy, gx, indexing="ij"), dim=-1)
        grids.append(grid.flip(-1))  # grid_sample wants (x, y)
    batch_grid = torch.stack(grids)
    return F.grid_sample(images, batch_grid, mode="bilinear",
                         padding_mode="border", align_corners=False)


def downscale_mask(mask: torch.Tensor, grid_shape: tuple[int, int]) -> torch.Tensor:
    """Area-average pooling to score-map resolution, thresholded at 0.5
    coverage (boundary counts as covered)."""
    pooled = F.adaptive_avg_pool2d(mask, grid_shape)
    return (pooled >= 0.5).to(mask.dtype)


def paper_critic_config() -> CriticConfig:
    """Full-resolution critic stacks (256 input: scene to 4x4x512, patch to 8x8)."""
    return CriticConfig(
        image_size=256,
        from_rgb_channels=8,
        scene_channels=(16, 32, 64, 128, 256, 512),
        patch_channels=(16, 32, 64, 128, 256),
        mso_crop_size=256,
    )
