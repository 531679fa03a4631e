"""Pose-conditioned scene generator with per-object 3D feature branches.

Layout of the forward pass:

* learnable canonical 3D codes for foreground objects and the background,
  stylized through MLP-driven AdaIN at every 3D stage;
* per-object rigid placement of the feature volume (yaw + in-plane
  translation) inside a shared world-space cube, zero outside;
* element-wise max collation of all volumes;
* perspective resampling of the cube into camera-frustum slices, depth
  collapse into channels, 1x1 projection;
* 2D transposed-conv decoding to an RGB image in [-1, 1].

Because placement is purely geometric, each synthesized object carries an
exact 2D box label obtained by projecting the class-mean 3D box through
the same camera at the conditioning pose; labels never depend on weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import BBox2D, Box3D, CameraIntrinsics, Pose, clip_bbox, project_box3d


@dataclass
class VolumeSpec:
    """World-space cube holding the 3D features, and the frustum slab that
    the 2D projection samples."""

    center_depth: float = 5.8
    half_extent: float = 3.0
    z_near: float = 3.0
    z_far: float = 8.6

    def identity_pose(self) -> Pose:
        """Pose whose rigid resampling is the identity on the cube lattice."""
        return Pose(0.0, 0.0, self.center_depth)


@dataclass
class SynthConfig:
    image_size: int = 64
    style_dim_fg: int = 200
    style_dim_bg: int = 100
    mlp_width: int = 200
    mlp_layers: int = 4
    code_grid: int = 4
    grid_size: int = 16
    code_channels_fg: int = 512
    code_channels_bg: int = 256
    branch_channels: tuple[int, ...] = (128, 64)
    project_channels: int = 256
    decoder_channels: tuple[int, ...] = (128, 64)
    k_max: int = 3
    code_init_std: float = 0.2
    conv_init_std: float = 0.02
    leak: float = 0.2
    volume: VolumeSpec = field(default_factory=VolumeSpec)

    def __post_init__(self) -> None:
        stages = len(self.decoder_channels)
        if self.grid_size * 2**stages != self.image_size:
            raise ValueError(
                f"decoder_channels {self.decoder_channels} cannot upsample "
                f"{self.grid_size} to {self.image_size}"
            )


def adain(features: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor,
          eps: float = 1e-5) -> torch.Tensor:
    """Per-channel normalization over spatial dims followed by an affine.

    ``scale``/``shift`` may be (C,) or (N, C); constant channels are
    stabilized by ``eps``.
    """
    if features.dim() < 3:
        raise ValueError("expected (N, C, *spatial) input")
    spatial = tuple(range(2, features.dim()))
    mean = features.mean(dim=spatial, keepdim=True)
    var = features.var(dim=spatial, unbiased=False, keepdim=True)
    normed = (features - mean) / torch.sqrt(var + eps)
    shape = (1, -1) if scale.dim() == 1 else (scale.shape[0], -1)
    shape = shape + (1,) * len(spatial)
    return normed * scale.reshape(shape) + shift.reshape(shape)


class StyleMLP(nn.Module):
    """Maps a style code to (scale, shift) pairs for each AdaIN site.

    The raw scale output is offset by one, so a zeroed head yields plain
    instance normalization; the default init keeps the head near zero but
    nonzero so the body is trainable from the first step.
    """

    def __init__(self, style_dim: int, site_channels: tuple[int, ...],
                 width: int = 200, layers: int = 4, leak: float = 0.2) -> None:
        super().__init__()
        self.site_channels = tuple(site_channels)
        blocks: list[nn.Module] = []
        in_dim = style_dim
        for _ in range(layers):
            blocks.append(nn.Linear(in_dim, width))
            blocks.append(nn.LeakyReLU(leak))
            in_dim = width
        self.body = nn.Sequential(*blocks)
        self.head = nn.Linear(in_dim, 2 * sum(self.site_channels))
        nn.init.normal_(self.head.weight, std=0.01)
        nn.init.zeros_(self.head.bias)

    def forward(self, z: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        raw = self.head(self.body(z))
        params: list[tuple[torch.Tensor, torch.Tensor]] = []
        offset = 0
        for channels in self.site_channels:
            d_scale = raw[:, offset : offset + channels]
            shift = raw[:, offset + channels : offset + 2 * channels]
            params.append((1.0 + d_scale, shift))
            offset += 2 * channels
        return params


class ObjectBranch(nn.Module):
    """Learnable canonical 3D code plus two stylized stride-2 deconvolutions."""

    def __init__(self, code_channels: int, branch_channels: tuple[int, ...],
                 code_grid: int, init_std: float, conv_std: float, leak: float) -> None:
        super().__init__()
        self.code = nn.Parameter(
            torch.randn(1, code_channels, code_grid, code_grid, code_grid) * init_std
        )
        self.leak = leak
        deconvs = []
        in_ch = code_channels
        for out_ch in branch_channels:
            conv = nn.ConvTranspose3d(in_ch, out_ch, 3, stride=2, padding=1, output_padding=1)
            nn.init.normal_(conv.weight, std=conv_std)
            nn.init.zeros_(conv.bias)
            deconvs.append(conv)
            in_ch = out_ch
        self.deconvs = nn.ModuleList(deconvs)

    @property
    def site_channels(self) -> tuple[int, ...]:
        return (self.code.shape[1],) + tuple(c.out_channels for c in self.deconvs)

    def forward(self, style_params: list[tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
        n = style_params[0][0].shape[0]
        x = self.code.expand(n, -1, -1, -1, -1)
        x = adain(F.leaky_relu(x, self.leak), *style_params[0])
        for deconv, params in zip(self.deconvs, style_params[1:]):
            x = adain(F.leaky_relu(deconv(x), self.leak), *params)
        return x


def rigid_resample(features: torch.Tensor, poses: list[Pose], volume: VolumeSpec) -> torch.Tensor:
    """Place canonical per-object volumes into the shared cube by the rigid
    pose transform, trilinear interpolation, zeros outside."""
    if features.shape[0] != len(poses):
        raise ValueError("one pose per volume required")
    grid = _rigid_sample_grid(poses, volume, features.shape[2], features.dtype, features.device)
    return F.grid_sample(features, grid, mode="bilinear", padding_mode="zeros",
                         align_corners=True)


def _cube_positions(volume: VolumeSpec, grid_size: int, dtype: torch.dtype,
                    device: torch.device) -> torch.Tensor:
    """World positions of cube voxel centers, shape (D, H, W, 3)."""
    lin = torch.linspace(-1.0, 1.0, grid_size, dtype=dtype, device=device)
    nz, ny, nx = torch.meshgrid(lin, lin, lin, indexing="ij")
    pos = torch.stack([nx, ny, nz], dim=-1) * volume.half_extent
    pos[..., 2] += volume.center_depth
    return pos


def _rigid_sample_grid(poses: list[Pose], volume: VolumeSpec, grid_size: int,
                       dtype: torch.dtype, device: torch.device) -> torch.Tensor:
    pos = _cube_positions(volume, grid_size, dtype, device)  # (D, H, W, 3)
    grids = []
    for pose in poses:
        c, s = math.cos(pose.azimuth), math.sin(pose.azimuth)
        # Inverse rotation (transpose of yaw about y).
        rot_inv = torch.tensor(
            [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]], dtype=dtype, device=device
        )
        t = torch.tensor([pose.x_translation, 0.0, pose.depth], dtype=dtype, device=device)
        local = (pos - t) @ rot_inv.T
        grids.append(local / volume.half_extent)
    return torch.stack(grids)


def collate_max(grids: list[torch.Tensor]) -> torch.Tensor:
    """Element-wise maximum of equally shaped feature volumes."""
    if not grids:
        raise ValueError("need at least one grid")
    shape = grids[0].shape
    if any(g.shape != shape for g in grids[1:]):
        raise ValueError("all grids must share one shape")
    out = grids[0]
    for g in grids[1:]:
        out = torch.maximum(out, g)
    return out


class ProjectTo2D(nn.Module):
    """Perspective warp into frustum slices + depth collapse + 1x1 conv."""

    def __init__(self, camera: CameraIntrinsics, volume: VolumeSpec, grid_size: int,
                 in_channels: int, out_channels: int, conv_std: float, leak: float) -> None:
        super().__init__()
        self.leak = leak
        self.conv = nn.Conv2d(grid_size * in_channels, out_channels, 1, bias=False)
        nn.init.normal_(self.conv.weight, std=conv_std)
        self.register_buffer("frustum_grid", _frustum_grid(camera, volume, grid_size))

    def forward(self, grid3d: torch.Tensor) -> torch.Tensor:
        n = grid3d.shape[0]
        sample = self.frustum_grid.expand(n, -1, -1, -1, -1)
        frustum = F.grid_sample(grid3d, sample, mode="bilinear",
                                padding_mode="zeros", align_corners=True)
        # (N, C, D, H, W) -> near-to-far slices stacked along channels.
        n_, c, d, h, w = frustum.shape
        collapsed = frustum.permute(0, 2, 1, 3, 4).reshape(n_, d * c, h, w)
        return F.leaky_relu(self.conv(collapsed), self.leak)


def _frustum_grid(camera: CameraIntrinsics, volume: VolumeSpec, grid_size: int) -> torch.Tensor:
    """Sampling grid turning the cube volume into camera-frustum slices."""
    g = grid_size
    z = torch.linspace(volume.z_near, volume.z_far, g, dtype=torch.float64)
    pix = (torch.arange(g, dtype=torch.float64) + 0.5) * (camera.image_size / g)
    x_dir = (pix - camera.cx) / camera.focal_px
    y_dir = (pix - camera.cy) / camera.focal_px
    zz = z.view(g, 1, 1).expand(g, g, g)
    yy = y_dir.view(1, g, 1).expand(g, g, g) * zz
    xx = x_dir.view(1, 1, g).expand(g, g, g) * zz
    world = torch.stack([xx, yy, zz], dim=-1)
    world[..., 2] -= volume.center_depth
    return (world / volume.half_extent).unsqueeze(0).to(torch.float32)


class Decoder2D(nn.Module):
    """Stride-2 transposed convolutions up to image size, then to-RGB + tanh."""

    def __init__(self, in_channels: int, stage_channels: tuple[int, ...],
                 conv_std: float, leak: float) -> None:
        super().__init__()
        self.leak = leak
        stages = []
        ch = in_channels
        for out_ch in stage_channels:
            deconv = nn.ConvTranspose2d(ch, out_ch, 4, stride=2, padding=1)
            nn.init.normal_(deconv.weight, std=conv_std)
            nn.init.zeros_(deconv.bias)
            stages.append(deconv)
            ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.to_rgb = nn.Conv2d(ch, 3, 4, stride=1, padding="same")
        nn.init.normal_(self.to_rgb.weight, std=conv_std)
        nn.init.zeros_(self.to_rgb.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for stage in self.stages:
            x = F.leaky_relu(stage(x), self.leak)
        return torch.tanh(self.to_rgb(x))


@dataclass
class SynthesizedSample:
    """A batch of generated scenes with their self-computed labels."""

    images: torch.Tensor  # (N, 3, H, W) in [-1, 1]
    boxes: list[list[BBox2D]]
    poses: list[list[Pose]]
    masks: torch.Tensor  # (N, 1, H, W) in {0, 1}


def mask_from_boxes(boxes: list[list[BBox2D]], image_size: int,
                    dtype: torch.dtype = torch.float32,
                    device: torch.device | str = "cpu") -> torch.Tensor:
    """Union of filled box rectangles per sample, shape (N, 1, H, W)."""
    masks = torch.zeros(len(boxes), 1, image_size, image_size, dtype=dtype, device=device)
    for i, sample_boxes in enumerate(boxes):
        for b in sample_boxes:
            x0 = max(int(math.floor(b.x_min)), 0)
            y0 = max(int(math.floor(b.y_min)), 0)
            x1 = min(int(math.ceil(b.x_max)), image_size)
            y1 = min(int(math.ceil(b.y_max)), image_size)
            if x1 > x0 and y1 > y0:
                masks[i, 0, y0:y1, x0:x1] = 1.0
    return masks


def compute_labels(poses: list[Pose], camera: CameraIntrinsics, box3d: Box3D) -> list[BBox2D]:
    """Projected and clipped mean-box labels; independent of any weights."""
    labels = []
    for pose in poses:
        clipped = clip_bbox(project_box3d(camera, pose, box3d), camera.image_size)
        if clipped is None:
            raise ValueError(f"object at pose {pose} projects outside the frame")
        labels.append(clipped)
    return labels


class Synthesizer(nn.Module):
    """Full generator; style codes and poses in, labeled scenes out."""

    def __init__(self, config: SynthConfig, camera: CameraIntrinsics, mean_box: Box3D) -> None:
        super().__init__()
        if camera.image_size != config.image_size:
            raise ValueError("camera image size must match the synthesis preset")
        self.config = config
        self.camera = camera
        self.mean_box = mean_box
        self.fg_branch = ObjectBranch(
            config.code_channels_fg, config.branch_channels, config.code_grid,
            config.code_init_std, config.conv_init_std, config.leak,
        )
        self.bg_branch = ObjectBranch(
            config.code_channels_bg, config.branch_channels, config.code_grid,
            config.code_init_std, config.conv_init_std, config.leak,
        )
        self.fg_style = StyleMLP(config.style_dim_fg, self.fg_branch.site_channels,
                                 config.mlp_width, config.mlp_layers, config.leak)
        self.bg_style = StyleMLP(config.style_dim_bg, self.bg_branch.site_channels,
                                 config.mlp_width, config.mlp_layers, config.leak)
        self.project = ProjectTo2D(
            camera, config.volume, config.grid_size, config.branch_channels[-1],
            config.project_channels, config.conv_init_std, config.leak,
        )
        self.decoder = Decoder2D(config.project_channels, config.decoder_channels,
                                 config.conv_init_std, config.leak)

    @property
    def dtype(self) -> torch.dtype:
        return self.fg_branch.code.dtype

    @property
    def device(self) -> torch.device:
        return self.fg_branch.code.device

    def sample_styles(self, n: int, k: int, generator: torch.Generator | None = None
                      ) -> tuple[torch.Tensor, torch.Tensor]:
        """i.i.d. uniform(-1, 1) style codes for n scenes with k objects each."""
        cfg = self.config
        z_fg = torch.rand(n, k, cfg.style_dim_fg, generator=generator) * 2.0 - 1.0
        z_bg = torch.rand(n, cfg.style_dim_bg, generator=generator) * 2.0 - 1.0
        return z_fg.to(self.dtype), z_bg.to(self.dtype)

    def render(self, z_fg: torch.Tensor, z_bg: torch.Tensor,
               poses: list[list[Pose]]) -> torch.Tensor:
        """Image-only forward pass. ``z_fg`` is (N, K, style_dim_fg)."""
        n, k, _ = z_fg.shape
        if len(poses) != n or any(len(p) != k for p in poses):
            raise ValueError("poses must be a length-N list of length-K pose lists")
        if not 1 <= k <= self.config.k_max:
            raise ValueError(f"object count {k} outside 1..{self.config.k_max}")
        volume = self.config.volume

        fg_params = self.fg_style(z_fg.reshape(n * k, -1))
        fg_canonical = self.fg_branch(fg_params)
        flat_poses = [pose for sample in poses for pose in sample]
        fg_volumes = rigid_resample(fg_canonical, flat_poses, volume)
        g = fg_volumes.shape
        fg_volumes = fg_volumes.reshape(n, k, g[1], g[2], g[3], g[4])

        bg_volume = self.bg_branch(self.bg_style(z_bg))

        collated = collate_max([fg_volumes[:, i] for i in range(k)] + [bg_volume])
        return self.decoder(self.project(collated))

    def synthesize(self, z_fg: torch.Tensor, z_bg: torch.Tensor,
                   poses: list[list[Pose]]) -> SynthesizedSample:
        """Render scenes and attach projected labels and foreground masks."""
        images = self.render(z_fg, z_bg, poses)
        boxes = [compute_labels(sample, self.camera, self.mean_box) for sample in poses]
        masks = mask_from_boxes(boxes, self.config.image_size, images.dtype, images.device)
        return SynthesizedSample(images, boxes, [list(p) for p in poses], masks)

    def style_parameters(self):
        """Parameters steering appearance only: style MLPs and 2D convolutions."""
        modules = [self.fg_style, self.bg_style, self.project, self.decoder]
        for module in modules:
            yield from module.parameters()
