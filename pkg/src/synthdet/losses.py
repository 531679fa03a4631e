"""Loss assemblies for the synthesizer and its critics, plus the weight
ramp applied to the foreground/background appearance terms.

Critic objectives follow the Wasserstein form (mean fake minus mean real,
Lipschitz control via spectral normalization); a hinge variant is
available behind the config switch.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class RampSchedule:
    """Stepwise-increasing weight, capped: min(cap, start + step * (it // interval))."""

    start: float = 0.05
    step: float = 0.01
    interval: int = 200
    cap: float = 0.5

    def value(self, iteration: int) -> float:
        if iteration < 0:
            raise ValueError("iteration must be nonnegative")
        return min(self.cap, self.start + self.step * (iteration // self.interval))


@dataclass
class LossWeights:
    """Relative weights of the synthesizer's loss terms."""

    scn: float = 0.5
    mso: float = 0.5
    det: float = 0.4
    fg: float = 0.05
    bg: float = 0.05

    def __post_init__(self) -> None:
        if min(self.scn, self.mso, self.det, self.fg, self.bg) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossParts:
    scn: torch.Tensor | float = 0.0
    mso: torch.Tensor | float = 0.0
    det: torch.Tensor | float = 0.0
    fg: torch.Tensor | float = 0.0
    bg: torch.Tensor | float = 0.0


def loss_scn(scores: torch.Tensor) -> torch.Tensor:
    """Negative mean critic score over the synthetic batch."""
    if scores.numel() == 0:
        raise ValueError("empty score batch")
    return -scores.mean()


def loss_mso(scores: torch.Tensor) -> torch.Tensor:
    """Same form as the scene loss, applied to object-crop scores."""
    return loss_scn(scores)


def critic_loss_scene(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Wasserstein critic objective: mean(fake) - mean(real)."""
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("empty score batch")
    return fake_scores.mean() - real_scores.mean()


def critic_loss_hinge(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("empty score batch")
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def critic_objective(kind: str):
    if kind == "wasserstein":
        return critic_loss_scene
    if kind == "hinge":
        return critic_loss_hinge
    raise ValueError(f"unknown critic objective {kind!r}")


def masked_mean(score_map: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Sum of masked scores over the number of masked sites (floored at 1),
    so an all-zero mask contributes exactly zero."""
    if score_map.shape != mask.shape:
        raise ValueError(f"map shape {score_map.shape} != mask shape {mask.shape}")
    return (score_map * mask).sum() / torch.clamp(mask.sum(), min=1.0)


def loss_fg(score_map: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Foreground appearance loss: negative masked mean of the patch scores.
    The mask must already be at score-map resolution."""
    return -masked_mean(score_map, mask)


def loss_bg(score_map: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Background appearance loss: same as loss_fg on the mask complement."""
    return loss_fg(score_map, 1.0 - mask)


def loss_d_fg(
    real_map: torch.Tensor,
    real_mask: torch.Tensor,
    fake_map: torch.Tensor,
    fake_mask: torch.Tensor,
) -> torch.Tensor:
    """Foreground critic objective over masked real/fake patch scores."""
    return -masked_mean(real_map, real_mask) + masked_mean(fake_map, fake_mask)


def loss_d_bg(
    real_map: torch.Tensor,
    fake_map: torch.Tensor,
    fake_mask: torch.Tensor,
) -> torch.Tensor:
    """Background critic objective; real patches are object-free crops, so
    the real term is unmasked while the fake term masks to the background."""
    if real_map.numel() == 0:
        raise ValueError("empty real score batch")
    return -real_map.mean() + masked_mean(fake_map, 1.0 - fake_mask)


def total_synth_loss(parts: LossParts, weights: LossWeights) -> torch.Tensor | float:
    return (
        weights.scn * parts.scn
        + weights.mso * parts.mso
        + weights.det * parts.det
        + weights.fg * parts.fg
        + weights.bg * parts.bg
    )
