"""Instruction-conditioned editing: classifier-free-guidance score
composition, the deterministic DDIM loop, and a toy denoiser that makes the
loop converge to a known target image (the test oracle standing in for a real
instruction-tuned diffusion backend)."""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from torch import Tensor

DEFAULT_REGION_LEXICON = {
    "hair": ("hair",),
    "cloth": ("torso",),
    "clothes": ("torso",),
    "shirt": ("torso",),
    "face": ("face",),
}


@dataclass
class EditConfig:
    instruction: str = ""
    s_t: float = 12.0
    s_i: float = 1.5
    t_min: float = 0.25
    t_max: float = 0.95
    denoise_steps: int = 25
    region_lexicon: dict = field(
        default_factory=lambda: dict(DEFAULT_REGION_LEXICON))

    def __post_init__(self):
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise ValueError(
                f"need 0 <= t_min < t_max <= 1, got [{self.t_min}, {self.t_max}]")
        if self.denoise_steps < 1:
            raise ValueError(f"denoise_steps must be >= 1, got {self.denoise_steps}")
        if self.s_t < 0 or self.s_i < 0:
            raise ValueError("guidance scales must be >= 0")


class NoiseSchedule:
    """Cumulative signal coefficient alpha_bar over a linear-beta process.

    1000 virtual steps with beta in [1e-4, 2e-2]; a noise-level fraction
    t in [0, 1] indexes the table, with alpha_bar(0) = 1 exactly.
    """

    def __init__(self, virtual_steps: int = 1000, beta_min: float = 1e-4,
                 beta_max: float = 2e-2):
        betas = np.linspace(beta_min, beta_max, virtual_steps)
        table = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        self.virtual_steps = virtual_steps
        self._table = table

    def alpha_bar(self, t: float) -> float:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"noise level t must be in [0, 1], got {t}")
        return float(self._table[round(t * self.virtual_steps)])


DEFAULT_SCHEDULE = NoiseSchedule()


class Denoiser(ABC):
    """Noise predictor supporting the three conditioning variants:
    unconditional, image-conditioned, and image+text-conditioned."""

    concurrent_safe: bool = False

    @abstractmethod
    def denoise(self, z_t: Tensor, t: float, image_cond: Optional[Tensor] = None,
                text_cond: Optional[str] = None) -> Tensor:
        ...


class LatentCodec(ABC):
    @abstractmethod
    def encode(self, image: Tensor) -> Tensor:
        ...

    @abstractmethod
    def decode(self, latent: Tensor) -> Tensor:
        ...


class IdentityCodec(LatentCodec):
    """Latent space == pixel space; the desk default."""

    def encode(self, image: Tensor) -> Tensor:
        return image.clone()

    def decode(self, latent: Tensor) -> Tensor:
        return latent.clone()


def cfg_score(eps_uncond: Tensor, eps_img: Tensor, eps_full: Tensor,
              s_i: float, s_t: float) -> Tensor:
    """Compose the three noise predictions into one guided score."""
    if eps_uncond.shape != eps_img.shape or eps_img.shape != eps_full.shape:
        raise ValueError("noise predictions must share a shape")
    return (eps_uncond
            + s_i * (eps_img - eps_uncond)
            + s_t * (eps_full - eps_img))


def make_noisy_latent(z0: Tensor, t: float, noise: Tensor,
                      schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> Tensor:
    """Variance-preserving forward process at noise level t."""
    if noise.shape != z0.shape:
        raise ValueError("noise must match z0's shape")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise


class EditingError(RuntimeError):
    pass


def ddim_edit(image_cond: Tensor, init_render: Tensor, instruction: str,
              config: EditConfig, denoiser: Denoiser, codec: LatentCodec,
              rng: torch.Generator,
              schedule: NoiseSchedule = DEFAULT_SCHEDULE,
              frame_index: int | None = None) -> Tensor:
    """Produce an edited image from the current render.

    Noises the encoded render to a level drawn uniformly from
    [t_min, t_max], then runs ``denoise_steps`` deterministic (eta = 0) DDIM
    updates, each driven by the guided score of the three denoiser variants.
    """
    if image_cond.shape != init_render.shape:
        raise ValueError("image_cond and init_render must share dimensions")
    z0 = codec.encode(init_render)
    u = torch.rand((), generator=rng, dtype=torch.float64).item()
    t0 = config.t_min + u * (config.t_max - config.t_min)
    noise = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
    z = make_noisy_latent(z0, t0, noise, schedule)

    levels = np.linspace(t0, 0.0, config.denoise_steps + 1)
    for step in range(config.denoise_steps):
        t_cur, t_next = float(levels[step]), float(levels[step + 1])
        try:
            eps_u = denoiser.denoise(z, t_cur)
            eps_i = denoiser.denoise(z, t_cur, image_cond=image_cond)
            eps_f = denoiser.denoise(z, t_cur, image_cond=image_cond,
                                     text_cond=instruction)
        except Exception as e:
            where = f"frame {frame_index}, " if frame_index is not None else ""
            raise EditingError(f"denoiser failed at {where}step {step}: {e}") from e
        eps = cfg_score(eps_u, eps_i, eps_f, config.s_i, config.s_t)
        ab_cur = schedule.alpha_bar(t_cur)
        ab_next = schedule.alpha_bar(t_next)
        z0_pred = (z - math.sqrt(1.0 - ab_cur) * eps) / math.sqrt(ab_cur)
        z = math.sqrt(ab_next) * z0_pred + math.sqrt(1.0 - ab_next) * eps
    return codec.decode(z).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# Toy editor oracle

TargetTransform = Callable[[Tensor, str], Tensor]


class ToyDenoiser(Denoiser):
    """Analytic denoiser whose DDIM trajectory lands exactly on a target.

    For the full variant it predicts the noise that would explain z_t if the
    clean latent were the encoded transformed image; the image-only variant
    targets the conditioning image itself and the unconditional variant the
    zero latent.
    """

    concurrent_safe = True

    def __init__(self, target_transform: TargetTransform,
                 codec: LatentCodec | None = None,
                 schedule: NoiseSchedule = DEFAULT_SCHEDULE):
        self.target_transform = target_transform
        self.codec = codec or IdentityCodec()
        self.schedule = schedule

    def denoise(self, z_t, t, image_cond=None, text_cond=None):
        if image_cond is None:
            target = torch.zeros_like(z_t)
        elif text_cond is None:
            target = self.codec.encode(image_cond)
        else:
            target = self.codec.encode(
                self.target_transform(image_cond, text_cond))
        ab = self.schedule.alpha_bar(t)
        if ab >= 1.0:
            raise ValueError("toy denoiser undefined at zero noise level")
        return (z_t - math.sqrt(ab) * target) / math.sqrt(1.0 - ab)


def toy_denoiser(target_transform: TargetTransform,
                 codec: LatentCodec | None = None,
                 schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> ToyDenoiser:
    return ToyDenoiser(target_transform, codec, schedule)


def identity_transform(image: Tensor, instruction: str) -> Tensor:
    return image


def channel_roll_transform(shift: int = 1) -> TargetTransform:
    """Cyclic RGB permutation; a 120-degree hue rotation that leaves grays
    unchanged."""

    def _roll(image: Tensor, instruction: str) -> Tensor:
        return torch.roll(image, shifts=shift, dims=-1)

    return _roll


def recolor_transform(color, strength: float = 0.8) -> TargetTransform:
    def _recolor(image: Tensor, instruction: str) -> Tensor:
        c = torch.as_tensor(color, dtype=image.dtype)
        return (1.0 - strength) * image + strength * c

    return _recolor


def default_toy_transform(image: Tensor, instruction: str) -> Tensor:
    """Deterministic instruction-to-hue-shift mapping: different instructions
    produce visibly different targets."""
    if not instruction:
        return image
    shift = 1 + (sum(instruction.encode()) % 2)
    return torch.roll(image, shifts=shift, dims=-1)
