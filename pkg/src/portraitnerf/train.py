"""Losses and the reconstruction-stage optimization loop.

Losses are computed on full low-resolution patch renders (one frame's
composite per step) so the perceptual term has spatial support. Both stages
share the same objective: pixel MSE plus a weighted multi-scale feature
distance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .render import RenderSettings, render_frame


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class RandomFeaturePyramid(nn.Module):
    """Fixed, seeded strided-convolution stack used as the desk-scale
    perceptual feature extractor. A pretrained classification backbone can be
    swapped in behind the same interface (callable image -> feature list)."""

    def __init__(self, levels: int = 3, base_channels: int = 8, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        in_ch = 3
        ch = base_channels
        for _ in range(levels):
            conv = nn.Conv2d(in_ch, ch, 4, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (1.0 / math.sqrt(in_ch * 16)))
                conv.bias.zero_()
            convs.append(conv)
            in_ch, ch = ch, ch * 2
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, image: Tensor) -> list[Tensor]:
        x = image.permute(2, 0, 1).unsqueeze(0)
        feats = []
        for conv in self.convs:
            x = torch.relu(conv(x.to(conv.weight.dtype)))
            feats.append(x)
        return feats


@dataclass
class PerceptualConfig:
    extractor: nn.Module = field(default_factory=RandomFeaturePyramid)
    layer_weights: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.layer_weights) < 1:
            raise ValueError("need at least one perceptual level")
        if any(w < 0 for w in self.layer_weights):
            raise ValueError("layer weights must be >= 0")


@dataclass
class TrainSchedule:
    stage: str = "reconstruct"
    total_iters: int = 2000
    learning_rate: float = 1e-4
    loss_alpha: float = 0.5
    rays_per_batch: int | None = None  # None: the full low-res patch
    eval_every: int = 100

    def __post_init__(self):
        if self.stage not in ("reconstruct", "edit"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.total_iters < 1 or self.learning_rate < 0:
            raise ValueError("total_iters must be >= 1 and learning_rate >= 0")
        if self.loss_alpha < 0:
            raise ValueError("loss_alpha must be >= 0")


def photometric_loss(i_r: Tensor, i_e: Tensor) -> Tensor:
    if i_r.shape != i_e.shape:
        raise ValueError(f"image shapes differ: {tuple(i_r.shape)} vs "
                         f"{tuple(i_e.shape)}")
    return ((i_r - i_e) ** 2).mean()


def perceptual_loss(i_r: Tensor, i_e: Tensor, config: PerceptualConfig) -> Tensor:
    if i_r.shape != i_e.shape:
        raise ValueError(f"image shapes differ: {tuple(i_r.shape)} vs "
                         f"{tuple(i_e.shape)}")
    f_r = config.extractor(i_r)
    f_e = config.extractor(i_e)
    loss = i_r.new_zeros(())
    for lam, a, b in zip(config.layer_weights, f_r, f_e):
        loss = loss + lam * ((a - b) ** 2).mean()
    return loss


def total_loss(i_r: Tensor, i_e: Tensor, alpha: float,
               perceptual_config: PerceptualConfig) -> Tensor:
    return photometric_loss(i_r, i_e) + alpha * perceptual_loss(
        i_r, i_e, perceptual_config)


def psnr(a: np.ndarray | Tensor, b: np.ndarray | Tensor) -> float:
    if isinstance(a, Tensor):
        a = a.detach().cpu().numpy()
    if isinstance(b, Tensor):
        b = b.detach().cpu().numpy()
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return -10.0 * math.log10(mse)


class JsonlLogger:
    """Append-only JSON-lines log; content is a pure function of the run."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict):
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def training_step(frame, head_model, torso_model, optimizer, perceptual,
                  schedule: TrainSchedule, settings: RenderSettings,
                  background, rng: torch.Generator) -> dict:
    """One optimization transaction against the frame's current edit target."""
    optimizer.zero_grad()
    out = render_frame(frame, head_model, torso_model, settings=settings,
                       background=background, rng=rng)
    target = torch.as_tensor(frame.edit_target, dtype=out.rgb.dtype)
    if schedule.rays_per_batch is not None:
        flat_r = out.rgb.reshape(-1, 3)
        flat_t = target.reshape(-1, 3)
        pick = torch.randint(flat_r.shape[0], (schedule.rays_per_batch,),
                             generator=rng)
        photo = photometric_loss(flat_r[pick], flat_t[pick])
    else:
        photo = photometric_loss(out.rgb, target)
    perp = perceptual_loss(out.rgb, target, perceptual)
    loss = photo + schedule.loss_alpha * perp
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss on frame {frame.index}",
            snapshot={"frame": frame.index,
                      "photometric": photo.item(),
                      "perceptual": perp.item()})
    loss.backward()
    optimizer.step()
    return {"loss": loss.item(), "photometric": photo.item(),
            "perceptual": perp.item()}


def fit_reconstruction(dataset, head_model, torso_model,
                       schedule: TrainSchedule, *, seed: int = 0,
                       settings: RenderSettings | None = None,
                       perceptual: PerceptualConfig | None = None,
                       train_indices: list[int] | None = None,
                       logger: JsonlLogger | None = None) -> list[dict]:
    """Fit both region models to the dataset's current targets.

    Deterministic given the seed: frame choice, ray stratification and
    optimizer state all derive from one generator.
    """
    settings = settings or RenderSettings(stratified=True)
    perceptual = perceptual or PerceptualConfig()
    logger = logger or JsonlLogger()
    if train_indices is None:
        train_indices = list(range(len(dataset.frames)))
    rng = torch.Generator().manual_seed(seed)
    params = (list(head_model.parameters()) + list(torso_model.parameters()))
    optimizer = torch.optim.Adam((p for p in params if p.requires_grad),
                                 lr=schedule.learning_rate)
    background = dataset.spec.background_color
    trace = []
    for it in range(1, schedule.total_iters + 1):
        pick = int(torch.randint(len(train_indices), (1,), generator=rng))
        frame = dataset.frames[train_indices[pick]]
        stats = training_step(frame, head_model, torso_model, optimizer,
                              perceptual, schedule, settings, background, rng)
        if it % schedule.eval_every == 0 or it == schedule.total_iters:
            record = {"iter": it, "frame": frame.index, **stats}
            trace.append(record)
            logger.write(record)
    return trace
