"""Ray generation, depth-guided sampling, feature volume rendering,
upsampling to RGB and head/torso compositing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np
import torch
from torch import Tensor, nn

from .compositing import render_weights
from .fields import DimensionMismatchError

if TYPE_CHECKING:
    from .fields import LatentBundle, PortraitModel
    from .scene import FrameRecord


class ContractViolationError(ValueError):
    pass


class MaskOverlapError(ValueError):
    pass


@dataclass
class Camera:
    """Pinhole camera; rotation/translation are camera-to-world."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def rays_for_grid(self, h_lo: int, w_lo: int, factor: int = 1,
                      dtype: torch.dtype = torch.float32) -> tuple[Tensor, Tensor]:
        """Unit-direction rays through the centers of a (possibly downsampled)
        pixel grid. ``factor`` maps low-res pixel (i, j) to full-res image
        coordinates ((j + 0.5) * factor, (i + 0.5) * factor)."""
        jj, ii = np.meshgrid(np.arange(w_lo), np.arange(h_lo))
        u = (jj + 0.5) * factor
        v = (ii + 0.5) * factor
        d_cam = np.stack([(u - self.cx) / self.fx,
                          (v - self.cy) / self.fy,
                          np.ones_like(u, dtype=np.float64)], axis=-1)
        d_world = d_cam @ self.rotation.T
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.translation, d_world.shape).copy()
        return (torch.as_tensor(origins.reshape(-1, 3), dtype=dtype),
                torch.as_tensor(d_world.reshape(-1, 3), dtype=dtype))

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(),
                "translation": self.translation.tolist(),
                "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(rotation=np.array(d["rotation"]),
                   translation=np.array(d["translation"]),
                   fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"])


@dataclass
class RayBatch:
    origins: Tensor
    directions: Tensor
    near: float
    far: float
    sample_count: int = 64
    guide_depth: Optional[Tensor] = None
    guide_halfwidth: float = 0.3

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be < far ({self.far})")
        if self.sample_count < 2:
            raise ValueError(f"sample_count must be >= 2, got {self.sample_count}")
        norms = self.directions.norm(dim=-1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
            raise ValueError("ray directions must be unit vectors")


def sample_along_rays(batch: RayBatch, rng: torch.Generator | None = None,
                      stratified: bool = True) -> tuple[Tensor, Tensor]:
    """Sample positions t_i and intervals delta_i for every ray.

    Rays with a positive guide depth are sampled in
    [depth - h, depth + h] clamped to [near, far]; the rest cover [near, far].
    With stratification disabled samples sit at the left edge of each bin, so
    an unguided ray gets the uniform grid t_i = near + i (far - near) / n.
    The final interval is ``far - t_last``.
    """
    n = batch.origins.shape[0]
    s = batch.sample_count
    dtype = batch.origins.dtype
    lo = torch.full((n,), batch.near, dtype=dtype)
    hi = torch.full((n,), batch.far, dtype=dtype)
    if batch.guide_depth is not None:
        gd = batch.guide_depth.to(dtype)
        guided = gd > 0
        h = batch.guide_halfwidth
        lo = torch.where(guided, (gd - h).clamp(min=batch.near, max=batch.far), lo)
        hi = torch.where(guided, (gd + h).clamp(min=batch.near, max=batch.far), hi)
    if stratified:
        u = torch.rand((n, s), generator=rng, dtype=dtype)
    else:
        u = torch.zeros((n, s), dtype=dtype)
    idx = torch.arange(s, dtype=dtype)
    t = lo[:, None] + (idx[None, :] + u) * ((hi - lo) / s)[:, None]
    delta = torch.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = batch.far - t[:, -1]
    return t, delta


def volume_render(sigma: Tensor, feats: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
    """Alpha-composite per-sample features with transmittance weights.

    sigma, delta: (..., n_samples); feats: (..., n_samples, C).
    Returns (feature (..., C), opacity (...,)).
    """
    if (sigma < 0).any():
        raise ContractViolationError("volume_render requires sigma >= 0")
    w = render_weights(sigma, delta)
    feature = (w.unsqueeze(-1) * feats).sum(dim=-2)
    opacity = w.sum(dim=-1)
    return feature, opacity


class Upsampler(nn.Module):
    """Feature map to RGB at ``factor`` x resolution.

    Convolution + pixel-repeat blocks with a sigmoid output; the stand-in for
    a learned super-resolution module, keeping the feature-map-to-image
    contract while staying small enough to train on a desk.
    """

    def __init__(self, feature_dim: int, factor: int = 4, width: int = 32):
        super().__init__()
        if factor < 1 or (factor & (factor - 1)) != 0:
            raise ValueError(f"factor must be a power of two >= 1, got {factor}")
        self.feature_dim = feature_dim
        self.factor = factor
        self.stem = nn.Conv2d(feature_dim, width, 3, padding=1)
        n_ups = factor.bit_length() - 1
        self.blocks = nn.ModuleList(
            [nn.Conv2d(width, width, 3, padding=1) for _ in range(n_ups)])
        self.out = nn.Conv2d(width, 3, 3, padding=1)

    def forward(self, feature_map: Tensor) -> Tensor:
        if feature_map.shape[-1] != self.feature_dim:
            raise DimensionMismatchError(
                f"feature map has {feature_map.shape[-1]} channels, "
                f"upsampler expects {self.feature_dim}")
        x = feature_map.permute(2, 0, 1).unsqueeze(0)
        x = torch.relu(self.stem(x))
        for conv in self.blocks:
            x = torch.repeat_interleave(torch.repeat_interleave(x, 2, dim=-2), 2, dim=-1)
            x = torch.relu(conv(x))
        x = torch.sigmoid(self.out(x))
        return x.squeeze(0).permute(1, 2, 0)


def composite(head_rgb: Tensor, torso_rgb: Tensor, s_head: Tensor,
              s_torso: Tensor, background: Tensor) -> Tensor:
    """Mask-select the head and torso branches; remaining pixels show the
    background."""
    if head_rgb.shape != torso_rgb.shape:
        raise ValueError("head and torso images must share dimensions")
    if (s_head * s_torso).any():
        raise MaskOverlapError("head and torso masks overlap")
    sh = s_head.unsqueeze(-1)
    st = s_torso.unsqueeze(-1)
    return sh * head_rgb + st * torso_rgb + (1.0 - sh - st) * background


@dataclass
class RenderSettings:
    near: float = 1.2
    far: float = 4.2
    sample_count: int = 64
    guide_halfwidth: float = 0.3
    stratified: bool = False


@dataclass
class RegionRender:
    feature_map: Tensor
    opacity_map: Tensor
    rgb: Tensor


@dataclass
class RenderOutput:
    rgb: Tensor
    head: RegionRender
    torso: RegionRender


def head_region_mask(masks: dict) -> np.ndarray:
    """Union of the semantic masks belonging to the head branch."""
    return masks["head"] | masks["hair"] | masks["face"]


def _render_region(model: "PortraitModel", camera: Camera, image_size: int,
                   z_exp: Tensor, bundle: "LatentBundle | None",
                   guide_depth: Optional[Tensor], settings: RenderSettings,
                   rng: torch.Generator | None) -> RegionRender:
    dtype = next(model.parameters()).dtype
    f = model.upsample_factor
    h_lo = image_size // f
    origins, dirs = camera.rays_for_grid(h_lo, h_lo, factor=f, dtype=dtype)
    batch = RayBatch(origins, dirs, settings.near, settings.far,
                     settings.sample_count, guide_depth,
                     settings.guide_halfwidth)
    t, delta = sample_along_rays(batch, rng=rng, stratified=settings.stratified)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    if bundle is not None:
        z_id, z_ill = bundle.z_id.to(dtype), bundle.z_ill.to(dtype)
        w_lat = bundle.z_exp.to(dtype) if model.region == "head" else bundle.w.to(dtype)
        z_exp_c = bundle.z_exp.to(dtype)
    else:
        z_id, z_ill = model.z_id, model.z_ill
        z_exp_c = z_exp.to(dtype)
        w_lat = model.deform_latent(z_exp_c)
    x_hat = model.deform.canonicalize(pts, w_lat)
    d_exp = dirs[:, None, :].expand_as(pts)
    sigma, feat = model.field(x_hat, d_exp, z_id, z_exp_c, z_ill)
    feature, opacity = volume_render(sigma, feat, delta)
    feature_map = feature.reshape(h_lo, h_lo, -1)
    opacity_map = opacity.reshape(h_lo, h_lo)
    rgb = model.upsampler(feature_map)
    return RegionRender(feature_map, opacity_map, rgb)


def _region_guide_depth(frame, region_mask: np.ndarray, factor: int,
                        dtype: torch.dtype) -> Optional[Tensor]:
    if frame.guide_depth is None:
        return None
    c = factor // 2
    depth = frame.guide_depth[c::factor, c::factor]
    mask = region_mask[c::factor, c::factor]
    guided = np.where(mask, depth, 0.0).astype(np.float64)
    return torch.as_tensor(guided.reshape(-1), dtype=dtype)


def render_frame(frame: "FrameRecord", head_model: "PortraitModel",
                 torso_model: "PortraitModel",
                 bundle: "LatentBundle | None" = None,
                 settings: RenderSettings | None = None,
                 background=(0.5, 0.5, 0.5),
                 rng: torch.Generator | None = None,
                 use_masks: bool = True) -> RenderOutput:
    """Render one frame through both region models and composite.

    With ``use_masks`` the dataset's parsing masks select the branches; without
    them (e.g. when driving novel poses) the branches are blended by rendered
    opacity, head in front.
    """
    settings = settings or RenderSettings()
    dtype = next(head_model.parameters()).dtype
    image_size = frame.image_gt.shape[0]
    z_exp = torch.as_tensor(np.asarray(frame.z_exp), dtype=dtype)
    masks = frame.masks if use_masks else None

    regions = {}
    for model in (head_model, torso_model):
        if masks is not None:
            rmask = (head_region_mask(masks) if model.region == "head"
                     else masks["torso"])
        else:
            rmask = np.ones_like(frame.image_gt[..., 0], dtype=bool)
        gd = _region_guide_depth(frame, rmask, model.upsample_factor, dtype)
        regions[model.region] = _render_region(
            model, frame.camera, image_size, z_exp, bundle, gd, settings, rng)

    head_r, torso_r = regions["head"], regions["torso"]
    bg = torch.as_tensor(np.asarray(background), dtype=dtype)
    if masks is not None:
        s_head = torch.as_tensor(head_region_mask(masks), dtype=dtype)
        s_torso = torch.as_tensor(masks["torso"], dtype=dtype)
        rgb = composite(head_r.rgb, torso_r.rgb, s_head, s_torso, bg)
    else:
        f_h = head_model.upsample_factor
        f_t = torso_model.upsample_factor
        o_head = torch.repeat_interleave(
            torch.repeat_interleave(head_r.opacity_map, f_h, 0), f_h, 1)
        o_torso = torch.repeat_interleave(
            torch.repeat_interleave(torso_r.opacity_map, f_t, 0), f_t, 1)
        behind = o_torso.unsqueeze(-1) * torso_r.rgb \
            + (1.0 - o_torso.unsqueeze(-1)) * bg
        rgb = o_head.unsqueeze(-1) * head_r.rgb \
            + (1.0 - o_head.unsqueeze(-1)) * behind
    return RenderOutput(rgb=rgb, head=head_r, torso=torso_r)
