"""Deformation field, conditional feature field and their configuration.

Both portrait regions (head and torso) share the same architecture: a warp
MLP that maps world points into a canonical frame conditioned on a
deformation latent, and a conditional field MLP that predicts density and a
feature vector from the canonical point, view direction and the subject's
identity / expression / illumination codes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn


class DimensionMismatchError(ValueError):
    """An input vector does not match the dimension the model was built with."""


@dataclass
class EncodingConfig:
    """Fourier feature settings for the three encoded inputs."""

    l_pos_deform: int = 4
    l_pos_field: int = 8
    l_dir: int = 4
    include_raw: bool = True

    def __post_init__(self):
        for name in ("l_pos_deform", "l_pos_field", "l_dir"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class FieldNetSpec:
    """Layer counts and widths. Defaults are desk-scale; the full-scale
    configuration uses trunk_width=512, head_width=256, feature_dim=256."""

    trunk_layers: int = 10
    trunk_width: int = 64
    head_layers: int = 3
    head_width: int = 32
    feature_dim: int = 16
    deform_layers: int = 4
    deform_width: int = 32

    def __post_init__(self):
        for name in ("trunk_layers", "trunk_width", "head_layers", "head_width",
                     "feature_dim", "deform_layers", "deform_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class LatentBundle:
    """Per-subject conditioning codes plus the torso deformation latent."""

    z_id: Tensor
    z_exp: Tensor
    z_ill: Tensor
    w: Tensor

    def __post_init__(self):
        for name in ("z_id", "z_exp", "z_ill", "w"):
            v = getattr(self, name)
            if not torch.isfinite(v).all():
                raise ValueError(f"LatentBundle.{name} contains non-finite entries")


def pos_encode(v: Tensor, num_freqs: int, include_raw: bool = True) -> Tensor:
    """NeRF-style Fourier features.

    Output layout along the last axis is ``[v?, sin(2^0 pi v), cos(2^0 pi v),
    ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)]`` giving dimension
    ``d * (include_raw + 2 L)``.
    """
    parts = [v] if include_raw else []
    for k in range(num_freqs):
        scaled = (2.0 ** k) * math.pi * v
        parts.append(torch.sin(scaled))
        parts.append(torch.cos(scaled))
    return torch.cat(parts, dim=-1)


def encoded_dim(d: int, num_freqs: int, include_raw: bool = True) -> int:
    return d * ((1 if include_raw else 0) + 2 * num_freqs)


def _mlp(in_dim: int, width: int, layers: int, out_dim: int | None = None) -> nn.Sequential:
    mods: list[nn.Module] = []
    prev = in_dim
    for _ in range(layers):
        mods += [nn.Linear(prev, width), nn.ReLU()]
        prev = width
    if out_dim is not None:
        mods.append(nn.Linear(prev, out_dim))
    return nn.Sequential(*mods)


class DeformField(nn.Module):
    """Predicts a displacement that carries a world point into canonical space.

    The final layer is zero-initialized so an untrained field is the identity
    warp, which stabilizes the start of reconstruction.
    """

    def __init__(self, w_dim: int, encoding: EncodingConfig, spec: FieldNetSpec):
        super().__init__()
        self.w_dim = w_dim
        self.encoding = encoding
        in_dim = encoded_dim(3, encoding.l_pos_deform, encoding.include_raw) + w_dim
        self.net = _mlp(in_dim, spec.deform_width, spec.deform_layers, out_dim=3)
        last = self.net[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)

    def forward(self, x: Tensor, w: Tensor) -> Tensor:
        if w.shape[-1] != self.w_dim:
            raise DimensionMismatchError(
                f"deform latent has dim {w.shape[-1]}, model expects {self.w_dim}")
        enc = pos_encode(x, self.encoding.l_pos_deform, self.encoding.include_raw)
        w = w.expand(*x.shape[:-1], self.w_dim)
        return self.net(torch.cat([enc, w], dim=-1))

    def canonicalize(self, x: Tensor, w: Tensor) -> Tensor:
        return x + self(x, w)


class RadianceField(nn.Module):
    """Conditional feature field.

    The trunk consumes the encoded canonical position concatenated with the
    identity code and emits density plus an intermediate feature; density is
    therefore independent of view direction, expression and illumination by
    construction. The feature head consumes the intermediate feature, the
    encoded view direction and the expression / illumination codes.
    """

    def __init__(self, id_dim: int, exp_dim: int, ill_dim: int,
                 encoding: EncodingConfig, spec: FieldNetSpec):
        super().__init__()
        self.id_dim = id_dim
        self.exp_dim = exp_dim
        self.ill_dim = ill_dim
        self.encoding = encoding
        self.spec = spec
        trunk_in = encoded_dim(3, encoding.l_pos_field, encoding.include_raw) + id_dim
        self.trunk = _mlp(trunk_in, spec.trunk_width, spec.trunk_layers)
        # One extra layer emits sigma alongside the intermediate feature.
        self.trunk_out = nn.Linear(spec.trunk_width, 1 + spec.trunk_width)
        head_in = (spec.trunk_width
                   + encoded_dim(3, encoding.l_dir, encoding.include_raw)
                   + exp_dim + ill_dim)
        self.head = _mlp(head_in, spec.head_width, spec.head_layers,
                         out_dim=spec.feature_dim)

    def _check(self, name: str, v: Tensor, dim: int):
        if v.shape[-1] != dim:
            raise DimensionMismatchError(
                f"{name} has dim {v.shape[-1]}, model expects {dim}")

    def forward(self, x_hat: Tensor, d: Tensor, z_id: Tensor, z_exp: Tensor,
                z_ill: Tensor) -> tuple[Tensor, Tensor]:
        self._check("z_id", z_id, self.id_dim)
        self._check("z_exp", z_exp, self.exp_dim)
        self._check("z_ill", z_ill, self.ill_dim)
        batch = x_hat.shape[:-1]
        enc_x = pos_encode(x_hat, self.encoding.l_pos_field, self.encoding.include_raw)
        trunk_in = torch.cat([enc_x, z_id.expand(*batch, self.id_dim)], dim=-1)
        out = self.trunk_out(self.trunk(trunk_in))
        sigma = nn.functional.softplus(out[..., 0])
        inter = out[..., 1:]
        enc_d = pos_encode(d, self.encoding.l_dir, self.encoding.include_raw)
        head_in = torch.cat([
            inter, enc_d,
            z_exp.expand(*batch, self.exp_dim),
            z_ill.expand(*batch, self.ill_dim),
        ], dim=-1)
        feat = self.head(head_in)
        return sigma, feat

    def density(self, x_hat: Tensor, z_id: Tensor) -> Tensor:
        """Density only; cheaper when features are not needed."""
        self._check("z_id", z_id, self.id_dim)
        batch = x_hat.shape[:-1]
        enc_x = pos_encode(x_hat, self.encoding.l_pos_field, self.encoding.include_raw)
        trunk_in = torch.cat([enc_x, z_id.expand(*batch, self.id_dim)], dim=-1)
        out = self.trunk_out(self.trunk(trunk_in))
        return nn.functional.softplus(out[..., 0])


@dataclass
class CodeDims:
    """Dimensions of the subject conditioning codes."""

    id_dim: int = 100
    exp_dim: int = 8
    ill_dim: int = 8
    w_dim: int = 32


class PortraitModel(nn.Module):
    """One region's full stack: warp field, conditional field, upsampler,
    plus the trainable subject codes.

    A head model's deformation latent is the per-frame expression code and is
    never trainable; a torso model owns a single trainable latent shared by
    all frames (initialized N(0, 0.01^2)).
    """

    def __init__(self, region: str, code_dims: CodeDims | None = None,
                 encoding: EncodingConfig | None = None,
                 net_spec: FieldNetSpec | None = None,
                 upsample_factor: int = 4, upsample_width: int = 32):
        super().__init__()
        if region not in ("head", "torso"):
            raise ValueError(f"region must be 'head' or 'torso', got {region!r}")
        from .render import Upsampler  # local import to avoid a cycle

        self.region = region
        self.code_dims = code_dims or CodeDims()
        self.encoding = encoding or EncodingConfig()
        self.net_spec = net_spec or FieldNetSpec()
        w_dim = self.code_dims.exp_dim if region == "head" else self.code_dims.w_dim
        self.deform = DeformField(w_dim, self.encoding, self.net_spec)
        self.field = RadianceField(self.code_dims.id_dim, self.code_dims.exp_dim,
                                   self.code_dims.ill_dim, self.encoding, self.net_spec)
        self.upsampler = Upsampler(self.net_spec.feature_dim,
                                   factor=upsample_factor, width=upsample_width)
        self.z_id = nn.Parameter(torch.zeros(self.code_dims.id_dim))
        self.z_ill = nn.Parameter(torch.zeros(self.code_dims.ill_dim))
        if region == "torso":
            self.w = nn.Parameter(0.01 * torch.randn(self.code_dims.w_dim))
        else:
            self.w = None

    @property
    def upsample_factor(self) -> int:
        return self.upsampler.factor

    def deform_latent(self, z_exp: Tensor) -> Tensor:
        """The latent fed to the warp field for a frame with code z_exp."""
        if self.region == "head":
            if z_exp.shape[-1] != self.code_dims.exp_dim:
                raise DimensionMismatchError(
                    f"z_exp has dim {z_exp.shape[-1]}, model expects "
                    f"{self.code_dims.exp_dim}")
            return z_exp.detach()
        return self.w

    def bundle_for(self, z_exp: Tensor) -> LatentBundle:
        return LatentBundle(z_id=self.z_id, z_exp=z_exp, z_ill=self.z_ill,
                            w=self.deform_latent(z_exp))

    def appearance_parameters(self):
        """Parameters updated during edit-driven fine-tuning: the conditional
        field, the upsampler and the subject codes. The warp field and the
        torso deformation latent stay frozen."""
        params = list(self.field.parameters()) + list(self.upsampler.parameters())
        params += [self.z_id, self.z_ill]
        return params

    def deformation_parameters(self):
        params = list(self.deform.parameters())
        if self.w is not None:
            params.append(self.w)
        return params
