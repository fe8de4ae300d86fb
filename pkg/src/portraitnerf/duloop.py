"""Progressive dataset update: alternate editing one frame's target and
optimizing the portrait models against the current targets.

Two rules are load-bearing for edit locality and stability: the image fed to
the editor as conditioning is always the original frame (never a previous
edit), and a keyword-routed edit is blended over the original so pixels
outside the routed region stay bit-equal to the ground truth. During the
whole stage the warp fields and the torso deformation latent are frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .editing import (DEFAULT_SCHEDULE, Denoiser, EditConfig, IdentityCodec,
                      LatentCodec, ddim_edit)
from .render import RenderSettings, render_frame
from .train import (JsonlLogger, PerceptualConfig, TrainSchedule,
                    training_step)


class _Global:
    """Sentinel: no keyword matched, the edit applies to the whole image."""

    def __repr__(self):
        return "GLOBAL"


GLOBAL = _Global()


class MissingMaskError(KeyError):
    pass


@dataclass
class RegionRouting:
    """Ordered keyword table routing instructions to semantic masks."""

    lexicon: dict = field(default_factory=lambda: {
        "hair": ("hair",),
        "cloth": ("torso",),
        "clothes": ("torso",),
        "shirt": ("torso",),
        "face": ("face",),
    })

    def validate_against(self, mask_names):
        for kw, targets in self.lexicon.items():
            for name in _as_names(targets):
                if name not in mask_names:
                    raise MissingMaskError(
                        f"lexicon keyword {kw!r} routes to unknown mask {name!r}")


def _as_names(targets) -> tuple:
    return (targets,) if isinstance(targets, str) else tuple(targets)


def select_region(instruction: str, routing: RegionRouting, frame_masks: dict):
    """Case-insensitive substring match against the lexicon, in order;
    multiple matches take the union of their masks; no match is GLOBAL."""
    lowered = instruction.lower()
    selected = None
    for keyword, targets in routing.lexicon.items():
        if keyword.lower() in lowered:
            for name in _as_names(targets):
                if name not in frame_masks:
                    raise MissingMaskError(
                        f"instruction routed to mask {name!r} which is missing "
                        f"from the frame")
                m = frame_masks[name].astype(bool)
                selected = m if selected is None else (selected | m)
    return GLOBAL if selected is None else selected


def blend(i_e0: np.ndarray, i_gt: np.ndarray, s_key) -> np.ndarray:
    """Composite the edited image over the original within the routed region.
    Outside the region the result is bit-equal to the original."""
    if s_key is GLOBAL:
        return np.asarray(i_e0).copy()
    i_e0 = np.asarray(i_e0)
    i_gt = np.asarray(i_gt)
    if i_e0.shape != i_gt.shape:
        raise ValueError(f"image shapes differ: {i_e0.shape} vs {i_gt.shape}")
    if s_key.shape != i_gt.shape[:2]:
        raise ValueError(f"mask shape {s_key.shape} does not match image "
                         f"{i_gt.shape[:2]}")
    return np.where(s_key[..., None], i_e0, i_gt).astype(i_gt.dtype)


@dataclass
class DUState:
    dataset: object
    edit_config: EditConfig
    routing: RegionRouting
    rng: torch.Generator
    update_period: int = 10
    update_cursor: int = 0
    nerf_iters_since_update: int = 0
    total_iters: int = 0
    edit_events: int = 0

    def __post_init__(self):
        if self.update_period < 1:
            raise ValueError("update_period must be >= 1")
        if not 0 <= self.update_cursor < len(self.dataset.frames):
            raise ValueError("update_cursor out of range")


def edit_event(state: DUState, head_model, torso_model, denoiser: Denoiser,
               codec: LatentCodec, settings: RenderSettings, background):
    """Re-edit the cursor frame's target and advance the cursor."""
    frame = state.dataset.frames[state.update_cursor]
    with torch.no_grad():
        out = render_frame(frame, head_model, torso_model, settings=settings,
                           background=background, rng=state.rng)
    image_cond = torch.as_tensor(frame.image_gt, dtype=out.rgb.dtype)
    edited = ddim_edit(image_cond, out.rgb, state.edit_config.instruction,
                       state.edit_config, denoiser, codec, state.rng,
                       frame_index=frame.index)
    s_key = select_region(state.edit_config.instruction, state.routing,
                          frame.masks)
    frame.edit_target = blend(edited.numpy().astype(np.float32),
                              frame.image_gt, s_key)
    state.update_cursor = (state.update_cursor + 1) % len(state.dataset.frames)
    state.edit_events += 1


def du_step(state: DUState, head_model, torso_model, optimizer, *,
            denoiser: Denoiser, codec: LatentCodec,
            perceptual: PerceptualConfig, schedule: TrainSchedule,
            settings: RenderSettings, background) -> dict:
    """One loop iteration: possibly an edit event, then one optimization
    step against the current targets."""
    state.nerf_iters_since_update += 1
    if state.nerf_iters_since_update >= state.update_period:
        edit_event(state, head_model, torso_model, denoiser, codec,
                   settings, background)
        state.nerf_iters_since_update = 0
    pick = int(torch.randint(len(state.dataset.frames), (1,), generator=state.rng))
    frame = state.dataset.frames[pick]
    stats = training_step(frame, head_model, torso_model, optimizer,
                          perceptual, schedule, settings, background,
                          state.rng)
    state.total_iters += 1
    return {"frame": frame.index, **stats}


def edit_sequence(dataset, head_model, torso_model, edit_config: EditConfig,
                  schedule: TrainSchedule, *, denoiser: Denoiser,
                  codec: LatentCodec | None = None, seed: int = 0,
                  update_period: int = 10,
                  settings: RenderSettings | None = None,
                  perceptual: PerceptualConfig | None = None,
                  logger: JsonlLogger | None = None,
                  eval_fn=None) -> tuple[DUState, list[dict]]:
    """Run the full editing stage from reconstruction-trained models.

    The warp fields and the torso deformation latent are frozen for the
    duration; only the conditional fields, upsamplers and subject codes are
    optimized. Returns the final loop state and the per-checkpoint trace
    (extended by ``eval_fn(head_model, torso_model)`` when given).
    """
    codec = codec or IdentityCodec()
    settings = settings or RenderSettings(stratified=True)
    perceptual = perceptual or PerceptualConfig()
    logger = logger or JsonlLogger()
    routing = RegionRouting(lexicon=dict(edit_config.region_lexicon))
    routing.validate_against(set(dataset.frames[0].masks))

    frozen = []
    for model in (head_model, torso_model):
        for p in model.deformation_parameters():
            p.requires_grad_(False)
            frozen.append(p)
    params = [p for m in (head_model, torso_model)
              for p in m.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=schedule.learning_rate)

    rng = torch.Generator().manual_seed(seed)
    state = DUState(dataset=dataset, edit_config=edit_config, routing=routing,
                    rng=rng, update_period=update_period)
    background = dataset.spec.background_color
    trace = []
    for it in range(1, schedule.total_iters + 1):
        stats = du_step(state, head_model, torso_model, optimizer,
                        denoiser=denoiser, codec=codec, perceptual=perceptual,
                        schedule=schedule, settings=settings,
                        background=background)
        if it % schedule.eval_every == 0 or it == schedule.total_iters:
            record = {"iter": it, "edit_events": state.edit_events, **stats}
            if eval_fn is not None:
                record.update(eval_fn(head_model, torso_model))
            trace.append(record)
            logger.write(record)
    for p in frozen:
        p.requires_grad_(True)
    return state, trace
