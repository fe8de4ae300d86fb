"""Expression and pose transfer: render the edited portrait under another
sequence's expression codes and camera poses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .fields import DimensionMismatchError, LatentBundle
from .render import Camera, RenderSettings, render_frame


class NonRigidTransformError(ValueError):
    pass


@dataclass
class _DriveFrame:
    index: int
    camera: Camera
    z_exp: np.ndarray
    image_gt: np.ndarray
    masks: dict | None = None
    guide_depth: np.ndarray | None = None


def transfer(head_model, torso_model, ref_sequence, *,
             bundle: LatentBundle | None = None, image_size: int = 64,
             settings: RenderSettings | None = None,
             background=(0.5, 0.5, 0.5)) -> list[np.ndarray]:
    """Render one frame per (z_exp, camera) reference entry.

    Appearance comes entirely from the edited models (and, when given, the
    explicit code bundle); only the expression code and the camera are
    substituted per entry. Model parameters are never touched. Without
    parsing masks for the novel poses, the branches are blended by rendered
    opacity with the head in front.
    """
    ref_sequence = list(ref_sequence)
    if not ref_sequence:
        raise ValueError("reference sequence is empty")
    exp_dim = head_model.code_dims.exp_dim
    frames_out = []
    placeholder = np.zeros((image_size, image_size, 3), dtype=np.float32)
    settings = settings or RenderSettings()
    for i, (z_exp, camera) in enumerate(ref_sequence):
        z_exp = np.asarray(z_exp, dtype=np.float64)
        if z_exp.shape != (exp_dim,):
            raise DimensionMismatchError(
                f"reference entry {i}: z_exp has dim {z_exp.shape}, model "
                f"expects ({exp_dim},)")
        frame = _DriveFrame(index=i, camera=camera, z_exp=z_exp,
                            image_gt=placeholder)
        entry_bundle = None
        if bundle is not None:
            entry_bundle = LatentBundle(
                z_id=bundle.z_id,
                z_exp=torch.as_tensor(z_exp, dtype=bundle.z_id.dtype),
                z_ill=bundle.z_ill, w=bundle.w)
        with torch.no_grad():
            out = render_frame(frame, head_model, torso_model,
                               bundle=entry_bundle, settings=settings,
                               background=background, use_masks=False)
        frames_out.append(out.rgb.numpy())
    return frames_out


def _check_rigid(rotation: np.ndarray, tol: float = 1e-6):
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3):
        raise NonRigidTransformError(f"rotation must be 3x3, got {r.shape}")
    if np.abs(r @ r.T - np.eye(3)).max() > tol:
        raise NonRigidTransformError("rotation is not orthogonal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise NonRigidTransformError("rotation determinant is not +1")
    return r


def torso_camera_refine(neck_rotation, neck_translation,
                        base_pose: Camera) -> Camera:
    """Compose a neck-derived rigid transform onto the torso camera pose."""
    rot = _check_rigid(neck_rotation)
    t = np.asarray(neck_translation, dtype=np.float64).reshape(3)
    return Camera(rotation=rot @ base_pose.rotation,
                  translation=rot @ base_pose.translation + t,
                  fx=base_pose.fx, fy=base_pose.fy,
                  cx=base_pose.cx, cy=base_pose.cy)
