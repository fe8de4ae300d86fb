import numpy as np
import pytest
import torch

from portraitnerf.fields import CodeDims, EncodingConfig, FieldNetSpec, PortraitModel
from portraitnerf.scene import SceneSpec, synth_sequence


def tiny_model(region="head", seed=0, dtype=torch.float64, feature_dim=4,
               factor=2):
    """Miniature model for gradient checks; float64 by default."""
    torch.manual_seed(seed)
    model = PortraitModel(
        region,
        code_dims=CodeDims(id_dim=4, exp_dim=3, ill_dim=2, w_dim=3),
        encoding=EncodingConfig(l_pos_deform=2, l_pos_field=3, l_dir=2),
        net_spec=FieldNetSpec(trunk_layers=2, trunk_width=16, head_layers=2,
                              head_width=8, feature_dim=feature_dim,
                              deform_layers=2, deform_width=16),
        upsample_factor=factor, upsample_width=8)
    return model.to(dtype)


def central_diff_grads(f, param, eps=1e-3):
    """Finite-difference gradient of scalar f() w.r.t. every entry of param."""
    grads = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = grads.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grads


def assert_grads_close(autograd, fd, rel=1e-4, abs_floor=1e-6):
    denom = fd.abs().clamp(min=abs_floor / rel)
    assert ((autograd - fd).abs() / denom).max().item() < rel, (
        f"max rel err {((autograd - fd).abs() / denom).max().item():.3e}")


def make_frame(size=4, exp_dim=3, seed=0, with_depth=False):
    """Minimal frame with a disjoint covering mask set and a generic camera."""
    from portraitnerf.render import Camera
    from portraitnerf.scene import FrameRecord

    rng = np.random.default_rng(seed)
    camera = Camera(rotation=np.eye(3), translation=np.array([0.0, 0.0, -2.6]),
                    fx=1.2 * size, fy=1.2 * size, cx=size / 2, cy=size / 2)
    image = rng.uniform(0.1, 0.9, size=(size, size, 3)).astype(np.float32)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    head = (ii < size // 2) & (jj < size // 2)
    hair = (ii < size // 2) & (jj >= size // 2)
    face = np.zeros((size, size), dtype=bool)
    torso = (ii >= size // 2) & (jj < size // 2)
    background = ~(head | hair | face | torso)
    masks = {"head": head, "hair": hair, "face": face, "torso": torso,
             "background": background}
    depth = None
    if with_depth:
        depth = np.where(~background, 2.5, 0.0).astype(np.float32)
    return FrameRecord(index=0, camera=camera,
                       z_exp=rng.normal(size=exp_dim),
                       image_gt=image, edit_target=image.copy(),
                       masks=masks, guide_depth=depth)


def small_models(seed=0, exp_dim=8, factor=4):
    """Fast float32 head+torso pair sized for the 64x64 synthetic scenes."""
    torch.manual_seed(seed)
    kwargs = dict(
        code_dims=CodeDims(id_dim=8, exp_dim=exp_dim, ill_dim=4, w_dim=4),
        encoding=EncodingConfig(l_pos_deform=2, l_pos_field=4, l_dir=2),
        net_spec=FieldNetSpec(trunk_layers=2, trunk_width=24, head_layers=1,
                              head_width=16, feature_dim=6, deform_layers=2,
                              deform_width=16),
        upsample_factor=factor, upsample_width=8)
    return PortraitModel("head", **kwargs), PortraitModel("torso", **kwargs)


@pytest.fixture(scope="session")
def small_dataset():
    return synth_sequence(SceneSpec(n_frames=4, image_size=64, motion_seed=7))


@pytest.fixture(scope="session")
def medium_dataset():
    return synth_sequence(SceneSpec(n_frames=8, image_size=64, motion_seed=7))
