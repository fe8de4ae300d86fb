"""Procedural portrait scenes with exact masks, depth and expression codes.

The subject is a textured ellipsoid head whose axes are modulated by a fixed
random linear map of the expression code, above a textured box torso on a
small rigid trajectory. Per-frame head pose is expressed as the camera
extrinsics, so everything needed downstream (parsing masks, guide depth,
codes) is available analytically and bit-reproducibly from the seeds.
"""

from __future__ import annotations

import io
import json
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .render import Camera

MASK_NAMES = ("head", "torso", "hair", "face", "background")

_HEAD_CENTER = np.array([0.0, 0.42, 0.0])
_HEAD_RADII = np.array([0.30, 0.36, 0.30])
_TORSO_CENTER = np.array([0.0, -0.62, 0.0])
_TORSO_HALF = np.array([0.48, 0.65, 0.22])
_CAM_TARGET = np.array([0.0, 0.05, 0.0])
_CAM_DIST = 2.6
_HAIR_LAT = 0.35   # canonical up-component above which the surface is hair
_FACE_Z = 0.45     # canonical front-component above which it is face

DATASET_FORMAT_VERSION = 1


class SceneSpecError(ValueError):
    pass


class DatasetError(Exception):
    pass


class ManifestError(DatasetError):
    pass


class MissingFrameFileError(DatasetError):
    pass


class FrameShapeError(DatasetError):
    pass


class CodeDimError(DatasetError):
    pass


@dataclass
class SceneSpec:
    n_frames: int
    image_size: int = 64
    expr_dim: int = 8
    motion_seed: int = 0
    head_texture_seed: int = 1
    torso_texture_seed: int = 2
    background_color: tuple = (0.45, 0.45, 0.45)
    # Motion amplitude multipliers; zero freezes the respective component.
    expr_amplitude: float = 1.0
    pose_amplitude: float = 1.0

    def validate(self):
        problems = []
        if self.n_frames < 2:
            problems.append(f"n_frames must be >= 2 (got {self.n_frames})")
        s = self.image_size
        if s < 32 or (s & (s - 1)) != 0:
            problems.append(f"image_size must be a power of two >= 32 (got {s})")
        if self.expr_dim < 1:
            problems.append(f"expr_dim must be >= 1 (got {self.expr_dim})")
        bg = np.asarray(self.background_color, dtype=np.float64)
        if bg.shape != (3,) or (bg < 0).any() or (bg > 1).any():
            problems.append(f"background_color must be RGB in [0,1]^3 "
                            f"(got {self.background_color})")
        if problems:
            raise SceneSpecError("invalid scene spec: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return {"n_frames": self.n_frames, "image_size": self.image_size,
                "expr_dim": self.expr_dim, "motion_seed": self.motion_seed,
                "head_texture_seed": self.head_texture_seed,
                "torso_texture_seed": self.torso_texture_seed,
                "background_color": list(self.background_color),
                "expr_amplitude": self.expr_amplitude,
                "pose_amplitude": self.pose_amplitude}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["background_color"] = tuple(d["background_color"])
        return cls(**d)


@dataclass
class FrameRecord:
    index: int
    camera: Camera
    z_exp: np.ndarray
    image_gt: np.ndarray
    edit_target: np.ndarray
    masks: dict
    guide_depth: np.ndarray | None = None


@dataclass
class Dataset:
    spec: SceneSpec
    frames: list
    codes_gt: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)


def _lookat_camera(position: np.ndarray, target: np.ndarray,
                   image_size: int) -> Camera:
    z = target - position
    z = z / np.linalg.norm(z)
    down = np.array([0.0, -1.0, 0.0])
    y = down - np.dot(down, z) * z
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    rot = np.stack([x, y, z], axis=1)
    focal = 1.2 * image_size
    return Camera(rotation=rot, translation=position, fx=focal, fy=focal,
                  cx=image_size / 2.0, cy=image_size / 2.0)


class _SceneParams:
    """All seed-derived scene constants for one spec."""

    def __init__(self, spec: SceneSpec):
        rng = np.random.default_rng(spec.motion_seed)
        d = spec.expr_dim
        self.expr_amp = rng.uniform(0.3, 0.8, size=d) * spec.expr_amplitude
        self.expr_freq = rng.uniform(0.5, 2.5, size=d)
        self.expr_phase = rng.uniform(0.0, 2 * np.pi, size=d)
        # Linear map from expression code to per-axis radial modulation.
        self.deform_map = rng.normal(0.0, 0.4 / np.sqrt(d), size=(3, d))
        self.az_amp = 0.12 * spec.pose_amplitude
        self.el_amp = 0.08 * spec.pose_amplitude
        self.az_freq = rng.uniform(0.6, 1.6)
        self.el_freq = rng.uniform(0.6, 1.6)
        self.az_phase = rng.uniform(0.0, 2 * np.pi)
        self.el_phase = rng.uniform(0.0, 2 * np.pi)
        self.torso_amp = 0.01 * spec.pose_amplitude
        self.torso_freq = rng.uniform(0.6, 1.6, size=3)
        self.torso_phase = rng.uniform(0.0, 2 * np.pi, size=3)

        h_rng = np.random.default_rng(spec.head_texture_seed)
        self.head_tex_amp = h_rng.uniform(0.05, 0.12, size=(3, 3))
        self.head_tex_freq = h_rng.uniform(0.5, 2.0, size=(3, 3, 3))
        self.head_tex_phase = h_rng.uniform(0.0, 2 * np.pi, size=(3, 3))
        self.head_tex_base = h_rng.uniform(0.35, 0.65, size=3)

        t_rng = np.random.default_rng(spec.torso_texture_seed)
        self.torso_tex_amp = t_rng.uniform(0.05, 0.12, size=(3, 3))
        self.torso_tex_freq = t_rng.uniform(0.5, 2.0, size=(3, 3, 3))
        self.torso_tex_phase = t_rng.uniform(0.0, 2 * np.pi, size=(3, 3))
        self.torso_tex_base = t_rng.uniform(0.35, 0.65, size=3)

    def z_exp(self, t_frac: float) -> np.ndarray:
        return self.expr_amp * np.sin(
            2 * np.pi * self.expr_freq * t_frac + self.expr_phase)

    def camera(self, t_frac: float, image_size: int) -> Camera:
        az = self.az_amp * np.sin(2 * np.pi * self.az_freq * t_frac + self.az_phase)
        el = self.el_amp * np.sin(2 * np.pi * self.el_freq * t_frac + self.el_phase)
        pos = _CAM_TARGET + _CAM_DIST * np.array(
            [np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
        return _lookat_camera(pos, _CAM_TARGET, image_size)

    def torso_offset(self, t_frac: float) -> np.ndarray:
        return self.torso_amp * np.sin(
            2 * np.pi * self.torso_freq * t_frac + self.torso_phase)

    def head_scales(self, z_exp: np.ndarray) -> np.ndarray:
        mod = np.clip(self.deform_map @ z_exp, -0.25, 0.25)
        return _HEAD_RADII * (1.0 + mod)

    def _texture(self, coords: np.ndarray, amp, freq, phase, base) -> np.ndarray:
        cols = []
        for c in range(3):
            v = base[c]
            for m in range(3):
                v = v + amp[c, m] * np.sin(coords @ freq[c, m] + phase[c, m])
            cols.append(v)
        return np.clip(np.stack(cols, axis=-1), 0.02, 0.98)

    def head_texture(self, n_unit: np.ndarray) -> np.ndarray:
        return self._texture(n_unit, self.head_tex_amp, self.head_tex_freq,
                             self.head_tex_phase, self.head_tex_base)

    def torso_texture(self, local: np.ndarray) -> np.ndarray:
        return self._texture(local, self.torso_tex_amp, self.torso_tex_freq,
                             self.torso_tex_phase, self.torso_tex_base)


def _ray_ellipsoid(origins, dirs, center, scales):
    p = (origins - center) / scales
    q = dirs / scales
    a = np.sum(q * q, axis=-1)
    b = 2.0 * np.sum(p * q, axis=-1)
    c = np.sum(p * p, axis=-1) - 1.0
    disc = b * b - 4 * a * c
    hit = disc > 0
    t = np.full(a.shape, np.inf)
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t_near = (-b - sq) / (2 * a)
    t[hit & (t_near > 0)] = t_near[hit & (t_near > 0)]
    return t


def _ray_box(origins, dirs, center, half):
    lo = center - half
    hi = center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    t_min = np.minimum(t0, t1)
    t_max = np.maximum(t0, t1)
    t_enter = np.nanmax(t_min, axis=-1)
    t_exit = np.nanmin(t_max, axis=-1)
    hit = (t_enter <= t_exit) & (t_exit > 0) & (t_enter > 0)
    t = np.full(t_enter.shape, np.inf)
    t[hit] = t_enter[hit]
    return t


def _synth_frame(spec: SceneSpec, params: _SceneParams, index: int) -> FrameRecord:
    t_frac = index / spec.n_frames
    z_exp = params.z_exp(t_frac)
    cam = params.camera(t_frac, spec.image_size)
    scales = params.head_scales(z_exp)
    torso_c = _TORSO_CENTER + params.torso_offset(t_frac)

    s = spec.image_size
    jj, ii = np.meshgrid(np.arange(s), np.arange(s))
    u = (jj + 0.5 - cam.cx) / cam.fx
    v = (ii + 0.5 - cam.cy) / cam.fy
    d_cam = np.stack([u, v, np.ones_like(u)], axis=-1)
    dirs = d_cam @ cam.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.translation, dirs.shape)

    t_head = _ray_ellipsoid(origins, dirs, _HEAD_CENTER, scales)
    t_torso = _ray_box(origins, dirs, torso_c, _TORSO_HALF)

    head_first = t_head < t_torso
    fg_head = np.isfinite(t_head) & head_first
    fg_torso = np.isfinite(t_torso) & ~head_first

    depth = np.zeros((s, s), dtype=np.float64)
    depth[fg_head] = t_head[fg_head]
    depth[fg_torso] = t_torso[fg_torso]

    image = np.empty((s, s, 3), dtype=np.float64)
    image[:] = np.asarray(spec.background_color)

    hair = np.zeros((s, s), dtype=bool)
    face = np.zeros((s, s), dtype=bool)
    if fg_head.any():
        ph = origins[fg_head] + t_head[fg_head, None] * dirs[fg_head]
        n = (ph - _HEAD_CENTER) / scales
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        image[fg_head] = params.head_texture(n)
        hair_pts = n[:, 1] > _HAIR_LAT  # world +y is up
        face_pts = (~hair_pts) & (n[:, 2] > _FACE_Z)
        hair[fg_head] = hair_pts
        face[fg_head] = face_pts
    if fg_torso.any():
        pt = origins[fg_torso] + t_torso[fg_torso, None] * dirs[fg_torso]
        local = (pt - torso_c) / _TORSO_HALF
        image[fg_torso] = params.torso_texture(local)

    masks = {
        "head": fg_head & ~hair & ~face,
        "hair": hair,
        "face": face,
        "torso": fg_torso,
        "background": ~fg_head & ~fg_torso,
    }
    # Quantize to the 8-bit grid used on disk so save/load round-trips exactly.
    image = (np.round(image * 255.0) / 255.0).astype(np.float32)
    return FrameRecord(index=index, camera=cam, z_exp=z_exp,
                       image_gt=image, edit_target=image.copy(),
                       masks=masks, guide_depth=depth.astype(np.float32))


def synth_sequence(spec: SceneSpec) -> Dataset:
    """Generate a full dataset; deterministic for fixed seeds."""
    spec.validate()
    params = _SceneParams(spec)
    frames = [_synth_frame(spec, params, i) for i in range(spec.n_frames)]
    code_rng = np.random.default_rng(spec.head_texture_seed + 7919)
    codes_gt = {
        "z_id": code_rng.normal(size=16),
        "z_ill": code_rng.normal(size=8),
        "w": code_rng.normal(scale=0.01, size=8),
    }
    return Dataset(spec=spec, frames=frames, codes_gt=codes_gt)


# ---------------------------------------------------------------------------
# Persistence


def _write_png(path: Path, image: np.ndarray):
    arr = np.round(np.asarray(image, dtype=np.float64) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _read_png(path: Path) -> np.ndarray:
    return (np.asarray(Image.open(path), dtype=np.float32) / 255.0)


def save_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    for sub in ("frames", "masks", "depth", "codes", "edits"):
        (path / sub).mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "spec": dataset.spec.to_dict(),
        "n_frames": len(dataset.frames),
        "codes_gt": {k: np.asarray(v).tolist() for k, v in dataset.codes_gt.items()},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    for fr in dataset.frames:
        tag = f"{fr.index:05d}"
        _write_png(path / "frames" / f"{tag}.png", fr.image_gt)
        for name in MASK_NAMES:
            m = (fr.masks[name].astype(np.uint8) * 255)
            Image.fromarray(m, mode="L").save(path / "masks" / f"{tag}_{name}.png")
        if fr.guide_depth is not None:
            (path / "depth" / f"{tag}.bin").write_bytes(
                fr.guide_depth.astype(np.float32).tobytes())
        np.asarray(fr.edit_target, dtype=np.float32).tofile(
            path / "edits" / f"{tag}.bin")
        codes = {"z_exp": fr.z_exp.tolist(), "camera": fr.camera.to_dict()}
        (path / "codes" / f"{tag}.json").write_text(
            json.dumps(codes, indent=1, sort_keys=True))
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    mf_path = path / "manifest.json"
    if not mf_path.exists():
        raise ManifestError(f"no manifest.json in {path}")
    try:
        manifest = json.loads(mf_path.read_text())
        spec = SceneSpec.from_dict(manifest["spec"])
        n_frames = int(manifest["n_frames"])
        codes_gt = {k: np.asarray(v) for k, v in manifest["codes_gt"].items()}
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        raise ManifestError(f"malformed manifest in {path}: {e}") from e

    s = spec.image_size
    frames = []
    for i in range(n_frames):
        tag = f"{i:05d}"

        def _need(rel: str) -> Path:
            p = path / rel
            if not p.exists():
                raise MissingFrameFileError(f"frame {i}: missing file {rel}")
            return p

        image = _read_png(_need(f"frames/{tag}.png"))
        if image.shape != (s, s, 3):
            raise FrameShapeError(
                f"frame {i}: image shape {image.shape} != ({s}, {s}, 3)")
        masks = {}
        for name in MASK_NAMES:
            m = np.asarray(Image.open(_need(f"masks/{tag}_{name}.png")))
            if m.shape != (s, s):
                raise FrameShapeError(
                    f"frame {i}: mask '{name}' shape {m.shape} != ({s}, {s})")
            masks[name] = m > 127
        depth = np.fromfile(_need(f"depth/{tag}.bin"), dtype=np.float32)
        if depth.size != s * s:
            raise FrameShapeError(
                f"frame {i}: depth has {depth.size} values, expected {s * s}")
        edit = np.fromfile(_need(f"edits/{tag}.bin"), dtype=np.float32)
        if edit.size != s * s * 3:
            raise FrameShapeError(
                f"frame {i}: edit target has {edit.size} values, "
                f"expected {s * s * 3}")
        codes = json.loads(_need(f"codes/{tag}.json").read_text())
        z_exp = np.asarray(codes["z_exp"], dtype=np.float64)
        if z_exp.shape != (spec.expr_dim,):
            raise CodeDimError(
                f"frame {i}: z_exp has {z_exp.shape[0]} entries, "
                f"manifest expr_dim is {spec.expr_dim}")
        frames.append(FrameRecord(
            index=i, camera=Camera.from_dict(codes["camera"]), z_exp=z_exp,
            image_gt=image, edit_target=edit.reshape(s, s, 3),
            masks=masks, guide_depth=depth.reshape(s, s)))
    return Dataset(spec=spec, frames=frames, codes_gt=codes_gt)


# ---------------------------------------------------------------------------
# Validation and helpers


@dataclass
class ValidationReport:
    issues: list

    @property
    def ok(self) -> bool:
        return not self.issues


def validate_dataset(dataset: Dataset) -> ValidationReport:
    """Check every dataset invariant; never raises."""
    issues = []
    expr_dim = dataset.spec.expr_dim
    for fr in dataset.frames:
        fid = f"frame {fr.index}"
        total = np.zeros(fr.image_gt.shape[:2], dtype=np.int64)
        for name in MASK_NAMES:
            m = fr.masks.get(name)
            if m is None:
                issues.append(f"{fid}: missing mask '{name}'")
                continue
            total += m.astype(np.int64)
        if (total > 1).any():
            issues.append(f"{fid}: masks overlap (disjointness violated)")
        if (total < 1).any():
            issues.append(f"{fid}: masks do not cover every pixel")
        if fr.image_gt.shape != fr.edit_target.shape:
            issues.append(f"{fid}: image_gt and edit_target shapes differ")
        if not np.isfinite(fr.image_gt).all():
            issues.append(f"{fid}: non-finite values in image_gt")
        if not np.isfinite(fr.edit_target).all():
            issues.append(f"{fid}: non-finite values in edit_target")
        if not np.isfinite(fr.z_exp).all():
            issues.append(f"{fid}: non-finite values in z_exp")
        if fr.z_exp.shape != (expr_dim,):
            issues.append(f"{fid}: z_exp has dim {fr.z_exp.shape}, "
                          f"expected ({expr_dim},)")
        if fr.guide_depth is not None:
            fg = ~fr.masks.get("background", np.ones_like(total, dtype=bool))
            if not (fr.guide_depth[fg] > 0).all():
                issues.append(f"{fid}: guide_depth not positive on foreground")
            if (fr.guide_depth[~fg] != 0).any():
                issues.append(f"{fid}: guide_depth nonzero on background")
    return ValidationReport(issues=issues)


def dataset_hash(dataset: Dataset) -> str:
    """Content hash over everything synth produces; used in determinism tests."""
    h = hashlib.sha256()
    h.update(json.dumps(dataset.spec.to_dict(), sort_keys=True).encode())
    for k in sorted(dataset.codes_gt):
        h.update(np.ascontiguousarray(dataset.codes_gt[k]).tobytes())
    for fr in dataset.frames:
        h.update(fr.image_gt.tobytes())
        h.update(fr.edit_target.tobytes())
        h.update(fr.z_exp.tobytes())
        h.update(fr.camera.rotation.tobytes())
        h.update(fr.camera.translation.tobytes())
        for name in MASK_NAMES:
            h.update(np.packbits(fr.masks[name]).tobytes())
        if fr.guide_depth is not None:
            h.update(fr.guide_depth.tobytes())
    return h.hexdigest()
