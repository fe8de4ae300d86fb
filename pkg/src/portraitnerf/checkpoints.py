"""Checkpoint archives: one deterministic zip holding named parameter tensors
plus the architecture metadata needed to rebuild both region models.

The writer pins zip entry metadata (fixed timestamp, stored entries) so the
same model state always produces byte-identical files, which the pipeline's
reproducibility contract relies on.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .fields import CodeDims, EncodingConfig, FieldNetSpec, PortraitModel

CHECKPOINT_FORMAT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(Exception):
    pass


def write_deterministic_zip(path, entries: dict):
    """Write {name: bytes} entries with pinned metadata, sorted by name."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, entries[name])


def _tensor_bytes(t: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, t.detach().cpu().numpy())
    return buf.getvalue()


def _model_meta(model: PortraitModel) -> dict:
    return {
        "region": model.region,
        "code_dims": vars(model.code_dims),
        "encoding": vars(model.encoding),
        "net_spec": vars(model.net_spec),
        "upsample_factor": model.upsampler.factor,
        "upsample_width": model.upsampler.stem.out_channels,
    }


def _build_model(meta: dict) -> PortraitModel:
    return PortraitModel(
        region=meta["region"],
        code_dims=CodeDims(**meta["code_dims"]),
        encoding=EncodingConfig(**meta["encoding"]),
        net_spec=FieldNetSpec(**meta["net_spec"]),
        upsample_factor=meta["upsample_factor"],
        upsample_width=meta["upsample_width"],
    )


def save_checkpoint(path, head_model: PortraitModel, torso_model: PortraitModel,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    entries = {}
    models_meta = {}
    for model in (head_model, torso_model):
        models_meta[model.region] = _model_meta(model)
        for name, tensor in model.state_dict().items():
            entries[f"{model.region}/{name}.npy"] = _tensor_bytes(tensor)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "models": models_meta,
        "meta": meta or {},
    }
    entries["meta.json"] = json.dumps(header, indent=1, sort_keys=True).encode()
    write_deterministic_zip(path, entries)
    return path


def load_checkpoint(path) -> tuple[PortraitModel, PortraitModel, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("meta.json"))
            if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(
                    f"unsupported checkpoint format "
                    f"{header.get('format_version')!r}")
            models = {}
            for region in ("head", "torso"):
                model = _build_model(header["models"][region])
                state = {}
                prefix = f"{region}/"
                for name in zf.namelist():
                    if name.startswith(prefix) and name.endswith(".npy"):
                        arr = np.load(io.BytesIO(zf.read(name)))
                        state[name[len(prefix):-4]] = torch.as_tensor(arr)
                model.load_state_dict(state)
                models[region] = model
    except (KeyError, json.JSONDecodeError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"malformed checkpoint {path}: {e}") from e
    return models["head"], models["torso"], header["meta"]


def param_hash(params) -> str:
    """SHA-256 over parameter bytes; detects any mutation."""
    if isinstance(params, torch.nn.Module):
        params = [t for _, t in sorted(params.state_dict().items())]
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
