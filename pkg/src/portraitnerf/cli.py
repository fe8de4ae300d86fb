"""Command-line front door: synth, fit, edit, drive, render, eval.

Every command is a pure function of (config, inputs, seed) and records a run
manifest so any output can be reproduced from its directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoints import (CheckpointError, file_hash, load_checkpoint,
                          save_checkpoint)
from .config import ConfigError, config_hash, load_config
from .duloop import edit_sequence
from .editing import EditConfig, IdentityCodec, default_toy_transform, toy_denoiser
from .fields import CodeDims, EncodingConfig, FieldNetSpec, PortraitModel
from .metrics import RandomProjectionEmbedder, eval_report
from .render import Camera, RenderSettings, render_frame
from .scene import (DatasetError, SceneSpec, SceneSpecError, load_dataset,
                    save_dataset, synth_sequence, validate_dataset)
from .train import JsonlLogger, TrainSchedule, fit_reconstruction, psnr


class StageOrderError(RuntimeError):
    pass


def _write_manifest(out: Path, command: str, config: dict, seed: int,
                    inputs: dict):
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "code_version": __version__,
        "inputs": inputs,
    }
    (out / "run_manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True))


def build_scene_spec(config: dict) -> SceneSpec:
    sc = dict(config["scene"])
    sc["background_color"] = tuple(sc["background_color"])
    return SceneSpec(**sc)


def build_models(config: dict, expr_dim: int) -> tuple[PortraitModel, PortraitModel]:
    m = config["model"]
    code_dims = CodeDims(id_dim=m["id_dim"], exp_dim=expr_dim,
                         ill_dim=m["ill_dim"], w_dim=m["w_dim"])
    encoding = EncodingConfig(l_pos_deform=m["l_pos_deform"],
                              l_pos_field=m["l_pos_field"], l_dir=m["l_dir"],
                              include_raw=m["include_raw"])
    spec = FieldNetSpec(trunk_layers=m["trunk_layers"],
                        trunk_width=m["trunk_width"],
                        head_layers=m["head_layers"],
                        head_width=m["head_width"],
                        feature_dim=m["feature_dim"],
                        deform_layers=m["deform_layers"],
                        deform_width=m["deform_width"])
    make = lambda region: PortraitModel(
        region, code_dims=code_dims, encoding=encoding, net_spec=spec,
        upsample_factor=m["upsample_factor"], upsample_width=m["upsample_width"])
    return make("head"), make("torso")


def build_render_settings(config: dict, stratified: bool) -> RenderSettings:
    r = config["render"]
    return RenderSettings(near=r["near"], far=r["far"],
                          sample_count=r["sample_count"],
                          guide_halfwidth=r["guide_halfwidth"],
                          stratified=stratified)


def build_edit_config(config: dict, instruction: str | None = None) -> EditConfig:
    e = config["edit"]
    return EditConfig(instruction=instruction or e["instruction"],
                      s_t=e["s_t"], s_i=e["s_i"], t_min=e["t_min"],
                      t_max=e["t_max"], denoise_steps=e["denoise_steps"])


def _save_png(path: Path, image) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def build_denoiser(kind: str):
    if kind == "toy":
        return toy_denoiser(default_toy_transform)
    if kind == "external":
        from .remote import ExternalDenoiser

        return ExternalDenoiser()
    raise ConfigError(f"unknown editor backend {kind!r}")


def cmd_synth(config: dict, seed: int, out: Path) -> int:
    spec = build_scene_spec(config)
    dataset = synth_sequence(spec)
    report = validate_dataset(dataset)
    if not report.ok:
        raise SceneSpecError("generated dataset invalid: " +
                             "; ".join(report.issues))
    save_dataset(dataset, out / "dataset")
    _write_manifest(out, "synth", config, seed, {})
    print(f"wrote {len(dataset.frames)} frames to {out / 'dataset'}")
    return 0


def cmd_fit(config: dict, seed: int, out: Path, dataset_path: Path) -> int:
    dataset = load_dataset(dataset_path)
    torch.manual_seed(seed)
    head, torso = build_models(config, dataset.spec.expr_dim)
    fit_cfg = config["fit"]
    schedule = TrainSchedule(stage="reconstruct",
                             total_iters=fit_cfg["total_iters"],
                             learning_rate=fit_cfg["learning_rate"],
                             loss_alpha=fit_cfg["loss_alpha"],
                             eval_every=fit_cfg["eval_every"])
    holdout = list(fit_cfg["holdout"])
    train_indices = [i for i in range(len(dataset.frames)) if i not in holdout]
    settings = build_render_settings(config, stratified=True)
    logger = JsonlLogger(out / "fit_log.jsonl")
    fit_reconstruction(dataset, head, torso, schedule, seed=seed,
                       settings=settings, train_indices=train_indices,
                       logger=logger)
    eval_settings = build_render_settings(config, stratified=False)
    holdout_psnr = None
    if holdout:
        values = []
        for i in holdout:
            with torch.no_grad():
                outp = render_frame(dataset.frames[i], head, torso,
                                    settings=eval_settings,
                                    background=dataset.spec.background_color)
            values.append(psnr(outp.rgb, dataset.frames[i].image_gt))
        holdout_psnr = float(np.mean(values))
        logger.write({"holdout_psnr": holdout_psnr, "holdout": holdout})
    meta = {"stage": "reconstruct", "dataset": str(dataset_path),
            "dataset_hash": None, "config_hash": config_hash(config),
            "seed": seed, "holdout": holdout, "holdout_psnr": holdout_psnr}
    ckpt = save_checkpoint(out / "reconstruction.ckpt", head, torso, meta)
    _write_manifest(out, "fit", config, seed, {"dataset": str(dataset_path)})
    print(f"wrote {ckpt}" + (f" (holdout PSNR {holdout_psnr:.2f} dB)"
                             if holdout_psnr is not None else ""))
    return 0


def cmd_edit(config: dict, seed: int, out: Path, checkpoint: Path,
             instruction: str | None, editor: str,
             dataset_path: Path | None) -> int:
    try:
        head, torso, meta = load_checkpoint(checkpoint)
    except CheckpointError as e:
        raise StageOrderError(
            f"edit requires a reconstruction checkpoint from `fit`: {e}") from e
    if meta.get("stage") not in ("reconstruct", "edit"):
        raise StageOrderError(
            f"checkpoint stage {meta.get('stage')!r} cannot be edited; "
            f"run `fit` first")
    dataset = load_dataset(dataset_path or meta["dataset"])
    edit_cfg = build_edit_config(config, instruction)
    if not edit_cfg.instruction:
        raise ConfigError("an edit instruction is required")
    e = config["edit"]
    schedule = TrainSchedule(stage="edit", total_iters=e["total_iters"],
                             learning_rate=e["learning_rate"],
                             loss_alpha=e["loss_alpha"],
                             eval_every=e["eval_every"])
    settings = build_render_settings(config, stratified=True)
    logger = JsonlLogger(out / "edit_log.jsonl")
    denoiser = build_denoiser(editor)
    edit_sequence(dataset, head, torso, edit_cfg, schedule, denoiser=denoiser,
                  codec=IdentityCodec(), seed=seed,
                  update_period=e["update_period"], settings=settings,
                  logger=logger)
    new_meta = dict(meta)
    new_meta.update({"stage": "edit", "instruction": edit_cfg.instruction,
                     "config_hash": config_hash(config), "seed": seed})
    ckpt = save_checkpoint(out / "edited.ckpt", head, torso, new_meta)
    save_dataset(dataset, out / "edited_dataset")
    _write_manifest(out, "edit", config, seed,
                    {"checkpoint": str(checkpoint),
                     "checkpoint_hash": file_hash(checkpoint)})
    print(f"wrote {ckpt} and {out / 'edited_dataset'}")
    return 0


def cmd_render(config: dict, seed: int, out: Path, checkpoint: Path,
               frames: list[int], dataset_path: Path | None) -> int:
    head, torso, meta = load_checkpoint(checkpoint)
    dataset = load_dataset(dataset_path or meta["dataset"])
    settings = build_render_settings(config, stratified=False)
    out.mkdir(parents=True, exist_ok=True)
    for i in frames:
        if not 0 <= i < len(dataset.frames):
            raise ConfigError(f"frame index {i} out of range")
        with torch.no_grad():
            outp = render_frame(dataset.frames[i], head, torso,
                                settings=settings,
                                background=dataset.spec.background_color)
        _save_png(out / f"render_{i:05d}.png", outp.rgb.numpy())
    _write_manifest(out, "render", config, seed,
                    {"checkpoint": str(checkpoint), "frames": frames})
    print(f"rendered {len(frames)} frames to {out}")
    return 0


def cmd_drive(config: dict, seed: int, out: Path, checkpoint: Path,
              ref: Path) -> int:
    from .driving import transfer

    head, torso, _ = load_checkpoint(checkpoint)
    codes_dir = ref / "codes"
    if not codes_dir.exists():
        raise DatasetError(f"no codes/ directory under {ref}")
    ref_sequence = []
    for path in sorted(codes_dir.glob("*.json")):
        codes = json.loads(path.read_text())
        ref_sequence.append((np.asarray(codes["z_exp"]),
                             Camera.from_dict(codes["camera"])))
    settings = build_render_settings(config, stratified=False)
    frames = transfer(head, torso, ref_sequence,
                      image_size=config["scene"]["image_size"],
                      settings=settings,
                      background=tuple(config["scene"]["background_color"]))
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        _save_png(out / f"drive_{i:05d}.png", frame)
    _write_manifest(out, "drive", config, seed,
                    {"checkpoint": str(checkpoint), "ref": str(ref)})
    print(f"wrote {len(frames)} driven frames to {out}")
    return 0


def cmd_eval(config: dict, seed: int, out: Path, frames_dir: Path,
             prompt: str | None) -> int:
    from PIL import Image

    paths = sorted(frames_dir.glob("*.png"))
    if not paths:
        raise DatasetError(f"no .png frames under {frames_dir}")
    frames = [np.asarray(Image.open(p), dtype=np.float32) / 255.0
              for p in paths]
    ev = config["eval"]
    embedder = RandomProjectionEmbedder(dim=ev["embedder_dim"],
                                        seed=ev["embedder_seed"])
    report = eval_report(frames, prompt, embedder)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(
        json.dumps(report, indent=1, sort_keys=True))
    _write_manifest(out, "eval", config, seed,
                    {"frames": str(frames_dir), "prompt": prompt})
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="portraitnerf",
        description="Editable, animatable portrait radiance fields")
    parser.add_argument("--config", type=Path, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--editor", choices=("toy", "external"), default="toy")
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth")
    p = sub.add_parser("fit")
    p.add_argument("--dataset", type=Path, required=True)
    p = sub.add_parser("edit")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--instruction", default=None)
    p.add_argument("--dataset", type=Path, default=None)
    p = sub.add_parser("render")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--frames", default="0")
    p.add_argument("--dataset", type=Path, default=None)
    p = sub.add_parser("drive")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--ref", type=Path, required=True)
    p = sub.add_parser("eval")
    p.add_argument("--frames", type=Path, required=True)
    p.add_argument("--prompt", default=None)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.overrides)
        seed = args.seed if args.seed is not None else config["seed"]
        if args.command == "synth":
            return cmd_synth(config, seed, args.out)
        if args.command == "fit":
            return cmd_fit(config, seed, args.out, args.dataset)
        if args.command == "edit":
            return cmd_edit(config, seed, args.out, args.checkpoint,
                            args.instruction, args.editor, args.dataset)
        if args.command == "render":
            frames = [int(x) for x in str(args.frames).split(",") if x != ""]
            return cmd_render(config, seed, args.out, args.checkpoint,
                              frames, args.dataset)
        if args.command == "drive":
            return cmd_drive(config, seed, args.out, args.checkpoint, args.ref)
        if args.command == "eval":
            return cmd_eval(config, seed, args.out, args.frames, args.prompt)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, SceneSpecError, DatasetError, CheckpointError,
            StageOrderError, ValueError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
