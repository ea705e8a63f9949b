"""Command line entry point: ``rdmesh <command> [flags]``.

Failures print one JSON line ``{"error": <kind>, "message": ...}`` to stderr
and exit with status 1.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .conditioning import Camera, render_record, write_pgm_video
from .dataset import CurationConfig, curate, list_clips, read_clip, write_dataset
from .metrics import ClipScores, EvalReport, config_digest
from .pipeline import animate
from .trainer import TrainConfig, load_rf, load_vae, train_rf, train_vae


def _load_json(path: str | None) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def cmd_gen_data(a) -> dict:
    cfg = CurationConfig.from_dict(_load_json(a.config))
    paths = write_dataset(curate(cfg, a.seed), a.out)
    return {"clips": len(paths), "out": str(a.out)}


def _train_config(a, stage: str) -> TrainConfig:
    d = _load_json(a.config)
    d["stage"] = stage
    if a.seed is not None:
        d["seed"] = a.seed
    if a.out:
        d["out_dir"] = str(a.out)
    if a.data:
        d["data_dir"] = str(a.data)
    if getattr(a, "vae_ckpt", None):
        d["vae_ckpt"] = str(a.vae_ckpt)
    if a.iterations:
        d["iterations"] = a.iterations
    return TrainConfig.from_dict(d)


def cmd_train_vae(a) -> dict:
    res = train_vae(_train_config(a, "vae"), resume=a.resume)
    return {"checkpoint": str(res.checkpoint), "final_loss": res.history[-1]["loss"]}


def cmd_train_rf(a) -> dict:
    res = train_rf(_train_config(a, "rf"), resume=a.resume)
    return {"checkpoint": str(res.checkpoint), "final_loss": res.history[-1]["loss"], **res.extra}


def cmd_animate(a) -> dict:
    gt = read_clip(a.gt).sequence if a.gt else None
    res = animate(a.mesh, a.video_dir, a.vae_ckpt, a.rf_ckpt, a.out, a.steps, a.cfg_scale, a.seed, a.pose_only, gt)
    return {"frames": len(res.paths), "out": str(a.out), "report": res.report.to_dict()["mean"]}


def cmd_eval(a) -> dict:
    vae, rf = load_vae(a.vae_ckpt), load_rf(a.rf_ckpt)
    cam = Camera(resolution=rf.cfg.resolution)
    report = EvalReport()
    for path in list_clips(a.data)[: a.max_clips]:
        rec = read_clip(path)
        video = rec.silhouette_video if rec.silhouette_video is not None and rec.silhouette_video.shape[1] == cam.resolution else render_record(rec, cam)
        res = animate(rec.condition, video, vae, rf, None, a.steps, a.cfg_scale, a.seed, False, rec.sequence)
        s = res.report.clips[0]
        report.add(ClipScores(path.stem, s.psnr, s.iou, s.smoothness, s.eucd))
    report.config_digest = config_digest(vae.cfg.__dict__, rf.cfg.__dict__)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(report.to_json())
    return {"clips": len(report.clips), **report.aggregates}


def cmd_render(a) -> dict:
    rec = read_clip(a.clip)
    video = render_record(rec, Camera(resolution=a.resolution))
    paths = write_pgm_video(video, a.out)
    if a.condition_obj:
        from .mesh import save_obj

        save_obj(Path(a.out) / "condition.obj", rec.condition)
    return {"frames": len(paths), "out": str(a.out)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdmesh", description="dynamic mesh VAE + rectified-flow toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=out_required, type=Path)

    sp = sub.add_parser("gen-data", help="curate a procedural clip dataset")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    for name, func in (("train-vae", cmd_train_vae), ("train-rf", cmd_train_rf)):
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--data", type=Path)
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--resume", type=Path)
        if name == "train-rf":
            sp.add_argument("--vae-ckpt", type=Path)
        sp.set_defaults(func=func)

    sp = sub.add_parser("animate", help="generate an OBJ sequence from a mesh and a silhouette video")
    common(sp)
    sp.add_argument("--mesh", required=True, type=Path)
    sp.add_argument("--video-dir", required=True, type=Path)
    sp.add_argument("--vae-ckpt", required=True, type=Path)
    sp.add_argument("--rf-ckpt", required=True, type=Path)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--cfg-scale", type=float)
    sp.add_argument("--pose-only", action="store_true", help="export only the rectified first frame")
    sp.add_argument("--gt", type=Path, help=".dmc clip to score EucD against")
    sp.set_defaults(func=cmd_animate)

    sp = sub.add_parser("eval", help="animate every clip of a dataset and score it")
    common(sp)
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--vae-ckpt", required=True, type=Path)
    sp.add_argument("--rf-ckpt", required=True, type=Path)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--cfg-scale", type=float)
    sp.add_argument("--max-clips", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("render", help="write a clip's silhouettes as PGM frames")
    common(sp)
    sp.add_argument("--clip", required=True, type=Path)
    sp.add_argument("--resolution", type=int, default=256)
    sp.add_argument("--condition-obj", action="store_true", help="also write the condition mesh as condition.obj")
    sp.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is None and args.command in ("gen-data", "animate", "eval"):
        args.seed = 0
    try:
        result = args.func(args)
    except Exception as e:  # report every failure as one machine-readable line
        print(json.dumps({"error": type(e).__name__, "message": str(e), "command": args.command}), file=sys.stderr)
        return 1
    print(json.dumps({"ok": True, "command": args.command, **result}, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
