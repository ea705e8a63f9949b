"""End-to-end animation: static mesh + silhouette video -> OBJ sequence."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .conditioning import Camera, read_pgm_video, render_sequence
from .dataset import passes_size_filter
from .mesh import (
    Decomposition,
    DynamicSequence,
    StaticMesh,
    build_adjacency,
    canonicalize,
    denormalize,
    fps_sample,
    load_obj,
    num_tokens,
    obj_text,
    recompose,
)
from .metrics import ClipScores, EvalReport, config_digest, eucd, silhouette_iou, silhouette_psnr, smoothness
from .numerics import Tensor
from .rf import RFModel, sample
from .trainer import check_compatible, load_rf, load_vae
from .vae import TriflowVAE


class FilterError(ValueError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


class VideoMismatchError(ValueError):
    pass


def export_obj_sequence(frames: np.ndarray, faces: np.ndarray, out_dir: str | Path, real_n: int | None = None, real_m: int | None = None) -> list[Path]:
    """Write frame_0000.obj, frame_0001.obj, ... with real vertices and faces only."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(frames)
    n = frames.shape[1] if real_n is None else real_n
    faces = np.asarray(faces)[: len(faces) if real_m is None else real_m]
    paths = []
    for t, f in enumerate(frames):
        p = out / f"frame_{t:04d}.obj"
        p.write_text(obj_text(f[:n], faces))
        paths.append(p)
    return paths


@dataclass
class AnimateResult:
    frames_world: np.ndarray  # (T', N, 3) condition-centered world frame
    frames_norm: np.ndarray  # (T', N, 3) normalized frame
    report: EvalReport
    paths: list[Path] = field(default_factory=list)


def _as_mesh(mesh) -> StaticMesh:
    return mesh if isinstance(mesh, StaticMesh) else load_obj(mesh)


def _as_video(video) -> np.ndarray:
    if isinstance(video, (str, Path)):
        return read_pgm_video(video)
    return np.asarray(video)


def predict_normalized(
    cond: StaticMesh, video: np.ndarray, vae: TriflowVAE, rf: RFModel, steps: int | None, cfg_scale: float | None, seed: int
) -> tuple[np.ndarray, np.ndarray, object]:
    """Normalized (T, N, 3) frames and the jump-only pose for a canonicalized run."""
    cond_n, _, norm = canonicalize(cond)
    real_n = cond_n.real_vertex_count
    v_cond = cond_n.vertices
    adj = build_adjacency(cond_n.faces[: cond_n.real_face_count], len(v_cond))
    idx = fps_sample(v_cond, num_tokens(real_n, vae.cfg.fps_ratio), start=0, real_count=real_n)
    x_cond, fine = vae.encode_condition(v_cond, adj, idx, real_n)
    f_vid = rf.video_context(video)
    z = rf.cfg.unstandardize(sample(rf, x_cond, f_vid, steps, cfg_scale, seed))
    z_jump, z_traj = Tensor(z[:, : rf.cfg.d_jump]), Tensor(z[:, rf.cfg.d_jump :])
    jump_rec, traj_rec = vae.decode(x_cond.detach(), z_jump, z_traj, fine.detach(), real_n)
    rel = traj_rec.data.copy()
    rel[0] = 0.0  # the first frame is the jump pose by construction
    d = Decomposition(v_cond, jump_rec.data.copy(), rel, norm, real_n)
    return recompose(d), v_cond + d.jump, norm


def animate(
    mesh,
    video,
    vae,
    rf,
    out_dir: str | Path | None = None,
    steps: int | None = None,
    cfg_scale: float | None = None,
    seed: int = 0,
    pose_only: bool = False,
    gt: DynamicSequence | None = None,
) -> AnimateResult:
    """Animate ``mesh`` (StaticMesh or .obj path) to follow ``video`` ((T, H, W) or a PGM directory).

    ``vae`` and ``rf`` may be models or checkpoint paths. Output coordinates
    are in the condition-centered world frame (normalized x s + c_cond); the
    global translation of the reference sequence is not recovered.
    """
    cond = _as_mesh(mesh)
    if not passes_size_filter(cond):
        raise FilterError(
            f"mesh rejected by size filter ({cond.real_vertex_count} vertices, {cond.real_face_count} faces)"
        )
    vid = _as_video(video)
    vae = vae if isinstance(vae, TriflowVAE) else load_vae(vae)
    rf = rf if isinstance(rf, RFModel) else load_rf(rf)
    try:
        check_compatible(vae.cfg, rf.cfg)
    except ValueError as e:
        raise CheckpointMismatchError(str(e)) from None
    expected = (rf.cfg.frames, rf.cfg.resolution, rf.cfg.resolution)
    if vid.shape != expected:
        raise VideoMismatchError(f"video shape {vid.shape} does not match model input {expected}")

    frames_norm, pose, norm = predict_normalized(cond, vid, vae, rf, steps, cfg_scale, seed)
    if not np.isfinite(frames_norm).all():
        raise FloatingPointError("non-finite coordinates in generated sequence")
    real_n, real_m = cond.real_vertex_count, cond.real_face_count
    mask = np.arange(frames_norm.shape[1]) < real_n

    pred_video = render_sequence(frames_norm, cond.faces, Camera(resolution=vid.shape[1]), real_m)
    gt_eucd = None
    if gt is not None:
        _, gt_n, _ = canonicalize(cond, gt)
        gt_eucd = eucd(frames_norm, gt_n.frames, mask)
    report = EvalReport(config_digest=config_digest(asdict(vae.cfg), asdict(rf.cfg)))
    report.add(ClipScores("animate", silhouette_psnr(pred_video, vid), silhouette_iou(pred_video, vid), smoothness(frames_norm, mask), gt_eucd))

    out_norm = pose[None] if pose_only else frames_norm
    out_world = denormalize(out_norm, norm)
    paths = []
    if out_dir is not None:
        paths = export_obj_sequence(out_world, cond.faces, out_dir, real_n, real_m)
        (Path(out_dir) / "report.json").write_text(report.to_json())
    return AnimateResult(out_world, out_norm, report, paths)
