"""Sequence and silhouette metrics plus the per-run evaluation report."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

PSNR_CAP = 100.0


def eucd(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean per-vertex L2 distance over frames and real vertices."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    dist = np.linalg.norm(pred - gt, axis=-1)  # (T, N)
    if mask is not None:
        dist = dist[:, np.asarray(mask, dtype=bool)]
    return float(dist.mean())


def _check_videos(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    pred, ref = np.asarray(pred, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"video shape mismatch: {pred.shape} vs {ref.shape}")
    return pred, ref


def silhouette_psnr(pred_frames, ref_frames) -> float:
    """Frame-averaged 10 log10(1 / MSE); identical frames score the cap."""
    pred, ref = _check_videos(pred_frames, ref_frames)
    mse = ((pred - ref) ** 2).reshape(len(pred), -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        per = np.where(mse > 0, 10.0 * np.log10(1.0 / np.where(mse > 0, mse, 1.0)), PSNR_CAP)
    return float(np.minimum(per, PSNR_CAP).mean())


def silhouette_iou(pred_frames, ref_frames) -> float:
    """Frame-averaged intersection over union; two empty frames count as 1."""
    pred, ref = _check_videos(pred_frames, ref_frames)
    p, r = pred > 0.5, ref > 0.5
    inter = (p & r).reshape(len(p), -1).sum(axis=1)
    union = (p | r).reshape(len(p), -1).sum(axis=1)
    return float(np.where(union > 0, inter / np.maximum(union, 1), 1.0).mean())


def smoothness(seq: np.ndarray, mask: np.ndarray | None = None) -> float:
    """exp(-mean |second difference| / (mean |first difference| + 1e-8)), in [0, 1].

    A proxy for perceptual motion smoothness: 1 for linear or static motion,
    small for frame-to-frame jitter.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.shape[0] < 3:
        raise ValueError("smoothness needs at least 3 frames")
    if mask is not None:
        seq = seq[:, np.asarray(mask, dtype=bool)]
    d1 = np.linalg.norm(np.diff(seq, axis=0), axis=-1).mean()
    d2 = np.linalg.norm(np.diff(seq, n=2, axis=0), axis=-1).mean()
    return float(np.exp(-d2 / (d1 + 1e-8)))


@dataclass
class ClipScores:
    name: str
    psnr: float
    iou: float
    smoothness: float
    eucd: float | None = None


@dataclass
class EvalReport:
    clips: list[ClipScores] = field(default_factory=list)
    config_digest: str = ""
    notes: str = "smoothness is a second-difference proxy; IoU is logged alongside PSNR"

    def add(self, scores: ClipScores) -> None:
        self.clips.append(scores)

    @property
    def aggregates(self) -> dict[str, float | None]:
        out = {}
        for key in ("psnr", "iou", "smoothness", "eucd"):
            vals = [getattr(c, key) for c in self.clips if getattr(c, key) is not None]
            out[key] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self) -> dict:
        return {"clips": [asdict(c) for c in self.clips], "mean": self.aggregates, "config_digest": self.config_digest, "notes": self.notes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def config_digest(*configs: dict) -> str:
    blob = json.dumps(list(configs), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
