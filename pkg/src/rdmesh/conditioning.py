"""Silhouette videos and the video-token provider consumed by the RF model.

The rasterizer is an orthographic front view (x right, y up, z dropped).
Tokens come from a jointly trained patch embedding; any other provider only
has to return an (L, d_vid) matrix under a ``provider`` id.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import canonicalize
from .numerics import Linear, Module, Tensor, ops

PATCH_PROVIDER = "patch-embed-v1"
# shape of the frozen video-model feature tap this provider stands in for
REFERENCE_FEATURE_SHAPE = (1088, 3072)


@dataclass(frozen=True)
class Camera:
    resolution: int = 256
    view_scale: float = 1.0
    margin: float = 0.05

    def project(self, vertices: np.ndarray) -> np.ndarray:
        """(N, 3) -> (N, 2) continuous pixel coordinates (u right, v down)."""
        r = self.resolution
        k = (0.5 - self.margin) * r * self.view_scale
        u = r / 2 + vertices[:, 0] * k
        v = r / 2 - vertices[:, 1] * k
        return np.stack([u, v], axis=1)


@dataclass
class VideoFeatureTokens:
    tokens: Tensor  # (L, d_vid)
    provider: str = PATCH_PROVIDER


# ---------------------------------------------------------------------------
# rasterization


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _top_left(ax, ay, bx, by) -> bool:
    dx, dy = bx - ax, by - ay
    return (dy == 0 and dx > 0) or dy < 0


def rasterize_silhouette(
    frame_vertices: np.ndarray, faces: np.ndarray, cam: Camera, real_face_count: int | None = None
) -> np.ndarray:
    """Binary (H, W) image: 1 where a pixel center is covered by a non-degenerate triangle.

    Pixel centers exactly on an edge are owned by top and left edges only.
    """
    r = cam.resolution
    img = np.zeros((r, r), dtype=np.uint8)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if real_face_count is not None:
        faces = faces[:real_face_count]
    if len(faces) == 0:
        return img
    uv = cam.project(np.asarray(frame_vertices, dtype=np.float64))
    for f in faces:
        if f[0] == f[1] or f[1] == f[2] or f[0] == f[2]:
            continue
        p0, p1, p2 = uv[f[0]], uv[f[1]], uv[f[2]]
        area = _edge(*p0, *p1, *p2)
        if area == 0:
            continue
        if area < 0:
            p1, p2 = p2, p1
        lo = np.floor(np.minimum(np.minimum(p0, p1), p2) - 0.5)
        hi = np.ceil(np.maximum(np.maximum(p0, p1), p2) - 0.5)
        j0, i0 = max(int(lo[0]), 0), max(int(lo[1]), 0)
        j1, i1 = min(int(hi[0]), r - 1), min(int(hi[1]), r - 1)
        if j0 > j1 or i0 > i1:
            continue
        px = (np.arange(j0, j1 + 1) + 0.5)[None, :]
        py = (np.arange(i0, i1 + 1) + 0.5)[:, None]
        inside = np.ones((i1 - i0 + 1, j1 - j0 + 1), dtype=bool)
        for a, b in ((p0, p1), (p1, p2), (p2, p0)):
            e = _edge(a[0], a[1], b[0], b[1], px, py)
            inside &= (e > 0) | ((e == 0) & _top_left(a[0], a[1], b[0], b[1]))
        img[i0 : i1 + 1, j0 : j1 + 1] |= inside.astype(np.uint8)
    return img


def render_sequence(frames: np.ndarray, faces: np.ndarray, cam: Camera, real_face_count: int | None = None) -> np.ndarray:
    return np.stack([rasterize_silhouette(f, faces, cam, real_face_count) for f in frames])


def render_record(record, cam: Camera) -> np.ndarray:
    """Silhouettes of a clip's target sequence in the normalized frame of its condition."""
    _, seq_n, _ = canonicalize(record.condition, record.sequence)
    return render_sequence(seq_n.frames, seq_n.faces, cam, seq_n.real_face_count)


# ---------------------------------------------------------------------------
# PGM frame directories


def write_pgm_video(video: np.ndarray, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, frame in enumerate(np.asarray(video)):
        h, w = frame.shape
        path = out / f"frame_{t:04d}.pgm"
        data = np.where(frame > 0, 255, 0).astype(np.uint8)
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())
        paths.append(path)
    return paths


def _read_pgm(path: Path) -> np.ndarray:
    buf = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(buf, pos)
        if m is None:
            raise ValueError(f"{path}: malformed PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    data = np.frombuffer(buf[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return (data.reshape(h, w) > maxval // 2).astype(np.uint8)


class MissingFramesError(FileNotFoundError):
    pass


def read_pgm_video(in_dir: str | Path) -> np.ndarray:
    """Read frame_0000.pgm, frame_0001.pgm, ... into a (T, H, W) {0, 1} array."""
    paths = sorted(Path(in_dir).glob("*.pgm"))
    if not paths:
        raise MissingFramesError(f"no .pgm frames in {in_dir}")
    numbers = [int(re.findall(r"\d+", p.stem)[-1]) for p in paths]
    expected = list(range(numbers[0], numbers[0] + len(numbers)))
    if sorted(numbers) != expected:
        missing = sorted(set(range(min(numbers), max(numbers) + 1)) - set(numbers))
        raise MissingFramesError(f"frame numbering has gaps: missing {missing[:8]}")
    frames = [_read_pgm(p) for _, p in sorted(zip(numbers, paths))]
    if len({f.shape for f in frames}) != 1:
        raise ValueError("frames differ in resolution")
    return np.stack(frames)


# ---------------------------------------------------------------------------
# tokenization


def _sincos(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = positions[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def spatiotemporal_encoding(grid: tuple[int, int, int], dim: int) -> np.ndarray:
    """Fixed (L, dim) sin/cos code over a (t, y, x) patch grid; channels split across the three axes."""
    if dim % 2:
        raise ValueError("d_vid must be even")
    d_t = 2 * (dim // 6)
    d_y = d_t
    d_x = dim - d_t - d_y
    nt, ny, nx = grid
    tt, yy, xx = np.meshgrid(np.arange(nt), np.arange(ny), np.arange(nx), indexing="ij")
    return np.concatenate(
        [_sincos(tt.ravel().astype(float), d_t), _sincos(yy.ravel().astype(float), d_y), _sincos(xx.ravel().astype(float), d_x)],
        axis=1,
    )


def token_count(frames: int, resolution: int, patch_t: int, patch_s: int) -> int:
    return (frames // patch_t) * (resolution // patch_s) ** 2


class PatchTokenizer(Module):
    """Non-overlapping (pt x ps x ps) patches -> linear projection to d_vid + fixed position code."""

    provider = PATCH_PROVIDER

    def __init__(self, frames: int, resolution: int, patch_t: int, patch_s: int, d_vid: int, rng: np.random.Generator):
        if frames % patch_t or resolution % patch_s:
            raise ValueError(
                f"video ({frames} frames, {resolution}px) not divisible by patch ({patch_t}, {patch_s})"
            )
        self.frames, self.resolution = frames, resolution
        self.patch_t, self.patch_s = patch_t, patch_s
        self.grid = (frames // patch_t, resolution // patch_s, resolution // patch_s)
        self.proj = Linear(patch_t * patch_s * patch_s, d_vid, rng)
        self.pos = spatiotemporal_encoding(self.grid, d_vid)

    @property
    def num_tokens(self) -> int:
        return int(np.prod(self.grid))

    def patches(self, video: np.ndarray) -> np.ndarray:
        video = np.asarray(video, dtype=np.float64)
        T, H, W = video.shape
        pt, ps = self.patch_t, self.patch_s
        if T % pt or H % ps or W % ps:
            raise ValueError(f"video shape {video.shape} not divisible by patch ({pt}, {ps}, {ps})")
        if (T, H, W) != (self.frames, self.resolution, self.resolution):
            raise ValueError(f"video shape {video.shape} differs from tokenizer config {(self.frames, self.resolution, self.resolution)}")
        x = video.reshape(T // pt, pt, H // ps, ps, W // ps, ps).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(-1, pt * ps * ps)

    def __call__(self, video: np.ndarray) -> VideoFeatureTokens:
        tokens = ops.add(self.proj(Tensor(self.patches(video))), self.pos)
        return VideoFeatureTokens(tokens, self.provider)


def tokenize_video(video: np.ndarray, tokenizer: PatchTokenizer) -> VideoFeatureTokens:
    return tokenizer(video)
