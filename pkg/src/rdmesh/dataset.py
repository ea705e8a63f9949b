"""Procedural dynamic meshes and the clip curation pipeline.

Curation mirrors the production recipe at desk scale: long sequences are cut
into fixed-length clips, static and oversized clips are dropped, a random
frame becomes the condition pose (misalignment simulation), and clips are
optionally padded and written to ``.dmc`` files.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .mesh import DynamicSequence, MeshError, StaticMesh, canonicalize

MOTION_KINDS = ("rigid_rotation", "sinusoidal_bend", "swing_chain", "pulse_scale")
PRIMITIVES = ("sphere", "cylinder", "box", "chain")

MAX_VERTICES = 8192
MAX_FACES = 20480
MAX_FACE_RATIO = 2.5
STATIC_THRESHOLD = 0.01


@dataclass(frozen=True)
class MotionSpec:
    kind: str
    base: str
    amplitude: float
    frequency: float
    frame_count: int
    seed: int
    resolution: int = 6

    def __post_init__(self):
        if self.kind not in MOTION_KINDS:
            raise ValueError(f"unknown motion kind {self.kind!r}")
        if self.base not in PRIMITIVES:
            raise ValueError(f"unknown primitive {self.base!r}")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.frame_count < 1:
            raise ValueError("frame_count must be >= 1")


@dataclass
class ClipRecord:
    sequence: DynamicSequence
    condition_frame_index: int
    silhouette_video: np.ndarray | None = None  # (T, H, W) uint8 in {0, 1}
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.condition_frame_index < self.sequence.T:
            raise ValueError("condition_frame_index out of range")

    @property
    def condition(self) -> StaticMesh:
        return self.sequence.frame_mesh(self.condition_frame_index)


# ---------------------------------------------------------------------------
# primitives


def _uv_sphere(res: int) -> tuple[np.ndarray, np.ndarray]:
    n_lat, n_lon = max(res - 1, 2), max(2 * res - 2, 3)
    verts = [[0.0, 1.0, 0.0]]
    for i in range(1, n_lat + 1):
        phi = math.pi * i / (n_lat + 1)
        for j in range(n_lon):
            th = 2 * math.pi * j / n_lon
            verts.append([math.sin(phi) * math.cos(th), math.cos(phi), math.sin(phi) * math.sin(th)])
    verts.append([0.0, -1.0, 0.0])
    faces = []
    ring = lambda i, j: 1 + i * n_lon + (j % n_lon)  # noqa: E731
    for j in range(n_lon):
        faces.append([0, ring(0, j + 1), ring(0, j)])
    for i in range(n_lat - 1):
        for j in range(n_lon):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)
            faces += [[a, b, d], [a, d, c]]
    bottom = len(verts) - 1
    for j in range(n_lon):
        faces.append([bottom, ring(n_lat - 1, j), ring(n_lat - 1, j + 1)])
    return np.array(verts), np.array(faces)


def _tube(rings: int, segments: int, radius: float, height: float) -> tuple[np.ndarray, np.ndarray]:
    verts = []
    for i in range(rings):
        y = -height / 2 + height * i / (rings - 1)
        for j in range(segments):
            th = 2 * math.pi * j / segments
            verts.append([radius * math.cos(th), y, radius * math.sin(th)])
    idx = lambda i, j: i * segments + (j % segments)  # noqa: E731
    faces = []
    for i in range(rings - 1):
        for j in range(segments):
            a, b, c, d = idx(i, j), idx(i, j + 1), idx(i + 1, j), idx(i + 1, j + 1)
            faces += [[a, c, d], [a, d, b]]
    bottom, top = len(verts), len(verts) + 1
    verts += [[0.0, -height / 2, 0.0], [0.0, height / 2, 0.0]]
    for j in range(segments):
        faces.append([bottom, idx(0, j + 1), idx(0, j)])
        faces.append([top, idx(rings - 1, j), idx(rings - 1, j + 1)])
    return np.array(verts), np.array(faces)


def _box(res: int) -> tuple[np.ndarray, np.ndarray]:
    r = max(res // 2, 1)
    grid = np.linspace(-1.0, 1.0, r + 1)
    index: dict[tuple[int, int, int], int] = {}
    verts = []

    def vid(i, j, k):
        key = (i, j, k)
        if key not in index:
            index[key] = len(verts)
            verts.append([grid[i], grid[j], grid[k]])
        return index[key]

    faces = []
    for axis in range(3):
        for side in (0, r):
            for u in range(r):
                for v in range(r):
                    corners = []
                    for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = [0, 0, 0]
                        p[axis] = side
                        p[(axis + 1) % 3] = u + du
                        p[(axis + 2) % 3] = v + dv
                        corners.append(vid(*p))
                    a, b, c, d = corners
                    if side == 0:
                        faces += [[a, c, b], [a, d, c]]
                    else:
                        faces += [[a, b, c], [a, c, d]]
    return np.array(verts), np.array(faces)


def make_primitive(base: str, res: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-scale closed surface centered at the origin, long axis along +y."""
    if base == "sphere":
        return _uv_sphere(res)
    if base == "cylinder":
        return _tube(res, res, 0.5, 2.0)
    if base == "box":
        return _box(res)
    if base == "chain":
        return _tube(2 * res, max(res // 2 + 1, 3), 0.2, 2.0)
    raise ValueError(f"unknown primitive {base!r}")


# ---------------------------------------------------------------------------
# motions


def rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) * c + s * k + (1 - c) * np.outer(axis, axis)


def rigid_axis(spec: MotionSpec) -> np.ndarray:
    """Rotation axis of a rigid_rotation spec (seed-determined unit vector)."""
    v = np.random.default_rng([spec.seed, 1]).normal(size=3)
    return v / np.linalg.norm(v)


def rigid_angle(spec: MotionSpec, t: int) -> float:
    """Rotation angle of frame t relative to frame 0: constant rate, amplitude turns per cycle."""
    return spec.amplitude * 2 * math.pi * spec.frequency * t / spec.frame_count


def _base_shape(spec: MotionSpec):
    verts, faces = make_primitive(spec.base, spec.resolution)
    rng = np.random.default_rng([spec.seed, 0])
    verts = verts * rng.uniform(0.6, 1.2, size=3)
    offset = rng.uniform(-2.0, 2.0, size=3)
    return verts, faces, offset, float(rng.uniform(0, 2 * math.pi))


def _swing_frames(verts: np.ndarray, angles: np.ndarray, segments: int = 3) -> np.ndarray:
    """Linear-blend skinning of a y-aligned body split into ``segments`` links,
    each joint rotating about z by its angle (cumulative down the chain)."""
    y = verts[:, 1]
    lo, hi = y.min(), y.max()
    joints = lo + (hi - lo) * np.arange(segments) / segments
    centers = joints + (hi - lo) / (2 * segments)
    width = (hi - lo) / segments
    w = np.exp(-(((y[:, None] - centers[None]) / (0.5 * width)) ** 2))
    w /= w.sum(axis=1, keepdims=True)
    out = []
    for ang in angles:
        transforms = []
        R_acc, t_acc = np.eye(3), np.zeros(3)
        for k in range(segments):
            j = np.array([0.0, joints[k], 0.0])
            R = rotation_matrix([0, 0, 1], ang * (k + 1) / segments)
            # rotate about the joint, composed with the parent transform
            R_acc, t_acc = R_acc @ R, R_acc @ (j - R @ j) + t_acc
            transforms.append((R_acc.copy(), t_acc.copy()))
        pos = np.zeros_like(verts)
        for k, (R, t) in enumerate(transforms):
            pos += w[:, k : k + 1] * (verts @ R.T + t)
        out.append(pos)
    return np.stack(out)


def generate_clip(spec: MotionSpec) -> DynamicSequence:
    """Deterministic procedural sequence for ``spec``.

    Rigid rotation turns the shape about its own center (the seed-drawn offset).
    """
    verts, faces, offset, phase0 = _base_shape(spec)
    t = np.arange(spec.frame_count)
    phase = 2 * math.pi * spec.frequency * t / spec.frame_count + phase0
    a = spec.amplitude
    if spec.kind == "rigid_rotation":
        axis = rigid_axis(spec)
        frames = np.stack([verts @ rotation_matrix(axis, rigid_angle(spec, int(i))).T for i in t])
    elif spec.kind == "sinusoidal_bend":
        y = verts[:, 1]
        u = (y - y.min()) / max(y.max() - y.min(), 1e-12)
        bend = (u**2)[None, :] * np.sin(phase)[:, None]
        frames = np.repeat(verts[None], spec.frame_count, axis=0)
        frames[:, :, 0] += a * bend
        frames[:, :, 2] += 0.5 * a * (u**2)[None, :] * np.cos(phase)[:, None]
    elif spec.kind == "swing_chain":
        frames = _swing_frames(verts, a * np.sin(phase))
    else:  # pulse_scale
        k = a * np.sin(phase)
        scale = np.stack([1 + k, 1 - 0.5 * k, 1 + k], axis=1)
        frames = verts[None] * scale[:, None, :]
    return DynamicSequence(frames + offset, faces)


def random_motion_spec(rng: np.random.Generator, frame_count: int, resolution: int = 6) -> MotionSpec:
    kind = MOTION_KINDS[rng.integers(len(MOTION_KINDS))]
    base = PRIMITIVES[rng.integers(len(PRIMITIVES))]
    amp_range = {
        "rigid_rotation": (0.05, 0.25),
        "sinusoidal_bend": (0.2, 0.6),
        "swing_chain": (0.3, 1.0),
        "pulse_scale": (0.1, 0.3),
    }[kind]
    return MotionSpec(
        kind=kind,
        base=base,
        amplitude=float(rng.uniform(*amp_range)),
        frequency=float(rng.uniform(0.5, 2.0)),
        frame_count=frame_count,
        seed=int(rng.integers(2**31)),
        resolution=resolution,
    )


# ---------------------------------------------------------------------------
# curation


def slice_clips(seq: DynamicSequence, T: int = 64) -> list[DynamicSequence]:
    """Consecutive non-overlapping windows of exactly T frames; the remainder is dropped."""
    if T < 1:
        raise ValueError("T must be >= 1")
    return [
        DynamicSequence(seq.frames[i : i + T].copy(), seq.faces.copy(), seq.real_vertex_count, seq.real_face_count)
        for i in range(0, seq.T - T + 1, T)
    ]


def max_displacement(clip: DynamicSequence) -> float:
    n = clip.real_vertex_count
    disp = np.linalg.norm(clip.frames[:, :n] - clip.frames[:1, :n], axis=-1)
    return float(disp.max())


def is_static(clip: DynamicSequence, threshold: float = STATIC_THRESHOLD) -> bool:
    """True iff no real vertex ever moves ``threshold`` or more away from its frame-0 position."""
    return max_displacement(clip) < threshold


def passes_size_filter(mesh: StaticMesh) -> bool:
    n, m = mesh.real_vertex_count, mesh.real_face_count
    if n <= 0:
        raise MeshError("mesh has zero vertices")
    return n < MAX_VERTICES and m / n < MAX_FACE_RATIO


def pad_clip(clip: DynamicSequence, n_vertices: int = MAX_VERTICES, n_faces: int = MAX_FACES) -> DynamicSequence:
    """Zero-pad vertices and fill extra faces with the degenerate face (s, s, s), s = real vertex count."""
    T, n, _ = clip.frames.shape
    m = len(clip.faces)
    if n == n_vertices and m == n_faces:
        return clip
    if n > n_vertices or m > n_faces:
        raise MeshError(f"clip ({n} vertices, {m} faces) exceeds pad size ({n_vertices}, {n_faces})")
    real_n, real_m = clip.real_vertex_count, clip.real_face_count
    if m < n_faces and real_n >= n_vertices:
        raise MeshError("no padded vertex slot available for the face sentinel")
    frames = np.zeros((T, n_vertices, 3))
    frames[:, :n] = clip.frames
    frames[:, real_n:] = 0.0
    faces = np.full((n_faces, 3), real_n, dtype=np.int64)
    faces[:real_m] = clip.faces[:real_m]
    return DynamicSequence(frames, faces, real_n, real_m)


def unpad_clip(clip: DynamicSequence) -> DynamicSequence:
    n, m = clip.real_vertex_count, clip.real_face_count
    return DynamicSequence(clip.frames[:, :n].copy(), clip.faces[:m].copy(), n, m)


def simulate_misalignment(clip: DynamicSequence, rng: np.random.Generator) -> ClipRecord:
    """Condition on a uniformly drawn frame instead of frame 0."""
    k = int(rng.integers(0, clip.T))
    return ClipRecord(clip, k)


@dataclass
class CurationConfig:
    num_clips: int = 256
    T: int = 64
    sequence_clips: int = 2  # each procedural sequence is T * sequence_clips frames long
    resolution: int = 6
    pad_vertices: int | None = None
    pad_faces: int | None = None
    static_threshold: float = STATIC_THRESHOLD
    render_resolution: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "CurationConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def curate(cfg: CurationConfig, seed: int) -> Iterator[ClipRecord]:
    """Yield curated training clips; a pure function of (cfg, seed)."""
    from .conditioning import Camera, render_record

    rng = np.random.default_rng(seed)
    produced = 0
    camera = Camera(resolution=cfg.render_resolution) if cfg.render_resolution else None
    while produced < cfg.num_clips:
        spec = random_motion_spec(rng, cfg.T * cfg.sequence_clips, cfg.resolution)
        for clip in slice_clips(generate_clip(spec), cfg.T):
            if not passes_size_filter(clip.frame_mesh(0)):
                continue
            _, normed, _ = canonicalize(clip.frame_mesh(0), clip)
            if is_static(normed, cfg.static_threshold):
                continue
            # .dmc stores float32; keep the in-memory record identical to the file
            clip.frames = clip.frames.astype(np.float32).astype(np.float64)
            record = simulate_misalignment(clip, rng)
            record.metadata = {"spec": asdict(spec), "seed": seed}
            if cfg.pad_vertices:
                record.sequence = pad_clip(record.sequence, cfg.pad_vertices, cfg.pad_faces or MAX_FACES)
            if camera is not None:
                record.silhouette_video = render_record(record, camera)
            yield record
            produced += 1
            if produced >= cfg.num_clips:
                return


def write_dataset(records, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths, meta = [], []
    for i, rec in enumerate(records):
        path = out / f"clip_{i:05d}.dmc"
        write_clip(rec, path)
        paths.append(path)
        meta.append({"file": path.name, **rec.metadata})
    (out / "index.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return paths


def list_clips(data_dir: str | Path) -> list[Path]:
    paths = sorted(Path(data_dir).glob("*.dmc"))
    if not paths:
        raise FileNotFoundError(f"no .dmc clips in {data_dir}")
    return paths


# ---------------------------------------------------------------------------
# .dmc files

MAGIC = b"RDMC"
VERSION = 1
_HEADER = struct.Struct("<4s7I")


class ClipFormatError(ValueError):
    pass


class BadMagicError(ClipFormatError):
    pass


class VersionMismatchError(ClipFormatError):
    pass


class TruncatedClipError(ClipFormatError):
    pass


def encode_clip(record: ClipRecord) -> bytes:
    seq = record.sequence
    T, n, _ = seq.frames.shape
    m = len(seq.faces)
    parts = [
        _HEADER.pack(MAGIC, VERSION, T, n, m, seq.real_vertex_count, seq.real_face_count, record.condition_frame_index),
        np.ascontiguousarray(seq.faces, dtype="<u4").tobytes(),
        np.ascontiguousarray(seq.frames, dtype="<f4").tobytes(),
    ]
    video = record.silhouette_video
    if video is None:
        parts.append(b"\x00")
    else:
        video = np.asarray(video)
        if video.shape[0] != T:
            raise ValueError("silhouette frame count differs from clip length")
        parts.append(b"\x01" + struct.pack("<2I", video.shape[1], video.shape[2]))
        parts.append(np.ascontiguousarray(video, dtype=np.uint8).tobytes())
    return b"".join(parts)


def decode_clip(buf: bytes) -> ClipRecord:
    if len(buf) < 4:
        raise TruncatedClipError("file shorter than magic")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedClipError("truncated header")
    _, version, T, n, m, real_n, real_m, cond = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"version {version}, expected {VERSION}")
    off = _HEADER.size

    def take(nbytes: int, what: str) -> bytes:
        nonlocal off
        if off + nbytes > len(buf):
            raise TruncatedClipError(f"truncated {what}")
        chunk = buf[off : off + nbytes]
        off += nbytes
        return chunk

    faces = np.frombuffer(take(m * 12, "faces"), dtype="<u4").reshape(m, 3).astype(np.int64)
    frames = np.frombuffer(take(T * n * 12, "vertices"), dtype="<f4").reshape(T, n, 3).astype(np.float64)
    flag = take(1, "silhouette flag")[0]
    video = None
    if flag == 1:
        h, w = struct.unpack("<2I", take(8, "silhouette header"))
        video = np.frombuffer(take(T * h * w, "silhouettes"), dtype=np.uint8).reshape(T, h, w).copy()
    elif flag != 0:
        raise ClipFormatError(f"bad silhouette flag {flag}")
    if off != len(buf):
        raise ClipFormatError(f"{len(buf) - off} trailing bytes")
    return ClipRecord(DynamicSequence(frames, faces, real_n, real_m), cond, video)


def write_clip(record: ClipRecord, path: str | Path) -> None:
    Path(path).write_bytes(encode_clip(record))


def read_clip(path: str | Path) -> ClipRecord:
    return decode_clip(Path(path).read_bytes())
