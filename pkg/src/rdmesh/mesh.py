"""Dynamic-mesh data model, dual-center canonicalization and the jump/trajectory decomposition."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    pass


@dataclass
class StaticMesh:
    vertices: np.ndarray  # (N, 3)
    faces: np.ndarray  # (M, 3) int
    real_vertex_count: int | None = None
    real_face_count: int | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.real_vertex_count is None:
            self.real_vertex_count = len(self.vertices)
        if self.real_face_count is None:
            self.real_face_count = len(self.faces)

    @property
    def vertex_mask(self) -> np.ndarray:
        return np.arange(len(self.vertices)) < self.real_vertex_count


@dataclass
class DynamicSequence:
    frames: np.ndarray  # (T, N, 3)
    faces: np.ndarray  # (M, 3) int
    real_vertex_count: int | None = None
    real_face_count: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[-1] != 3 or len(self.frames) < 1:
            raise MeshError(f"frames must be (T>=1, N, 3), got {self.frames.shape}")
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.real_vertex_count is None:
            self.real_vertex_count = self.frames.shape[1]
        if self.real_face_count is None:
            self.real_face_count = len(self.faces)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def vertex_mask(self) -> np.ndarray:
        return np.arange(self.frames.shape[1]) < self.real_vertex_count

    def frame_mesh(self, t: int) -> StaticMesh:
        return StaticMesh(self.frames[t].copy(), self.faces.copy(), self.real_vertex_count, self.real_face_count)


@dataclass
class NormParams:
    c_cond: np.ndarray
    s: float
    c_1: np.ndarray | None = None


@dataclass
class Decomposition:
    v_cond: np.ndarray  # (N, 3)
    jump: np.ndarray  # (N, 3)
    rel_traj: np.ndarray  # (T, N, 3)
    norm: NormParams | None = None
    real_vertex_count: int | None = None
    faces: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.real_vertex_count is None:
            self.real_vertex_count = len(self.v_cond)

    @property
    def T(self) -> int:
        return self.rel_traj.shape[0]

    def traj_per_vertex(self) -> np.ndarray:
        """rel_traj flattened per vertex: (N, T*3)."""
        t, n, _ = self.rel_traj.shape
        return self.rel_traj.transpose(1, 0, 2).reshape(n, t * 3)


# ---------------------------------------------------------------------------
# adjacency


def build_adjacency(faces, n: int) -> np.ndarray:
    """Boolean (n, n) mask: true for vertices sharing a face edge, plus the diagonal.

    Degenerate faces (all three indices equal, as used for padding) add nothing.
    """
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.max() >= n or faces.min() < 0):
        raise MeshError(f"face index out of range for {n} vertices")
    adj = np.eye(n, dtype=bool)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        i, j = faces[:, a], faces[:, b]
        keep = i != j
        adj[i[keep], j[keep]] = True
        adj[j[keep], i[keep]] = True
    return adj


# ---------------------------------------------------------------------------
# canonicalization


def _exact_centroid(vertices: np.ndarray, real_n: int) -> list[Fraction]:
    """Arithmetic mean of the real rows, exact (no rounding)."""
    return [sum(map(Fraction, col.tolist()), Fraction(0)) / real_n for col in vertices[:real_n].T]


def _subtract_exact(values: np.ndarray, center: list[Fraction]) -> np.ndarray:
    """values - center, rounded once from a ~106-bit intermediate.

    The centroid is split into hi + lo floats and the subtraction uses an
    error-free two-sum, so an exactly representable translation of both the
    values and the center leaves the result bitwise unchanged.
    """
    hi = np.array([float(c) for c in center])
    lo = np.array([float(c - Fraction(float(h))) for c, h in zip(center, hi)])
    a, b = values, -hi
    s = a + b
    bb = s - a
    err = (a - (s - bb)) + (b - bb)
    return s + (err - lo)


def canonicalize(
    cond: StaticMesh, seq: DynamicSequence | None = None, dual_norm: bool = True
) -> tuple[StaticMesh, DynamicSequence | None, NormParams]:
    """Center the condition on its centroid and the sequence on its first-frame
    centroid, then scale both by the condition's max absolute coordinate.

    With ``dual_norm=False`` the sequence is centered on the condition centroid too.
    Padded rows stay zero.
    """
    real_n = cond.real_vertex_count
    if real_n < 1:
        raise MeshError("condition has no real vertices")
    if seq is not None and (seq.frames.shape[1] != len(cond.vertices) or seq.real_vertex_count != real_n):
        raise MeshError("sequence topology does not match condition")
    mask = cond.vertex_mask[:, None]
    c_cond_exact = _exact_centroid(cond.vertices, real_n)
    c_cond = np.array([float(c) for c in c_cond_exact])
    centered = np.where(mask, _subtract_exact(cond.vertices, c_cond_exact), 0.0)
    s = float(np.abs(centered[:real_n]).max())
    if s == 0.0:
        raise MeshError("degenerate condition: all vertices coincide")
    cond_n = replace(cond, vertices=centered / s, faces=cond.faces.copy())
    if seq is None:
        return cond_n, None, NormParams(c_cond=c_cond, s=s)
    c_1_exact = _exact_centroid(seq.frames[0], real_n) if dual_norm else c_cond_exact
    c_1 = np.array([float(c) for c in c_1_exact])
    frames = np.where(mask[None], _subtract_exact(seq.frames, c_1_exact), 0.0) / s
    seq_n = replace(seq, frames=frames, faces=seq.faces.copy())
    return cond_n, seq_n, NormParams(c_cond=c_cond, s=s, c_1=c_1)


def denormalize(frames: np.ndarray, norm: NormParams) -> np.ndarray:
    """Map normalized frames back to the condition-centered world frame (x s + c_cond)."""
    return frames * norm.s + norm.c_cond


# ---------------------------------------------------------------------------
# decomposition


def decompose(
    cond_norm: np.ndarray,
    frames_norm: np.ndarray,
    norm: NormParams | None = None,
    real_vertex_count: int | None = None,
) -> Decomposition:
    cond_norm = np.asarray(cond_norm, dtype=np.float64)
    frames_norm = np.asarray(frames_norm, dtype=np.float64)
    if frames_norm.ndim != 3 or frames_norm.shape[1:] != cond_norm.shape:
        raise MeshError(f"shape mismatch: cond {cond_norm.shape} vs frames {frames_norm.shape}")
    first = frames_norm[0]
    jump = first - cond_norm
    rel = frames_norm - first[None]
    rel[0] = 0.0
    return Decomposition(cond_norm.copy(), jump, rel, norm, real_vertex_count)


def recompose(d: Decomposition) -> np.ndarray:
    """Normalized frames: v_cond + jump + rel_traj[t]."""
    return d.v_cond[None] + d.jump[None] + d.rel_traj


# ---------------------------------------------------------------------------
# farthest point sampling


def fps_sample(points: np.ndarray, n: int, start: int = 0, real_count: int | None = None) -> np.ndarray:
    """Greedy maximin subset of ``n`` indices among the first ``real_count`` points.

    Ties go to the lowest index.
    """
    points = np.asarray(points, dtype=np.float64)
    k = len(points) if real_count is None else real_count
    if not 1 <= n <= k:
        raise MeshError(f"cannot pick {n} of {k} points")
    if not 0 <= start < k:
        raise MeshError(f"start index {start} outside real points")
    pts = points[:k]
    picks = np.empty(n, dtype=np.int64)
    picks[0] = start
    dist = ((pts - pts[start]) ** 2).sum(axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(dist))  # first maximal entry
        picks[i] = nxt
        dist = np.minimum(dist, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return picks


def num_tokens(real_vertex_count: int, ratio: int) -> int:
    return -(-real_vertex_count // ratio)


# ---------------------------------------------------------------------------
# OBJ


def load_obj(path: str | Path) -> StaticMesh:
    """Vertices and triangular faces only; other records are ignored.

    Polygons with more than three corners are fan-triangulated.
    """
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = []
            for token in parts[1:]:
                i = int(token.split("/")[0])
                idx.append(i - 1 if i > 0 else len(verts) + i)
            for j in range(1, len(idx) - 1):
                faces.append([idx[0], idx[j], idx[j + 1]])
    if not verts:
        raise MeshError(f"{path}: no vertices")
    return StaticMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def obj_text(vertices: np.ndarray, faces: np.ndarray) -> str:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    return "\n".join(lines) + "\n"


def save_obj(path: str | Path, mesh: StaticMesh) -> None:
    n, m = mesh.real_vertex_count, mesh.real_face_count
    Path(path).write_text(obj_text(mesh.vertices[:n], mesh.faces[:m]))
