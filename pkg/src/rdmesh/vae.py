"""Triflow-Attention VAE over (condition geometry, jump offset, relative trajectory).

Shapes for one clip with N (padded) vertices, n = ceil(real_N / fps_ratio) tokens
and feature width d:

    encoder   v_cond (N,3), jump (N,3), traj (N,T*3)
              -> Fourier features + projection            (N,d) x 3
              -> adjacency-masked self-attention on geometry (fine features)
              -> FPS gather                                (n,d) x 3
              -> Triflow blocks (first one attends to all N vertices)
              -> x_cond (n,d_cond), posteriors (n,d_jump), (n,d_traj)
    decoder   latents -> (n,d) x 3 -> Triflow blocks
              -> cross-attention queried by fine features  (N,d) x 2
              -> jump (N,3), rel_traj (T,N,3)

The geometry stream never reads the jump or trajectory streams, so x_cond and
the fine features are computable from the condition mesh alone.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .mesh import (
    Decomposition,
    build_adjacency,
    canonicalize,
    decompose,
    fps_sample,
    num_tokens,
    recompose,
)
from .numerics import MLP, LayerNorm, Linear, Module, Tensor, apply_map, attention_map, ops

STREAMS = ("geo", "jump", "traj")


@dataclass
class VAEConfig:
    layers_enc: int = 8
    layers_dec: int = 8
    feature_dim: int = 256
    heads: int = 4
    fps_ratio: int = 8
    d_cond: int = 64
    d_jump: int = 16
    d_traj: int = 64
    frame_count: int = 64
    fourier_bands: int = 6
    mlp_ratio: int = 2
    eta_jump: float = 1e-6
    eta_traj: float = 1e-6
    log_sigma_min: float = -10.0
    log_sigma_max: float = 5.0
    log_sigma_init: float = -4.0
    dual_norm: bool = True
    jump_decomp: bool = True
    tri_attn: bool = True
    decoup_loss: bool = True
    init_seed: int = 0

    def __post_init__(self):
        for name in ("layers_enc", "layers_dec", "feature_dim", "heads", "fps_ratio", "d_cond", "d_jump", "d_traj", "frame_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.feature_dim % self.heads:
            raise ValueError("feature_dim must be divisible by heads")

    @property
    def d_k(self) -> int:
        return self.feature_dim // self.heads

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "VAEConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TriStream:
    geo: Tensor
    jump: Tensor | None = None
    traj: Tensor | None = None

    def items(self):
        return [(s, getattr(self, s)) for s in STREAMS if getattr(self, s) is not None]

    def gather(self, index: np.ndarray) -> "TriStream":
        return TriStream(**{s: ops.gather(t, index, axis=0) for s, t in self.items()})


@dataclass
class LatentBundle:
    x_cond: Tensor
    mu_jump: Tensor | None
    log_sigma_jump: Tensor | None
    mu_traj: Tensor
    log_sigma_traj: Tensor
    z_jump: Tensor | None
    z_traj: Tensor
    fps_index: np.ndarray = field(repr=False, default=None)

    @property
    def sigma_jump(self) -> Tensor | None:
        return None if self.log_sigma_jump is None else ops.exp(self.log_sigma_jump)

    @property
    def sigma_traj(self) -> Tensor:
        return ops.exp(self.log_sigma_traj)


@dataclass
class VAEInput:
    """A canonicalized, decomposed clip with its adjacency and FPS picks."""

    decomposition: Decomposition
    adjacency: np.ndarray
    fps_index: np.ndarray
    frames_norm: np.ndarray  # (T, N, 3) target in the normalized frame
    faces: np.ndarray

    @property
    def real_n(self) -> int:
        return self.decomposition.real_vertex_count

    @property
    def vertex_mask(self) -> np.ndarray:
        return np.arange(len(self.decomposition.v_cond)) < self.real_n

    @classmethod
    def from_record(cls, record, cfg: VAEConfig, fps_start: int = 0) -> "VAEInput":
        cond, seq, norm = canonicalize(record.condition, record.sequence, dual_norm=cfg.dual_norm)
        d = decompose(cond.vertices, seq.frames, norm, cond.real_vertex_count)
        return cls.from_decomposition(d, seq.faces, cfg, fps_start, seq.frames)

    @classmethod
    def from_decomposition(cls, d: Decomposition, faces, cfg: VAEConfig, fps_start: int = 0, frames_norm=None) -> "VAEInput":
        n = num_tokens(d.real_vertex_count, cfg.fps_ratio)
        idx = fps_sample(d.v_cond, n, start=fps_start, real_count=d.real_vertex_count)
        adj = build_adjacency(faces, len(d.v_cond))
        frames = recompose(d) if frames_norm is None else frames_norm
        return cls(d, adj, idx, frames, np.asarray(faces))


# ---------------------------------------------------------------------------
# layers


class PositionalEncoder(Module):
    """sin/cos Fourier features of every input channel followed by a learned projection."""

    def __init__(self, in_channels: int, bands: int, dim: int, rng: np.random.Generator):
        self.in_channels = in_channels
        # lowest band has period 8, covering normalized offsets in [-4, 4]
        self.freqs = (2.0 ** np.arange(bands)) * math.pi / 4
        self.proj = Linear(2 * bands * in_channels, dim, rng)

    def features(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        arg = (x[:, :, None] * self.freqs[None, None, :]).reshape(len(x), -1)
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)

    def __call__(self, x: np.ndarray) -> Tensor:
        return self.proj(Tensor(self.features(x)))


class MaskedSelfAttention(Module):
    """Pre-norm multi-head self-attention restricted to mesh neighbours, with residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.norm = LayerNorm(dim)
        self.to_q = Linear(dim, dim, rng)
        self.to_k = Linear(dim, dim, rng, bias=False)
        self.to_v = Linear(dim, dim, rng)
        self.to_out = Linear(dim, dim, rng)
        self.last_map: Tensor | None = None
        self.record = False

    def __call__(self, x: Tensor, adjacency: np.ndarray) -> Tensor:
        h = self.norm(x)
        a = attention_map(self.to_q(h), self.to_k(h), self.heads, adjacency)
        if self.record:
            self.last_map = a
        return x + self.to_out(apply_map(a, self.to_v(h)))


class TriflowAttention(Module):
    """One attention map from the geometry streams, applied to all three value streams.

    With ``shared=False`` each stream computes its own map from its own
    query/key features instead.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, shared: bool = True, streams=STREAMS):
        self.heads, self.shared, self.streams = heads, shared, tuple(streams)
        map_streams = ("geo",) if shared else self.streams
        self.q_norm = [LayerNorm(dim) for _ in map_streams]
        self.k_norm = [LayerNorm(dim) for _ in self.streams]
        self.to_q = [Linear(dim, dim, rng) for _ in map_streams]
        self.to_k = [Linear(dim, dim, rng, bias=False) for _ in map_streams]
        self.to_v = [Linear(dim, dim, rng) for _ in self.streams]
        self.to_out = [Linear(dim, dim, rng) for _ in self.streams]
        self.record = False
        self.last_maps: dict[str, Tensor] = {}

    def _map(self, i: int, q: Tensor, k_normed: Tensor, key_mask) -> Tensor:
        return attention_map(self.to_q[i](self.q_norm[i](q)), self.to_k[i](k_normed), self.heads, key_mask)

    def __call__(self, q: TriStream, k: TriStream, key_mask: np.ndarray | None = None) -> TriStream:
        out = {}
        keys = {s: self.k_norm[i](getattr(k, s)) for i, s in enumerate(self.streams) if getattr(k, s) is not None}
        shared_map = self._map(0, q.geo, keys["geo"], key_mask) if self.shared else None
        maps = {}
        for i, s in enumerate(self.streams):
            if s not in keys:
                continue
            a = shared_map if self.shared else self._map(i, getattr(q, s), keys[s], key_mask)
            maps[s] = a
            out[s] = getattr(q, s) + self.to_out[i](apply_map(a, self.to_v[i](keys[s])))
        if self.record:
            self.last_maps = maps
        return TriStream(**out)


class TriflowBlock(Module):
    """Triflow attention followed by a per-stream pre-norm feed-forward residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator, shared: bool, streams=STREAMS):
        self.streams = tuple(streams)
        self.attn = TriflowAttention(dim, heads, rng, shared, streams)
        self.ff_norm = [LayerNorm(dim) for _ in self.streams]
        self.ff = [MLP(dim, mlp_ratio * dim, dim, rng) for _ in self.streams]

    def __call__(self, q: TriStream, k: TriStream | None = None, key_mask=None) -> TriStream:
        h = self.attn(q, q if k is None else k, key_mask)
        out = {}
        for i, s in enumerate(self.streams):
            x = getattr(h, s)
            if x is not None:
                out[s] = x + self.ff[i](self.ff_norm[i](x))
        return TriStream(**out)


class CrossDecoder(Module):
    """Fine per-vertex features query the processed tokens; the geometry-token map
    aggregates the jump and trajectory value streams."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator, shared: bool, streams):
        self.heads, self.shared, self.streams = heads, shared, tuple(streams)
        map_keys = ("geo",) if shared else self.streams
        self.q_norm = LayerNorm(dim)
        self.k_norm = [LayerNorm(dim, affine=False) for _ in map_keys]
        self.to_q = [Linear(dim, dim, rng) for _ in map_keys]
        self.to_k = [Linear(dim, dim, rng, bias=False) for _ in map_keys]
        self.v_norm = [LayerNorm(dim) for _ in self.streams]
        self.to_v = [Linear(dim, dim, rng) for _ in self.streams]
        self.to_out = [Linear(dim, dim, rng) for _ in self.streams]
        self.ff_norm = [LayerNorm(dim) for _ in self.streams]
        self.ff = [MLP(dim, mlp_ratio * dim, dim, rng) for _ in self.streams]
        self.record = False
        self.last_maps: dict[str, Tensor] = {}

    def __call__(self, fine: Tensor, tokens: TriStream) -> dict[str, Tensor]:
        qn = self.q_norm(fine)

        def make_map(i: int, key: Tensor) -> Tensor:
            return attention_map(self.to_q[i](qn), self.to_k[i](self.k_norm[i](key)), self.heads)

        shared_map = make_map(0, tokens.geo) if self.shared else None
        out, maps = {}, {}
        for i, s in enumerate(self.streams):
            value = getattr(tokens, s)
            a = shared_map if self.shared else make_map(i, value)
            maps[s] = a
            h = fine + self.to_out[i](apply_map(a, self.to_v[i](self.v_norm[i](value))))
            out[s] = h + self.ff[i](self.ff_norm[i](h))
        if self.record:
            self.last_maps = maps
        return out


# ---------------------------------------------------------------------------
# the model


def reparameterize(mu: Tensor, sigma: Tensor, noise: np.ndarray) -> Tensor:
    """z = mu + sigma * eps; eps is a constant, so gradients reach only mu and sigma."""
    return mu + sigma * Tensor(noise)


def gaussian_kl(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """Mean over elements of KL(N(mu, sigma^2) || N(0, 1))."""
    two_ls = log_sigma * 2.0
    # expm1(x) >= x holds in floating point too, so tiny log-scales cannot go negative
    per = (mu * mu + (ops.expm1(two_ls) - two_ls)) * 0.5
    return per.mean()


class TriflowVAE(Module):
    def __init__(self, cfg: VAEConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed) if rng is None else rng
        d, T, B = cfg.feature_dim, cfg.frame_count, cfg.fourier_bands
        streams = STREAMS if cfg.jump_decomp else ("geo", "traj")
        self.streams = streams
        self.pe_vertex = PositionalEncoder(3, B, d, rng)
        self.pe_jump = PositionalEncoder(3, B, d, rng) if cfg.jump_decomp else None
        self.pe_traj = PositionalEncoder(3 * T, B, d, rng)
        self.local_attn = MaskedSelfAttention(d, cfg.heads, rng)
        self.encoder = [TriflowBlock(d, cfg.heads, cfg.mlp_ratio, rng, cfg.tri_attn, streams) for _ in range(cfg.layers_enc)]
        self.out_norm = [LayerNorm(d) for _ in streams]
        self.head_cond = Linear(d, cfg.d_cond, rng)
        self.head_jump = Linear(d, 2 * cfg.d_jump, rng) if cfg.jump_decomp else None
        self.head_traj = Linear(d, 2 * cfg.d_traj, rng)
        # with eta ~1e-6 the optimum posterior is narrow; start there instead of at sigma = 1
        for head, dim in ((self.head_jump, cfg.d_jump), (self.head_traj, cfg.d_traj)):
            if head is not None:
                head.bias.data[dim:] = cfg.log_sigma_init

        self.in_cond = Linear(cfg.d_cond, d, rng)
        self.in_jump = Linear(cfg.d_jump, d, rng) if cfg.jump_decomp else None
        self.in_traj = Linear(cfg.d_traj, d, rng)
        self.decoder = [TriflowBlock(d, cfg.heads, cfg.mlp_ratio, rng, cfg.tri_attn, streams) for _ in range(cfg.layers_dec)]
        self.cross = CrossDecoder(d, cfg.heads, cfg.mlp_ratio, rng, cfg.tri_attn, streams[1:])
        self.rec_norm = [LayerNorm(d) for _ in streams[1:]]
        self.rec_jump = Linear(d, 3, rng) if cfg.jump_decomp else None
        self.rec_traj = Linear(d, 3 * T, rng)

    # -- instrumentation -----------------------------------------------------
    def triflow_layers(self) -> list[TriflowAttention]:
        return [b.attn for b in self.encoder] + [b.attn for b in self.decoder]

    def set_recording(self, on: bool) -> None:
        for layer in self.triflow_layers():
            layer.record = on
        self.cross.record = on
        self.local_attn.record = on

    # -- encoder -------------------------------------------------------------
    def _encode_streams(self, v_cond, adjacency, fps_index, jump=None, traj_flat=None) -> tuple[TriStream, Tensor]:
        fine = self.local_attn(self.pe_vertex(v_cond), adjacency)
        full = TriStream(
            geo=fine,
            jump=self.pe_jump(jump) if jump is not None and self.pe_jump is not None else None,
            traj=self.pe_traj(traj_flat) if traj_flat is not None else None,
        )
        key_mask = np.arange(len(v_cond)) < self._real_n
        tokens = full.gather(fps_index)
        for i, block in enumerate(self.encoder):
            tokens = block(tokens, full, key_mask) if i == 0 else block(tokens)
        return tokens, fine

    def _traj_input(self, inp: VAEInput) -> np.ndarray:
        d = inp.decomposition
        if self.cfg.jump_decomp:
            traj = d.rel_traj
        else:
            traj = inp.frames_norm - d.v_cond[None]
        t, n, _ = traj.shape
        return traj.transpose(1, 0, 2).reshape(n, t * 3)

    def encode(self, inp: VAEInput, rng: np.random.Generator | None = None) -> tuple[LatentBundle, Tensor]:
        """Latents and fine features; with ``rng`` None the samples equal the posterior means."""
        d = inp.decomposition
        if d.real_vertex_count < 1:
            raise ValueError("clip has no real vertices")
        self._real_n = d.real_vertex_count
        jump_in = d.jump if self.cfg.jump_decomp else None
        tokens, fine = self._encode_streams(d.v_cond, inp.adjacency, inp.fps_index, jump_in, self._traj_input(inp))
        cfg = self.cfg
        norms = dict(zip(self.streams, self.out_norm))
        x_cond = self.head_cond(norms["geo"](tokens.geo))

        def posterior(head, x, dim):
            out = head(x)
            mu, log_sigma = ops.split(out, [dim, dim], axis=-1)
            return mu, ops.clip(log_sigma, cfg.log_sigma_min, cfg.log_sigma_max)

        def sample(mu, log_sigma):
            if rng is None:
                return mu
            return reparameterize(mu, ops.exp(log_sigma), rng.standard_normal(mu.shape))

        mu_j = ls_j = z_j = None
        if cfg.jump_decomp:
            mu_j, ls_j = posterior(self.head_jump, norms["jump"](tokens.jump), cfg.d_jump)
        mu_t, ls_t = posterior(self.head_traj, norms["traj"](tokens.traj), cfg.d_traj)
        # draw jump noise before traj noise so sample streams are stable across toggles
        if cfg.jump_decomp:
            z_j = sample(mu_j, ls_j)
        z_t = sample(mu_t, ls_t)
        return LatentBundle(x_cond, mu_j, ls_j, mu_t, ls_t, z_j, z_t, inp.fps_index), fine

    def encode_condition(self, v_cond: np.ndarray, adjacency: np.ndarray, fps_index: np.ndarray, real_n: int) -> tuple[Tensor, Tensor]:
        """x_cond and fine features from the condition mesh alone (inference path)."""
        self._real_n = real_n
        tokens, fine = self._encode_streams(v_cond, adjacency, fps_index)
        return self.head_cond(self.out_norm[0](tokens.geo)), fine

    # -- decoder -------------------------------------------------------------
    def decode(self, x_cond: Tensor, z_jump: Tensor | None, z_traj: Tensor, fine: Tensor, real_n: int | None = None) -> tuple[Tensor | None, Tensor]:
        """Reconstructed jump (N, 3) and relative trajectory (T, N, 3); padded rows are zero.

        With jump decomposition disabled, the trajectory output holds absolute
        offsets from the condition and the jump output is None.
        """
        cfg = self.cfg
        tokens = TriStream(
            geo=self.in_cond(x_cond),
            jump=self.in_jump(z_jump) if cfg.jump_decomp else None,
            traj=self.in_traj(z_traj),
        )
        for block in self.decoder:
            tokens = block(tokens)
        per_vertex = self.cross(fine, tokens)
        n = fine.shape[0]
        real_n = n if real_n is None else real_n
        mask = (np.arange(n) < real_n).astype(np.float64)[:, None]
        norms = dict(zip(self.streams[1:], self.rec_norm))
        jump_rec = None
        if cfg.jump_decomp:
            jump_rec = self.rec_jump(norms["jump"](per_vertex["jump"])) * mask
        traj = self.rec_traj(norms["traj"](per_vertex["traj"])) * mask
        traj_rec = ops.transpose(ops.reshape(traj, (n, cfg.frame_count, 3)), (1, 0, 2))
        return jump_rec, traj_rec

    def reconstruct(self, inp: VAEInput, rng=None):
        bundle, fine = self.encode(inp, rng)
        jump_rec, traj_rec = self.decode(bundle.x_cond, bundle.z_jump, bundle.z_traj, fine, inp.real_n)
        return bundle, jump_rec, traj_rec

    def frames_from_outputs(self, v_cond: np.ndarray, jump_rec, traj_rec) -> np.ndarray:
        """Normalized frames (T, N, 3) from decoder outputs."""
        traj = traj_rec.data if isinstance(traj_rec, Tensor) else traj_rec
        if self.cfg.jump_decomp:
            jump = jump_rec.data if isinstance(jump_rec, Tensor) else jump_rec
            rel = traj.copy()
            rel[0] = 0.0  # frame 0 is the jump pose by construction
            return v_cond[None] + jump[None] + rel
        return v_cond[None] + traj

    def loss(self, inp: VAEInput, rng: np.random.Generator | None = None):
        bundle, jump_rec, traj_rec = self.reconstruct(inp, rng)
        return vae_loss(inp, jump_rec, traj_rec, bundle, self.cfg)


def vae_loss(inp: VAEInput, jump_rec: Tensor | None, traj_rec: Tensor, bundle: LatentBundle, cfg: VAEConfig):
    """Reconstruction MSE over real vertices plus eta-weighted KL terms.

    Returns (total, parts) where parts holds floats for each term.
    """
    d = inp.decomposition
    real_n = d.real_vertex_count
    mask = inp.vertex_mask.astype(np.float64)[:, None]
    T = cfg.frame_count
    if cfg.jump_decomp:
        traj_target = d.rel_traj
    else:
        traj_target = inp.frames_norm - d.v_cond[None]
    traj_sq = (((traj_rec - traj_target) * mask[None]) ** 2).sum()
    parts = {}
    if cfg.jump_decomp:
        jump_sq = (((jump_rec - d.jump) * mask) ** 2).sum()
        if cfg.decoup_loss:
            recon_jump = jump_sq * (1.0 / (real_n * 3))
            recon_traj = traj_sq * (1.0 / (real_n * T * 3))
            recon = recon_jump + recon_traj
            parts["recon_jump"], parts["recon_traj"] = recon_jump.item(), recon_traj.item()
        else:
            recon = (jump_sq + traj_sq) * (1.0 / (real_n * (T + 1) * 3))
            parts["recon_joint"] = recon.item()
        kl_jump = gaussian_kl(bundle.mu_jump, bundle.log_sigma_jump)
        parts["kl_jump"] = kl_jump.item()
        total = recon + kl_jump * cfg.eta_jump
    else:
        recon = traj_sq * (1.0 / (real_n * T * 3))
        parts["recon_traj"] = recon.item()
        total = recon
    kl_traj = gaussian_kl(bundle.mu_traj, bundle.log_sigma_traj)
    parts["kl_traj"] = kl_traj.item()
    total = total + kl_traj * cfg.eta_traj
    parts["total"] = total.item()
    return total, parts
