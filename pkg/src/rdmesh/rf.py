"""Rectified-flow transformer over per-token dynamic latents [z_jump; z_traj].

Tokens are the VAE's FPS tokens: the noisy state (n, d_jump + d_traj) is
concatenated with the clean condition latents x_cond (n, d_cond), projected
to model_dim, run through DiT blocks that cross-attend to video tokens, and
mapped back to a velocity of the state's shape. Time runs from t=0 (noise)
to t=1 (data).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .conditioning import PatchTokenizer
from .numerics import MLP, Attention, LayerNorm, Linear, Module, Parameter, Tensor, ops, sinusoidal_embedding


@dataclass
class RFConfig:
    blocks: int = 12
    model_dim: int = 512
    heads: int = 8
    mlp_ratio: int = 4
    time_freq_dim: int = 256
    cond_drop_p: float = 0.1
    sample_steps: int = 32
    cfg_scale: float = 2.0
    d_cond: int = 64
    d_jump: int = 16
    d_traj: int = 64
    # video provider
    frames: int = 64
    resolution: int = 256
    patch_t: int = 4
    patch_s: int = 32
    d_vid: int = 128
    # per-channel standardization of the dynamic latents (filled in by the trainer)
    latent_shift: list = field(default_factory=list)
    latent_scale: list = field(default_factory=list)
    init_seed: int = 0

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if not 0.0 <= self.cond_drop_p <= 1.0:
            raise ValueError("cond_drop_p must lie in [0, 1]")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")

    @property
    def d_dyn(self) -> int:
        return self.d_jump + self.d_traj

    @property
    def video_tokens(self) -> int:
        return (self.frames // self.patch_t) * (self.resolution // self.patch_s) ** 2

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RFConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def standardize(self, z: np.ndarray) -> np.ndarray:
        if not self.latent_scale:
            return z
        return (z - np.asarray(self.latent_shift)) / np.asarray(self.latent_scale)

    def unstandardize(self, z: np.ndarray) -> np.ndarray:
        if not self.latent_scale:
            return z
        return z * np.asarray(self.latent_scale) + np.asarray(self.latent_shift)


def interpolate_state(z_dyn, epsilon, t: float):
    """z_t = t * z_dyn + (1 - t) * epsilon, exact at both endpoints."""
    if t == 0:
        return np.array(epsilon, dtype=np.float64, copy=True)
    if t == 1:
        return np.array(z_dyn, dtype=np.float64, copy=True)
    return t * np.asarray(z_dyn, dtype=np.float64) + (1.0 - t) * np.asarray(epsilon, dtype=np.float64)


def cfg_velocity(v_cond, v_uncond, s: float):
    """Guided velocity v_u + s (v_c - v_u); returns v_cond itself for s == 1."""
    if s == 1:
        return v_cond
    return v_uncond + s * (v_cond - v_uncond)


class TimeEmbedding(Module):
    def __init__(self, freq_dim: int, dim: int, rng: np.random.Generator):
        self.freq_dim = freq_dim
        self.mlp = MLP(freq_dim, dim, dim, rng)

    def __call__(self, t: float) -> Tensor:
        # scale to [0, 1000] so the sinusoid table resolves small steps
        return self.mlp(Tensor(sinusoidal_embedding(np.array([1000.0 * t]), self.freq_dim)))


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


class DiTBlock(Module):
    """Cross-attention to video tokens, self-attention, feed-forward; each pre-normed,
    modulated by (shift, scale) and gated, all regressed from the time embedding."""

    SUBLAYERS = ("cross", "self", "ffn")

    def __init__(self, dim: int, d_vid: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.dim = dim
        self.norms = [LayerNorm(dim, affine=False) for _ in self.SUBLAYERS]
        self.cross = Attention(dim, d_vid, dim, heads, rng)
        self.self_attn = Attention(dim, dim, dim, heads, rng)
        self.ffn = MLP(dim, mlp_ratio * dim, dim, rng)
        self.ada = Linear(dim, 9 * dim, rng, zero=True)

    def modulation(self, temb: Tensor) -> list[tuple[Tensor, Tensor, Tensor]]:
        """(shift, scale, gate) per sublayer, each (1, dim)."""
        parts = ops.split(self.ada(ops.silu(temb)), [self.dim] * 9, axis=-1)
        return [tuple(parts[3 * i : 3 * i + 3]) for i in range(3)]

    def __call__(self, x: Tensor, ctx: Tensor, temb: Tensor) -> Tensor:
        mods = self.modulation(temb)
        (b0, a0, g0), (b1, a1, g1), (b2, a2, g2) = mods
        h = modulate(self.norms[0](x), b0, a0)
        x = x + g0 * self.cross(h, ctx)
        h = modulate(self.norms[1](x), b1, a1)
        x = x + g1 * self.self_attn(h, h)
        h = modulate(self.norms[2](x), b2, a2)
        return x + g2 * self.ffn(h)


class RFModel(Module):
    def __init__(self, cfg: RFConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed) if rng is None else rng
        D = cfg.model_dim
        self.tokenizer = PatchTokenizer(cfg.frames, cfg.resolution, cfg.patch_t, cfg.patch_s, cfg.d_vid, rng)
        self.null_tokens = Parameter(0.02 * rng.standard_normal((cfg.video_tokens, cfg.d_vid)))
        self.in_proj = Linear(cfg.d_dyn + cfg.d_cond, D, rng)
        self.time_embed = TimeEmbedding(cfg.time_freq_dim, D, rng)
        self.blocks = [DiTBlock(D, cfg.d_vid, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.blocks)]
        self.out_norm = LayerNorm(D)
        self.head = Linear(D, cfg.d_dyn, rng)

    def video_context(self, video: np.ndarray) -> Tensor:
        return self.tokenizer(video).tokens

    def velocity(self, z_t, x_cond, t: float, f_vid: Tensor | None, drop_condition: bool = False) -> Tensor:
        """Per-token velocity (n, d_dyn). ``f_vid`` is ignored when the condition is dropped."""
        z_t, x_cond = ops.as_tensor(z_t), ops.as_tensor(x_cond)
        if z_t.shape[0] != x_cond.shape[0]:
            raise ValueError(f"token mismatch: z_t has {z_t.shape[0]}, x_cond has {x_cond.shape[0]}")
        if z_t.shape[1] != self.cfg.d_dyn or x_cond.shape[1] != self.cfg.d_cond:
            raise ValueError("latent channel widths do not match the RF config")
        ctx = self.null_tokens if drop_condition or f_vid is None else f_vid
        x = self.in_proj(ops.concat([z_t, x_cond], axis=-1))
        temb = self.time_embed(t)
        for block in self.blocks:
            x = block(x, ctx, temb)
        return self.head(self.out_norm(x))


def rf_loss(velocity_fn: Callable, z_dyn: np.ndarray, epsilon: np.ndarray, t: float) -> Tensor:
    """Mean squared error between velocity_fn(z_t, t) and z_dyn - epsilon."""
    z_t = interpolate_state(z_dyn, epsilon, t)
    v = ops.as_tensor(velocity_fn(z_t, t))
    diff = v - (np.asarray(z_dyn) - np.asarray(epsilon))
    return (diff * diff).mean()


def euler_integrate(velocity_fn: Callable, z0: np.ndarray, steps: int) -> np.ndarray:
    """Fixed-step Euler from t=0 to t=1 on the grid t_i = i / steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = np.array(z0, dtype=np.float64, copy=True)
    h = 1.0 / steps
    for i in range(steps):
        v = velocity_fn(z, i / steps)
        z = z + h * (v.data if isinstance(v, Tensor) else np.asarray(v))
    return z


def sample(model: RFModel, x_cond, f_vid: Tensor | None, steps: int | None = None, s: float | None = None, seed: int = 0) -> np.ndarray:
    """Guided Euler sample of z_dyn in the model's (standardized) latent space."""
    cfg = model.cfg
    steps = cfg.sample_steps if steps is None else steps
    s = cfg.cfg_scale if s is None else s
    x_cond = ops.as_tensor(x_cond).detach()
    f_vid = None if f_vid is None else f_vid.detach()
    eps = np.random.default_rng(seed).standard_normal((x_cond.shape[0], cfg.d_dyn))

    def field_fn(z, t):
        v_c = model.velocity(z, x_cond, t, f_vid).data
        if s == 1:
            return v_c
        v_u = model.velocity(z, x_cond, t, None, drop_condition=True).data
        return cfg_velocity(v_c, v_u, s)

    return euler_integrate(field_fn, eps, steps)
