"""Parameters, modules and the attention building blocks shared by the VAE and RF model."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as F
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)


class Module:
    """Attribute-walking container: parameters are found on instance attributes,
    nested modules and lists of modules, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.data.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.data.shape}")
            p.data = value.astype(p.data.dtype, copy=True)
            p.grad = np.zeros_like(p.data)

    def astype(self, dtype) -> "Module":
        """Cast every parameter (e.g. to float32 for faster, non-reference runs)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            bound = math.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = F.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-6):
        self.eps = eps
        self.gain = Parameter(np.ones(dim)) if affine else None
        self.bias = Parameter(np.zeros(dim)) if affine else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return F.transpose(F.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    h, n, dk = x.shape
    return F.reshape(F.transpose(x, (1, 0, 2)), (n, h * dk))


def attention_map(q: Tensor, k: Tensor, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Per-head attention weights, shape (heads, n_q, n_k).

    ``mask`` is a boolean (n_q, n_k) or (n_k,) array; False entries get zero weight.
    """
    d_k = q.shape[-1] // heads
    logits = F.matmul(split_heads(q, heads), F.swapaxes(split_heads(k, heads), -1, -2))
    logits = logits * (1.0 / math.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        mask = mask[None, None, :] if mask.ndim == 1 else mask[None]
    return F.softmax(logits, axis=-1, mask=mask)


def apply_map(a: Tensor, v: Tensor) -> Tensor:
    """Aggregate values (n_k, d) with a per-head map (heads, n_q, n_k) -> (n_q, d)."""
    return merge_heads(F.matmul(a, split_heads(v, a.shape[0])))


class Attention(Module):
    """Multi-head attention with separate query/key/value/output projections."""

    def __init__(self, d_q: int, d_kv: int, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.to_q = Linear(d_q, dim, rng)
        # a key bias only shifts each query's logits uniformly, so it is left out
        self.to_k = Linear(d_kv, dim, rng, bias=False)
        self.to_v = Linear(d_kv, dim, rng)
        self.to_out = Linear(dim, d_q, rng)

    def __call__(self, x: Tensor, ctx: Tensor, mask: np.ndarray | None = None) -> Tensor:
        a = attention_map(self.to_q(x), self.to_k(ctx), self.heads, mask)
        return self.to_out(apply_map(a, self.to_v(ctx)))


def sinusoidal_embedding(positions: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Standard transformer sin/cos table: (len(positions), dim)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = positions[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(positions), 1))], axis=1)
    return emb
