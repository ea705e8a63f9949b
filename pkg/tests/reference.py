"""Plain-numpy re-derivations of the layer math, used as test oracles."""
import math

import numpy as np


def ln(x, gain=None, bias=None, eps=1e-6):
    m = x.mean(-1, keepdims=True)
    v = ((x - m) ** 2).mean(-1, keepdims=True)
    y = (x - m) / np.sqrt(v + eps)
    if gain is not None:
        y = y * gain.data + bias.data
    return y


def lin(layer, x):
    y = x @ layer.weight.data
    return y if layer.bias is None else y + layer.bias.data


def gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def mlp(m, x):
    return lin(m.fc2, gelu(lin(m.fc1, x)))


def ref_map(q, k, heads, mask=None):
    n, d = q.shape
    dk = d // heads
    maps = []
    for h in range(heads):
        logits = q[:, h * dk : (h + 1) * dk] @ k[:, h * dk : (h + 1) * dk].T / math.sqrt(dk)
        if mask is not None:
            logits = np.where(mask, logits, -np.inf)
        e = np.exp(logits - logits.max(1, keepdims=True))
        maps.append(e / e.sum(1, keepdims=True))
    return np.stack(maps)


def ref_apply(a, v):
    heads = a.shape[0]
    dk = v.shape[1] // heads
    return np.concatenate([a[h] @ v[:, h * dk : (h + 1) * dk] for h in range(heads)], axis=1)


def attention(att, x, ctx):
    a = ref_map(lin(att.to_q, x), lin(att.to_k, ctx), att.heads)
    return lin(att.to_out, ref_apply(a, lin(att.to_v, ctx)))
