"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class NonDeterministicLoss(RuntimeError):
    pass


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    The relative error of an entry is ``|analytic - numeric| / max(|numeric|, 1e-8)``.
    With ``max_entries`` set, that many entries are sampled per parameter;
    otherwise every entry is checked.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        p.grad = np.zeros_like(p.data)
    loss = loss_fn()
    again = loss_fn()
    if loss.data.tobytes() != again.data.tobytes():
        raise NonDeterministicLoss("loss_fn returned different values for identical parameters")
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        if max_entries is None or max_entries >= flat.size:
            entries = np.arange(flat.size)
        else:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(loss_fn().data)
            flat[i] = orig - step
            f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            err = abs(grad.reshape(-1)[i] - numeric) / max(abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
