"""Shared test helpers: finite-difference oracle and a scripted rng stub."""

from __future__ import annotations

import numpy as np
import torch


def finite_difference_max_rel(
    f,
    params: list[torch.Tensor],
    h: float = 1e-5,
    coords_per_tensor: int = 5,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` recomputes the scalar loss from the current values of ``params``
    (float64 leaf tensors with ``requires_grad=True``).  A deterministic
    sample of coordinates per tensor is perturbed in place.
    """
    loss = f()
    grads = torch.autograd.grad(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        n = flat.numel()
        picks = rng.choice(n, size=min(coords_per_tensor, n), replace=False)
        for i in picks:
            orig = float(flat[i])
            flat[i] = orig + h
            with torch.no_grad():
                f_plus = float(f())
            flat[i] = orig - h
            with torch.no_grad():
                f_minus = float(f())
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            analytic = float(gflat[i])
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst


class ScriptedRng:
    """Duck-typed stand-in for numpy Generator with scripted draws.

    ``randoms`` feeds ``random()``, ``ints`` feeds ``integers()`` and
    ``uniforms`` feeds ``uniform()``; each falls back to its last value
    once exhausted.
    """

    def __init__(self, randoms=(1.0,), ints=(0,), uniforms=(0.1,)):
        self._randoms = list(randoms)
        self._ints = list(ints)
        self._uniforms = list(uniforms)

    def _pop(self, queue):
        return queue.pop(0) if len(queue) > 1 else queue[0]

    def random(self):
        return self._pop(self._randoms)

    def integers(self, low, high=None, size=None):
        value = self._pop(self._ints)
        if size is not None:
            return np.full(size, value, dtype=np.int64)
        return value

    def uniform(self, low=0.0, high=1.0, size=None):
        value = self._pop(self._uniforms)
        if size is not None:
            return np.full(size, value, dtype=np.float64)
        return value
