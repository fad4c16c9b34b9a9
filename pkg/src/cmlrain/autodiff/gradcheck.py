"""Central finite-difference verification of autodiff gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from cmlrain.autodiff.tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_coords: int
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def relative_error(g_ad, g_fd):
    """|g_ad - g_fd| / max(1, |g_ad|, |g_fd|), elementwise."""
    g_ad = np.asarray(g_ad, dtype=np.float64)
    g_fd = np.asarray(g_fd, dtype=np.float64)
    scale = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return np.abs(g_ad - g_fd) / scale


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare autodiff gradients of the scalar ``f()`` with central differences.

    ``f`` takes no arguments and closes over ``params``; it must be
    deterministic (dropout disabled).  ``max_coords`` caps the number of
    coordinates probed per parameter, sampled with ``rng``.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    total = 0
    per_param: dict[str, float] = {}
    for i, (p, g_ad) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        g_fd = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            up = f().item()
            flat[c] = orig - h
            down = f().item()
            flat[c] = orig
            g_fd[j] = (up - down) / (2.0 * h)
        err = float(relative_error(g_ad.reshape(-1)[coords], g_fd).max(initial=0.0))
        per_param[p.name or f"param{i}"] = err
        worst = max(worst, err)
        total += len(coords)
    for p in params:
        p.zero_grad()
    return GradCheckReport(max_rel_err=worst, tol=tol, n_coords=total, per_param=per_param)
