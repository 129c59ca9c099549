"""Central finite-difference checks for autodiff graphs."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-4, coords=None) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for the selected flat coordinates."""
    flat = x.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        up = float(f().data)
        flat[i] = old - h
        down = float(f().data)
        flat[i] = old
        out.append((up - down) / (2 * h))
    return np.asarray(out)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale < 1e-12 else float(np.linalg.norm(a - b) / scale)


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
                    max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between analytic and numeric gradients over ``inputs``.

    With ``max_coords`` only that many random coordinates per input are probed.
    """
    for x in inputs:
        x.grad = None
    f().backward()
    analytic = [x.grad.reshape(-1).copy() if x.grad is not None else np.zeros(x.data.size) for x in inputs]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for x, g in zip(inputs, analytic):
        coords = None
        if max_coords is not None and x.data.size > max_coords:
            coords = rng.choice(x.data.size, max_coords, replace=False)
        num = numeric_grad(f, x, h, coords)
        ana = g if coords is None else g[coords]
        worst = max(worst, relative_error(ana, num))
    return worst


def check_directional(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                      rng: np.random.Generator | None = None) -> float:
    """Relative error of grad . v against a finite difference along a random v."""
    rng = rng or np.random.default_rng(0)
    for x in inputs:
        x.grad = None
    f().backward()
    dirs = [rng.standard_normal(x.shape) for x in inputs]
    analytic = sum(float(np.sum(x.grad * v)) for x, v in zip(inputs, dirs) if x.grad is not None)
    base = [x.data.copy() for x in inputs]
    for x, v, b in zip(inputs, dirs, base):
        x.data[...] = b + h * v
    up = float(f().data)
    for x, v, b in zip(inputs, dirs, base):
        x.data[...] = b - h * v
    down = float(f().data)
    for x, b in zip(inputs, base):
        x.data[...] = b
    numeric = (up - down) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
