"""Noise schedule, forward corruption, and the deterministic DDIM update.

Queries live in a "signal" space: clean values ``q`` are mapped through
``(2q - 1) * scale`` before noise is added, and every reverse step works on
that scaled representation.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, add, matmul, mul

BETA_MIN = 1e-8
BETA_MAX = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_cumprod: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def abar(self, t: int) -> float:
        """Cumulative retention at ``t``; ``t < 0`` denotes the clean end (1.0)."""
        if t < 0:
            return 1.0
        if t >= self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T})")
        return float(self.alpha_cumprod[t])

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "beta", "alpha_cumprod"])
            for t in range(self.T):
                w.writerow([t, repr(float(self.beta[t])), repr(float(self.alpha_cumprod[t]))])


def cosine_alpha_bar(t, T: int, s: float = 0.008):
    """Unclipped f(t)/f(0) with f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)."""
    t = np.asarray(t, dtype=np.float64)
    f = np.cos(((t / T + s) / (1 + s)) * np.pi / 2) ** 2
    f0 = math.cos((s / (1 + s)) * math.pi / 2) ** 2
    return f / f0


def cosine_schedule(T: int = 1000, s: float = 0.008) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if s <= 0:
        raise ValueError("s must be positive")
    raw = cosine_alpha_bar(np.arange(T), T, s)
    prev = np.concatenate([[1.0], raw[:-1]])
    beta = np.clip(1.0 - raw / prev, BETA_MIN, BETA_MAX)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_cumprod=np.cumprod(alpha))


@dataclass(frozen=True)
class ScaleParams:
    scale: float = 0.4

    def __post_init__(self):
        if not 0.0 < self.scale <= 1.0:
            raise ValueError(f"scale must lie in (0, 1], got {self.scale}")


@dataclass
class QuerySet:
    queries: Tensor
    timestep: int | None = None
    scaled: bool = False

    def __post_init__(self):
        n, d = self.queries.shape[-2:]
        if n < 1 or d < 2:
            raise ValueError(f"query set needs N >= 1 and D >= 2, got {self.queries.shape}")


def scale_signal(q, p: ScaleParams):
    if isinstance(q, Tensor):
        return (q * 2.0 - 1.0) * p.scale
    return (np.asarray(q, dtype=np.float64) * 2.0 - 1.0) * p.scale


def unscale_signal(y, p: ScaleParams) -> np.ndarray:
    y = np.clip(np.asarray(y, dtype=np.float64), -p.scale, p.scale)
    return (y / p.scale + 1.0) / 2.0


def q_sample(z0, t: int, eps, sched: NoiseSchedule):
    """Closed-form forward corruption sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if not 0 <= t < sched.T:
        raise IndexError(f"timestep {t} outside [0, {sched.T})")
    if np.shape(eps) != (z0.shape if isinstance(z0, Tensor) else np.shape(z0)):
        raise ValueError("z0 and eps shapes differ")
    a = sched.alpha_cumprod[t]
    if isinstance(z0, Tensor):
        return add(mul(z0, math.sqrt(a)), math.sqrt(1.0 - a) * np.asarray(eps))
    return math.sqrt(a) * np.asarray(z0) + math.sqrt(1.0 - a) * np.asarray(eps)


def corrupt_queries(z0: QuerySet, t: int, eps, sched: NoiseSchedule, p: ScaleParams) -> QuerySet:
    if z0.scaled:
        raise ValueError("corrupt_queries expects unscaled queries")
    zt = q_sample(scale_signal(z0.queries, p), t, eps, sched)
    return QuerySet(as_t(zt), timestep=t, scaled=True)


def as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def pad_boxes(gt, N: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Repeat ground-truth boxes up to ``N`` rows.

    Boxes are tiled in order (box i fills rows i, i+M, i+2M, ...). With an
    ``rng`` the padded rows are shuffled, which is how label-query shuffling
    is realised. No boxes at all pads with the full span (0, 1).
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(gt) > N:
        raise ValueError(f"{len(gt)} ground-truth boxes exceed capacity N={N}")
    if np.any(gt[:, 0] < 0) or np.any(gt[:, 1] > 1) or np.any(gt[:, 0] >= gt[:, 1]):
        raise ValueError("boxes must satisfy 0 <= onset < offset <= 1")
    if len(gt) == 0:
        padded = np.tile([[0.0, 1.0]], (N, 1))
    else:
        padded = gt[np.arange(N) % len(gt)]
    if rng is not None:
        padded = padded[rng.permutation(N)]
    return padded


def corrupt_boxes(
    gt,
    N: int,
    t: int,
    eps,
    sched: NoiseSchedule,
    p: ScaleParams,
    proj: Parameter,
    rng: np.random.Generator | None = None,
) -> tuple[QuerySet, np.ndarray]:
    """Pad, scale and noise boxes in 2-D, then project to query width.

    Returns the projected queries plus the noisy boxes in scaled box space
    (the state the reverse process iterates on).
    """
    boxes = scale_signal(pad_boxes(gt, N, rng), p)
    noisy = q_sample(boxes, t, eps, sched)
    return QuerySet(project_boxes(noisy, proj), timestep=t, scaled=True), noisy


def project_boxes(boxes, proj: Tensor) -> Tensor:
    if proj.shape[0] != 2:
        raise ValueError("box projection must map 2 -> D")
    return matmul(as_t(boxes), proj)


def ddim_step(z_t, z0_hat, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM move from ``t`` to ``t_prev``.

    ``t_prev = -1`` targets the clean end where abar = 1, returning ``z0_hat``.
    """
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must precede t ({t})")
    z_t = np.asarray(z_t, dtype=np.float64)
    z0_hat = np.asarray(z0_hat, dtype=np.float64)
    a_t = sched.abar(t)
    a_prev = sched.abar(t_prev)
    denom = math.sqrt(1.0 - a_t)
    if denom == 0.0:
        if not np.array_equal(z_t, z0_hat):
            raise ZeroDivisionError("abar_t == 1 but z_t differs from z0_hat")
        eps_hat = np.zeros_like(z_t)
    else:
        eps_hat = (z_t - math.sqrt(a_t) * z0_hat) / denom
    return math.sqrt(a_prev) * z0_hat + math.sqrt(1.0 - a_prev) * eps_hat


def make_step_plan(T: int, steps: int) -> list[tuple[int, int]]:
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, T={T}], got {steps}")
    if T == 1:
        return [(0, -1)]
    times: list[int] = []
    for x in np.linspace(T - 1, 0, steps + 1):
        t = int(round(x))
        # steps == T has stride < 1; collapse repeats so the plan stays strict
        if not times or t < times[-1]:
            times.append(t)
    return list(zip(times[:-1], times[1:]))
