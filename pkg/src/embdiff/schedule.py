"""Diffusion noise schedule and the closed-form forward corruption process."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

# Endpoints of the linear variance schedule: beta grows from BETA_START at
# t=1 to BETA_END at t=T.
BETA_START = 1e-4
BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule for the forward corruption process.

    Timesteps are 1-based: ``beta_at(1)`` is the first corruption step and
    ``beta_at(T)`` the last. Internally the arrays are 0-based, so
    ``beta[t - 1]`` holds the value for timestep ``t``. ``alpha_bar_at(0)``
    is defined as 1.0 (uncorrupted data).

    Instances are immutable after construction (the arrays are marked
    read-only) and safe to share across concurrent readers.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        for arr in (self.beta, self.alpha, self.alpha_bar):
            arr.setflags(write=False)

    def _check_t(self, t: int, low: int = 1) -> int:
        t = int(t)
        if not low <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{low}, {self.T}]")
        return t

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check_t(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product of alpha up to timestep t; t=0 returns 1.0."""
        t = self._check_t(t, low=0)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def q_sample(self, y0, t: int, noise):
        """Corrupt clean latents to timestep ``t`` in closed form.

        Returns ``sqrt(alpha_bar[t]) * y0 + sqrt(1 - alpha_bar[t]) * noise``.
        ``noise`` is supplied by the caller (unit Gaussian for a true forward
        sample) so tests and samplers can control it. Works for both numpy
        arrays and torch tensors.
        """
        t = self._check_t(t)
        if tuple(y0.shape) != tuple(noise.shape):
            raise ValueError(
                f"noise shape {tuple(noise.shape)} != y0 shape {tuple(y0.shape)}"
            )
        ab = self.alpha_bar_at(t)
        return math.sqrt(ab) * y0 + math.sqrt(1.0 - ab) * noise


def make_linear_schedule(T: int) -> NoiseSchedule:
    """Build the linear schedule with beta from 1e-4 (t=1) to 0.02 (t=T)."""
    T = int(T)
    if T < 2:
        raise ValueError(f"schedule needs at least 2 timesteps, got {T}")
    beta = np.linspace(BETA_START, BETA_END, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def sinusoidal_embedding(position, dim: int) -> torch.Tensor:
    """Standard fixed sin/cos features for a position or timestep.

    Even channels are sines, odd channels cosines, with geometric
    wavelengths spanning 2*pi to 10000*2*pi. Accepts a non-negative int
    (returns shape ``[dim]``) or a 1-D tensor/array of ints (returns
    ``[len, dim]``). Deterministic.
    """
    if dim <= 0 or dim % 2 != 0:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    scalar = not (torch.is_tensor(position) and position.dim() > 0)
    pos = torch.as_tensor(position, dtype=torch.float64).reshape(-1)
    if (pos < 0).any():
        raise ValueError("positions must be non-negative")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    )
    angles = pos[:, None] * freqs[None, :]
    out = torch.empty(pos.shape[0], dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(angles)
    out[:, 1::2] = torch.cos(angles)
    out = out.to(torch.float32)
    return out[0] if scalar else out
