"""Block-fading uplink: Rayleigh gains, over-the-air summation and digital rates.

Gains are real positive amplitudes (phase assumed pre-compensated). Each
device inverts its own gain before the analog phase, so the base station
receives the scaled sum of the segments plus Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .compression import SparseUpdate
from .core import ContractViolation, RngStream

__all__ = [
    "ChannelRealization",
    "OacConfig",
    "digital_rate",
    "draw_channel",
    "oac_aggregate",
    "oac_slots",
    "oac_transmit_power",
    "segment",
]


@dataclass(frozen=True)
class ChannelRealization:
    gains: np.ndarray  # (N, M) amplitudes |h|
    noise_var: float

    def __post_init__(self):
        g = np.asarray(self.gains, dtype=np.float64)
        if g.ndim != 2:
            raise ValueError("gains must be an N x M matrix")
        if np.any(g <= 0):
            raise ValueError("channel gains must be strictly positive")
        if self.noise_var < 0:
            raise ValueError("noise variance must be nonnegative")
        g.setflags(write=False)
        object.__setattr__(self, "gains", g)

    @property
    def N(self) -> int:
        return self.gains.shape[0]

    @property
    def M(self) -> int:
        return self.gains.shape[1]


@dataclass(frozen=True)
class OacConfig:
    sigma_t: float
    M: int
    K_global: int

    def __post_init__(self):
        if self.sigma_t <= 0:
            raise ValueError("sigma_t must be positive")
        if self.M < 1 or self.K_global < 0:
            raise ValueError("need M >= 1 and K_global >= 0")


def draw_channel(N: int, M: int, rng: RngStream | np.random.Generator, noise_var: float = 1e-6) -> ChannelRealization:
    if N < 1 or M < 1:
        raise ValueError("need N, M >= 1")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    g = gen.rayleigh(1.0, size=(N, M))
    # Rayleigh support is (0, inf); an exact zero draw would make inversion impossible.
    g = np.maximum(g, np.finfo(np.float64).tiny)
    return ChannelRealization(g, float(noise_var))


def segment(values, M: int) -> list[np.ndarray]:
    """Split into ``M`` consecutive pieces; the first ``K mod M`` get one extra element."""
    return np.array_split(np.asarray(values, dtype=np.float64), M)


def oac_slots(K_global: int, M: int) -> int:
    return math.ceil(K_global / M)


def oac_transmit_power(u: SparseUpdate, ch: ChannelRealization, n: int, cfg: OacConfig) -> float:
    """Energy device ``n`` spends pre-inverting its global part: sum_m sigma^2 ||seg_m||^2 / h_nm^2."""
    if u.values.size != cfg.K_global:
        raise ValueError("global part must carry exactly K_global values")
    seg_energy = np.array([float(np.dot(s, s)) for s in segment(u.values, cfg.M)])
    return float(cfg.sigma_t ** 2 * np.sum(seg_energy / ch.gains[n] ** 2))


def oac_aggregate(
    updates: Sequence[SparseUpdate],
    ch: ChannelRealization,
    cfg: OacConfig,
    rng: RngStream,
) -> np.ndarray:
    """Superimpose the global parts of the scheduled devices.

    Sub-channel ``m`` carries segment ``m`` of every device, one value per
    slot. Noise on sub-channel ``m`` is drawn from ``rng.child(m)`` in slot
    order. Returns the d-dimensional received vector (not yet divided by
    ``sigma_t``), supported on the shared mask.
    """
    if not updates:
        raise ContractViolation("over-the-air aggregation needs at least one device")
    mask = updates[0].mask
    for u in updates[1:]:
        if u.mask != mask:
            raise ContractViolation("devices disagree on the global mask")
    total = np.sum([u.values for u in updates], axis=0)
    received = []
    sd = math.sqrt(ch.noise_var)
    for m, seg in enumerate(segment(total, cfg.M)):
        z = rng.child(m).generator().normal(0.0, sd, size=seg.size) if sd > 0 else 0.0
        received.append(cfg.sigma_t * seg + z)
    y = np.zeros(mask.d)
    y[mask.positions] = np.concatenate(received) if received else []
    return y


def digital_rate(ch: ChannelRealization, n: int, assigned, powers) -> float:
    """Bits per slot for device ``n``: sum over assigned sub-channels of log2(1 + P h^2 / noise)."""
    idx = np.asarray(list(assigned), dtype=np.int64)
    if idx.size == 0:
        return 0.0
    p = np.asarray(powers, dtype=np.float64)
    if p.shape == (ch.M,):
        p = p[idx]
    if p.shape != idx.shape or np.any(p < 0):
        raise ValueError("powers must be nonnegative, one per assigned sub-channel")
    return float(np.sum(_log2_1p_snr(p, ch.gains[n, idx], ch.noise_var)))


def _log2_1p_snr(p: np.ndarray, h: np.ndarray, noise_var: float) -> np.ndarray:
    signal = p * h ** 2
    if noise_var == 0:
        return np.where(signal > 0, np.inf, 0.0)
    return np.log2(1.0 + signal / noise_var)
