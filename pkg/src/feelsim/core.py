"""Dense vector helpers, top-k masks and context-keyed random streams.

Parameter vectors (model weights, model differences, error accumulators) are
plain 1-D ``float64`` numpy arrays. Masks are stored as sorted index arrays
rather than dense 0/1 vectors.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Hashable

import numpy as np

__all__ = [
    "ContractViolation",
    "MaskVector",
    "RngStream",
    "apply_mask",
    "as_param_vector",
    "complement_mask",
    "top_k_mask",
]


class ContractViolation(RuntimeError):
    """An internal invariant was broken at runtime (not a bad argument)."""


def as_param_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"parameter vectors are 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("parameter vector contains NaN or Inf")
    return v


@dataclass(frozen=True)
class MaskVector:
    """Sparse representation of a {0,1}^d mask.

    ``positions`` is a strictly increasing ``int64`` array of indices in
    ``[0, d)``. The array is made read-only on construction so a mask can be
    shared between devices without copying.
    """

    positions: np.ndarray
    d: int

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.int64).reshape(-1)
        if self.d < 0:
            raise ValueError("mask dimension must be nonnegative")
        if pos.size:
            if pos[0] < 0 or pos[-1] >= self.d:
                raise ValueError("mask position out of range")
            if np.any(np.diff(pos) <= 0):
                raise ValueError("mask positions must be strictly increasing")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def count(self) -> int:
        return int(self.positions.size)

    def dense(self) -> np.ndarray:
        m = np.zeros(self.d, dtype=np.float64)
        m[self.positions] = 1.0
        return m

    def __eq__(self, other):
        if not isinstance(other, MaskVector):
            return NotImplemented
        return self.d == other.d and np.array_equal(self.positions, other.positions)

    def __hash__(self):
        return hash((self.d, self.positions.tobytes()))

    def __len__(self):
        return self.count

    def __contains__(self, i):
        j = np.searchsorted(self.positions, i)
        return bool(j < self.positions.size and self.positions[j] == i)


def top_k_mask(x, K: int) -> MaskVector:
    """Positions of the ``K`` largest ``|x[i]|``.

    Ties are broken by lower index, so when fewer than ``K`` entries are
    non-zero the mask is padded with the lowest-index zero positions. Runs in
    O(d) via a partial partition around the K-th largest magnitude.
    """
    a = np.abs(np.asarray(x, dtype=np.float64))
    d = a.size
    if K < 0 or K > d:
        raise ValueError(f"K={K} outside [0, {d}]")
    if K == 0:
        return MaskVector(np.empty(0, dtype=np.int64), d)
    if K == d:
        return MaskVector(np.arange(d, dtype=np.int64), d)
    kth = np.partition(a, d - K)[d - K]
    above = np.flatnonzero(a > kth)
    ties = np.flatnonzero(a == kth)[: K - above.size]
    return MaskVector(np.sort(np.concatenate([above, ties])), d)


def apply_mask(x, m: MaskVector) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (m.d,):
        raise ValueError(f"mask dimension {m.d} does not match vector length {x.size}")
    out = np.zeros_like(x)
    out[m.positions] = x[m.positions]
    return out


def complement_mask(m: MaskVector) -> MaskVector:
    keep = np.ones(m.d, dtype=bool)
    keep[m.positions] = False
    return MaskVector(np.flatnonzero(keep), m.d)


def _context_word(part: Hashable) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("integer context entries must be nonnegative")
        return int(part)
    # stable across processes, unlike hash()
    return zlib.crc32(str(part).encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream keyed by ``(master_seed, context)``.

    The generator is derived purely from the key, never from a shared
    generator's state, so draws do not depend on the order in which devices,
    rounds or sub-channels are processed.

    >>> a = RngStream(7, (3, 1, "sgd")).generator().random()
    >>> b = RngStream(7).child(3, 1, "sgd").generator().random()
    >>> a == b
    True
    """

    master_seed: int
    context: tuple = field(default=())

    def child(self, *parts: Hashable) -> "RngStream":
        return RngStream(self.master_seed, self.context + tuple(parts))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=int(self.master_seed) & 0xFFFFFFFFFFFFFFFF,
            spawn_key=tuple(_context_word(p) for p in self.context),
        )
        return np.random.default_rng(seq)
