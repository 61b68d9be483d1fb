"""Time-correlated sparsification with error feedback and stochastic quantization.

Each device splits its error-compensated model difference into two disjoint
parts:

* a *global* part on the top-``K_global`` positions of the previous round's
  aggregate, identical across devices and therefore summable over the air;
* a *local* part on its own top-``K_local`` remaining positions, quantized
  with a QSGD-style ``q``-bit quantizer and sent digitally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import MaskVector, RngStream, complement_mask, top_k_mask

__all__ = [
    "CompressionSpec",
    "QuantizedUpdate",
    "SparseUpdate",
    "compress_round",
    "decode_payload",
    "dequantize",
    "encode_payload",
    "error_update",
    "global_mask",
    "local_mask",
    "position_bits",
    "quantize",
]

MAX_Q = 52


def position_bits(d: int) -> int:
    """Bits needed to address one of ``d`` coordinates, ``ceil(log2 d)``."""
    return int(math.ceil(math.log2(d))) if d > 1 else 0


@dataclass(frozen=True)
class CompressionSpec:
    K_global: int
    K_local: int
    q: int
    d: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.K_global < 0 or self.K_local < 0:
            raise ValueError("sparsity levels must be nonnegative")
        if self.K_global + self.K_local > self.d:
            raise ValueError(
                f"K_global + K_local = {self.K_global + self.K_local} exceeds d = {self.d}"
            )
        if not 2 <= self.q <= MAX_Q:
            raise ValueError(f"q must be in [2, {MAX_Q}], got {self.q}")
        if self.K_local >= 2 ** (2 * self.q - 2):
            raise ValueError(
                f"K_local = {self.K_local} violates the compression-bound "
                f"precondition K_local < 2^(2q-2) = {2 ** (2 * self.q - 2)}"
            )
        if self.K_global + self.K_local == 0:
            raise ValueError("at least one of K_global, K_local must be positive")

    @property
    def levels(self) -> int:
        return 2 ** (self.q - 1)

    @property
    def gamma(self) -> float:
        """Compression quality constant; the residual energy is at most ``1 - gamma``."""
        return (1.0 - self.K_local / 2.0 ** (2 * self.q - 2)) * (
            self.K_global + self.K_local
        ) / self.d

    @property
    def local_payload_bits(self) -> int:
        """Digital payload of the local part: ``(ceil(log2 d) + q) * K_local``."""
        return (position_bits(self.d) + self.q) * self.K_local


@dataclass(frozen=True)
class SparseUpdate:
    """Values at the positions of ``mask``, in ascending position order."""

    mask: MaskVector
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.size != self.mask.count:
            raise ValueError("one value per mask position is required")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_dense(cls, x, mask: MaskVector) -> "SparseUpdate":
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (mask.d,):
            raise ValueError("dimension mismatch between vector and mask")
        return cls(mask, x[mask.positions].copy())

    def densify(self) -> np.ndarray:
        out = np.zeros(self.mask.d)
        out[self.mask.positions] = self.values
        return out


@dataclass(frozen=True)
class QuantizedUpdate:
    mask: MaskVector
    scale: float
    signs: np.ndarray
    levels: np.ndarray
    q: int

    @property
    def s(self) -> int:
        return 2 ** (self.q - 1)

    def densify(self) -> np.ndarray:
        return dequantize(self).densify()


def global_mask(g_hat_prev, spec: CompressionSpec) -> MaskVector:
    g = np.asarray(g_hat_prev, dtype=np.float64)
    if g.shape != (spec.d,):
        raise ValueError("previous aggregate has the wrong dimension")
    return top_k_mask(g, spec.K_global)


def local_mask(g_ec, m_global: MaskVector, spec: CompressionSpec) -> MaskVector:
    g_ec = np.asarray(g_ec, dtype=np.float64)
    if g_ec.shape != (spec.d,) or m_global.d != spec.d:
        raise ValueError("dimension mismatch")
    if m_global.count + spec.K_local > spec.d:
        raise ValueError("K_global + K_local exceeds d")
    # Select on the complement directly: zero padding of (1 - m_g) * g_ec
    # must never pick a position that is already in the global mask.
    free = complement_mask(m_global).positions
    sub = top_k_mask(g_ec[free], spec.K_local)
    return MaskVector(free[sub.positions], spec.d)


def quantize(u: SparseUpdate, q: int, rng: RngStream | np.random.Generator) -> QuantizedUpdate:
    """Unbiased stochastic quantization onto ``2**(q-1)`` levels of the l2 norm.

    ``|v| / ||u|| * s`` is rounded to one of its two neighbouring integers
    with probabilities that preserve the mean.
    """
    if not 2 <= q <= MAX_Q:
        raise ValueError(f"q must be in [2, {MAX_Q}]")
    s = 2 ** (q - 1)
    v = u.values
    scale = float(np.linalg.norm(v))
    signs = np.where(v < 0, -1, 1).astype(np.int8)
    if scale == 0.0 or v.size == 0:
        return QuantizedUpdate(u.mask, 0.0, signs, np.zeros(v.size, dtype=np.int64), q)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    r = np.minimum(np.abs(v) / scale * s, s)
    lo = np.floor(r)
    up = gen.random(v.size) < (r - lo)
    levels = (lo + up).astype(np.int64)
    return QuantizedUpdate(u.mask, scale, signs, levels, q)


def dequantize(qu: QuantizedUpdate) -> SparseUpdate:
    values = qu.scale * qu.signs.astype(np.float64) * (qu.levels.astype(np.float64) / qu.s)
    return SparseUpdate(qu.mask, values)


def compress_round(g_ec, g_hat_prev, spec: CompressionSpec, rng: RngStream | np.random.Generator):
    """Split ``g_ec`` into its full-precision global part and quantized local part.

    Returns
    -------
    (SparseUpdate, QuantizedUpdate)
        The global-mask values (analog, never quantized) and the quantized
        local-mask values.
    """
    g_ec = np.asarray(g_ec, dtype=np.float64)
    if g_ec.shape != (spec.d,):
        raise ValueError("g_ec has the wrong dimension")
    m_g = global_mask(g_hat_prev, spec)
    m_l = local_mask(g_ec, m_g, spec)
    g_part = SparseUpdate.from_dense(g_ec, m_g)
    l_part = quantize(SparseUpdate.from_dense(g_ec, m_l), spec.q, rng)
    return g_part, l_part


def error_update(g_ec, g_tilde_global, g_tilde_local, scheduled: bool, prev_error=None):
    """Residual kept on the device for the next round.

    An unscheduled device keeps ``prev_error`` unchanged and its current model
    difference is dropped.
    """
    if not scheduled:
        if prev_error is None:
            raise ValueError("prev_error is required for an unscheduled device")
        return np.asarray(prev_error, dtype=np.float64)
    e = np.array(g_ec, dtype=np.float64)
    for part in (g_tilde_global, g_tilde_local):
        if part is None:
            continue
        if isinstance(part, QuantizedUpdate):
            part = dequantize(part)
        e[part.mask.positions] -= part.values
    return e


# -- bit-exact digital payload ----------------------------------------------


def _to_bits(vals: np.ndarray, width: int) -> np.ndarray:
    if width == 0 or vals.size == 0:
        return np.zeros(0, dtype=np.uint8)
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    return ((vals.astype(np.uint64)[:, None] >> shifts) & np.uint64(1)).astype(np.uint8).ravel()


def _from_bits(bits: np.ndarray, count: int, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros(count, dtype=np.int64)
    b = bits.reshape(count, width).astype(np.uint64)
    weights = np.uint64(1) << np.arange(width - 1, -1, -1, dtype=np.uint64)
    return (b * weights).sum(axis=1).astype(np.int64)


def encode_payload(qu: QuantizedUpdate) -> tuple[bytes, int, float]:
    """Pack a quantized update into ``(ceil(log2 d) + q) * K`` bits.

    Layout: K position fields of ``ceil(log2 d)`` bits, then K value fields
    of one sign bit and a ``q-1``-bit level. The top level ``s = 2**(q-1)``
    does not fit in ``q-1`` bits; it is sent as the otherwise unused
    "negative zero" code, with its sign carried by the sign of the returned
    scale. The scale travels as a separate float and is not counted.

    Returns
    -------
    (bytes, int, float)
        Packed payload, exact payload length in bits, signed scale.
    """
    s = qu.s
    levels = qu.levels
    signs = qu.signs
    top = levels == s
    scale = float(qu.scale)
    if np.any(top):
        top_signs = np.unique(signs[top])
        if top_signs.size > 1:
            raise ValueError("top-level entries with mixed signs cannot be packed in q bits")
        if top_signs[0] < 0:
            scale = -scale
    sign_bit = np.where(top, 1, (signs < 0) & (levels > 0)).astype(np.int64)
    field = np.where(top, 0, levels)
    pos = _to_bits(qu.mask.positions, position_bits(qu.mask.d))
    val = np.concatenate(
        [_to_bits(sign_bit, 1).reshape(-1, 1), _to_bits(field, qu.q - 1).reshape(-1, qu.q - 1)],
        axis=1,
    ).ravel() if levels.size else np.zeros(0, dtype=np.uint8)
    bits = np.concatenate([pos, val])
    return np.packbits(bits).tobytes(), int(bits.size), scale


def decode_payload(data: bytes, nbits: int, scale: float, K: int, d: int, q: int) -> QuantizedUpdate:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:nbits]
    pb = position_bits(d)
    positions = _from_bits(bits[: pb * K], K, pb)
    vals = bits[pb * K:].reshape(K, q) if K else np.zeros((0, q), dtype=np.uint8)
    sign_bit = vals[:, 0].astype(np.int64)
    field = _from_bits(vals[:, 1:].ravel(), K, q - 1)
    s = 2 ** (q - 1)
    top = (sign_bit == 1) & (field == 0)
    levels = np.where(top, s, field)
    top_sign = -1 if scale < 0 else 1
    signs = np.where(top, top_sign, np.where(sign_bit == 1, -1, 1)).astype(np.int8)
    return QuantizedUpdate(MaskVector(positions, d), abs(scale), signs, levels, q)
