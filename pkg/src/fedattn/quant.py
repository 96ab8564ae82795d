"""Per-tensor affine min-max quantization of wire tensors.

The sweep harnesses (rerank agreement vs bits, decode S1/S2 ablation) live in
:mod:`fedattn.experiments`; this module holds the codec itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QTensor:
    bits: int
    codes: np.ndarray  # unpacked uint8 codes, original shape
    scale: np.float32
    zero_point: np.float32

    @property
    def shape(self) -> tuple:
        return self.codes.shape

    def packed(self) -> bytes:
        return pack_codes(self.codes.ravel(), self.bits)

    @property
    def packed_nbytes(self) -> int:
        return packed_size(self.codes.size, self.bits)


def _check_bits(bits: int) -> None:
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must be in [2, 8], got {bits}")


def _f32_down(x: float) -> np.float32:
    y = np.float32(x)
    if float(y) > x:
        y = np.nextafter(y, np.float32(-np.inf))
    return y


def _f32_up(x: float) -> np.float32:
    y = np.float32(x)
    if float(y) < x:
        y = np.nextafter(y, np.float32(np.inf))
    return y


def quantize_affine(m, bits: int) -> QTensor:
    """Quantize with ``scale = (max - min) / (2**bits - 1)``, ``zero = min``.

    Scale and zero point are stored as f32; the zero point is rounded down
    and the scale up so every code stays in range and the reconstruction
    error stays within ``scale / 2``.
    """
    _check_bits(bits)
    x = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    levels = (1 << bits) - 1
    if x.size == 0:
        return QTensor(bits, np.zeros(x.shape, np.uint8), np.float32(0), np.float32(0))
    lo, hi = float(x.min()), float(x.max())
    zero = _f32_down(lo)
    if hi == lo and float(zero) == lo:
        return QTensor(bits, np.zeros(x.shape, np.uint8), np.float32(0), zero)
    scale = _f32_up((hi - float(zero)) / levels)
    while (hi - float(zero)) / float(scale) > levels:
        scale = np.nextafter(scale, np.float32(np.inf))
    codes = np.clip(np.round((x - float(zero)) / float(scale)), 0, levels).astype(np.uint8)
    return QTensor(bits, codes, scale, zero)


def dequantize(q: QTensor) -> np.ndarray:
    return q.codes.astype(np.float64) * float(q.scale) + float(q.zero_point)


def fake_quant(m, bits: int) -> np.ndarray:
    return dequantize(quantize_affine(m, bits))


def packed_size(count: int, bits: int) -> int:
    return math.ceil(count * bits / 8)


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """LSB-first bit packing of ``bits``-wide codes."""
    _check_bits(bits)
    c = np.asarray(codes, dtype=np.uint8).ravel()
    bitplanes = ((c[:, None] >> np.arange(bits, dtype=np.uint8)) & 1).astype(np.uint8)
    return np.packbits(bitplanes.ravel(), bitorder="little").tobytes()


def unpack_codes(data: bytes, count: int, bits: int) -> np.ndarray:
    _check_bits(bits)
    if len(data) != packed_size(count, bits):
        raise ValueError(f"packed payload has {len(data)} bytes, expected {packed_size(count, bits)}")
    flat = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[: count * bits]
    planes = flat.reshape(count, bits).astype(np.uint8)
    return (planes << np.arange(bits, dtype=np.uint8)).sum(axis=1).astype(np.uint8)
