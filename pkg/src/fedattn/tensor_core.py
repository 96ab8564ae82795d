"""Dense f64 linear algebra, seeded randomness and low-precision emulation.

Matrices are plain 2-D ``float64`` numpy arrays.  Low precision only enters
through :func:`round_to_format`; everything else computes in f64.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    m = as_matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Float formats


class FloatFormat(str, enum.Enum):
    F64 = "f64"
    F32 = "f32"
    BF16 = "bf16"
    F16 = "f16"

    @property
    def mantissa_bits(self) -> int:
        return _FORMAT_PARAMS[self][0]

    @property
    def min_normal_exp(self) -> int:
        return _FORMAT_PARAMS[self][1]

    @property
    def max_finite(self) -> float:
        return _FORMAT_PARAMS[self][2]

    @property
    def width(self) -> int:
        """Bytes per value on the wire."""
        return _FORMAT_PARAMS[self][3]


_FORMAT_PARAMS = {
    FloatFormat.F64: (52, -1022, float(np.finfo(np.float64).max), 8),
    FloatFormat.F32: (23, -126, float(np.finfo(np.float32).max), 4),
    FloatFormat.BF16: (7, -126, (2.0 - 2.0**-7) * 2.0**127, 2),
    FloatFormat.F16: (10, -14, 65504.0, 2),
}


def round_to_format(m, fmt: FloatFormat | str) -> np.ndarray:
    """Round every entry to the nearest value representable in ``fmt``.

    Round-to-nearest-even directly from f64 (no double rounding through f32).
    Subnormals of the target format are honoured.  Values beyond the largest
    finite number saturate to it.
    """
    fmt = FloatFormat(fmt)
    x = np.asarray(m, dtype=np.float64)
    if fmt is FloatFormat.F64:
        return x.copy()
    p = fmt.mantissa_bits
    _, e = np.frexp(x)
    # |x| in [2**(e-1), 2**e): spacing of p-bit mantissa is 2**(e-1-p)
    shift = np.maximum(e - 1 - p, fmt.min_normal_exp - p)
    out = np.ldexp(np.round(np.ldexp(x, -shift)), shift)
    top = fmt.max_finite
    return np.clip(out, -top, top)


# ---------------------------------------------------------------------------
# Walsh-Hadamard


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def fwht_normalized(x) -> np.ndarray:
    """Apply the orthonormal Sylvester Hadamard transform along the last axis.

    Butterflies use only additions and subtractions; the single ``1/sqrt(d)``
    scale is applied once at the end.
    """
    a = np.array(x, dtype=np.float64, copy=True)
    d = a.shape[-1]
    if not is_power_of_two(d):
        raise ShapeError(f"Hadamard dimension must be a power of two, got {d}")
    lead = a.shape[:-1]
    h = 1
    while h < d:
        blocks = a.reshape(*lead, d // (2 * h), 2, h)
        top = blocks[..., 0, :].copy()
        bot = blocks[..., 1, :]
        blocks[..., 0, :] = top + bot
        blocks[..., 1, :] = top - bot
        h *= 2
    return a * (1.0 / math.sqrt(d))


def sylvester_hadamard(d: int) -> np.ndarray:
    """Dense normalized Sylvester matrix (test oracle and small-d use)."""
    if not is_power_of_two(d):
        raise ShapeError(f"Hadamard dimension must be a power of two, got {d}")
    h = np.ones((1, 1))
    while h.shape[0] < d:
        h = np.block([[h, h], [h, -h]])
    return h / math.sqrt(d)


# ---------------------------------------------------------------------------
# Randomness
#
# Streams are Philox4x64 keyed through numpy's SeedSequence.  Only raw 64-bit
# outputs of the bit generator are consumed, and every derived quantity
# (uniform doubles, bounded integers, permutations, Gaussians) is computed
# here, so results do not depend on numpy's Generator method implementations.


def _label_words(label) -> list[int]:
    if isinstance(label, str):
        return list(label.encode("utf-8")) + [0x100]
    v = int(label)
    if v < 0:
        raise ValueError("stream labels must be non-negative")
    words = []
    while True:
        words.append(v & 0xFFFFFFFF)
        v >>= 32
        if not v:
            break
    return words + [0x200 + len(words)]


class RngStream:
    """Deterministic counter-based random stream.

    ``RngStream(seed).child("theta", 3, 1)`` derives an independent
    sub-stream; identical (seed, labels) always give identical output.
    """

    def __init__(self, seed: int, labels: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.labels = tuple(labels)
        spawn_key = []
        for lab in self.labels:
            spawn_key.extend(_label_words(lab))
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(spawn_key))
        self._bitgen = np.random.Philox(ss)

    def child(self, *labels) -> "RngStream":
        return RngStream(self.seed, self.labels + tuple(labels))

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(n).astype(np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits of each raw word."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def below(self, bound: int) -> int:
        """Unbiased integer in [0, bound) by rejection sampling."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        if bound == 1:
            return 0
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            r = int(self.raw(1)[0])
            if r < limit:
                return r % bound

    def normal(self, shape) -> np.ndarray:
        """Standard normals via Box-Muller."""
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1]
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(shape)

    def signs(self, n: int) -> np.ndarray:
        bits = self.raw(n) >> np.uint64(63)
        return np.where(bits == 1, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Permutations and diagonal scalings


@dataclass(frozen=True, eq=False)
class Permutation:
    """Bijection on ``range(size)``.

    As a row operation, ``apply_rows(x)`` returns ``x[forward]``.  As a
    feature operation, ``apply_cols(x)`` returns ``x[:, forward]``, i.e. right
    multiplication by the matrix with ``P[forward[j], j] = 1``.
    """

    forward: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.forward, dtype=np.int64)
        if f.ndim != 1 or not np.array_equal(np.sort(f), np.arange(f.size)):
            raise ValueError("forward is not a permutation")
        f.setflags(write=False)
        object.__setattr__(self, "forward", f)

    @property
    def size(self) -> int:
        return int(self.forward.size)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.forward)
        inv[self.forward] = np.arange(self.size)
        return Permutation(inv)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.forward, np.arange(self.size)))

    def apply_rows(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[self.forward]

    def apply_cols(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[..., self.forward]

    def col_matrix(self) -> np.ndarray:
        """Dense P with ``x @ P == apply_cols(x)``."""
        p = np.zeros((self.size, self.size))
        p[self.forward, np.arange(self.size)] = 1.0
        return p

    def __eq__(self, other):
        return isinstance(other, Permutation) and np.array_equal(self.forward, other.forward)

    def __hash__(self):
        return hash(self.forward.tobytes())


def random_permutation(n: int, rng: RngStream) -> Permutation:
    """Uniform permutation by Fisher-Yates over the stream."""
    if n < 1:
        raise ValueError("permutation size must be >= 1")
    a = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        a[i], a[j] = a[j], a[i]
    return Permutation(np.array(a))


@dataclass(frozen=True, eq=False)
class DiagScaling:
    factors: np.ndarray

    def __post_init__(self):
        f = np.array(self.factors, dtype=np.float64)
        if f.ndim != 1 or np.any(f == 0) or not np.all(np.isfinite(f)):
            raise ValueError("scaling factors must be finite and nonzero")
        f.setflags(write=False)
        object.__setattr__(self, "factors", f)

    @property
    def size(self) -> int:
        return int(self.factors.size)

    @classmethod
    def ones(cls, n: int) -> "DiagScaling":
        return cls(np.ones(n))

    def inverse(self) -> "DiagScaling":
        return DiagScaling(1.0 / self.factors)

    def __eq__(self, other):
        return isinstance(other, DiagScaling) and np.array_equal(self.factors, other.factors)

    def __hash__(self):
        return hash(self.factors.tobytes())


def random_diag_scaling(
    d: int, mag_range=(0.125, 8.0), rng: RngStream | None = None, random_signs: bool = True
) -> DiagScaling:
    """Log-uniform magnitudes on ``mag_range`` with independent fair signs."""
    lo, hi = float(mag_range[0]), float(mag_range[1])
    if not (0 < lo <= hi) or not math.isfinite(hi):
        raise ValueError(f"invalid magnitude range [{lo}, {hi}]")
    if rng is None:
        raise ValueError("an RngStream is required")
    u = rng.uniform(d)
    mags = np.exp(math.log(lo) + u * (math.log(hi) - math.log(lo)))
    mags = np.clip(mags, lo, hi)
    signs = rng.signs(d) if random_signs else np.ones(d)
    return DiagScaling(mags * signs)
