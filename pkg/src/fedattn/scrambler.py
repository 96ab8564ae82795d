"""Structured feature scrambling ``phi = S1 P1 H P2 S2`` and the key set.

Row-vector convention throughout: a scrambled row is ``x @ phi``.  The dense
matrix is never formed on the hot path; each application is
scale -> permute -> FWHT -> permute -> scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import (
    DiagScaling,
    FloatFormat,
    Permutation,
    RngStream,
    ShapeError,
    fwht_normalized,
    is_power_of_two,
    random_diag_scaling,
    random_permutation,
    round_to_format,
    sylvester_hadamard,
)

DEFAULT_MAG_RANGE = (0.125, 8.0)


@dataclass(frozen=True)
class Scrambler:
    s1: DiagScaling
    p1: Permutation
    p2: Permutation
    s2: DiagScaling

    def __post_init__(self):
        d = self.s1.size
        if not (self.p1.size == self.p2.size == self.s2.size == d):
            raise ShapeError("scrambler components must share one dimension")
        if not is_power_of_two(d):
            raise ShapeError(f"head dimension must be a power of two, got {d}")

    @property
    def dim(self) -> int:
        return self.s1.size

    @classmethod
    def identity(cls, d: int) -> "Scrambler":
        return cls(DiagScaling.ones(d), Permutation.identity(d), Permutation.identity(d), DiagScaling.ones(d))

    def dense(self) -> np.ndarray:
        """Materialized phi; for tests and small-d analysis only."""
        h = sylvester_hadamard(self.dim)
        return (
            np.diag(self.s1.factors)
            @ self.p1.col_matrix()
            @ h
            @ self.p2.col_matrix()
            @ np.diag(self.s2.factors)
        )

    def without_s2(self) -> "Scrambler":
        return Scrambler(self.s1, self.p1, self.p2, DiagScaling.ones(self.dim))


def build_scrambler(
    d: int,
    mag_range=DEFAULT_MAG_RANGE,
    rng: RngStream | None = None,
    *,
    random_signs: bool = True,
    permute: bool = True,
    use_s2: bool = True,
) -> Scrambler:
    """Draw a fresh scrambler.

    ``random_signs``, ``permute`` and ``use_s2`` exist for degenerate test
    configurations and the S1-only quantization relaxation.
    """
    if not is_power_of_two(d):
        raise ShapeError(f"head dimension must be a power of two, got {d}")
    if rng is None:
        raise ValueError("an RngStream is required")
    s1 = random_diag_scaling(d, mag_range, rng.child("s1"), random_signs=random_signs)
    s2 = random_diag_scaling(d, mag_range, rng.child("s2"), random_signs=random_signs)
    if not use_s2:
        s2 = DiagScaling.ones(d)
    if permute:
        p1 = random_permutation(d, rng.child("p1"))
        p2 = random_permutation(d, rng.child("p2"))
    else:
        p1 = p2 = Permutation.identity(d)
    return Scrambler(s1, p1, p2, s2)


def _check(x, s: Scrambler) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != s.dim:
        raise ShapeError(f"feature dimension {x.shape[-1]} does not match scrambler dimension {s.dim}")
    return x


def apply_phi(x, s: Scrambler) -> np.ndarray:
    """``x @ phi``."""
    x = _check(x, s)
    y = s.p1.apply_cols(x * s.s1.factors)
    y = fwht_normalized(y)
    return s.p2.apply_cols(y) * s.s2.factors


def apply_phi_inv_t(x, s: Scrambler) -> np.ndarray:
    """``x @ phi^{-T}``, which equals ``x @ S1^-1 P1 H P2 S2^-1``."""
    x = _check(x, s)
    y = s.p1.apply_cols(x / s.s1.factors)
    y = fwht_normalized(y)
    return s.p2.apply_cols(y) / s.s2.factors


def apply_phi_inv(x, s: Scrambler) -> np.ndarray:
    """``x @ phi^{-1}``, which equals ``x @ S2^-1 P2^T H P1^T S1^-1``."""
    x = _check(x, s)
    y = s.p2.inverse().apply_cols(x / s.s2.factors)
    y = fwht_normalized(y)
    return s.p1.inverse().apply_cols(y) / s.s1.factors


# ---------------------------------------------------------------------------
# Key sets


@dataclass(frozen=True)
class KeyConfig:
    mag_range: tuple = DEFAULT_MAG_RANGE
    use_s2: bool = True
    random_signs: bool = True
    permute_features: bool = True
    permute_tokens: bool = True


@dataclass(frozen=True)
class ScramblerKeySet:
    """Theta for one (request, layer, compute domain): a (phi_kq, phi_v) pair
    per head plus the token permutations of the live query and key blocks."""

    request: int
    layer: int
    domain: int
    phi_kq: tuple
    phi_v: tuple
    p_q: Permutation
    p_kv: Permutation
    tag: tuple = field(default=())

    @property
    def n_heads(self) -> int:
        return len(self.phi_kq)

    @property
    def dim(self) -> int:
        return self.phi_kq[0].dim


def domain_stream(seed: int, request: int, layer: int, domain: int, tag: tuple = ()) -> RngStream:
    """Root of every key derived for one (request, layer, domain[, tag])."""
    return RngStream(seed).child("theta", request, layer, domain, *tag)


def derive_head_scramblers(
    seed: int, request: int, layer: int, domain: int, n_heads: int, d: int,
    cfg: KeyConfig = KeyConfig(), tag: tuple = (),
) -> tuple[tuple, tuple]:
    root = domain_stream(seed, request, layer, domain, tag)
    kq, v = [], []
    for h in range(n_heads):
        for out, name in ((kq, "kq"), (v, "v")):
            out.append(
                build_scrambler(
                    d, cfg.mag_range, root.child(name, h),
                    random_signs=cfg.random_signs, permute=cfg.permute_features, use_s2=cfg.use_s2,
                )
            )
    return tuple(kq), tuple(v)


def derive_token_permutation(
    seed: int, request: int, layer: int, domain: int, role: str, block: int, n: int,
    cfg: KeyConfig = KeyConfig(), tag: tuple = (),
) -> Permutation:
    """Token permutation for one block (``role`` is "q" or "kv").

    Single-row blocks always get the identity.
    """
    if n == 1 or not cfg.permute_tokens:
        return Permutation.identity(n)
    rng = domain_stream(seed, request, layer, domain, tag).child("tok", role, block, n)
    return random_permutation(n, rng)


def negotiate_keyset(
    request: int, layer: int, domain: int, L_Q: int, L_K: int, d: int, rng_seed: int,
    n_heads: int = 1, cfg: KeyConfig = KeyConfig(), tag: tuple = (),
) -> ScramblerKeySet:
    """Derive Theta from the domain's shared seed.

    Every non-compute participant of the domain calls this with the same
    arguments and obtains the same key set.
    """
    if L_Q < 1 or L_K < 1:
        raise ValueError("sequence lengths must be >= 1")
    kq, v = derive_head_scramblers(rng_seed, request, layer, domain, n_heads, d, cfg, tag)
    p_q = derive_token_permutation(rng_seed, request, layer, domain, "q", 0, L_Q, cfg, tag)
    p_kv = derive_token_permutation(rng_seed, request, layer, domain, "kv", 0, L_K, cfg, tag)
    return ScramblerKeySet(request, layer, domain, kq, v, p_q, p_kv, tag)


def identity_keyset(L_Q: int, L_K: int, d: int, n_heads: int = 1) -> ScramblerKeySet:
    ident = tuple(Scrambler.identity(d) for _ in range(n_heads))
    return ScramblerKeySet(0, 0, 0, ident, ident, Permutation.identity(L_Q), Permutation.identity(L_K))


# ---------------------------------------------------------------------------
# Enc / Dec


@dataclass(frozen=True)
class ScrambledTriple:
    q_s: np.ndarray
    k_s: np.ndarray
    v_s: np.ndarray

    def __post_init__(self):
        if self.k_s.shape[0] != self.v_s.shape[0]:
            raise ShapeError("scrambled K and V must have equal row counts")


def enc_q(q, phi_kq: Scrambler, p_q: Permutation) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[0] != p_q.size:
        raise ShapeError(f"Q has {q.shape[0]} rows, P_Q has size {p_q.size}")
    return apply_phi(p_q.apply_rows(q), phi_kq)


def enc_kv(k, v, phi_kq: Scrambler, phi_v: Scrambler, p_kv: Permutation) -> tuple[np.ndarray, np.ndarray]:
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if k.shape[0] != v.shape[0] or k.shape[0] != p_kv.size:
        raise ShapeError(f"K/V rows ({k.shape[0]}, {v.shape[0]}) do not match P_KV size {p_kv.size}")
    return apply_phi_inv_t(p_kv.apply_rows(k), phi_kq), apply_phi(p_kv.apply_rows(v), phi_v)


def enc_qkv(q, k, v, theta: ScramblerKeySet, head: int = 0, wire=None) -> ScrambledTriple:
    """``(P_Q q phi_KQ, P_KV k phi_KQ^-T, P_KV v phi_V)`` for one head.

    ``wire`` is an optional value transform (rounding or quantization)
    applied after scrambling, as happens immediately before framing.
    """
    qs = enc_q(q, theta.phi_kq[head], theta.p_q)
    ks, vs = enc_kv(k, v, theta.phi_kq[head], theta.phi_v[head], theta.p_kv)
    if wire is not None:
        qs, ks, vs = wire(qs), wire(ks), wire(vs)
    return ScrambledTriple(qs, ks, vs)


def dec_output(o_s, stats_s, theta: ScramblerKeySet, head: int = 0):
    """Undo ``P_Q`` and ``phi_V`` on a returned shard.

    ``stats_s`` is a ``(row_max, exp_sum)`` pair of per-row vectors, or
    ``None`` when only the output is returned.
    """
    o_s = np.asarray(o_s, dtype=np.float64)
    if o_s.shape[0] != theta.p_q.size:
        raise ShapeError(f"output has {o_s.shape[0]} rows, P_Q has size {theta.p_q.size}")
    return dec_with(o_s, stats_s, theta.phi_v[head], theta.p_q)


def dec_with(o_s, stats_s, phi_v: Scrambler, p_q: Permutation):
    inv = p_q.inverse()
    o = inv.apply_rows(apply_phi_inv(o_s, phi_v))
    if stats_s is None:
        return o, None
    m, s = stats_s
    return o, (inv.apply_rows(np.asarray(m)), inv.apply_rows(np.asarray(s)))


def wire_round(fmt: FloatFormat | str):
    fmt = FloatFormat(fmt)
    if fmt is FloatFormat.F64:
        return None
    return lambda x: round_to_format(x, fmt)
