"""Plaintext attention, per-shard partial attention and the exact merge.

A shard carries its locally normalized output together with the per-row
max logit and the sum of ``exp(logit - max)``.  The unnormalized weight of a
shard row is ``exp_sum * exp(row_max)``; it is never formed directly because
``exp(row_max)`` overflows for large logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scrambler import ScrambledTriple
from .tensor_core import ShapeError


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionMask:
    """``kind`` is "none", "causal" or "custom".

    For causal masks, query row ``i`` sits at global position ``q_offset + i``
    and key row ``j`` at ``k_offset + j``; a key is visible when its position
    is not later than the query's.
    """

    kind: str = "none"
    q_offset: int = 0
    k_offset: int = 0
    allow: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("none", "causal", "custom"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.kind == "custom" and self.allow is None:
            raise ValueError("custom mask needs an allow matrix")

    @classmethod
    def causal(cls, q_offset: int = 0, k_offset: int = 0) -> "AttentionMask":
        return cls("causal", q_offset, k_offset)

    def allowed(self, lq: int, lk: int) -> np.ndarray | None:
        if self.kind == "none":
            return None
        if self.kind == "causal":
            qpos = self.q_offset + np.arange(lq)[:, None]
            kpos = self.k_offset + np.arange(lk)[None, :]
            return kpos <= qpos
        allow = np.asarray(self.allow, dtype=bool)
        if allow.shape != (lq, lk):
            raise ShapeError(f"mask shape {allow.shape} does not match ({lq}, {lk})")
        return allow


NO_MASK = AttentionMask()


def _check_qkv(q, k, v, d):
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("q, k, v must be matrices")
    if q.shape[1] != d or k.shape[1] != d:
        raise ShapeError(f"q/k feature dims {q.shape[1]}, {k.shape[1]} do not match d={d}")
    if v.shape[0] != k.shape[0]:
        raise ShapeError(f"v has {v.shape[0]} rows but k has {k.shape[0]}")
    return q, k, v


def _logits(q, k, mask, d):
    logits = (q @ k.T) * (1.0 / math.sqrt(d))
    allow = mask.allowed(q.shape[0], k.shape[0])
    if allow is not None:
        logits = np.where(allow, logits, -np.inf)
    return logits


def attention(q, k, v, mask: AttentionMask = NO_MASK, d: int | None = None) -> np.ndarray:
    """``softmax(q k^T / sqrt(d)) v`` with masked logits at -inf."""
    d = np.shape(q)[1] if d is None else d
    q, k, v = _check_qkv(q, k, v, d)
    logits = _logits(q, k, mask, d)
    row_max = logits.max(axis=1, keepdims=True)
    if np.any(np.isneginf(row_max)):
        raise MaskError("a query row has no visible keys")
    w = np.exp(logits - row_max)
    return (w / w.sum(axis=1, keepdims=True)) @ v


@dataclass(frozen=True)
class AttentionShard:
    output: np.ndarray
    row_max: np.ndarray
    exp_sum: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        """The literal unnormalized weight ``exp_sum * exp(row_max)``.

        Overflows for large logits; kept for checking the textbook identity.
        """
        return self.exp_sum * np.exp(self.row_max)


def shard_attention(q, k_i, v_i, mask: AttentionMask = NO_MASK, d: int | None = None) -> AttentionShard:
    """Attention over one shard of keys, with its normalization statistics.

    Rows with no visible key come back as zero output, ``row_max = -inf``
    and ``exp_sum = 0``; :func:`merge_shards` ignores them.
    """
    d = np.shape(q)[1] if d is None else d
    q, k_i, v_i = _check_qkv(q, k_i, v_i, d)
    lq = q.shape[0]
    if k_i.shape[0] == 0:
        return AttentionShard(np.zeros((lq, v_i.shape[1])), np.full(lq, -np.inf), np.zeros(lq))
    logits = _logits(q, k_i, mask, d)
    row_max = logits.max(axis=1)
    dead = np.isneginf(row_max)
    safe_max = np.where(dead, 0.0, row_max)
    w = np.exp(logits - safe_max[:, None])
    exp_sum = w.sum(axis=1)
    denom = np.where(dead, 1.0, exp_sum)
    out = (w / denom[:, None]) @ v_i
    return AttentionShard(out, row_max, exp_sum)


def merge_shards(shards) -> np.ndarray:
    """Exact global attention from per-shard results (running-max form)."""
    shards = list(shards)
    if not shards:
        raise ValueError("no shards to merge")
    if len(shards) == 1:
        only = shards[0]
        if np.any(only.exp_sum <= 0):
            raise MaskError("a query row has no visible keys in any shard")
        return only.output.copy()
    lq, dv = shards[0].output.shape
    for s in shards:
        if s.output.shape != (lq, dv):
            raise ShapeError("shards disagree on output shape")
    maxes = np.stack([s.row_max for s in shards])
    top = maxes.max(axis=0)
    if np.any(np.isneginf(top)):
        raise MaskError("a query row has no visible keys in any shard")
    num = np.zeros((lq, dv))
    den = np.zeros(lq)
    for s in shards:
        scale = s.exp_sum * np.exp(s.row_max - top)
        num += scale[:, None] * s.output
        den += scale
    return num / den[:, None]


def scrambled_shard_attention(triple: ScrambledTriple, mask: AttentionMask = NO_MASK, d: int | None = None) -> AttentionShard:
    """What the keyless compute party runs: ordinary shard attention on
    scrambled operands."""
    return shard_attention(triple.q_s, triple.k_s, triple.v_s, mask, d)
