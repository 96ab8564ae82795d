"""Seeded toy transformer stacks used to drive the protocol end to end.

Two architectures share one layer body: a causal decoder for generation and
a bidirectional encoder with a scalar head for reranking.  Layers are
pre-RMSNorm, multi-head attention, GeLU FFN, residuals; embeddings are tied.

Attention is delegated to a provider ``attn_fn(layer, head, q, parts)`` that
receives the query block for one head and a list of :class:`KVPart` key/value
blocks, so the same model can run centralized, sharded or scrambled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .attention import NO_MASK, AttentionMask, attention, merge_shards, scrambled_shard_attention, shard_attention
from .scrambler import (
    KeyConfig,
    ScramblerKeySet,
    dec_output,
    derive_head_scramblers,
    derive_token_permutation,
    enc_qkv,
)
from .tensor_core import RngStream, is_power_of_two

CLS, SEP, EOS, PAD = 0, 1, 2, 3
N_SPECIAL = 4


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_heads: int = 2
    head_dim: int = 16
    n_layers: int = 2
    ffn_mult: float = 2.0
    arch: str = "decoder"
    seed: int = 0
    positional: bool = False

    def __post_init__(self):
        if self.vocab_size < N_SPECIAL + 1:
            raise ConfigError("vocab_size", f"must be at least {N_SPECIAL + 1}")
        if self.n_heads < 1:
            raise ConfigError("n_heads", "must be >= 1")
        if not is_power_of_two(self.head_dim):
            raise ConfigError("head_dim", "must be a power of two")
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError("d_model", f"must equal n_heads * head_dim = {self.n_heads * self.head_dim}")
        if self.n_layers < 1:
            raise ConfigError("n_layers", "must be >= 1")
        if not self.ffn_mult > 0:
            raise ConfigError("ffn_mult", "must be > 0")
        if self.arch not in ("decoder", "encoder"):
            raise ConfigError("arch", "must be 'decoder' or 'encoder'")

    @property
    def ffn_dim(self) -> int:
        return max(1, int(round(self.d_model * self.ffn_mult)))


@dataclass(frozen=True)
class LayerWeights:
    ln1: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass(frozen=True)
class Model:
    cfg: ModelConfig
    embed: np.ndarray  # (vocab, d_model), also the unembedding
    layers: tuple
    ln_f: np.ndarray
    score_head: np.ndarray


def init_model(cfg: ModelConfig) -> Model:
    root = RngStream(cfg.seed).child("model")
    D, F = cfg.d_model, cfg.ffn_dim
    scale = 1.0 / math.sqrt(D)

    def gauss(shape, *labels):
        return root.child(*labels).normal(shape) * scale

    layers = []
    for i in range(cfg.n_layers):
        layers.append(
            LayerWeights(
                ln1=np.ones(D),
                wq=gauss((D, D), "wq", i),
                wk=gauss((D, D), "wk", i),
                wv=gauss((D, D), "wv", i),
                wo=gauss((D, D), "wo", i),
                ln2=np.ones(D),
                w1=gauss((D, F), "w1", i),
                w2=gauss((F, D), "w2", i),
            )
        )
    embed = gauss((cfg.vocab_size, D), "embed")
    return Model(cfg, embed, tuple(layers), np.ones(D), gauss((D,), "score"))


def rms_norm(x, g, eps: float = 1e-6) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * g


def gelu(x) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def sinusoidal(positions, d: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / (10000.0 ** (2 * i / d))
    out = np.zeros((pos.shape[0], d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def embed_tokens(model: Model, ids, offset: int = 0) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("token ids must be a non-empty 1-D sequence")
    if ids.min() < 0 or ids.max() >= model.cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")
    h = model.embed[ids].copy()
    if model.cfg.positional:
        h += sinusoidal(np.arange(offset, offset + ids.size), model.cfg.d_model)
    return h


def layer_qkv(model: Model, layer: int, h) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-head Q, K, V for one layer, each shaped (n_heads, L, head_dim)."""
    w = model.layers[layer]
    H, d = model.cfg.n_heads, model.cfg.head_dim
    x = rms_norm(h, w.ln1)
    L = x.shape[0]

    def split(m):
        return (x @ m).reshape(L, H, d).transpose(1, 0, 2)

    return split(w.wq), split(w.wk), split(w.wv)


def layer_finish(model: Model, layer: int, h, heads_out) -> np.ndarray:
    """Output projection, residual and the FFN block given per-head outputs."""
    w = model.layers[layer]
    a = np.asarray(heads_out).transpose(1, 0, 2).reshape(h.shape[0], -1)
    h = h + a @ w.wo
    return h + gelu(rms_norm(h, w.ln2) @ w.w1) @ w.w2


def final_logits(model: Model, h_rows) -> np.ndarray:
    return rms_norm(np.atleast_2d(h_rows), model.ln_f) @ model.embed.T


# ---------------------------------------------------------------------------
# Attention providers


@dataclass(frozen=True)
class KVPart:
    """One key/value block seen by a query block.

    ``remote`` marks blocks whose plaintext lives elsewhere; ``domain`` and
    ``block`` label them for key derivation.
    """

    k: np.ndarray
    v: np.ndarray
    mask: AttentionMask = NO_MASK
    remote: bool = False
    domain: int = 0
    block: int = 0


def centralized_attention(layer: int, head: int, q, parts) -> np.ndarray:
    """Monolithic attention over the concatenation of all parts."""
    lq = q.shape[0]
    ks = np.concatenate([p.k for p in parts])
    vs = np.concatenate([p.v for p in parts])
    allows = []
    for p in parts:
        a = p.mask.allowed(lq, p.k.shape[0])
        allows.append(np.ones((lq, p.k.shape[0]), bool) if a is None else a)
    allow = np.concatenate(allows, axis=1)
    mask = NO_MASK if allow.all() else AttentionMask("custom", allow=allow)
    return attention(q, ks, vs, mask)


def shard_merge_attention(layer: int, head: int, q, parts) -> np.ndarray:
    """Plaintext shard per part, then the exact merge."""
    return merge_shards([shard_attention(q, p.k, p.v, p.mask) for p in parts])


class ScrambledAttention:
    """In-process model of the scrambled protocol.

    Remote parts are encrypted under the key set of their domain, attended by
    a keyless routine, returned (optionally through ``wire``) and decrypted;
    local parts are plain shards.  ``wire`` transforms every scrambled tensor
    in both directions, as the transport would.
    """

    def __init__(self, seed: int, request: int = 0, key_cfg: KeyConfig = KeyConfig(), wire=None,
                 sabotage_dec: bool = False):
        self.seed = seed
        self.request = request
        self.key_cfg = key_cfg
        self.wire = wire
        self.sabotage_dec = sabotage_dec
        self._heads = lru_cache(maxsize=256)(self._derive_heads)

    def _derive_heads(self, layer, domain, n_heads, d):
        return derive_head_scramblers(self.seed, self.request, layer, domain, n_heads, d, self.key_cfg)

    def keyset(self, layer: int, domain: int, n_heads: int, d: int, q_block: int, lq: int,
               kv_block: int, lk: int) -> ScramblerKeySet:
        kq, v = self._heads(layer, domain, n_heads, d)
        args = (self.seed, self.request, layer, domain)
        p_q = derive_token_permutation(*args, "q", q_block, lq, self.key_cfg)
        p_kv = derive_token_permutation(*args, "kv", kv_block, lk, self.key_cfg)
        return ScramblerKeySet(self.request, layer, domain, kq, v, p_q, p_kv)

    def __call__(self, layer: int, head: int, q, parts, n_heads: int | None = None) -> np.ndarray:
        n_heads = head + 1 if n_heads is None else n_heads
        q_block = parts[-1].block  # the query's own block labels its permutation
        shards = []
        for p in parts:
            if not p.remote:
                shards.append(shard_attention(q, p.k, p.v, p.mask))
                continue
            if p.mask.kind != "none":
                raise ValueError("remote parts must be unmasked")
            d = q.shape[1]
            theta = self.keyset(layer, p.domain, n_heads, d, q_block, q.shape[0], p.block, p.k.shape[0])
            tri = enc_qkv(q, p.k, p.v, theta, head, self.wire)
            sh = scrambled_shard_attention(tri, NO_MASK, d)
            o_s = sh.output if self.wire is None else self.wire(sh.output)
            if self.sabotage_dec:
                theta = self.keyset(layer, p.domain + 1, n_heads, d, q_block, q.shape[0], p.block, p.k.shape[0])
            o, (m, s) = dec_output(o_s, (sh.row_max, sh.exp_sum), theta, head)
            shards.append(type(sh)(o, m, s))
        return merge_shards(shards)


# ---------------------------------------------------------------------------
# Forward passes


@dataclass(frozen=True)
class KVCacheSegment:
    owner: int
    offset: int
    k: tuple  # per layer, (n_heads, L, head_dim)
    v: tuple

    @property
    def length(self) -> int:
        return int(self.k[0].shape[1]) if self.k else 0

    def extend(self, other: "KVCacheSegment") -> "KVCacheSegment":
        if other.offset != self.offset + self.length:
            raise ValueError("segments are not contiguous")
        return replace(
            self,
            k=tuple(np.concatenate([a, b], axis=1) for a, b in zip(self.k, other.k)),
            v=tuple(np.concatenate([a, b], axis=1) for a, b in zip(self.v, other.v)),
        )


def _check_cache(cache, offset: int) -> None:
    for seg in cache:
        if seg.offset + seg.length > offset:
            raise ValueError(f"cache segment at {seg.offset}+{seg.length} overlaps position {offset}")


def decoder_layer_forward(model: Model, h, cache, layer: int, attn_fn, offset: int = 0,
                          local_owner: int = 0):
    """One decoder layer for a block of rows starting at global ``offset``.

    Cached segments (all strictly earlier) are attended unmasked; the block
    itself causally.  Segments owned by someone other than ``local_owner`` are
    passed to the provider as remote.  Returns ``(h_next, (K, V))``.
    """
    _check_cache(cache, offset)
    q, k, v = layer_qkv(model, layer, h)
    H = model.cfg.n_heads
    outs = []
    for hd in range(H):
        parts = [
            KVPart(seg.k[layer][hd], seg.v[layer][hd], NO_MASK, seg.owner != local_owner, seg.owner, seg.offset)
            for seg in cache
            if seg.length
        ]
        parts.append(KVPart(k[hd], v[hd], AttentionMask.causal(offset, offset), False, local_owner, offset))
        outs.append(_call(attn_fn, layer, hd, q[hd], parts, H))
    return layer_finish(model, layer, h, outs), (k, v)


def _call(attn_fn, layer, head, q, parts, n_heads):
    if isinstance(attn_fn, ScrambledAttention):
        return attn_fn(layer, head, q, parts, n_heads=n_heads)
    return attn_fn(layer, head, q, parts)


def prefill(model: Model, ids, cache, attn_fn, offset: int = 0, owner: int = 0):
    """Run every layer over a block; returns final hidden rows and its cache."""
    h = embed_tokens(model, ids, offset)
    ks, vs = [], []
    for layer in range(model.cfg.n_layers):
        h, (k, v) = decoder_layer_forward(model, h, cache, layer, attn_fn, offset, owner)
        ks.append(k)
        vs.append(v)
    return h, KVCacheSegment(owner, offset, tuple(ks), tuple(vs))


@dataclass
class DecodeTrace:
    tokens: list = field(default_factory=list)
    states: list = field(default_factory=list)  # final hidden rows per forward block
    margins: list = field(default_factory=list)  # top-1 minus top-2 logit per emitted token
    caches: list = field(default_factory=list)


def _argmax_margin(logits_row) -> tuple[int, float]:
    """Greedy pick and top-1 margin; CLS, SEP and PAD are never generated."""
    logits_row = np.array(logits_row, dtype=np.float64)
    logits_row[[CLS, SEP, PAD]] = -np.inf
    order = np.argsort(-logits_row, kind="stable")
    return int(order[0]), float(logits_row[order[0]] - logits_row[order[1]])


def decode_with_trace(model: Model, prompt=None, max_new: int = 16, attn_fn=centralized_attention, *,
                      segments=None, owner: int = 0, ignore_eos: bool = False) -> DecodeTrace:
    """Greedy decoding with the intermediate states kept for comparison.

    ``segments`` is an optional list of ``(owner, ids)`` context blocks that
    precede ``prompt``; each is prefilled as its own cache segment.
    """
    tr = DecodeTrace()
    if max_new <= 0:
        return tr
    blocks = list(segments or [])
    if prompt is not None:
        blocks.append((owner, prompt))
    if not blocks:
        raise ValueError("prompt must be non-empty")
    cache = []
    pos = 0
    h = None
    for own, ids in blocks:
        h, seg = prefill(model, ids, cache, attn_fn, pos, own)
        tr.states.append(h)
        cache.append(seg)
        pos += len(ids)
    tail = None
    for step in range(max_new):
        tok, margin = _argmax_margin(final_logits(model, h[-1])[0])
        tr.tokens.append(tok)
        tr.margins.append(margin)
        if (tok == EOS and not ignore_eos) or step == max_new - 1:
            break
        ctx = cache + ([tail] if tail is not None else [])
        h, seg = prefill(model, [tok], ctx, attn_fn, pos, owner)
        tr.states.append(h)
        tail = seg if tail is None else tail.extend(seg)
        pos += 1
    tr.caches = cache + ([tail] if tail is not None else [])
    return tr


def greedy_decode(model: Model, prompt, max_new: int, attn_fn=centralized_attention, **kw) -> list[int]:
    return decode_with_trace(model, prompt, max_new, attn_fn, **kw).tokens


# ---------------------------------------------------------------------------
# Encoder reranker


def rerank_input(query_ids, doc_ids) -> tuple[np.ndarray, int]:
    """``CLS q SEP d SEP`` and the length of the query-side block."""
    q = list(query_ids)
    d = list(doc_ids)
    if not q or not d:
        raise ValueError("query and document must be non-empty")
    ids = [CLS] + q + [SEP] + d + [SEP]
    return np.array(ids, dtype=np.int64), len(q) + 2


def encoder_layer_forward(model: Model, h, layer: int, attn_fn, remote: bool = False, domain: int = 0):
    q, k, v = layer_qkv(model, layer, h)
    H = model.cfg.n_heads
    outs = [_call(attn_fn, layer, hd, q[hd], [KVPart(k[hd], v[hd], NO_MASK, remote, domain, 0)], H)
            for hd in range(H)]
    return layer_finish(model, layer, h, outs)


def rerank_hidden(model: Model, query_ids, doc_ids, attn_fn=centralized_attention, remote: bool = False):
    if model.cfg.arch != "encoder":
        raise ValueError("reranking needs an encoder model")
    ids, _ = rerank_input(query_ids, doc_ids)
    h = embed_tokens(model, ids)
    for layer in range(model.cfg.n_layers):
        h = encoder_layer_forward(model, h, layer, attn_fn, remote)
    return h


def score_from_cls(model: Model, h_cls) -> float:
    return float(rms_norm(np.asarray(h_cls), model.ln_f) @ model.score_head)


def rerank_score(model: Model, query_ids, doc_ids, attn_fn=centralized_attention, remote: bool = False) -> float:
    """Relevance score from the final CLS state."""
    return score_from_cls(model, rerank_hidden(model, query_ids, doc_ids, attn_fn, remote)[0])
