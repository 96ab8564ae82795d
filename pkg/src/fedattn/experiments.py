"""Experiment harnesses: precision stability, quantization sweeps, presets."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import models as M
from .attention import attention
from .protocol import ClusterConfig, Document, CandidateDoc, collaborative_rerank, run_generation
from .quant import fake_quant
from .scrambler import KeyConfig, Scrambler, apply_phi, apply_phi_inv, apply_phi_inv_t, build_scrambler
from .tensor_core import DiagScaling, FloatFormat, RngStream, round_to_format

# ---------------------------------------------------------------------------
# Workload presets: (context tokens per node, query tokens, new tokens)

PRESETS = {
    "short": (256, 32, 32),
    "medium": (1024, 64, 64),
    "long": (4096, 128, 128),
}


def random_tokens(rng: RngStream, n: int, vocab: int) -> list[int]:
    """Uniform non-special token ids."""
    u = rng.uniform(n)
    return [int(M.N_SPECIAL + x) for x in np.floor(u * (vocab - M.N_SPECIAL))]


# ---------------------------------------------------------------------------
# Precision stability


@dataclass(frozen=True)
class StabilityRow:
    variant: str
    seq: int
    rel_error: float  # mean over scrambler draws
    median: float
    spread: tuple  # (min, max) over draws


def anisotropic_qkv(rng: RngStream, seq: int, d: int, logit_std: float = 2.0):
    """Q, K, V rows with a power-law spectrum and a shared mean direction.

    Q and K are rescaled so the attention logits ``q k^T / sqrt(d)`` have
    standard deviation ``logit_std``.
    """
    out = []
    for name in ("q", "k", "v"):
        g = rng.child(name)
        basis, _ = np.linalg.qr(g.child("basis").normal((d, d)))
        lam = np.arange(1, d + 1, dtype=np.float64) ** -1.2
        z = g.child("z").normal((seq, d)) * np.sqrt(lam * d / lam.sum())
        out.append(z @ basis.T + 0.5 * g.child("mu").normal((1, d)))
    q, k, v = out
    c = math.sqrt(logit_std / np.std(q @ k.T / math.sqrt(d)))
    return q * c, k * c, v


def _structured_path(q, k, v, rng, d, mag_range, rnd):
    def stored(s):
        # scaling factors live in the wire format like any other operand
        return Scrambler(DiagScaling(rnd(s.s1.factors)), s.p1, s.p2, DiagScaling(rnd(s.s2.factors)))

    s_kq = stored(build_scrambler(d, mag_range, rng.child("kq")))
    s_v = stored(build_scrambler(d, mag_range, rng.child("v")))
    o_s = rnd(attention(rnd(apply_phi(q, s_kq)), rnd(apply_phi_inv_t(k, s_kq)), rnd(apply_phi(v, s_v))))
    return rnd(apply_phi_inv(o_s, s_v))


def _dense_path(q, k, v, rng, d, rnd):
    g_kq = rnd(rng.child("dense-kq").normal((d, d)))
    g_v = rnd(rng.child("dense-v").normal((d, d)))
    g_kq_inv_t = rnd(np.linalg.inv(g_kq).T)
    g_v_inv = rnd(np.linalg.inv(g_v))
    o_s = rnd(attention(rnd(q @ g_kq), rnd(k @ g_kq_inv_t), rnd(v @ g_v)))
    return rnd(o_s @ g_v_inv)


def stability_errors(variant: str, seq: int, d: int = 128, fmt="bf16", seed: int = 0, draws: int = 9,
                     mag_range=(0.125, 8.0), logit_std: float = 2.0) -> list[float]:
    """Relative Frobenius error against f64 attention, one value per draw.

    Every stored tensor is rounded to ``fmt``: the inputs, the scrambling
    operator entries, each scrambled operand, the compute party's output and
    the descrambled result.  Each product accumulates in f64 and is rounded
    once, like a low-precision matmul with a wide accumulator.
    """
    fmt = FloatFormat(fmt)

    def rnd(x):
        return round_to_format(x, fmt)

    root = RngStream(seed).child("stability", seq, d)
    q, k, v = anisotropic_qkv(root.child("data"), seq, d, logit_std)
    ref = attention(q, k, v)
    q, k, v = rnd(q), rnd(k), rnd(v)
    errs = []
    for t in range(draws):
        rng = root.child(variant, t)
        if variant == "structured":
            out = _structured_path(q, k, v, rng, d, mag_range, rnd)
        elif variant == "dense_random":
            out = _dense_path(q, k, v, rng, d, rnd)
        elif variant == "plain":
            out = rnd(attention(q, k, v))
        else:
            raise ValueError(f"unknown variant {variant!r}")
        errs.append(float(np.linalg.norm(out - ref) / np.linalg.norm(ref)))
    return errs


def stability_table(seqs=(128, 512, 2048), d: int = 128, fmt="bf16", seed: int = 0, draws: int = 9,
                    variants=("structured", "dense_random"), logit_std: float = 2.0) -> list[StabilityRow]:
    rows = []
    for v in variants:
        for s in seqs:
            e = stability_errors(v, s, d, fmt, seed, draws, logit_std=logit_std)
            rows.append(StabilityRow(v, s, float(np.mean(e)), float(np.median(e)), (min(e), max(e))))
    return rows


# ---------------------------------------------------------------------------
# Rerank quantization sweep


def edit_distance(a, b) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class RerankRequest:
    query: tuple
    corpora: dict
    candidates: tuple


def synthetic_rerank_requests(n: int, vocab: int, seed: int = 0, n_docs: int = 10, query_len: int = 16,
                              doc_len: int = 32, owners=(1, 2)) -> list[RerankRequest]:
    """Random queries with documents spread round-robin over ``owners``."""
    out = []
    for r in range(n):
        rng = RngStream(seed).child("rerank-request", r)
        query = tuple(random_tokens(rng.child("q"), query_len, vocab))
        corpora: dict = {o: [] for o in owners}
        cands = []
        for i in range(n_docs):
            o = owners[i % len(owners)]
            doc = Document(i, o, tuple(random_tokens(rng.child("doc", i), doc_len, vocab)))
            corpora[o].append(doc)
            cands.append(CandidateDoc(i, o, 0.0))
        out.append(RerankRequest(query, corpora, tuple(cands)))
    return out


@dataclass(frozen=True)
class SweepRow:
    wire: str
    acc1: float
    acc3: float
    l1: float
    edit: float


def _ranking_metrics(ref, got):
    r_ids = [c.doc_id for c in ref]
    g_ids = [c.doc_id for c in got]
    acc1 = float(r_ids[0] == g_ids[0])
    acc3 = len(set(r_ids[:3]) & set(g_ids[:3])) / 3.0
    rs = {c.doc_id: c.score for c in ref}
    l1 = float(np.mean([abs(c.score - rs[c.doc_id]) for c in got]))
    return acc1, acc3, l1, edit_distance(r_ids, g_ids)


def rerank_quant_sweep(rr_model: M.Model, requests, bits_list=(8, 4, 3, 2), base: ClusterConfig | None = None,
                       reference_wire: str = "f32") -> list[SweepRow]:
    """Agreement of quantized collaborative rerank with the reference wire."""
    base = base or ClusterConfig()
    refs = []
    for r in requests:
        ranked, _ = collaborative_rerank(replace(base, rerank_wire=reference_wire), rr_model, r.query,
                                         r.candidates, r.corpora)
        refs.append(ranked)
    rows = []
    for bits in bits_list:
        wire = f"quant{bits}"
        stats = []
        for r, ref in zip(requests, refs):
            got, _ = collaborative_rerank(replace(base, rerank_wire=wire), rr_model, r.query, r.candidates,
                                          r.corpora)
            stats.append(_ranking_metrics(ref, got))
        a = np.array(stats)
        rows.append(SweepRow(wire, *(float(x) for x in a.mean(axis=0))))
    return rows


# ---------------------------------------------------------------------------
# Decode quantization ablation


@dataclass(frozen=True)
class AblationRow:
    mode: str
    bits: int | None
    mag_range: tuple
    token_agreement: float
    logit_deviation: float


def decode_quant_ablation(model: M.Model, seeds, bits: int | None = 8, mode: str = "S1_and_S2",
                          mag_range=(0.125, 8.0), ctx_len: int = 64, query_len: int = 16,
                          max_new: int = 16) -> AblationRow:
    """Scrambled decode with quantized wire tensors vs the f64 reference.

    Agreement is measured per step with teacher forcing: both runs see the
    reference token history, so one early flip does not cascade.
    """
    if mode not in ("S1_and_S2", "S1_only"):
        raise ValueError(f"unknown scrambler mode {mode!r}")
    key_cfg = KeyConfig(mag_range=tuple(mag_range), use_s2=(mode == "S1_and_S2"))
    wire = None if bits is None else (lambda x: fake_quant(x, bits))
    vocab = model.cfg.vocab_size
    agree, dev, n = 0, 0.0, 0
    for seed in seeds:
        rng = RngStream(seed).child("ablation")
        ctx = [(1, random_tokens(rng.child("c1"), ctx_len // 2, vocab)),
               (2, random_tokens(rng.child("c2"), ctx_len - ctx_len // 2, vocab))]
        prompt = random_tokens(rng.child("q"), query_len, vocab)
        ref = M.decode_with_trace(model, prompt, max_new, M.centralized_attention, segments=ctx, owner=3,
                                  ignore_eos=True)
        provider = M.ScrambledAttention(seed, key_cfg=key_cfg, wire=wire)
        hist = ctx + [(3, prompt)]
        got_logits = _teacher_forced_logits(model, hist, ref.tokens, provider)
        ref_logits = _teacher_forced_logits(model, hist, ref.tokens, M.centralized_attention)
        for gl, rl in zip(got_logits, ref_logits):
            agree += int(np.argmax(gl) == np.argmax(rl))
            dev += float(np.mean(np.abs(gl - rl)))
            n += 1
    return AblationRow(mode, bits, tuple(mag_range), agree / n, dev / n)


def _teacher_forced_logits(model, blocks, tokens, attn_fn):
    cache, pos, h = [], 0, None
    for own, ids in blocks:
        h, seg = M.prefill(model, ids, cache, attn_fn, pos, own)
        cache.append(seg)
        pos += len(ids)
    owner = blocks[-1][0]
    logits = [M.final_logits(model, h[-1])[0]]
    tail = None
    for tok in tokens[:-1]:
        ctx = cache + ([tail] if tail is not None else [])
        h, seg = M.prefill(model, [tok], ctx, attn_fn, pos, owner)
        tail = seg if tail is None else tail.extend(seg)
        pos += 1
        logits.append(M.final_logits(model, h[-1])[0])
    return logits


# ---------------------------------------------------------------------------
# Generation workloads


def generation_workload(ctx_per_node: int, query_len: int, vocab: int, seed: int = 0, owners=(1, 2)):
    rng = RngStream(seed).child("workload", ctx_per_node, query_len)
    ctx = [(o, random_tokens(rng.child("ctx", o), ctx_per_node, vocab)) for o in owners]
    return ctx, random_tokens(rng.child("query"), query_len, vocab)


def run_preset_generation(name: str, model: M.Model, cfg: ClusterConfig, seed: int = 0, query_len=None):
    ctx_len, q_len, new = PRESETS[name]
    ctx, query = generation_workload(ctx_len, q_len if query_len is None else query_len,
                                     model.cfg.vocab_size, seed)
    return run_generation(cfg, model, ctx, query, new, ignore_eos=True)


def preset_corpora(name: str, vocab: int, seed: int = 0, placement=None, doc_len: int | None = None):
    """Synthetic corpora for a preset; ``placement`` maps owner id to document count.

    Documents default to ``ctx / 4`` tokens, so the top four fill one
    preset context.
    """
    ctx_len, q_len, new = PRESETS[name]
    return workload_corpora(ctx_len, q_len, vocab, seed, placement, doc_len) + (new,)


def workload_corpora(ctx_len: int, query_len: int, vocab: int, seed: int = 0, placement=None,
                     doc_len: int | None = None):
    placement = {1: 5, 2: 5} if placement is None else placement
    doc_len = max(1, ctx_len // 4) if doc_len is None else doc_len
    rng = RngStream(seed).child("corpus", ctx_len, query_len)
    corpora = {
        o: [Document(o * 1000 + i, o, tuple(random_tokens(rng.child(o, i), doc_len, vocab))) for i in range(n)]
        for o, n in sorted(placement.items())
    }
    return corpora, random_tokens(rng.child("query"), query_len, vocab)
