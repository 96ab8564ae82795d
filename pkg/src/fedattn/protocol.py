"""Federated request lifecycle over the simulated network.

Stages: retrieval (top-k cosine per node, global merge), collaborative rerank
(top-k to top-m), prefill of the ordered input segments, and decode.  Every
cross-node attention goes through a keyless compute node on scrambled
operands; each node is a message-driven state machine.

Role rule: a compute node never holds the key set of a domain it computes.
Domain ids equal the id of the domain's compute node, and a domain's key set
is shared by all of its non-compute participants.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import models as M
from .attention import NO_MASK, AttentionMask, AttentionShard, attention, merge_shards, shard_attention
from .netsim import (
    DType,
    Frame,
    MsgType,
    NetConfig,
    Network,
    Node,
    OrchestrationError,
    Recv,
    RunMetrics,
    Simulator,
    Sleep,
    Until,
    frame_size,
    metrics_snapshot,
)
from .scrambler import (
    KeyConfig,
    apply_phi,
    apply_phi_inv_t,
    dec_with,
    derive_head_scramblers,
    derive_token_permutation,
    enc_q,
)
from .tensor_core import RngStream

OP_PLAN, OP_PREFILL, OP_DONE = 1.0, 2.0, 3.0
RERANK_REQ_LEN = 5
TO_COMPUTE = (MsgType.SCR_Q, MsgType.SCR_KV, MsgType.RERANK_Q, MsgType.RERANK_K, MsgType.RERANK_V)
FROM_COMPUTE = (MsgType.SCR_SHARD, MsgType.SCR_STATS, MsgType.RERANK_OUT)


class RoleViolation(OrchestrationError):
    pass


# ---------------------------------------------------------------------------
# Segments and role planning


@dataclass(frozen=True)
class Segment:
    owner: int
    offset: int
    length: int
    docs: tuple = ()


@dataclass(frozen=True)
class SegmentMap:
    segments: tuple

    def __post_init__(self):
        if not self.segments:
            raise ValueError("a segment map needs at least one segment")
        pos = 0
        for s in self.segments:
            if s.offset != pos or s.length < 1:
                raise ValueError("segments must be contiguous and non-empty")
            pos += s.length

    @classmethod
    def from_lengths(cls, owned, docs=None) -> "SegmentMap":
        """``owned`` is a list of ``(owner, length)``."""
        segs, pos = [], 0
        for i, (owner, n) in enumerate(owned):
            segs.append(Segment(owner, pos, n, tuple(docs[i]) if docs else ()))
            pos += n
        return cls(tuple(segs))

    @property
    def owners(self) -> tuple:
        return tuple(s.owner for s in self.segments)

    @property
    def coordinator(self) -> int:
        return self.segments[-1].owner

    @property
    def total(self) -> int:
        return self.segments[-1].offset + self.segments[-1].length

    def max_seg(self, node: int) -> int:
        """1-based index of the last segment owned by ``node`` (0 if none)."""
        return max((i + 1 for i, o in enumerate(self.owners) if o == node), default=0)


@dataclass(frozen=True)
class RolePlan:
    nodes: tuple
    owners: tuple
    routes: tuple  # per segment: compute node ids its KV is shipped to

    @property
    def coordinator(self) -> int:
        return self.owners[-1]

    @property
    def compute_nodes(self) -> tuple:
        return tuple(sorted({c for r in self.routes for c in r}))

    def inquirers(self, j: int) -> frozenset:
        return frozenset(o for o in self.owners[j + 1:] if o != self.owners[j])

    def domain_for(self, j: int, inquirer: int) -> int:
        for c in self.routes[j]:
            if c != inquirer:
                return c
        raise RoleViolation(f"segment {j} has no compute node usable by node {inquirer}")

    def inquiry_domains(self, i: int, inquirer: int) -> tuple:
        return tuple(sorted({self.domain_for(j, inquirer) for j in range(i) if self.owners[j] != inquirer}))

    def decode_domains(self) -> tuple:
        return self.inquiry_domains(len(self.owners), self.coordinator)

    def job_segments(self, c: int, inquirer: int, i: int) -> tuple:
        return tuple(j for j in range(i) if self.owners[j] != inquirer and self.domain_for(j, inquirer) == c)

    def jobs(self, c: int, inquirer: int) -> list:
        out = [i for i, o in enumerate(self.owners) if o == inquirer and c in self.inquiry_domains(i, inquirer)]
        if inquirer == self.coordinator and c in self.decode_domains():
            out.append(len(self.owners))
        return out

    def kv_sources(self, c: int, owner: int) -> list:
        return [j for j, o in enumerate(self.owners) if o == owner and c in self.routes[j]]

    def participants(self, c: int) -> frozenset:
        out = {self.owners[j] for j, r in enumerate(self.routes) if c in r}
        for i, x in enumerate(self.owners):
            if c in self.inquiry_domains(i, x):
                out.add(x)
        if c in self.decode_domains():
            out.add(self.coordinator)
        return frozenset(out)

    def key_domains(self, node: int) -> tuple:
        return tuple(c for c in self.compute_nodes if node in self.participants(c))

    def check(self) -> None:
        """Raise if any compute node takes part in a domain it computes."""
        for c in self.compute_nodes:
            if c in self.participants(c):
                raise RoleViolation(f"node {c} would both compute and hold keys for domain {c}")


def plan_roles(segmap: SegmentMap, nodes) -> RolePlan:
    """Pick compute nodes and route every segment's KV.

    Nodes are ranked by ``(maxSeg, id)``.  A segment goes to the first ranked
    node that neither owns it nor needs it as an inquirer; a node owning no
    segment therefore serves everything.  When no such node exists the
    segment is sent to the first two ranked nodes other than its owner, and
    each of them uses the other.
    """
    nodes = tuple(sorted(set(nodes)))
    if len(nodes) < 3:
        raise ValueError("at least three physical nodes are required")
    missing = set(segmap.owners) - set(nodes)
    if missing:
        raise ValueError(f"segment owners {sorted(missing)} are not cluster nodes")
    ranked = sorted(nodes, key=lambda n: (segmap.max_seg(n), n))
    owners = segmap.owners
    routes = []
    for j, y in enumerate(owners):
        need = {o for o in owners[j + 1:] if o != y}
        if not need:
            routes.append(())
            continue
        free = [n for n in ranked if n != y and n not in need]
        if free:
            routes.append((free[0],))
        else:
            routes.append(tuple(n for n in ranked if n != y)[:2])
    plan = RolePlan(nodes, owners, tuple(routes))
    plan.check()
    return plan


# ---------------------------------------------------------------------------
# Retrieval


@dataclass(frozen=True)
class Document:
    doc_id: int
    owner: int
    ids: tuple


@dataclass(frozen=True)
class CandidateDoc:
    doc_id: int
    owner: int
    similarity: float
    score: float | None = None


class Retriever:
    """Toy embedding: token-id histogram through a seeded random projection."""

    def __init__(self, vocab_size: int, dim: int = 32, seed: int = 0):
        self.vocab_size = vocab_size
        self.dim = dim
        self.proj = RngStream(seed).child("retrieval").normal((vocab_size, dim))

    def embed(self, ids) -> np.ndarray:
        hist = np.bincount(np.asarray(ids, dtype=np.int64), minlength=self.vocab_size).astype(np.float64)
        v = hist @ self.proj
        n = np.linalg.norm(v)
        return v / n if n > 0 else v


def retrieve_local(query_vec, corpus, k: int, retriever: Retriever) -> list[CandidateDoc]:
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query_vec, dtype=np.float64)
    out = [CandidateDoc(d.doc_id, d.owner, float(retriever.embed(d.ids) @ q)) for d in corpus]
    out.sort(key=lambda c: (-c.similarity, c.doc_id))
    return out[:k]


def aggregate_candidates(lists, k_global: int) -> list[CandidateDoc]:
    flat = [c for lst in lists for c in lst]
    flat.sort(key=lambda c: (-c.similarity, c.owner, c.doc_id))
    return flat[:k_global]


def rank_by_score(cands) -> list[CandidateDoc]:
    return sorted(cands, key=lambda c: (-c.score, c.owner, c.doc_id))


# ---------------------------------------------------------------------------
# Cluster


@dataclass(frozen=True)
class ClusterConfig:
    nodes: tuple = (1, 2, 3)
    coordinator: int = 3
    seed: int = 0
    request: int = 1
    wire: str = "bf16"
    rerank_wire: str = "quant4"
    key_cfg: KeyConfig = KeyConfig()
    net: NetConfig = field(default_factory=NetConfig)
    retrieval_dim: int = 32
    leak_plaintext: bool = False  # negative control for the isolation audit
    sabotage_dec: bool = False  # negative control for the exactness check

    def __post_init__(self):
        if len(set(self.nodes)) < 3:
            raise M.ConfigError("nodes", "at least three distinct nodes are required")
        if self.coordinator not in self.nodes:
            raise M.ConfigError("coordinator", f"node {self.coordinator} is not in nodes")
        DType.parse(self.wire)
        DType.parse(self.rerank_wire)


def _flops_layer(lq: int, lk: int, cfg: M.ModelConfig) -> float:
    D, F = cfg.d_model, cfg.ffn_dim
    return 2.0 * lq * D * (4 * D + 2 * F) + 4.0 * lq * lk * D


def _payload_digest(frame: Frame) -> bytes:
    return hashlib.sha256(frame.payload).digest()


@dataclass
class RunResult:
    answer: list
    metrics: RunMetrics
    trace: bytes
    segmap: SegmentMap | None
    plan: RolePlan | None
    states: list
    margins: list
    candidates: list = field(default_factory=list)
    reranked: list = field(default_factory=list)
    audit: list = field(default_factory=list)
    token_times: list = field(default_factory=list)


class Cluster:
    def __init__(self, cfg: ClusterConfig, model: M.Model | None = None, rr_model: M.Model | None = None,
                 corpora: dict | None = None):
        self.cfg = cfg
        self.model = model
        self.rr_model = rr_model
        self.sim = Simulator()
        self.net = Network(self.sim, cfg.net)
        self.wire = DType.parse(cfg.wire)
        self.rerank_wire = DType.parse(cfg.rerank_wire)
        self.nodes: dict[int, FedNode] = {}
        for n in sorted(cfg.nodes):
            node = FedNode(n, self)
            self.nodes[n] = node
            self.net.add_node(node)
        for n, docs in (corpora or {}).items():
            if n not in self.nodes:
                raise M.ConfigError("corpora", f"node {n} is not in nodes")
            for d in docs:
                self.nodes[n].corpus[d.doc_id] = d
        self.plain_digests: set = set()
        self.plan: RolePlan | None = None
        self._participants: dict = {}
        self.net.dispatch_hooks.append(self._dispatch_check)

    def participants(self, c: int) -> frozenset:
        if c not in self._participants:
            self._participants[c] = self.plan.participants(c)
        return self._participants[c]

    @property
    def coordinator(self) -> "FedNode":
        return self.nodes[self.cfg.coordinator]

    def domain_seed(self, domain: int, tag: tuple = ()) -> int:
        """Shared secret of one domain, handed to its participants out of band."""
        return int(RngStream(self.cfg.seed).child("domain-secret", self.cfg.request, domain, *tag).raw(1)[0])

    def register_plain(self, *arrays) -> None:
        for a in arrays:
            a = np.asarray(a)
            mats = a if a.ndim == 3 else a[None]
            for m in mats:
                for dt in {self.wire, self.rerank_wire, DType.F64}:
                    self.plain_digests.add(_payload_digest(Frame.from_array(MsgType.SCR_Q, m, dt)))

    def _dispatch_check(self, src: int, dst: int, frame: Frame) -> None:
        if frame.msg_type in TO_COMPUTE:
            if dst != frame.domain:
                raise RoleViolation(f"{frame.msg_type.name} for domain {frame.domain} sent to node {dst}")
            if any(dom == dst for dom, _ in self.nodes[dst].held_keys):
                raise RoleViolation(f"node {dst} holds keys for the domain it computes")
            if self.plan is not None and frame.msg_type in (MsgType.SCR_Q, MsgType.SCR_KV):
                if dst in self.participants(dst):
                    raise RoleViolation(f"node {dst} participates in its own domain")
        if frame.msg_type in FROM_COMPUTE and src != frame.domain:
            raise RoleViolation(f"{frame.msg_type.name} from node {src} claims domain {frame.domain}")

    def send(self, src: int, dst: int, frame: Frame) -> None:
        self.net.send(src, dst, frame)

    def run(self, main) -> object:
        proc = self.sim.spawn(main, f"coordinator-{self.cfg.coordinator}")
        self.sim.run()
        return proc.result


class FedNode(Node):
    def __init__(self, node_id: int, cluster: Cluster):
        super().__init__(node_id, cluster.sim)
        self.cl = cluster
        self.corpus: dict[int, Document] = {}
        self.hinted: set = set()  # (domain, tag) this node may derive
        self.held_keys: set = set()  # (domain, tag) actually derived
        self._theta_cache: dict = {}
        self.plan: RolePlan | None = None
        self.segmap: SegmentMap | None = None
        self.query: tuple = ()
        self.own_cache: dict = {}
        self.states: dict = {}
        self.kv_store: dict = {}
        self.job_counter: dict = {}
        self.handlers = {
            MsgType.CTRL: self._on_ctrl,
            MsgType.KEY_HINT: self._on_key_hint,
            MsgType.SCR_KV: self._on_scr_kv,
            MsgType.SCR_Q: self._on_scr_q,
            MsgType.RETR_REQ: self._on_retr_req,
            MsgType.RERANK_REQ: self._on_rerank_req,
        }

    # -- plumbing -------------------------------------------------------

    @property
    def model(self) -> M.Model:
        return self.cl.model

    def send(self, dst: int, msg_type, values, dtype=DType.F64, layer=0, head=0, domain=0) -> None:
        f = Frame.from_array(msg_type, values, dtype, request=self.cl.cfg.request, layer=layer, head=head,
                             domain=domain)
        self.cl.send(self.id, dst, f)

    def recv(self, msg_type, src=None, layer=None, head=None):
        def match(f, s):
            return (f.msg_type == msg_type and (src is None or s == src)
                    and (layer is None or f.layer == layer) and (head is None or f.head == head))

        return Recv(self, match)

    def compute(self, flops: float):
        t = self.cl.cfg.net.compute.time(flops)
        if t > 0:
            yield Sleep(t)

    def theta(self, layer: int, domain: int, n_heads: int, d: int, tag: tuple = ()):
        if domain == self.id:
            raise RoleViolation(f"node {self.id} tried to derive keys for the domain it computes")
        if (domain, tag) not in self.hinted:
            raise RoleViolation(f"node {self.id} is not a participant of domain {domain} {tag}")
        self.held_keys.add((domain, tag))
        key = (layer, domain, tag, n_heads, d)
        if key not in self._theta_cache:
            seed = self.cl.domain_seed(domain, tag)
            self._theta_cache[key] = derive_head_scramblers(
                seed, self.cl.cfg.request, layer, domain, n_heads, d, self.cl.cfg.key_cfg, tag)
        return self._theta_cache[key]

    def token_perm(self, layer: int, domain: int, role: str, block: int, n: int, tag: tuple = ()):
        seed = self.cl.domain_seed(domain, tag)
        return derive_token_permutation(seed, self.cl.cfg.request, layer, domain, role, block, n,
                                         self.cl.cfg.key_cfg, tag)

    def _dec_theta(self, layer, domain, n_heads, d, tag=()):
        if self.cl.cfg.sabotage_dec:
            # wrong layer's keys: a deliberately broken descrambler
            return self.theta((layer + 1) % 65536, domain, n_heads, d, tag)
        return self.theta(layer, domain, n_heads, d, tag)

    # -- handlers -------------------------------------------------------

    def _on_ctrl(self, frame: Frame, src: int) -> None:
        vals = frame.array()
        op = vals[0]
        if op == OP_PLAN:
            self.segmap, self.plan = decode_plan(vals)
            self.notify()
        elif op == OP_PREFILL:
            i = int(vals[1])
            self.sim.spawn(self._owner_prefill(i, src), f"prefill-{self.id}-{i}")
        else:
            self.inbox.append((frame, src))

    def _on_key_hint(self, frame: Frame, src: int) -> None:
        for dom in frame.array().astype(int):
            self.hinted.add((int(dom), ()))

    def _on_retr_req(self, frame: Frame, src: int) -> None:
        vals = frame.array()
        k = int(vals[0])
        retr = Retriever(self._vocab(), self.cl.cfg.retrieval_dim, self.cl.cfg.seed)
        hits = retrieve_local(vals[1:], [self.corpus[i] for i in sorted(self.corpus)], k, retr)
        payload = np.array([[c.doc_id, c.similarity] for c in hits]).reshape(len(hits), 2)
        self.send(src, MsgType.RETR_RESP, payload)

    def _vocab(self) -> int:
        m = self.cl.model or self.cl.rr_model
        return m.cfg.vocab_size

    def _on_scr_kv(self, frame: Frame, src: int) -> None:
        kv = frame.array()
        self.kv_store.setdefault((src, frame.layer, frame.head), []).append((kv[0], kv[1]))
        self.notify()

    def _on_scr_q(self, frame: Frame, src: int) -> None:
        if frame.layer == 0 and frame.head == 0:
            self.job_counter[src] = self.job_counter.get(src, 0) + 1
        job = self.job_counter.get(src, 0) - 1
        if job < 0:
            raise OrchestrationError(f"query from node {src} arrived before any job started")
        self.sim.spawn(self._serve_q(frame, src, job), f"serve-{self.id}-{src}")

    def _on_rerank_req(self, frame: Frame, src: int) -> None:
        pair, doc_id, c, lc, lo = (int(x) for x in frame.array())
        if c == self.id:
            self.sim.spawn(self._rerank_compute(pair, src, int(doc_id), lc, lo), f"rr-compute-{pair}")
        else:
            self.hinted.add((c, ("rr", pair)))
            self.sim.spawn(self._rerank_owner(pair, src, doc_id, c, lc), f"rr-owner-{pair}")

    # -- compute role ---------------------------------------------------

    def _serve_q(self, frame: Frame, x: int, job: int):
        yield Until(self, lambda: self.plan is not None)
        plan = self.plan
        jobs = plan.jobs(self.id, x)
        if not jobs:
            raise OrchestrationError(f"node {self.id} received a query from {x} without a job")
        if job < len(jobs):
            i = jobs[job]
        elif jobs[-1] == len(plan.owners):
            i = jobs[-1]  # every decode step reuses the full context
        else:
            raise OrchestrationError(f"node {self.id}: unexpected job {job} from node {x}")
        need = []
        for j in plan.job_segments(self.id, x, i):
            y = plan.owners[j]
            need.append(((y, frame.layer, frame.head), plan.kv_sources(self.id, y).index(j)))
        if not need:
            raise OrchestrationError(f"missing prior KV for job {i} of node {x}")
        yield Until(self, lambda: all(len(self.kv_store.get(key, ())) > pos for key, pos in need))
        ks = np.concatenate([self.kv_store[key][pos][0] for key, pos in need])
        vs = np.concatenate([self.kv_store[key][pos][1] for key, pos in need])
        qs = frame.array()
        yield from self.compute(4.0 * qs.shape[0] * ks.shape[0] * qs.shape[1])
        sh = shard_attention(qs, ks, vs, NO_MASK)
        hdr = dict(layer=frame.layer, head=frame.head, domain=self.id)
        self.send(x, MsgType.SCR_SHARD, sh.output, self.cl.wire, **hdr)
        self.send(x, MsgType.SCR_STATS, np.stack([sh.row_max, sh.exp_sum]), DType.F64, **hdr)

    # -- inquirer / owner role -----------------------------------------

    def segment_tokens(self, i: int) -> np.ndarray:
        seg = self.segmap.segments[i]
        parts = [self.corpus[d].ids for d in seg.docs]
        if i == len(self.segmap.segments) - 1:
            parts.append(self.query)
        return np.concatenate([np.asarray(p, dtype=np.int64) for p in parts])

    def _send_q(self, c: int, layer: int, q, block: int):
        H, d = q.shape[0], q.shape[2]
        if self.cl.cfg.leak_plaintext:
            for hd in range(H):
                self.send(c, MsgType.SCR_Q, q[hd], self.cl.wire, layer=layer, head=hd, domain=c)
            return
        kq, _ = self.theta(layer, c, H, d)
        p_q = self.token_perm(layer, c, "q", block, q.shape[1])
        for hd in range(H):
            self.send(c, MsgType.SCR_Q, enc_q(q[hd], kq[hd], p_q), self.cl.wire, layer=layer, head=hd, domain=c)

    def _recv_shards(self, c: int, layer: int, block: int, lq: int, H: int, d: int, phase: str):
        _, phi_v = self._dec_theta(layer, c, H, d)
        p_q = self.token_perm(layer, c, "q", block, lq)
        out = []
        for hd in range(H):
            fo, _ = yield self.recv(MsgType.SCR_SHARD, c, layer, hd)
            fs, _ = yield self.recv(MsgType.SCR_STATS, c, layer, hd)
            st = fs.array()
            o, (m, s) = dec_with(fo.array(), (st[0], st[1]), phi_v[hd], p_q)
            out.append(AttentionShard(o, m, s))
        self.cl.net.count_round(phase)
        return out

    def _attend_block(self, layer: int, h, offset: int, block: int, local_cache, domains, phase: str):
        """One layer for a block of rows: dispatch scrambled Q, attend locally,
        collect and merge remote shards, then run the rest of the layer."""
        model = self.model
        H, d = model.cfg.n_heads, model.cfg.head_dim
        q, k, v = M.layer_qkv(model, layer, h)
        self.cl.register_plain(q, k, v, h)
        for c in domains:
            self._send_q(c, layer, q, block)
        lk = sum(seg.length for seg in local_cache) + h.shape[0]
        yield from self.compute(_flops_layer(h.shape[0], lk, model.cfg))
        shards = [[] for _ in range(H)]
        for hd in range(H):
            for seg in local_cache:
                shards[hd].append(shard_attention(q[hd], seg.k[layer][hd], seg.v[layer][hd], NO_MASK))
            shards[hd].append(shard_attention(q[hd], k[hd], v[hd], AttentionMask.causal(offset, offset)))
        for c in domains:
            remote = yield from self._recv_shards(c, layer, block, h.shape[0], H, d, phase)
            for hd in range(H):
                shards[hd].append(remote[hd])
        outs = [merge_shards(s) for s in shards]
        return M.layer_finish(model, layer, h, outs), k, v

    def prefill_segment(self, i: int):
        seg = self.segmap.segments[i]
        ids = self.segment_tokens(i)
        h = M.embed_tokens(self.model, ids, seg.offset)
        domains = self.plan.inquiry_domains(i, self.id)
        local = [self.own_cache[j] for j in sorted(self.own_cache) if j < i]
        ks, vs = [], []
        for layer in range(self.model.cfg.n_layers):
            h, k, v = yield from self._attend_block(layer, h, seg.offset, i, local, domains, "prefill")
            ks.append(k)
            vs.append(v)
        self.own_cache[i] = M.KVCacheSegment(self.id, seg.offset, tuple(ks), tuple(vs))
        self.states[i] = h
        self._ship_kv(i)
        return h

    def _ship_kv(self, i: int) -> None:
        cache = self.own_cache[i]
        H, d = self.model.cfg.n_heads, self.model.cfg.head_dim
        for c in self.plan.routes[i]:
            for layer in range(self.model.cfg.n_layers):
                kq, ph_v = self.theta(layer, c, H, d)
                p_kv = self.token_perm(layer, c, "kv", i, cache.length)
                for hd in range(H):
                    k = p_kv.apply_rows(cache.k[layer][hd])
                    v = p_kv.apply_rows(cache.v[layer][hd])
                    if self.cl.cfg.leak_plaintext:
                        kv = np.stack([k, v])
                    else:
                        kv = np.stack([apply_phi_inv_t(k, kq[hd]), apply_phi(v, ph_v[hd])])
                    self.send(c, MsgType.SCR_KV, kv, self.cl.wire, layer=layer, head=hd, domain=c)

    def _owner_prefill(self, i: int, coord: int):
        yield Until(self, lambda: self.plan is not None)
        yield from self.prefill_segment(i)
        self.send(coord, MsgType.CTRL, [OP_DONE, i])

    # -- rerank ---------------------------------------------------------

    def _rerank_side(self, pair: int, c: int, ids, offset: int, block: int, count_rounds: bool):
        model = self.cl.rr_model
        H, d = model.cfg.n_heads, model.cfg.head_dim
        tag = ("rr", pair)
        wire = self.cl.rerank_wire
        h = M.embed_tokens(model, ids, offset)
        n = h.shape[0]
        for layer in range(model.cfg.n_layers):
            q, k, v = M.layer_qkv(model, layer, h)
            self.cl.register_plain(q, k, v, h)
            kq, ph_v = self.theta(layer, c, H, d, tag)
            p_q = self.token_perm(layer, c, "q", block, n, tag)
            p_kv = self.token_perm(layer, c, "kv", block, n, tag)
            for hd in range(H):
                hdr = dict(layer=layer, head=hd, domain=c)
                self.send(c, MsgType.RERANK_Q, enc_q(q[hd], kq[hd], p_q), wire, **hdr)
                self.send(c, MsgType.RERANK_K, apply_phi_inv_t(p_kv.apply_rows(k[hd]), kq[hd]), wire, **hdr)
                self.send(c, MsgType.RERANK_V, apply_phi(p_kv.apply_rows(v[hd]), ph_v[hd]), wire, **hdr)
            yield from self.compute(_flops_layer(n, 0, model.cfg))
            if self.cl.cfg.sabotage_dec:
                _, ph_v = self._dec_theta(layer, c, H, d, tag)
            outs = []
            for hd in range(H):
                f, _ = yield self.recv(MsgType.RERANK_OUT, c, layer, hd)
                o, _ = dec_with(f.array(), None, ph_v[hd], p_q)
                outs.append(o)
            if count_rounds:
                self.cl.net.count_round("rerank")
            h = M.layer_finish(model, layer, h, outs)
        return h

    def _rerank_owner(self, pair: int, coord: int, doc_id: int, c: int, lc: int):
        ids = np.array(list(self.corpus[doc_id].ids) + [M.SEP])
        yield from self._rerank_side(pair, c, ids, lc, 1, False)

    def _rerank_compute(self, pair: int, coord: int, doc_id: int, lc: int, lo: int):
        model = self.cl.rr_model
        H = model.cfg.n_heads
        owner = None
        for layer in range(model.cfg.n_layers):
            for hd in range(H):
                got = {}
                for mt in (MsgType.RERANK_Q, MsgType.RERANK_K, MsgType.RERANK_V):
                    f, _ = yield self.recv(mt, coord, layer, hd)
                    got[("c", mt)] = f.array()
                for mt in (MsgType.RERANK_Q, MsgType.RERANK_K, MsgType.RERANK_V):
                    f, src = yield Recv(self, lambda f, s, mt=mt, layer=layer, hd=hd: (
                        f.msg_type == mt and s != coord and f.layer == layer and f.head == hd))
                    owner = src if owner is None else owner
                    if src != owner:
                        raise OrchestrationError("rerank frames from an unexpected node")
                    got[("o", mt)] = f.array()
                ks = np.concatenate([got[("c", MsgType.RERANK_K)], got[("o", MsgType.RERANK_K)]])
                vs = np.concatenate([got[("c", MsgType.RERANK_V)], got[("o", MsgType.RERANK_V)]])
                yield from self.compute(4.0 * (lc + lo) ** 2 * ks.shape[1])
                hdr = dict(layer=layer, head=hd, domain=self.id)
                for side, dst in (("c", coord), ("o", owner)):
                    out = attention(got[(side, MsgType.RERANK_Q)], ks, vs, NO_MASK)
                    self.send(dst, MsgType.RERANK_OUT, out, self.cl.rerank_wire, **hdr)


# ---------------------------------------------------------------------------
# Plan broadcast payload


def encode_plan(segmap: SegmentMap, plan: RolePlan) -> np.ndarray:
    vals = [OP_PLAN, len(segmap.segments)]
    for s, r in zip(segmap.segments, plan.routes):
        vals += [s.owner, s.offset, s.length, len(s.docs), *s.docs, len(r), *r]
    return np.array(vals, dtype=np.float64)


def decode_plan(vals) -> tuple[SegmentMap, RolePlan]:
    vals = [int(x) for x in np.asarray(vals)[1:]]
    n = vals[0]
    pos = 1
    segs, routes = [], []
    for _ in range(n):
        owner, off, length, nd = vals[pos:pos + 4]
        docs = tuple(vals[pos + 4:pos + 4 + nd])
        pos += 4 + nd
        nr = vals[pos]
        routes.append(tuple(vals[pos + 1:pos + 1 + nr]))
        pos += 1 + nr
        segs.append(Segment(owner, off, length, docs))
    segmap = SegmentMap(tuple(segs))
    return segmap, RolePlan((), segmap.owners, tuple(routes))


# ---------------------------------------------------------------------------
# Coordinator stages


def _retrieval(coord: FedNode, query_ids, k: int):
    cl = coord.cl
    cl.net.phase = "retrieval"
    retr = Retriever(coord._vocab(), cl.cfg.retrieval_dim, cl.cfg.seed)
    qv = retr.embed(query_ids)
    others = [n for n in sorted(cl.nodes) if n != coord.id]
    for n in others:
        coord.send(n, MsgType.RETR_REQ, np.concatenate([[k], qv]))
    lists = [retrieve_local(qv, [coord.corpus[i] for i in sorted(coord.corpus)], k, retr)]
    for n in others:
        f, _ = yield coord.recv(MsgType.RETR_RESP, n)
        rows = f.array()
        lists.append([CandidateDoc(int(r[0]), n, float(r[1])) for r in rows])
        cl.net.count_round("retrieval")
    return aggregate_candidates(lists, k)


def rerank_compute_node(nodes, coordinator: int, owner: int) -> int:
    return min(n for n in nodes if n not in (coordinator, owner))


def _rerank(coord: FedNode, query_ids, cands):
    cl = coord.cl
    cl.net.phase = "rerank"
    model = cl.rr_model
    q_ids = np.array([M.CLS] + list(query_ids) + [M.SEP])
    lc = len(q_ids)
    scored = []
    for pair, cand in enumerate(cands):
        if cand.owner == coord.id:
            s = M.rerank_score(model, query_ids, coord.corpus[cand.doc_id].ids)
        else:
            c = rerank_compute_node(cl.nodes, coord.id, cand.owner)
            lo = _doc_len(cl, cand) + 1
            req = [pair, cand.doc_id, c, lc, lo]
            coord.send(cand.owner, MsgType.RERANK_REQ, req)
            coord.send(c, MsgType.RERANK_REQ, req)
            coord.hinted.add((c, ("rr", pair)))
            h = yield from coord._rerank_side(pair, c, q_ids, 0, 0, True)
            s = M.score_from_cls(model, h[0])
        scored.append(CandidateDoc(cand.doc_id, cand.owner, cand.similarity, s))
    return rank_by_score(scored)


def _doc_len(cl: Cluster, cand: CandidateDoc) -> int:
    # lengths travel with retrieval metadata in a real deployment; the
    # simulator reads them from the owner's corpus
    return len(cl.nodes[cand.owner].corpus[cand.doc_id].ids)


def build_segment_map(cl: Cluster, top, query_len: int) -> SegmentMap:
    """Group the chosen documents by owner: other owners by id, then the
    coordinator's documents followed by the query."""
    coord = cl.cfg.coordinator
    by_owner: dict = {}
    for c in top:
        by_owner.setdefault(c.owner, []).append(c.doc_id)
    owned, docs = [], []
    for o in sorted(by_owner):
        if o == coord:
            continue
        owned.append((o, sum(len(cl.nodes[o].corpus[d].ids) for d in by_owner[o])))
        docs.append(by_owner[o])
    mine = by_owner.get(coord, [])
    owned.append((coord, sum(len(cl.nodes[coord].corpus[d].ids) for d in mine) + query_len))
    docs.append(mine)
    return SegmentMap.from_lengths(owned, docs)


def _generation(coord: FedNode, segmap: SegmentMap, max_new: int, ignore_eos: bool, t0: float, out: dict):
    cl = coord.cl
    model = cl.model
    cl.net.phase = "plan"
    plan = plan_roles(segmap, cl.nodes)
    cl.plan = plan
    coord.segmap, coord.plan = segmap, plan
    payload = encode_plan(segmap, plan)
    others = [n for n in sorted(cl.nodes) if n != coord.id]
    for n in others:
        coord.send(n, MsgType.CTRL, payload)
    for n in sorted(cl.nodes):
        doms = plan.key_domains(n)
        if n == coord.id:
            coord.hinted.update((c, ()) for c in doms)
        elif doms:
            coord.send(n, MsgType.KEY_HINT, np.array(doms, dtype=np.float64))

    cl.net.phase = "prefill"
    h = None
    for i, seg in enumerate(segmap.segments):
        if seg.owner == coord.id:
            h = yield from coord.prefill_segment(i)
        else:
            coord.send(seg.owner, MsgType.CTRL, [OP_PREFILL, i])
            yield Recv(coord, lambda f, s, i=i: (f.msg_type == MsgType.CTRL and f.array()[0] == OP_DONE
                                                 and int(f.array()[1]) == i))
            cl.net.count_round("control")

    tokens, times, margins, dec_states = [], [], [], []
    if max_new <= 0:
        out.update(tokens=tokens, times=times, margins=margins, dec_states=dec_states, plan=plan)
        return
    cl.net.phase = "decode"
    domains = plan.decode_domains()
    local = [coord.own_cache[j] for j in sorted(coord.own_cache)]
    tail = None
    pos = segmap.total
    for step in range(max_new):
        tok, margin = M._argmax_margin(M.final_logits(model, h[-1])[0])
        tokens.append(tok)
        margins.append(margin)
        times.append(cl.sim.now - t0)
        if (tok == M.EOS and not ignore_eos) or step == max_new - 1:
            break
        h = M.embed_tokens(model, [tok], pos)
        ctx = local + ([tail] if tail is not None else [])
        ks, vs = [], []
        for layer in range(model.cfg.n_layers):
            h, k, v = yield from coord._attend_block(layer, h, pos, pos, ctx, domains, "decode")
            ks.append(k)
            vs.append(v)
        dec_states.append(h)
        seg = M.KVCacheSegment(coord.id, pos, tuple(ks), tuple(vs))
        tail = seg if tail is None else tail.extend(seg)
        pos += 1
    out.update(tokens=tokens, times=times, margins=margins, dec_states=dec_states, plan=plan)


def _collect(cl: Cluster, segmap: SegmentMap | None, out: dict, **extra) -> RunResult:
    states = []
    if segmap is not None:
        states = [cl.nodes[s.owner].states[i] for i, s in enumerate(segmap.segments)]
    states += out.get("dec_states", [])
    times = out.get("times", [])
    metrics = metrics_snapshot(0.0, times, cl.net.counters)
    res = RunResult(out.get("tokens", []), metrics, cl.net.golden_trace(), segmap, out.get("plan"), states,
                    out.get("margins", []), token_times=times, **extra)
    res.audit = audit_cluster(cl)
    return res


def run_generation(cfg: ClusterConfig, model: M.Model, context, query_ids, max_new: int,
                   ignore_eos: bool = True) -> tuple[RunResult, Cluster]:
    """Prefill explicit context segments and decode at the coordinator.

    ``context`` is a list of ``(owner, ids)``; the query is the final segment,
    owned by the coordinator.
    """
    corpora: dict = {}
    owned, docs = [], []
    for i, (owner, ids) in enumerate(context):
        corpora.setdefault(owner, []).append(Document(i, owner, tuple(int(t) for t in ids)))
        owned.append((owner, len(ids)))
        docs.append([i])
    owned.append((cfg.coordinator, len(query_ids)))
    docs.append([])
    segmap = SegmentMap.from_lengths(owned, docs)
    cl = Cluster(cfg, model, None, corpora)
    cl.coordinator.query = tuple(int(t) for t in query_ids)
    out: dict = {}

    def main():
        yield from _generation(cl.coordinator, segmap, max_new, ignore_eos, cl.sim.now, out)

    cl.run(main())
    return _collect(cl, segmap, out), cl


def collaborative_rerank(cfg: ClusterConfig, rr_model: M.Model, query_ids, candidates, corpora,
                         m: int | None = None) -> tuple[list, Cluster]:
    """Score each candidate with the encoder, cross-node pairs through a
    keyless compute node; returns the top ``m`` by score."""
    cl = Cluster(cfg, None, rr_model, corpora)
    res = {}

    def main():
        res["ranked"] = yield from _rerank(cl.coordinator, query_ids, candidates)

    cl.run(main())
    ranked = res["ranked"]
    return (ranked if m is None else ranked[:m]), cl


def run_request(query_ids, corpora, cfg: ClusterConfig, model: M.Model, rr_model: M.Model, k: int = 10,
                m: int = 4, max_new: int = 32, ignore_eos: bool = False) -> tuple[RunResult, Cluster]:
    """Retrieval, rerank, prefill and decode for one request."""
    if m >= k:
        raise ValueError("m must be smaller than k")
    cl = Cluster(cfg, model, rr_model, corpora)
    coord = cl.coordinator
    coord.query = tuple(int(t) for t in query_ids)
    out: dict = {}

    def main():
        t0 = cl.sim.now
        cands = yield from _retrieval(coord, query_ids, k)
        ranked = yield from _rerank(coord, query_ids, cands)
        top = ranked[:m]
        segmap = build_segment_map(cl, top, len(query_ids))
        out.update(cands=cands, ranked=ranked, segmap=segmap)
        yield from _generation(coord, segmap, max_new, ignore_eos, t0, out)

    cl.run(main())
    return _collect(cl, out["segmap"], out, candidates=out["cands"], reranked=out["ranked"]), cl


# ---------------------------------------------------------------------------
# Audits and closed-form accounting


def audit_cluster(cl: Cluster) -> list[str]:
    """Role-safety and plaintext-isolation checks over the full frame log.

    Returns a list of violations (empty when clean).
    """
    bad = []
    for n, node in cl.nodes.items():
        for dom, tag in node.held_keys:
            if dom == n:
                bad.append(f"node {n} derived keys for domain {dom}{tag}")
    plan = cl.plan
    for r in cl.net.trace:
        f = r.frame
        if _payload_digest(f) in cl.plain_digests and f.payload:
            bad.append(f"frame {r.seq} ({f.msg_type.name} {r.src}->{r.dst}) carries a plaintext tensor")
        if f.domain == r.dst and f.msg_type not in (MsgType.CTRL, MsgType.RETR_REQ, MsgType.RERANK_REQ,
                                                     MsgType.RETR_RESP, MsgType.KEY_HINT):
            if f.msg_type not in TO_COMPUTE:
                bad.append(f"frame {r.seq} of type {f.msg_type.name} addressed to compute node {r.dst}")
        if plan is not None and f.msg_type in (MsgType.SCR_Q, MsgType.SCR_KV) and r.dst in cl.participants(r.dst):
            bad.append(f"frame {r.seq}: node {r.dst} computes a domain it participates in")
    return bad


def predict_generation(plan: RolePlan, segmap: SegmentMap, cfg: M.ModelConfig, wire, n_tokens: int,
                       n_nodes: int) -> dict:
    """Exact bytes and rounds of the plan, prefill and decode stages."""
    wire = DType.parse(wire)
    L, H, d = cfg.n_layers, cfg.n_heads, cfg.head_dim
    coord = segmap.coordinator
    f64 = DType.F64
    out = {"bytes": {}, "rounds": {}}
    plan_len = 2 + sum(5 + len(s.docs) + len(r) for s, r in zip(segmap.segments, plan.routes))
    hint = sum(frame_size((len(plan.key_domains(n)),), f64) for n in plan.nodes
               if n != coord and plan.key_domains(n))
    out["bytes"]["plan"] = (n_nodes - 1) * frame_size((plan_len,), f64) + hint
    n_remote_segs = sum(1 for s in segmap.segments if s.owner != coord)
    out["rounds"]["control"] = n_remote_segs
    pre = 2 * frame_size((2,), f64) * n_remote_segs  # trigger + done
    rounds = 0
    for i, s in enumerate(segmap.segments):
        nd = len(plan.inquiry_domains(i, s.owner))
        per = 2 * frame_size((s.length, d), wire) + frame_size((2, s.length), f64)
        pre += nd * L * H * per
        rounds += nd * L
        pre += len(plan.routes[i]) * L * H * frame_size((2, s.length, d), wire)
    out["bytes"]["prefill"] = pre
    out["rounds"]["prefill"] = rounds
    nd = len(plan.decode_domains())
    steps = max(n_tokens - 1, 0)
    out["bytes"]["decode"] = steps * L * nd * H * (2 * frame_size((1, d), wire) + frame_size((2, 1), f64))
    out["rounds"]["decode"] = steps * L * nd
    return out


def predict_retrieval(n_nodes: int, dim: int, hits_per_node) -> dict:
    f64 = DType.F64
    b = (n_nodes - 1) * frame_size((1 + dim,), f64) + sum(frame_size((h, 2), f64) for h in hits_per_node)
    return {"bytes": {"retrieval": b}, "rounds": {"retrieval": n_nodes - 1}}


def predict_rerank(pairs, cfg: M.ModelConfig, wire) -> dict:
    """``pairs`` lists ``(query_len, doc_len, remote)`` per candidate."""
    wire = DType.parse(wire)
    L, H, d = cfg.n_layers, cfg.n_heads, cfg.head_dim
    b = rounds = 0
    for ql, dl, remote in pairs:
        if not remote:
            continue
        lc, lo = ql + 2, dl + 1
        b += 2 * frame_size((RERANK_REQ_LEN,), DType.F64)
        b += L * H * 4 * (frame_size((lc, d), wire) + frame_size((lo, d), wire))
        rounds += L
    return {"bytes": {"rerank": b}, "rounds": {"rerank": rounds}}


def centralized_reference(model: M.Model, context, query_ids, max_new: int, owner: int, ignore_eos: bool = True):
    """Single-process decode of the same segments with monolithic attention."""
    segs = [(o, list(ids)) for o, ids in context] + [(owner, list(query_ids))]
    return M.decode_with_trace(model, None, max_new, M.centralized_attention, segments=segs, owner=owner,
                               ignore_eos=ignore_eos)


def max_state_deviation(a_states, b_states) -> float:
    if len(a_states) != len(b_states):
        return math.inf
    return max((float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(a_states, b_states)),
               default=0.0)
