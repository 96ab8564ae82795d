"""Discrete-event message transport, bit-exact frame codec and accounting.

Frame layout (little-endian)::

    magic     4s   b"FATN"
    version   u8
    msg_type  u8
    request   u64
    layer     u16
    head      u16
    domain    u16
    dtype     u8
    ndims     u32
    dims      u32 * ndims
    payload   row-major values (quantN: packed codes, then scale f32, zero f32)
    crc32     u32  over every preceding byte

Node behaviour is written as generator processes that yield :class:`Sleep`,
:class:`Recv`, :class:`Until` or :class:`Join` commands.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import quant
from .tensor_core import FloatFormat, round_to_format

MAGIC = b"FATN"
VERSION = 1
_HEADER = struct.Struct("<4sBBQHHHBI")
HEADER_SIZE = _HEADER.size  # 25
CRC_SIZE = 4
MIB = 1 << 20


class FrameError(ValueError):
    pass


class OrchestrationError(RuntimeError):
    pass


class MsgType(enum.IntEnum):
    CTRL = 0
    KEY_HINT = 1
    SCR_KV = 2
    SCR_Q = 3
    SCR_SHARD = 4
    SCR_STATS = 5
    RETR_REQ = 6
    RETR_RESP = 7
    RERANK_REQ = 8
    RERANK_Q = 9
    RERANK_K = 10
    RERANK_V = 11
    RERANK_OUT = 12
    RERANK_DONE = 13


class DType(enum.IntEnum):
    F64 = 0x00
    F32 = 0x01
    BF16 = 0x02
    F16 = 0x03
    QUANT2 = 0x12
    QUANT3 = 0x13
    QUANT4 = 0x14
    QUANT5 = 0x15
    QUANT6 = 0x16
    QUANT7 = 0x17
    QUANT8 = 0x18

    @property
    def quant_bits(self) -> int | None:
        return self.value - 0x10 if self.value >= 0x12 else None

    @property
    def float_format(self) -> FloatFormat | None:
        return {0: FloatFormat.F64, 1: FloatFormat.F32, 2: FloatFormat.BF16, 3: FloatFormat.F16}.get(self.value)

    @classmethod
    def parse(cls, spec) -> "DType":
        """Accept "f64", "bf16", "quant4", ``FloatFormat`` or a ``DType``."""
        if isinstance(spec, DType):
            return spec
        if isinstance(spec, FloatFormat):
            spec = spec.value
        s = str(spec).lower()
        if s.startswith("quant"):
            return cls(0x10 + int(s[5:]))
        return {"f64": cls.F64, "f32": cls.F32, "bf16": cls.BF16, "f16": cls.F16}[s]

    @property
    def label(self) -> str:
        return f"quant{self.quant_bits}" if self.quant_bits else self.float_format.value


def payload_size(dtype: DType, count: int) -> int:
    bits = dtype.quant_bits
    if bits:
        return quant.packed_size(count, bits) + 8
    return count * dtype.float_format.width


def frame_size(dims, dtype=DType.F64) -> int:
    """Encoded size of a frame; the closed form used by traffic predictions."""
    dtype = DType.parse(dtype)
    count = int(np.prod(dims)) if len(dims) else 0
    return HEADER_SIZE + 4 * len(dims) + payload_size(dtype, count) + CRC_SIZE


def _encode_values(values: np.ndarray, dtype: DType) -> bytes:
    bits = dtype.quant_bits
    if bits:
        q = quant.quantize_affine(values, bits)
        return q.packed() + struct.pack("<ff", q.scale, q.zero_point)
    fmt = dtype.float_format
    x = round_to_format(values, fmt)
    if fmt is FloatFormat.F64:
        return x.astype("<f8").tobytes()
    if fmt is FloatFormat.F32:
        return x.astype("<f4").tobytes()
    if fmt is FloatFormat.F16:
        return x.astype("<f2").tobytes()
    # bf16: exact in f32, keep the high half of the f32 bit pattern
    u = x.astype("<f4").view("<u4")
    return (u >> 16).astype("<u2").tobytes()


def _decode_values(data: bytes, dtype: DType, dims: tuple) -> np.ndarray:
    count = int(np.prod(dims)) if len(dims) else 0
    bits = dtype.quant_bits
    if bits:
        packed = data[:-8]
        scale, zero = struct.unpack("<ff", data[-8:])
        codes = quant.unpack_codes(packed, count, bits).reshape(dims)
        return quant.dequantize(quant.QTensor(bits, codes, np.float32(scale), np.float32(zero)))
    fmt = dtype.float_format
    if fmt is FloatFormat.F64:
        out = np.frombuffer(data, "<f8")
    elif fmt is FloatFormat.F32:
        out = np.frombuffer(data, "<f4")
    elif fmt is FloatFormat.F16:
        out = np.frombuffer(data, "<f2")
    else:
        out = (np.frombuffer(data, "<u2").astype("<u4") << 16).view("<f4")
    return out.astype(np.float64).reshape(dims)


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    request: int = 0
    layer: int = 0
    head: int = 0
    domain: int = 0
    dtype: DType = DType.F64
    dims: tuple = ()
    payload: bytes = b""
    version: int = VERSION

    @classmethod
    def from_array(cls, msg_type, values, dtype=DType.F64, **header) -> "Frame":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 0:
            raise FrameError("frames carry arrays with at least one dimension")
        dtype = DType.parse(dtype)
        return cls(MsgType(msg_type), dtype=dtype, dims=tuple(int(n) for n in values.shape),
                   payload=_encode_values(values, dtype), **header)

    def array(self) -> np.ndarray:
        return _decode_values(self.payload, self.dtype, self.dims)

    @property
    def nbytes(self) -> int:
        return HEADER_SIZE + 4 * len(self.dims) + len(self.payload) + CRC_SIZE


def encode_frame(f: Frame) -> bytes:
    count = int(np.prod(f.dims)) if len(f.dims) else 0
    if len(f.payload) != payload_size(f.dtype, count):
        raise FrameError(f"payload of {len(f.payload)} bytes does not match dims {f.dims} as {f.dtype.name}")
    head = _HEADER.pack(MAGIC, f.version, int(f.msg_type), f.request, f.layer, f.head, f.domain,
                        int(f.dtype), len(f.dims))
    body = head + struct.pack(f"<{len(f.dims)}I", *f.dims) + f.payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_frame(data: bytes) -> Frame:
    data = bytes(data)
    if len(data) < HEADER_SIZE + CRC_SIZE:
        raise FrameError("frame too short")
    if data[:4] != MAGIC:
        raise FrameError("bad magic")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise FrameError("CRC mismatch")
    _, version, mtype, request, layer, head, domain, dtype, ndims = _HEADER.unpack_from(data)
    dims_end = HEADER_SIZE + 4 * ndims
    if dims_end > len(data) - CRC_SIZE:
        raise FrameError("dims run past end of frame")
    try:
        mtype = MsgType(mtype)
        dtype = DType(dtype)
    except ValueError as e:
        raise FrameError(str(e)) from None
    dims = struct.unpack_from(f"<{ndims}I", data, HEADER_SIZE)
    payload = data[dims_end:-4]
    count = int(np.prod(dims)) if ndims else 0
    if len(payload) != payload_size(dtype, count):
        raise FrameError(f"payload of {len(payload)} bytes does not match dims {dims}")
    return Frame(mtype, request, layer, head, domain, dtype, tuple(dims), payload, version)


# ---------------------------------------------------------------------------
# Event core


class Simulator:
    def __init__(self):
        self.now = 0.0
        self._queue: list = []
        self._seq = itertools.count()
        self.processes: list[Process] = []

    def schedule(self, delay: float, fn) -> None:
        if delay < 0:
            raise ValueError("negative delay")
        heapq.heappush(self._queue, (self.now + delay, next(self._seq), fn))

    def schedule_at(self, t: float, fn) -> None:
        heapq.heappush(self._queue, (max(t, self.now), next(self._seq), fn))

    def spawn(self, gen, name: str = "") -> "Process":
        p = Process(self, gen, name)
        self.processes.append(p)
        self.schedule(0.0, p._step)
        return p

    def run(self) -> None:
        while self._queue:
            t, _, fn = heapq.heappop(self._queue)
            self.now = t
            fn()
        stuck = [p.name for p in self.processes if not p.done]
        if stuck:
            raise OrchestrationError(f"simulation stalled with processes still waiting: {stuck}")


class Process:
    def __init__(self, sim: Simulator, gen, name: str = ""):
        self.sim = sim
        self.gen = gen
        self.name = name
        self.done = False
        self.result = None
        self._joiners: list[Process] = []

    def _step(self, value=None) -> None:
        try:
            cmd = self.gen.send(value)
        except StopIteration as stop:
            self.done = True
            self.result = stop.value
            for j in self._joiners:
                self.sim.schedule(0.0, lambda j=j: j._step(self.result))
            self._joiners.clear()
            return
        cmd.arm(self)


@dataclass
class Sleep:
    delay: float

    def arm(self, proc: Process) -> None:
        proc.sim.schedule(max(self.delay, 0.0), proc._step)


@dataclass
class Recv:
    """Wait for the first frame at ``node`` accepted by ``match(frame, src)``.

    Resumes with ``(frame, src)``.
    """

    node: "Node"
    match: object

    def arm(self, proc: Process) -> None:
        self.node._add_waiter(self.match, proc)


@dataclass
class Until:
    """Wait until ``cond()`` is true; re-checked whenever ``node`` changes."""

    node: "Node"
    cond: object

    def arm(self, proc: Process) -> None:
        if self.cond():
            proc.sim.schedule(0.0, proc._step)
        else:
            self.node._conds.append((self.cond, proc))


@dataclass
class Join:
    proc: Process

    def arm(self, proc: Process) -> None:
        if self.proc.done:
            proc.sim.schedule(0.0, lambda: proc._step(self.proc.result))
        else:
            self.proc._joiners.append(proc)


class Node:
    """Mailbox plus handlers for unsolicited message types.

    Delivery order: waiting :class:`Recv` processes (oldest first), then a
    registered handler for the message type, then the inbox.
    """

    def __init__(self, node_id: int, sim: Simulator):
        self.id = node_id
        self.sim = sim
        self.inbox: list[tuple[Frame, int]] = []
        self.handlers: dict = {}
        self._waiters: list = []
        self._conds: list = []

    def _add_waiter(self, match, proc) -> None:
        for i, (frame, src) in enumerate(self.inbox):
            if match(frame, src):
                del self.inbox[i]
                proc.sim.schedule(0.0, lambda: proc._step((frame, src)))
                return
        self._waiters.append((match, proc))

    def deliver(self, frame: Frame, src: int) -> None:
        for i, (match, proc) in enumerate(self._waiters):
            if match(frame, src):
                del self._waiters[i]
                proc._step((frame, src))
                return
        handler = self.handlers.get(frame.msg_type)
        if handler is not None:
            handler(frame, src)
        else:
            self.inbox.append((frame, src))

    def notify(self) -> None:
        ready = [(c, p) for c, p in self._conds if c()]
        self._conds = [(c, p) for c, p in self._conds if (c, p) not in ready]
        for _, p in ready:
            self.sim.schedule(0.0, p._step)


# ---------------------------------------------------------------------------
# Links, accounting


@dataclass(frozen=True)
class LinkSpec:
    latency: float = 0.0
    bandwidth: float = math.inf  # bits per second

    def __post_init__(self):
        if self.latency < 0:
            raise ValueError("latency must be >= 0")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be > 0")

    def transfer_time(self, nbytes: int) -> float:
        return 0.0 if math.isinf(self.bandwidth) else nbytes * 8 / self.bandwidth


@dataclass(frozen=True)
class ComputeModel:
    """Synthetic compute time ``c0 + c1 * flops`` per node-local operation."""

    c0: float = 0.0
    c1: float = 0.0

    def time(self, flops: float) -> float:
        if self.c0 == 0.0 and self.c1 == 0.0:
            return 0.0
        return self.c0 + self.c1 * flops


@dataclass
class NetConfig:
    default: LinkSpec = field(default_factory=LinkSpec)
    links: dict = field(default_factory=dict)  # (src, dst) -> LinkSpec
    compute: ComputeModel = field(default_factory=ComputeModel)

    def link(self, src: int, dst: int) -> LinkSpec:
        return self.links.get((src, dst), self.default)


@dataclass
class Counters:
    bytes_sent: int = 0
    bytes_received: int = 0
    frames: int = 0
    rounds: int = 0
    rounds_by_phase: dict = field(default_factory=dict)
    bytes_by_phase: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TraceRecord:
    seq: int
    t_send: float
    t_deliver: float
    src: int
    dst: int
    phase: str
    frame_bytes: bytes

    @property
    def frame(self) -> Frame:
        return decode_frame(self.frame_bytes)


class Network:
    """Directed FIFO links between nodes.

    A frame occupies its link's transmitter for ``size * 8 / bandwidth``
    seconds (queued behind earlier frames on the same link) and then
    propagates for ``latency`` seconds.  On an idle link delivery happens at
    ``now + latency + size * 8 / bandwidth``.
    """

    def __init__(self, sim: Simulator, config: NetConfig | None = None):
        self.sim = sim
        self.config = config or NetConfig()
        self.nodes: dict[int, Node] = {}
        self.counters = Counters()
        self.trace: list[TraceRecord] = []
        self.dispatch_hooks: list = []
        self.phase = "setup"
        self._busy_until: dict = {}

    def add_node(self, node: Node) -> None:
        self.nodes[node.id] = node

    def send(self, src: int, dst: int, frame: Frame) -> float:
        if src not in self.nodes or dst not in self.nodes:
            raise OrchestrationError(f"unknown link {src} -> {dst}")
        if src == dst:
            raise OrchestrationError("a node cannot send to itself")
        for hook in self.dispatch_hooks:
            hook(src, dst, frame)
        data = encode_frame(frame)
        link = self.config.link(src, dst)
        start = max(self.sim.now, self._busy_until.get((src, dst), 0.0))
        done_tx = start + link.transfer_time(len(data))
        self._busy_until[(src, dst)] = done_tx
        t_deliver = done_tx + link.latency
        c = self.counters
        c.bytes_sent += len(data)
        c.frames += 1
        c.bytes_by_phase[self.phase] = c.bytes_by_phase.get(self.phase, 0) + len(data)
        self.trace.append(TraceRecord(len(self.trace), self.sim.now, t_deliver, src, dst, self.phase, data))
        node = self.nodes[dst]

        def arrive():
            self.counters.bytes_received += len(data)
            node.deliver(decode_frame(data), src)

        self.sim.schedule_at(t_deliver, arrive)
        return t_deliver

    def count_round(self, phase: str | None = None) -> None:
        phase = phase or self.phase
        self.counters.rounds += 1
        self.counters.rounds_by_phase[phase] = self.counters.rounds_by_phase.get(phase, 0) + 1

    def golden_trace(self) -> bytes:
        """Length-prefixed frame log: ``u32 len, u16 src, u16 dst, frame``."""
        out = bytearray()
        for r in self.trace:
            out += struct.pack("<IHH", len(r.frame_bytes), r.src, r.dst)
            out += r.frame_bytes
        return bytes(out)


def parse_golden_trace(data: bytes) -> list[tuple[int, int, Frame]]:
    out = []
    pos = 0
    while pos < len(data):
        n, src, dst = struct.unpack_from("<IHH", data, pos)
        pos += 8
        out.append((src, dst, decode_frame(data[pos:pos + n])))
        pos += n
    return out


# ---------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class RunMetrics:
    ttft: float
    decode_latencies: tuple
    traffic_bytes: int
    comm_rounds: int
    rounds_by_phase: dict = field(default_factory=dict)
    traffic_by_phase: dict = field(default_factory=dict)

    @property
    def decode_tps(self) -> float:
        """Tokens after the first divided by the time they took."""
        lat = self.decode_latencies[1:]
        span = float(sum(lat))
        if len(self.decode_latencies) < 2 or span <= 0:
            return math.inf if len(self.decode_latencies) >= 2 else 0.0
        return len(lat) / span

    @property
    def traffic_mib(self) -> float:
        return self.traffic_bytes / MIB

    def to_json(self) -> dict:
        tps = self.decode_tps
        return {
            "ttft_s": self.ttft,
            "decode_latencies_s": list(self.decode_latencies),
            "decode_tps": tps if math.isfinite(tps) else None,
            "traffic_bytes": self.traffic_bytes,
            "traffic_mib": self.traffic_mib,
            "comm_rounds": self.comm_rounds,
            "rounds_by_phase": dict(sorted(self.rounds_by_phase.items())),
            "traffic_by_phase": dict(sorted(self.traffic_by_phase.items())),
        }


def metrics_snapshot(start: float, token_times, counters: Counters) -> RunMetrics:
    """Build metrics from the request start time and token emission times.

    ``decode_latencies[0]`` is the time to the first token; later entries are
    gaps between consecutive tokens.
    """
    times = [float(t) for t in token_times]
    lat = []
    prev = start
    for t in times:
        lat.append(t - prev)
        prev = t
    ttft = times[0] - start if times else math.nan
    return RunMetrics(ttft, tuple(lat), counters.bytes_sent, counters.rounds,
                      dict(counters.rounds_by_phase), dict(counters.bytes_by_phase))
