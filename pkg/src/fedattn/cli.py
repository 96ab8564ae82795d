"""Command line runner: run, verify, stability, probe, quant-sweep."""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, fields, replace

import numpy as np

from . import __version__
from . import experiments as X
from . import models as M
from . import probes as P
from .netsim import ComputeModel, DType, LinkSpec, NetConfig
from .protocol import ClusterConfig, centralized_reference, max_state_deviation, run_generation, run_request
from .scrambler import KeyConfig
from .tensor_core import RngStream, is_power_of_two

ConfigError = M.ConfigError

DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "topology": {
        "nodes": [1, 2, 3],
        "coordinator": 3,
        "latency_s": 0.005,
        "bandwidth_bps": 1e9,
        "links": [],
        "compute": {"c0": 0.0, "c1": 0.0},
    },
    "model": {},
    "reranker": {"arch": "encoder", "seed": 1},
    "scrambler": {"mag_range": [0.125, 8.0], "use_s2": True, "wire": "bf16", "rerank_wire": "quant4"},
    "workload": {
        "preset": "short",
        "context_len": None,
        "query_len": None,
        "max_new": None,
        "placement": {"1": 5, "2": 5},
        "k": 10,
        "m": 4,
        "ignore_eos": True,
    },
    "stability": {"seqs": [128, 512, 2048], "d": 128, "format": "bf16", "draws": 9, "logit_std": 2.0},
    "probe": {
        "probes": ["ica", "knn", "distortion", "vma"],
        "rows": 2048,
        "d": 16,
        "trials": 1000,
        "lengths": [256, 1024, 4096],
        "knn_d": 64,
        "k": 10,
        "ranges": [[1.0, 1.0], [0.125, 8.0]],
        "vocab": 256,
        "vma_d": 64,
    },
    "sweep": {"bits": [8, 4, 3, 2], "requests": 20, "docs": 10, "ablation_seeds": 20, "ablation_bits": 8},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        name = f"{path}{key}"
        if key not in base:
            raise ConfigError(name, "unknown field")
        if isinstance(base[key], dict) and key not in ("placement", "model", "reranker"):
            if not isinstance(val, dict):
                raise ConfigError(name, "expected an object")
            out[key] = _merge(base[key], val, name + ".")
        elif key in ("model", "reranker"):
            if not isinstance(val, dict):
                raise ConfigError(name, "expected an object")
            out[key] = {**base[key], **val}
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    raw: dict
    seed: int
    cluster: ClusterConfig
    model_cfg: M.ModelConfig
    rr_cfg: M.ModelConfig
    ctx_len: int
    query_len: int
    max_new: int
    placement: dict
    k: int
    m: int
    ignore_eos: bool

    @property
    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.raw).encode()).hexdigest()


def _model_cfg(d: dict, name: str) -> M.ModelConfig:
    known = {f.name for f in fields(M.ModelConfig)}
    for key in d:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
    try:
        return M.ModelConfig(**d)
    except ConfigError as e:
        raise ConfigError(f"{name}.{e.field}", str(e).split(": ", 1)[1]) from None


def _positive_int(val, name: str) -> int:
    if isinstance(val, bool) or not isinstance(val, int) or val <= 0:
        raise ConfigError(name, f"must be a positive integer, got {val!r}")
    return val


def _check_experiments(c: dict) -> None:
    st, pr, sw = c["stability"], c["probe"], c["sweep"]
    for name, val in (("stability.d", st["d"]), ("probe.d", pr["d"]), ("probe.knn_d", pr["knn_d"]),
                      ("probe.vma_d", pr["vma_d"])):
        if not is_power_of_two(_positive_int(val, name)):
            raise ConfigError(name, f"must be a power of two, got {val}")
    for name, vals in (("stability.seqs", st["seqs"]), ("probe.lengths", pr["lengths"]), ("sweep.bits", sw["bits"])):
        if not isinstance(vals, list) or not vals:
            raise ConfigError(name, "must be a non-empty list")
        for v in vals:
            _positive_int(v, name)
    if st["format"] not in ("f64", "f32", "bf16", "f16"):
        raise ConfigError("stability.format", f"unknown float format {st['format']!r}")
    if any(not 2 <= b <= 8 for b in sw["bits"]):
        raise ConfigError("sweep.bits", "bit widths must be in [2, 8]")
    unknown = set(pr["probes"]) - {"ica", "knn", "distortion", "vma"}
    if unknown:
        raise ConfigError("probe.probes", f"unknown probes {sorted(unknown)}")
    for name in ("rows", "trials", "k", "vocab"):
        _positive_int(pr[name], f"probe.{name}")
    for name in ("requests", "docs", "ablation_seeds", "ablation_bits"):
        _positive_int(sw[name], f"sweep.{name}")


def parse_config(raw: dict, seed: int | None = None) -> RunConfig:
    """Validate a config dict merged over the defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    c = _merge(DEFAULTS, raw)
    if seed is not None:
        c["seed"] = seed
    if isinstance(c["seed"], bool) or not isinstance(c["seed"], int) or c["seed"] < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    topo = c["topology"]
    nodes = topo["nodes"]
    if not isinstance(nodes, list) or len(set(nodes)) != len(nodes) or len(nodes) < 3:
        raise ConfigError("topology.nodes", "need at least three distinct node ids")
    for n in nodes:
        _positive_int(n, "topology.nodes")
    if not isinstance(topo["coordinator"], int) or topo["coordinator"] not in nodes:
        raise ConfigError("topology.coordinator", f"node {topo['coordinator']!r} is not in topology.nodes")
    try:
        default = LinkSpec(float(topo["latency_s"]), float(topo["bandwidth_bps"]))
    except ValueError as e:
        raise ConfigError("topology.latency_s", str(e)) from None
    links = {}
    for i, ln in enumerate(topo["links"]):
        name = f"topology.links[{i}]"
        for end in ("src", "dst"):
            if ln.get(end) not in nodes:
                raise ConfigError(f"{name}.{end}", f"node {ln.get(end)!r} is not in topology.nodes")
        try:
            spec = LinkSpec(float(ln.get("latency_s", default.latency)),
                            float(ln.get("bandwidth_bps", default.bandwidth)))
        except ValueError as e:
            raise ConfigError(name, str(e)) from None
        links[(ln["src"], ln["dst"])] = spec
        if ln.get("symmetric", True):
            links[(ln["dst"], ln["src"])] = spec
    compute = ComputeModel(float(topo["compute"]["c0"]), float(topo["compute"]["c1"]))
    if compute.c0 < 0 or compute.c1 < 0:
        raise ConfigError("topology.compute", "coefficients must be >= 0")

    sc = c["scrambler"]
    mr = sc["mag_range"]
    if not (isinstance(mr, list) and len(mr) == 2 and 0 < mr[0] <= mr[1]):
        raise ConfigError("scrambler.mag_range", "must be [lo, hi] with 0 < lo <= hi")
    for key in ("wire", "rerank_wire"):
        try:
            DType.parse(sc[key])
        except (ValueError, KeyError):
            raise ConfigError(f"scrambler.{key}", f"unknown wire format {sc[key]!r}") from None
    key_cfg = KeyConfig(mag_range=(float(mr[0]), float(mr[1])), use_s2=bool(sc["use_s2"]))

    model_cfg = _model_cfg(c["model"], "model")
    rr_cfg = _model_cfg(c["reranker"], "reranker")
    if rr_cfg.arch != "encoder":
        raise ConfigError("reranker.arch", "the reranker must be an encoder")

    wl = c["workload"]
    if wl["preset"] is not None and wl["preset"] not in X.PRESETS:
        raise ConfigError("workload.preset", f"unknown preset {wl['preset']!r}; choose from {sorted(X.PRESETS)}")
    base = X.PRESETS.get(wl["preset"], (None, None, None))
    lens = []
    for key, dflt in zip(("context_len", "query_len", "max_new"), base):
        v = wl[key] if wl[key] is not None else dflt
        if v is None:
            raise ConfigError(f"workload.{key}", "required when no preset is given")
        lens.append(_positive_int(v, f"workload.{key}"))
    placement = {}
    for node, count in wl["placement"].items():
        try:
            nid = int(node)
        except ValueError:
            raise ConfigError("workload.placement", f"bad node id {node!r}") from None
        if nid not in nodes:
            raise ConfigError("workload.placement", f"node {nid} is not in topology.nodes")
        placement[nid] = _positive_int(count, f"workload.placement.{node}")
    if not placement:
        raise ConfigError("workload.placement", "no documents placed")
    k = _positive_int(wl["k"], "workload.k")
    m = _positive_int(wl["m"], "workload.m")
    if m >= k:
        raise ConfigError("workload.m", "must be smaller than workload.k")
    if k > sum(placement.values()):
        raise ConfigError("workload.k", "exceeds the number of placed documents")

    _check_experiments(c)

    cluster = ClusterConfig(nodes=tuple(nodes), coordinator=topo["coordinator"], seed=c["seed"],
                            wire=sc["wire"], rerank_wire=sc["rerank_wire"], key_cfg=key_cfg,
                            net=NetConfig(default, links, compute))
    return RunConfig(c, c["seed"], cluster, model_cfg, rr_cfg, *lens, placement, k, m, bool(wl["ignore_eos"]))


def load_config(path: str | None, seed: int | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        with open(path) as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError("<file>", f"invalid JSON: {e}") from None
    return parse_config(raw, seed)


# ---------------------------------------------------------------------------
# Output helpers


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def _atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue().encode()


class RunDir:
    """Collects artifacts and writes each atomically, manifest last."""

    def __init__(self, out: str, command: str, cfg: RunConfig):
        self.out = out
        self.command = command
        self.cfg = cfg
        self.files: dict = {}
        os.makedirs(out, exist_ok=True)

    def write(self, name: str, data: bytes | str) -> None:
        data = data.encode() if isinstance(data, str) else data
        _atomic_write(os.path.join(self.out, name), data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def close(self, status: str) -> None:
        manifest = {
            "command": self.command,
            "status": status,
            "seed": self.cfg.seed,
            "config_sha256": self.cfg.digest,
            "code_version": __version__,
            "files": self.files,
        }
        self.write("config.json", canonical_json(self.cfg.raw))
        _atomic_write(os.path.join(self.out, "manifest.json"), canonical_json(manifest).encode())


def _models(cfg: RunConfig):
    return M.init_model(cfg.model_cfg), M.init_model(cfg.rr_cfg)


# ---------------------------------------------------------------------------
# Commands


def cmd_run(cfg: RunConfig, out: str) -> int:
    model, rr = _models(cfg)
    corpora, query = X.workload_corpora(cfg.ctx_len, cfg.query_len, cfg.model_cfg.vocab_size, cfg.seed,
                                        cfg.placement)
    res, _ = run_request(query, corpora, cfg.cluster, model, rr, k=cfg.k, m=cfg.m, max_new=cfg.max_new,
                         ignore_eos=cfg.ignore_eos)
    rd = RunDir(out, "run", cfg)
    answer = {
        "query": [int(t) for t in query],
        "answer": [int(t) for t in res.answer],
        "candidates": [c.doc_id for c in res.candidates],
        "reranked": [c.doc_id for c in res.reranked],
        "segments": [{"owner": s.owner, "offset": s.offset, "length": s.length, "docs": list(s.docs)}
                     for s in res.segmap.segments],
        "routes": [list(r) for r in res.plan.routes],
        "audit": res.audit,
    }
    rd.write("answer.json", canonical_json(answer))
    rd.write("metrics.json", canonical_json(res.metrics.to_json()))
    rd.write("trace.bin", res.trace)
    status = "ok" if not res.audit else "audit-failed"
    rd.close(status)
    print(f"answer: {answer['answer']}")
    m = res.metrics
    print(f"ttft {m.ttft:.6f} s, decode tps {m.decode_tps:.3f}, traffic {m.traffic_bytes} B, rounds {m.comm_rounds}")
    for v in res.audit:
        print(f"audit: {v}", file=sys.stderr)
    return 0 if not res.audit else 3


def _diverging_layer(cl, res, ref_caches, ref_states, tol: float):
    """First (segment, layer) whose cached K/V or output state departs from the reference."""
    for i, seg in enumerate(res.segmap.segments):
        mine = cl.nodes[seg.owner].own_cache.get(i)
        if mine is None or i >= len(ref_caches):
            continue
        theirs = ref_caches[i]
        n_layers = len(mine.k)
        for layer in range(n_layers):
            dev = max(float(np.max(np.abs(mine.k[layer] - theirs.k[layer]))),
                      float(np.max(np.abs(mine.v[layer] - theirs.v[layer]))))
            if dev > tol:
                # K/V of layer l are projections of the output of layer l-1
                return i, max(layer - 1, 0)
        if float(np.max(np.abs(res.states[i] - ref_states[i]))) > tol:
            return i, n_layers - 1
    return None


def verify_config(cfg: RunConfig, sabotage: bool = False, tol: float = 1e-8) -> dict:
    """Distributed scrambled decode against the single-process reference."""
    model, _ = _models(cfg)
    owners = sorted(cfg.placement)
    ctx, query = X.generation_workload(cfg.ctx_len, cfg.query_len, cfg.model_cfg.vocab_size, cfg.seed, owners)
    ccfg = replace(cfg.cluster, sabotage_dec=sabotage)
    res, cl = run_generation(ccfg, model, ctx, query, cfg.max_new, ignore_eos=cfg.ignore_eos)
    ref = centralized_reference(model, ctx, query, cfg.max_new, ccfg.coordinator, cfg.ignore_eos)
    n_seg = len(res.segmap.segments)
    dev = max_state_deviation(res.states, ref.states)
    first_step = next((i for i, (a, b) in enumerate(zip(res.answer, ref.tokens)) if a != b), None)
    if first_step is None and len(res.answer) != len(ref.tokens):
        first_step = min(len(res.answer), len(ref.tokens))
    report = {
        "wire": ccfg.wire,
        "tokens": [int(t) for t in res.answer],
        "reference": [int(t) for t in ref.tokens],
        "token_identical": first_step is None,
        "max_state_deviation": dev,
        "min_margin": min(ref.margins) if ref.margins else math.inf,
        "first_diverging_step": first_step,
        "first_diverging_layer": None,
        "audit": res.audit,
    }
    if dev > tol or first_step is not None:
        loc = _diverging_layer(cl, res, ref.caches, ref.states[:n_seg], tol)
        if loc is not None:
            report["first_diverging_segment"], report["first_diverging_layer"] = loc
    return report


def cmd_verify(cfg: RunConfig, out: str | None, sabotage: bool = False) -> int:
    rep = verify_config(cfg, sabotage)
    ok = rep["token_identical"] and (DType.parse(cfg.cluster.wire) != DType.F64
                                     or rep["max_state_deviation"] <= 1e-8)
    print(f"wire {rep['wire']}: max state deviation {rep['max_state_deviation']:.3e}, "
          f"token agreement {'yes' if rep['token_identical'] else 'no'}")
    if not ok:
        print(f"FAIL: first diverging step {rep['first_diverging_step']}, "
              f"layer {rep['first_diverging_layer']}")
    else:
        print("PASS")
    if out:
        rd = RunDir(out, "verify", cfg)
        rd.write("verify.json", canonical_json(rep))
        rd.close("pass" if ok else "fail")
    return 0 if ok else 1


def cmd_stability(cfg: RunConfig, out: str) -> int:
    st = cfg.raw["stability"]
    rows = X.stability_table(tuple(st["seqs"]), st["d"], st["format"], cfg.seed, st["draws"],
                             logit_std=st["logit_std"])
    rd = RunDir(out, "stability", cfg)
    rd.write("stability.csv", _csv_bytes(
        ["variant", "seq", "rel_error_mean", "rel_error_median", "rel_error_min", "rel_error_max"],
        [(r.variant, r.seq, r.rel_error, r.median, *r.spread) for r in rows]))
    rd.close("ok")
    for r in rows:
        print(f"{r.variant:>13} seq={r.seq:<5} error {100 * r.rel_error:.2f}%")
    return 0


def probe_rows(params: dict, seed: int) -> list[tuple]:
    """CSV rows (probe, generator, params, seed, score)."""
    rows = []
    which = set(params["probes"])
    n, d = params["rows"], params["d"]
    if "ica" in which:
        for gen in ("iid_laplace", "anisotropic_gaussian"):
            rng = RngStream(seed).child("probe-cli", gen)
            if gen == "iid_laplace":
                s = P.iid_laplace(rng.child("s"), n, d)
                mixed = s @ P.random_rotation(rng.child("mix"), d)
                macs = P.hungarian_macs(P.fastica(mixed, seed=seed), s)
                rows.append(("ica", gen, f"n={n};d={d};mixing=orthogonal", seed, macs))
            else:
                ds = P.scrambled_dataset(gen, n, d, seed)
                r = P.ica_probe(ds, params["trials"], seed)
                rows.append(("ica", gen, f"n={n};d={d};phi=full", seed, r.macs))
                rows.append(("ica_baseline", gen, f"n={n};d={d};trials={params['trials']}", seed, r.baseline))
    if "knn" in which or "distortion" in which:
        for lo, hi in params["ranges"]:
            for L in params["lengths"]:
                ds = P.scrambled_dataset("anisotropic_gaussian", L, params["knn_d"], seed,
                                         KeyConfig(mag_range=(lo, hi)))
                tag = f"L={L};d={params['knn_d']};range=[{lo},{hi}]"
                if "knn" in which:
                    rows.append(("knn", "anisotropic_gaussian", tag + f";k={params['k']}", seed,
                                 P.knn_overlap(ds.x, ds.x_s, params["k"])))
                if "distortion" in which:
                    dd = P.distance_distortion(ds.x, ds.x_s, seed=seed)
                    rows.append(("distortion_median", "anisotropic_gaussian", tag, seed, dd.median))
                    rows.append(("distortion_iqr", "anisotropic_gaussian", tag, seed, dd.iqr))
    if "vma" in which:
        for mode in ("full", "token_perm"):
            rows.append(("vma", "anisotropic_gaussian", f"V={params['vocab']};d={params['vma_d']};mode={mode}",
                         seed, P.vma_trial(seed, params["vocab"], params["vma_d"], mode=mode)))
    return rows


def cmd_probe(cfg: RunConfig, out: str) -> int:
    rows = probe_rows(cfg.raw["probe"], cfg.seed)
    rd = RunDir(out, "probe", cfg)
    rd.write("probes.csv", _csv_bytes(["probe", "generator", "params", "seed", "score"], rows))
    rd.close("ok")
    for r in rows:
        print(f"{r[0]:>18} {r[1]:>20} {r[2]:<40} {r[4]:.4f}")
    return 0


def cmd_quant_sweep(cfg: RunConfig, out: str) -> int:
    sw = cfg.raw["sweep"]
    model, rr = _models(cfg)
    owners = tuple(sorted(cfg.placement))
    reqs = X.synthetic_rerank_requests(sw["requests"], rr.cfg.vocab_size, cfg.seed, n_docs=sw["docs"],
                                       owners=owners)
    rows = X.rerank_quant_sweep(rr, reqs, tuple(sw["bits"]), base=cfg.cluster)
    seeds = range(cfg.seed, cfg.seed + sw["ablation_seeds"])
    abl = [X.decode_quant_ablation(model, seeds, sw["ablation_bits"], mode, cfg.cluster.key_cfg.mag_range)
           for mode in ("S1_and_S2", "S1_only")]
    rd = RunDir(out, "quant-sweep", cfg)
    rd.write("rerank_quant.csv", _csv_bytes(["wire", "acc1", "acc3", "l1", "edit"],
                                            [(r.wire, r.acc1, r.acc3, r.l1, r.edit) for r in rows]))
    rd.write("decode_ablation.csv", _csv_bytes(
        ["mode", "bits", "mag_lo", "mag_hi", "token_agreement", "logit_deviation"],
        [(a.mode, a.bits, *a.mag_range, a.token_agreement, a.logit_deviation) for a in abl]))
    rd.close("ok")
    for r in rows:
        print(f"{r.wire:>7} acc@1 {r.acc1:.3f} acc@3 {r.acc3:.3f} L1 {r.l1:.4f} edit {r.edit:.2f}")
    for a in abl:
        print(f"{a.mode:>9} {a.bits}-bit token agreement {a.token_agreement:.3f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedattn", description="Scrambled federated attention experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "verify", "stability", "probe", "quant-sweep"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        s.add_argument("--seed", type=int, help="override the master seed")
        s.add_argument("--out", help="output directory (default: config 'out' plus the command name)")
        if name == "verify":
            s.add_argument("--sabotage", action="store_true",
                           help="decrypt with the wrong key set (negative control)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"cannot read config: {e}", file=sys.stderr)
        return 2
    out = args.out or os.path.join(cfg.raw["out"], args.command)
    if args.command == "run":
        return cmd_run(cfg, out)
    if args.command == "verify":
        return cmd_verify(cfg, args.out, args.sabotage)
    if args.command == "stability":
        return cmd_stability(cfg, out)
    if args.command == "probe":
        return cmd_probe(cfg, out)
    return cmd_quant_sweep(cfg, out)


if __name__ == "__main__":
    sys.exit(main())
