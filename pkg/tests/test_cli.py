import csv
import json
import os

import pytest

from fedattn import experiments as X
from fedattn.cli import ConfigError, main, parse_config


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_run_outputs_and_determinism(tmp_path):
    cfg = _write(tmp_path, {"workload": {"preset": "short"}})
    outs = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        assert main(["run", "--config", cfg, "--out", str(out)]) == 0
        outs.append(out)
    m = json.loads((outs[0] / "metrics.json").read_text())
    for key in ("ttft_s", "decode_latencies_s", "decode_tps", "traffic_bytes", "comm_rounds"):
        assert key in m
    assert len(m["decode_latencies_s"]) == 32
    for name in ("metrics.json", "trace.bin", "answer.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    manifest = json.loads((outs[0] / "manifest.json").read_text())
    assert manifest["status"] == "ok" and "config_sha256" in manifest


def test_placement_on_unknown_node(tmp_path, capsys):
    cfg = _write(tmp_path, {"workload": {"placement": {"7": 3}}})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
    assert "workload.placement" in capsys.readouterr().err


@pytest.mark.parametrize("raw,field", [
    ({"model": {"d_model": 30}}, "model.d_model"),
    ({"topology": {"coordinator": 9}}, "topology.coordinator"),
    ({"workload": {"context_len": 0}}, "workload.context_len"),
    ({"bogus": 1}, "bogus"),
    ({"probe": {"d": 3}}, "probe.d"),
    ({"sweep": {"bits": [9]}}, "sweep.bits"),
])
def test_validation_names_field(raw, field):
    with pytest.raises(ConfigError) as e:
        parse_config(raw)
    assert field in str(e.value)


def test_seed_override_changes_digest():
    assert parse_config({}, seed=1).digest != parse_config({}, seed=2).digest
    assert parse_config({}, seed=1).digest == parse_config({}, seed=1).digest


def test_verify_pass_and_sabotage(tmp_path, capsys):
    small = {"workload": {"context_len": 32, "query_len": 8, "max_new": 8}}
    cfg = _write(tmp_path, {**small, "scrambler": {"wire": "f64"}})
    assert main(["verify", "--config", cfg]) == 0
    assert main(["verify", "--config", cfg, "--sabotage"]) == 1
    text = capsys.readouterr().out
    assert "FAIL" in text and "first diverging step" in text
    cfg = _write(tmp_path, small, "bf16.json")
    assert main(["verify", "--config", cfg]) == 0


def test_stability_command(tmp_path):
    cfg = _write(tmp_path, {"stability": {"seqs": [64], "d": 32, "draws": 2}})
    assert main(["stability", "--config", cfg, "--out", str(tmp_path / "st")]) == 0
    rows = _rows(tmp_path / "st" / "stability.csv")
    assert {r["variant"] for r in rows} == {"structured", "dense_random"}


def test_stability_f64_is_exact():
    for variant in ("structured", "dense_random"):
        errs = X.stability_errors(variant, 64, d=32, fmt="f64", draws=2)
        assert max(errs) < 1e-10


def test_probe_command(tmp_path):
    cfg = _write(tmp_path, {"probe": {"probes": ["ica", "knn"], "rows": 1000, "d": 4, "trials": 50,
                                      "lengths": [128], "knn_d": 16}})
    assert main(["probe", "--config", cfg, "--out", str(tmp_path / "pr")]) == 0
    rows = _rows(tmp_path / "pr" / "probes.csv")
    ica = [r for r in rows if r["probe"] == "ica" and r["generator"] == "iid_laplace"]
    assert ica and float(ica[0]["score"]) >= 0.9
    knn_unit = [r for r in rows if r["probe"] == "knn" and "range=[1.0,1.0]" in r["params"]]
    assert knn_unit and all(float(r["score"]) == 1.0 for r in knn_unit)


def test_quant_sweep_command(tmp_path):
    cfg = _write(tmp_path, {"sweep": {"bits": [8, 4, 3, 2], "requests": 2, "docs": 3, "ablation_seeds": 1}})
    out = tmp_path / "qs"
    assert main(["quant-sweep", "--config", cfg, "--out", str(out)]) == 0
    rows = _rows(out / "rerank_quant.csv")
    assert [r["wire"] for r in rows] == ["quant8", "quant4", "quant3", "quant2"]
    assert len(_rows(out / "decode_ablation.csv")) == 2
    assert os.path.exists(out / "manifest.json")
