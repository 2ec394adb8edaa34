import csv
import json
import subprocess
import sys
import time

import pytest

from sievestream.cli import main
from sievestream.records import count_records, iter_records

MODULAR_CFG = """objective.lambda_d = 0
objective.informativeness = precomputed-score
selector.algorithm = sieve-streaming-pp
selector.k = 2
selector.epsilon = 0.1
"""

SMALL_SIM = """simulator.classes = 4
simulator.feature_dim = 8
simulator.nonobject_count = 60
simulator.round_size = 160
simulator.rounds = 3
"""


def write(path, text):
    path.write_text(text)
    return str(path)


def test_select_modular_top_two(tmp_path):
    data = write(tmp_path / "in.jsonl", "\n".join(
        json.dumps({"id": f"r{i}", "seq": i, "score": s}) for i, s in enumerate([3.0, 1.0, 2.0])) + "\n")
    cfg = write(tmp_path / "c.cfg", MODULAR_CFG)
    out = tmp_path / "m.json"
    assert main(["select", "--config", cfg, "--input", data, "--output", str(out)]) == 0
    manifest = json.loads(out.read_text())
    assert manifest["format_version"] == 1
    assert sorted(manifest["chosen_ids"]) == ["r0", "r2"]
    assert manifest["objective"] == pytest.approx(5.0)
    assert manifest["rounds"][0]["samples_seen"] == 3


def test_select_empty_file(tmp_path):
    data = write(tmp_path / "empty.jsonl", "")
    cfg = write(tmp_path / "c.cfg", MODULAR_CFG)
    out = tmp_path / "m.json"
    assert main(["select", "--config", cfg, "--input", data, "--output", str(out)]) == 0
    manifest = json.loads(out.read_text())
    assert manifest["chosen_ids"] == [] and manifest["objective"] == 0.0


def test_select_flag_overrides_and_divided(tmp_path):
    data = write(tmp_path / "in.jsonl", "\n".join(
        json.dumps({"id": f"r{i}", "seq": i, "score": float(i % 5)}) for i in range(20)) + "\n")
    cfg = write(tmp_path / "c.cfg", MODULAR_CFG)
    out = tmp_path / "m.json"
    argv = ["select", "--config", cfg, "--input", data, "--output", str(out),
            "--algorithm", "entropy-topk", "--k", "4", "--divide-k", "2", "--cache", "off"]
    # entropy-topk takes no epsilon, but the config file sets one
    assert main(argv) == 2
    argv[argv.index("--config") + 1] = write(tmp_path / "c2.cfg", MODULAR_CFG.replace("selector.epsilon = 0.1\n", ""))
    assert main(argv) == 0
    manifest = json.loads(out.read_text())
    assert manifest["algorithm"] == "entropy-topk[K=4]" and manifest["divide_k"] == 2
    assert len(manifest["chosen_ids"]) == 4


@pytest.mark.parametrize("cfg_text,data,code", [
    ("selector.k = 2\n", '{"id":"a","seq":0,"score":1}\n', 2),
    (MODULAR_CFG + "selector.zzz = 1\n", '{"id":"a","seq":0,"score":1}\n', 2),
    (MODULAR_CFG, '{"id":"a","seq":0,"score":1}\n{"id":"b","seq":0,"score":1}\n', 3),
    (MODULAR_CFG, '{"id":"a","seq":0,"score":1}\n{oops\n', 3),
    ("selector.algorithm = sieve-streaming\nselector.k = 2\nselector.epsilon = 0.1\n",
     '{"id":"a","seq":0,"softmax":[1.0],"features":[1e200]}\n', 4),
])
def test_select_exit_codes(tmp_path, capsys, cfg_text, data, code):
    cfg = write(tmp_path / "c.cfg", cfg_text)
    path = write(tmp_path / "in.jsonl", data)
    assert main(["select", "--config", cfg, "--input", path, "--output", str(tmp_path / "m.json")]) == code
    err = capsys.readouterr().err
    if code == 3:
        assert "line 2" in err


def test_select_missing_input(tmp_path):
    cfg = write(tmp_path / "c.cfg", MODULAR_CFG)
    assert main(["select", "--config", cfg, "--input", str(tmp_path / "nope.jsonl")]) == 3


def test_simulate_deterministic(tmp_path):
    cfg = write(tmp_path / "s.cfg", SMALL_SIM)
    assert main(["simulate", "--config", cfg, "--output", str(tmp_path / "a"), "--seed", "4"]) == 0
    assert main(["simulate", "--config", cfg, "--output", str(tmp_path / "b"), "--seed", "4"]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["round_000.jsonl", "round_001.jsonl", "round_002.jsonl"]
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert count_records(tmp_path / "a" / name) == 160


def test_simulate_no_duplication_all_unique(tmp_path):
    cfg = write(tmp_path / "s.cfg", SMALL_SIM.replace("simulator.nonobject_count = 60", "simulator.nonobject_count = 0")
                + "simulator.replication = 0\n")
    assert main(["simulate", "--config", cfg, "--output", str(tmp_path / "out")]) == 0
    samples = list(iter_records(tmp_path / "out" / "round_000.jsonl"))
    assert len({s.group for s in samples}) == len(samples) == 160


def test_simulate_config_error(tmp_path):
    cfg = write(tmp_path / "s.cfg", "simulator.round_size = 2047\n")
    assert main(["simulate", "--config", cfg, "--output", str(tmp_path / "out")]) == 2


def test_full_scale_simulate_then_select(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--output", str(out)]) == 0
    files = sorted(out.iterdir())
    assert len(files) == 30 and all(count_records(f) == 2048 for f in files)
    cfg = write(tmp_path / "c.cfg", "selector.algorithm = sieve-streaming-pp\nselector.k = 128\nselector.epsilon = 0.1\n")
    manifest_path = tmp_path / "m.json"
    assert main(["select", "--config", cfg, "--input", str(out), "--output", str(manifest_path)]) == 0
    rounds = json.loads(manifest_path.read_text())["rounds"]
    assert len(rounds) == 30
    assert all(0 < r["selected_count"] <= 128 for r in rounds)
    # records are streamed: resident samples are the sieve contents, not the file
    assert all(r["distinct_peak"] < 2048 for r in rounds)


def test_bench_row_groups_and_sweep(tmp_path):
    cfg = write(tmp_path / "b.cfg", SMALL_SIM + """harness.algorithms = random, entropy-topk, sieve-streaming-pp
harness.ks = 8
harness.epsilons = 0.1, 0.05, 0.01
harness.seeds = 0, 1, 2, 3, 4
harness.rounds = 1
harness.timing = on
""")
    out = tmp_path / "bench.csv"
    assert main(["bench", "--config", cfg, "--output", str(out), "--iterations", "100"]) == 0
    rows = list(csv.DictReader(out.open()))
    algos = {r["algorithm"] for r in rows}
    assert {a.split("[")[0] for a in algos} == {"random", "entropy-topk", "sieve-streaming-pp"}
    assert {a for a in algos if a.startswith("sieve")} == {
        "sieve-streaming-pp[K=8,eps=0.1]", "sieve-streaming-pp[K=8,eps=0.05]", "sieve-streaming-pp[K=8,eps=0.01]"}
    assert len(rows) == 5 * 5
    assert all(r["latency_stderr"] != "" for r in rows)
    summary = json.loads(out.with_suffix(".json").read_text())
    assert summary["format_version"] == 1
    assert len(summary["speed"]) == 5
    assert summary["algorithms"]["random[K=8]"]["unique_groups"]["stderr"] >= 0


def test_bench_divide_k_config_error(tmp_path):
    cfg = write(tmp_path / "b.cfg", SMALL_SIM + "harness.algorithms = entropy-topk\nharness.ks = 5\n")
    assert main(["bench", "--config", cfg, "--output", str(tmp_path / "b.csv"), "--divide-k", "2"]) == 2


def test_verify_exit_codes(capsys):
    t0 = time.perf_counter()
    assert main(["verify", "--instances", "50"]) == 0
    assert time.perf_counter() - t0 < 30
    assert "violations: 0" in capsys.readouterr().out
    assert main(["verify", "--instances", "20", "--inject-fault"]) == 1
    out = capsys.readouterr().out
    assert "worst case:" in out and '"pool"' in out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "sievestream", "verify", "--instances", "5"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert "min ratio" in proc.stdout
