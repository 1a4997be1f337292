import csv
import io
import json
import subprocess
import sys

import pytest

from approxcnn.cli import BENCH_COLUMNS, main
from approxcnn.evaluation import CSV_COLUMNS


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:  # argparse usage errors
        return exc.code


@pytest.fixture(scope="module")
def model(tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "tiny.json"
    assert run("train", "--synth", "8,10,16", "--epochs", "3", "--seed", "1", "--out", out) == 0
    return out


def _rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_bench_kernels(tmp_path):
    out = tmp_path / "b.csv"
    assert run("bench-kernels", "--samples", "2000", "--range", "1,256", "--out", out) == 0
    rows = {r["kernel"]: r for r in _rows(out)}
    assert list(_rows(out)[0]) == list(BENCH_COLUMNS)
    assert float(rows["exact"]["mean_rel_error"]) == 0.0
    assert float(rows["lns"]["max_rel_error"]) <= 0.1113
    assert float(rows["lns"]["underestimate_fraction"]) <= 1.0
    again = tmp_path / "b2.csv"
    run("bench-kernels", "--samples", "2000", "--range", "1,256", "--out", again)
    assert out.read_bytes() == again.read_bytes()


def test_bench_usage_errors(tmp_path):
    out = tmp_path / "b.csv"
    assert run("bench-kernels", "--samples", "10", "--out", out) == 2
    assert run("bench-kernels", "--kernels", "exact,bogus", "--out", out) == 2
    assert run("bench-kernels", "--range", "5,1", "--out", out) == 2
    assert not out.exists()


def test_bench_json_subset(tmp_path):
    out = tmp_path / "b.json"
    assert run("bench-kernels", "--samples", "1000", "--kernels", "tirud,dsm8", "--format", "json", "--out", out) == 0
    assert [r["kernel"] for r in json.loads(out.read_text())] == ["tirud", "dsm8"]


def test_inspect_model(model, tmp_path):
    out = tmp_path / "i.json"
    assert run("inspect-model", "--model", model, "--out", out) == 0
    info = json.loads(out.read_text())
    assert info["parameters"] == 5104 and info["conv_layers"] == 4 and info["classes"] == 8
    assert info["exact_ops_per_image"]["mul"] == 153_696


def test_eval_single_layer(model, tmp_path):
    out = tmp_path / "e.csv"
    assert run("eval", "--model", model, "--synth", "8,10,16", "--seed", "1",
               "--assign", "1=tirud,2=exact,3=exact,4=exact", "--out", out) == 0
    (row,) = _rows(out)
    assert list(row) == list(CSV_COLUMNS)
    assert (row["layer1"], row["layer2"], row["layer4"]) == ("tirud", "exact", "exact")
    assert 0.0 <= float(row["accuracy_percent"]) <= 100.0


def test_eval_shorthand_matches_long_form(model, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    common = ["--model", model, "--synth", "8,10,16", "--format", "json"]
    assert run("eval", *common, "--assign", "RT", "--out", a) == 0
    assert run("eval", *common, "--assign", "1=rounded,2=tirud", "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_sweep_pattern_set(model, tmp_path):
    out = tmp_path / "s.json"
    assert run("sweep", "--model", model, "--synth", "8,10,16", "--patterns", "LHH,HLH",
               "--pools", "L=rounded;H=lns,tirud", "--format", "json", "--out", out) == 0
    doc = json.loads(out.read_text())
    assert sorted(doc["pattern_stats"]) == ["HLH", "LHH"]
    assert {r["pattern"] for r in doc["rows"]} == {"HLH", "LHH"}
    assert all(r["layer4"] == "exact" for r in doc["rows"])


def test_unknown_kernel_is_a_usage_error(model, tmp_path):
    out = tmp_path / "e.csv"
    assert run("eval", "--model", model, "--synth", "8,10,16", "--assign", "1=warp", "--out", out) == 2
    assert run("sweep", "--model", model, "--synth", "8,10,16", "--pools", "L=warp;H=lns", "--out", out) == 2
    assert run("sweep", "--model", model, "--synth", "8,10,16", "--patterns", "LLLL", "--out", out) == 2
    assert run("eval", "--model", model, "--synth", "8,10,16", "--op-weights", "div=2", "--out", out) == 2
    assert run("eval", "--model", model, "--synth", "8,10,16", "--workers", "0", "--out", out) == 2
    assert run("eval", "--model", model, "--out", out) == 2
    assert not out.exists()


def test_data_errors_exit_1(tmp_path):
    out = tmp_path / "e.csv"
    assert run("eval", "--model", tmp_path / "missing.json", "--synth", "8,10,16", "--out", out) == 1
    (tmp_path / "m.csv").write_text("nope.ppm,0\n")
    assert run("train", "--manifest", tmp_path / "m.csv", "--out", tmp_path / "t.json") == 1
    assert not out.exists() and not (tmp_path / "t.json").exists()


def test_dataset_synth(tmp_path):
    out = tmp_path / "ds"
    assert run("dataset-synth", "--synth", "3,2,8", "--out", out) == 0
    assert len((out / "manifest.csv").read_text().splitlines()) == 6
    assert run("dataset-synth", "--synth", "3,2,8", "--out", out) == 1
    assert run("dataset-synth", "--synth", "3,2", "--out", tmp_path / "x") == 2


def test_train_on_manifest_and_history(tmp_path):
    ds_dir = tmp_path / "ds"
    assert run("dataset-synth", "--synth", "2,5,16", "--out", ds_dir) == 0
    model, hist = tmp_path / "m.json", tmp_path / "h.json"
    assert run("train", "--manifest", ds_dir / "manifest.csv", "--epochs", "1", "--out", model,
               "--history", hist) == 0
    assert json.loads(hist.read_text())[0]["epoch"] == 1
    out = tmp_path / "e.csv"
    assert run("eval", "--model", model, "--manifest", ds_dir / "manifest.csv", "--out", out) == 0
    assert len(_rows(out)) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "approxcnn", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "sweep" in proc.stdout
