import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import TWO_BUS
from gnnopf.cli import MANIFEST_NAME, main

TRAIN_CFG = {"epochs": 2, "batch_size": 8, "gnn": {"K": 2, "F": 4},
             "optimizer": {"kind": "adam", "learning_rate": 1e-3},
             "solver": {"restarts": 1, "max_iters": 200}}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TRAIN_CFG))
    codes = [
        run("sample", TWO_BUS, "--n", 20, "--seed", 4, "--out", root / "train"),
        run("sample", TWO_BUS, "--n", 3, "--seed", 5, "--out", root / "test"),
        run("train", TWO_BUS, "--data", root / "train", "--config", cfg, "--out", root / "model", "--workers", 1),
        run("solve", TWO_BUS, "--data", root / "test", "--config", cfg, "--out", root / "base", "--workers", 1),
        run("eval", TWO_BUS, "--checkpoint", root / "model" / "checkpoint.json", "--data", root / "test",
            "--baseline", root / "base", "--out", root / "eval"),
    ]
    return root, codes


def test_pipeline_exit_codes(pipeline):
    _, codes = pipeline
    assert codes == [0] * 5


def test_outputs_and_manifests(pipeline):
    root, _ = pipeline
    for sub, files in [("train", ["manifest.json"]), ("model", ["checkpoint.json", "history.csv"]),
                       ("base", ["results.json"]), ("eval", ["eval.json", "errors.csv"])]:
        d = root / sub
        assert all((d / f).exists() for f in files)
        assert len(list(d.glob(MANIFEST_NAME))) == 1
        m = json.loads((d / MANIFEST_NAME).read_text())
        assert set(m) >= {"command", "config", "input_digests", "seed", "tool_version", "started", "finished"}
        assert all(len(v) == 64 for v in m["input_digests"].values())
    ev = json.loads((root / "eval" / "eval.json").read_text())
    assert ev["n_samples"] == 3 and ev["n_converged"] is not None
    assert json.loads((root / "model" / MANIFEST_NAME).read_text())["seed"] == 0


def test_rerun_is_bit_exact(pipeline, tmp_path):
    root, _ = pipeline
    assert run("sample", TWO_BUS, "--n", 20, "--seed", 4, "--out", tmp_path / "train") == 0
    for f in (root / "train").iterdir():
        if f.name != MANIFEST_NAME:
            assert (tmp_path / "train" / f.name).read_bytes() == f.read_bytes()
    assert run("train", TWO_BUS, "--data", tmp_path / "train", "--config", root / "cfg.json",
               "--out", tmp_path / "model", "--workers", 1) == 0
    assert ((tmp_path / "model" / "checkpoint.json").read_bytes()
            == (root / "model" / "checkpoint.json").read_bytes())


def test_inputs_not_mutated(pipeline):
    root, _ = pipeline
    before = {f: f.read_bytes() for f in (root / "test").iterdir()}
    assert run("eval", TWO_BUS, "--checkpoint", root / "model" / "checkpoint.json", "--data", root / "test",
               "--out", root / "eval2") == 0
    assert {f: f.read_bytes() for f in (root / "test").iterdir()} == before


def test_dataset_from_other_case(pipeline, capsys):
    root, _ = pipeline
    code = run("eval", "case30", "--checkpoint", root / "model" / "checkpoint.json", "--data", root / "test",
               "--out", root / "bad")
    assert code == 2
    assert "dataset was sampled from a different case" in capsys.readouterr().err


def test_check_state(pipeline, capsys):
    root, _ = pipeline
    state = root / "base" / "states" / "000000.csv"
    assert run("check", TWO_BUS, "--state", state, "--data", root / "test", "--sample", 0) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n_instances"] > 0
    assert run("check", TWO_BUS, "--state", state, "--data", root / "test", "--sample", 7) == 2


def test_parse_counts(capsys, case30_path):
    assert run("parse", case30_path) == 0
    summary = json.loads(capsys.readouterr().out)
    assert (summary["n_buses"], summary["n_generators"], summary["n_branches"]) == (30, 6, 41)


def test_graph_edges_csv(tmp_path, capsys):
    assert run("graph", "case30", "--beta", 0.01, "--edges-csv", tmp_path / "e.csv") == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["edges_kept"] + stats["edges_dropped"] == stats["edges_total"]
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert len(rows) == stats["edges_kept"] + 1


@pytest.mark.parametrize("argv", [
    ["sample", "case30", "--n", "0", "--seed", "1", "--out", "x"],
    ["sample", "case30", "--n", "2", "--seed", "1", "--out", "x", "--bogus"],
    ["parse", "no_such_case.m"],
    ["check", "case30", "--state", "no_such_state.csv"],
])
def test_usage_errors(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    err = capsys.readouterr().err.strip()
    assert err


def test_parse_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.m"
    bad.write_text("function mpc = bad\nmpc.baseMVA = 100;\nmpc.bus = [\n1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;\n];\n")
    assert run("parse", bad) == 2
    assert "missing gen section" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "gnnopf", "parse", "case30"], capture_output=True, text=True)
    assert out.returncode == 0 and json.loads(out.stdout)["n_buses"] == 30


def test_state_csv_reader(tmp_path, capsys):
    x = np.zeros((2, 4))
    x[:, 2] = 1.0
    path = tmp_path / "s.csv"
    np.savetxt(path, x, delimiter=",")
    assert run("check", TWO_BUS, "--state", path) == 0
    path.write_text("1,2,3\n")
    assert run("check", TWO_BUS, "--state", path) == 2
