import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from livecast.cli import main
from livecast.harness import ExperimentPlan, run
from livecast.ingest import load_frames


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_complexity_arima(capsys):
    assert main(["complexity", "--model", "arima", "--p", "3", "--q", "5"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["memory_rolling"] == 9 and out["flops"] == 8 and out["memory_flsp"] is None


def test_complexity_table_and_formulas(capsys, tmp_path):
    assert main(["complexity", "--model", "lstm", "--hidden", "1500", "--batch", "15", "--buffer", "400",
                 "--buffer-length", "300", "--format", "table", "--out-dir", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "90,000" in text and "1,200" in text and "7.67" in text
    assert json.loads((tmp_path / "cost.json").read_text())["memory_flsp"] == 90000
    assert main(["complexity", "--formulas"]) == 0
    assert r"\mathcal{O}(p+q)" in capsys.readouterr().out


def test_generate_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["generate", "--seed", "7", "--length", "200", "--height", "4", "--width", "4",
                     "--out-dir", str(d)]) == 0
    assert sha(a / "frames.lcst") == sha(b / "frames.lcst")
    m = json.loads((a / "manifest.json").read_text())
    assert m["seed"] == 7 and m["outputs"]["frames.lcst"] == sha(a / "frames.lcst")
    assert {"numpy", "python", "livecast"} <= set(m["versions"])


def test_manifest_config_reproduces_outputs(tmp_path):
    a = tmp_path / "a"
    assert main(["generate", "--seed", "3", "--length", "100", "--height", "3", "--width", "3",
                 "--format", "csv", "--out-dir", str(a)]) == 0
    cfg = json.loads((a / "manifest.json").read_text())["config"]
    cfg = {k: v for k, v in cfg.items() if k not in ("command", "out_dir", "verbose")}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    b = tmp_path / "b"
    assert main(["generate", "--config", str(tmp_path / "cfg.json"), "--out-dir", str(b)]) == 0
    assert sha(a / "frames.csv") == sha(b / "frames.csv")


def test_config_env_and_flag_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "length": 50, "height": 2, "width": 2}))
    out = {}
    monkeypatch.delenv("LIVECAST_SEED", raising=False)
    for name, extra, env in (("file", [], None), ("env", [], "9"), ("flag", ["--seed", "11"], "9")):
        if env is None:
            monkeypatch.delenv("LIVECAST_SEED", raising=False)
        else:
            monkeypatch.setenv("LIVECAST_SEED", env)
        d = tmp_path / name
        assert main(["generate", "--config", str(cfg), "--out-dir", str(d), *extra]) == 0
        m = json.loads((d / "manifest.json").read_text())
        out[name] = m["seed"]
        assert m["config"]["length"] == 50
    assert out == {"file": 5, "env": 9, "flag": 11}


def test_exit_codes(tmp_path, monkeypatch, capsys):
    assert main(["generate", "--bogus"]) == 2
    assert main(["no-such-command"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"not_a_flag": 1}))
    assert main(["generate", "--config", str(bad), "--out-dir", str(tmp_path / "x")]) == 2
    monkeypatch.setenv("LIVECAST_SEED", "abc")
    assert main(["generate", "--out-dir", str(tmp_path / "y")]) == 2
    monkeypatch.delenv("LIVECAST_SEED")
    # a missing data file is a runtime error
    assert main(["predict", "--weights", str(tmp_path / "none.lcst"), "--data", str(tmp_path / "none.lcst"),
                 "--out-dir", str(tmp_path / "z")]) == 1
    assert main(["complexity", "--model", "convlstm", "--kernel", "2"]) == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--seed", "1", "--length", "400", "--height", "4", "--width", "4",
                 "--out-dir", str(root / "data")]) == 0
    data = root / "data" / "frames.lcst"
    assert main(["train", "--model", "convlstm", "--data", str(data), "--height", "4", "--width", "4",
                 "--convlstm-channels", "3", "--cnn-channels", "3", "--epochs", "1", "--train-length", "300",
                 "--out-dir", str(root / "model")]) == 0
    assert main(["train", "--model", "arima", "--p", "1", "--q", "1", "--data", str(data),
                 "--train-length", "300", "--out-dir", str(root / "stat")]) == 0
    return root, data


def transcript(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_predict_flsp_equals_full_buffer_rolling(trained):
    root, data = trained
    common = ["--weights", str(root / "model" / "model.lcst"), "--data", str(data), "--seed-length", "300",
              "--feeds", "4"]
    assert main(["predict", *common, "--algo", "flsp", "--out-dir", str(root / "p1")]) == 0
    assert main(["predict", *common, "--algo", "rolling", "--buffer", "999999", "--out-dir", str(root / "p2")]) == 0
    a, b = transcript(root / "p1" / "transcript.csv"), transcript(root / "p2" / "transcript.csv")
    assert a == b
    assert len(a) == 1 + 5 * 30 * 3 * 16


def test_predict_async_and_buffered(trained):
    root, data = trained
    w = str(root / "model" / "model.lcst")
    for algo in ("flsp", "rolling"):
        assert main(["predict", "--weights", w, "--data", str(data), "--seed-length", "300", "--feeds", "3",
                     "--algo", algo, "--buffer", "2", "--mode", "async", "--out-dir", str(root / f"a{algo}")]) == 0


def test_predict_statistical_model(trained, capsys):
    root, data = trained
    w = str(root / "stat" / "model.json")
    args = ["--weights", w, "--data", str(data), "--seed-length", "300", "--feeds", "3"]
    assert main(["predict", *args, "--algo", "rolling", "--out-dir", str(root / "s1")]) == 0
    rows = transcript(root / "s1" / "transcript.csv")
    assert {(r[3], r[4]) for r in rows[1:]} == {("2", "2")}
    # statistical models have no state to restore
    assert main(["predict", *args, "--algo", "flsp", "--out-dir", str(root / "s2")]) == 2


def test_ingest_command(tmp_path):
    t0 = 1_383_260_400_000
    src = tmp_path / "cdr.txt"
    src.write_text(f"1\t{t0}\t39\t1\t1\t1\t1\t1\n4\t{t0 + 600_000}\t39\t0\t0\t2\t0\t0\n")
    assert main(["ingest", str(src), "--height", "2", "--width", "3", "--start-ms", str(t0), "--slots", "2",
                 "--out-dir", str(tmp_path / "o")]) == 0
    f = load_frames(tmp_path / "o" / "frames.lcst")
    assert f.shape == (2, 3, 2, 3) and f[1, 0, 1, 0] == 2
    src.write_text("1\tbad\n")
    assert main(["ingest", str(src), "--height", "2", "--width", "3", "--start-ms", str(t0), "--slots", "2",
                 "--out-dir", str(tmp_path / "o2")]) == 1


def test_experiment_command(tmp_path):
    plan = {"models": ["convlstm"], "repetitions": 1, "height": 4, "width": 4, "train_length": 300,
            "stream_length": 90, "epochs": 1, "buffers": [2], "modes": ["sync"],
            "model_overrides": {"convlstm": {"convlstm_channels": [2], "cnn_channels": [3]}}}
    (tmp_path / "plan.json").write_text(json.dumps(plan))
    assert main(["experiment", "--plan", str(tmp_path / "plan.json"), "--jobs", "1",
                 "--out-dir", str(tmp_path / "out")]) == 0
    for name in ("results.csv", "results.json", "plot_data.csv", "table.txt", "manifest.json", "partial.jsonl"):
        assert (tmp_path / "out" / name).exists()
    (tmp_path / "bad.json").write_text(json.dumps({"models": ["gru"]}))
    assert main(["experiment", "--plan", str(tmp_path / "bad.json"), "--out-dir", str(tmp_path / "o2")]) == 2


def test_results_do_not_depend_on_jobs():
    p = ExperimentPlan(models=("arima", "convlstm"), repetitions=1, height=4, width=4, train_length=300,
                       stream_length=90, epochs=1, buffers=(2,), modes=("sync",), arima=(1, 0, 0),
                       model_overrides={"convlstm": {"convlstm_channels": [2], "cnn_channels": [3]}})
    a, b = run(p, jobs=1), run(p, jobs=2)
    key = lambda t: [(r.model, r.label, r.mode, r.status, repr(r.mse), r.per_seed.__repr__()) for r in t.rows]
    assert key(a) == key(b)


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "livecast", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "livecast" in out.stdout
