import json
import subprocess
import sys

import pytest

from mixcaps.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, [json.loads(line) for line in out.splitlines()], err


@pytest.fixture(scope="module")
def artefacts(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    data, ckpt = d / "d.mxcp", d / "m.ck"
    assert main(["generate", "--n", "40", "--seed", "3", "--out", str(data)]) == 0
    cfg = d / "train.cfg"
    cfg.write_text("# short run\nepochs = 1\nseed = 2\n")
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--config", str(cfg)]) == 0
    return data, ckpt


def test_generate_reports(capsys, tmp_path):
    code, recs, _ = run(capsys, "generate", "--n", "5", "--seed", "1", "--out", str(tmp_path / "x"),
                        "--set", "large_fraction=1.0")
    assert code == 0 and recs[0]["count"] == 5 and recs[0]["large_regime"] == 5


def test_train_log(capsys, artefacts, tmp_path):
    data, _ = artefacts
    code, recs, _ = run(capsys, "train", "--data", str(data), "--out", str(tmp_path / "m.ck"),
                        "--set", "epochs=2", "--set", "select_best=false")
    assert code == 0
    assert [r["epoch"] for r in recs if r["event"] == "epoch"] == [1, 2]
    assert recs[-1]["event"] == "saved"


def test_evaluate(capsys, artefacts):
    data, ckpt = artefacts
    code, recs, _ = run(capsys, "evaluate", "--checkpoint", str(ckpt), "--data", str(data))
    assert code == 0 and 0 <= recs[0]["auc"] <= 1 and recs[0]["n"] == 40


def test_noise_sweep(capsys, artefacts):
    data, ckpt = artefacts
    code, recs, _ = run(capsys, "noise-sweep", "--checkpoint", str(ckpt), "--data", str(data),
                        "--stds", "0,0.1")
    assert code == 0 and [r["std"] for r in recs] == [0.0, 0.1]


def test_gate_corr(capsys, artefacts):
    data, ckpt = artefacts
    code, recs, _ = run(capsys, "gate-corr", "--checkpoint", str(ckpt), "--data", str(data))
    assert code == 0 and set(recs[0]) >= {"volume", "diameter", "n"}


def test_analyze_routing(capsys, artefacts):
    data, ckpt = artefacts
    code, recs, _ = run(capsys, "analyze-routing", "--checkpoint", str(ckpt), "--data", str(data),
                        "--limit", "2", "--couplings")
    assert code == 0
    rounds = [r for r in recs if r.get("record") == "routing_round"]
    assert len(rounds) == 2 * 2 * 3 and all(not r["violations"] for r in rounds)
    assert len([r for r in recs if r.get("record") == "responsibility"]) == 2


def test_bootstrap(capsys, artefacts):
    data, _ = artefacts
    code, recs, _ = run(capsys, "bootstrap", "--data", str(data), "--iterations", "1", "--set", "epochs=1")
    assert code == 0 and recs[-1]["event"] == "bootstrap_summary"


def test_gradcheck_tiny(capsys):
    code, recs, _ = run(capsys, "gradcheck", "--preset", "tiny")
    assert code == 0 and recs[-1]["passed"] and recs[-1]["parameters"] > 0


def test_config_error_exit_code(capsys, artefacts):
    data, _ = artefacts
    code, _, err = run(capsys, "train", "--data", str(data), "--out", "x", "--set", "nonsense=1")
    assert code == 2 and json.loads(err)["error"] == "ConfigError"


def test_format_error_exit_code(capsys, tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"junk" * 20)
    code, _, err = run(capsys, "evaluate", "--checkpoint", str(bad), "--data", str(bad))
    assert code == 7 and json.loads(err)["error"] == "FormatError"


def test_shape_mismatch_exit_code(capsys, artefacts, tmp_path):
    _, ckpt = artefacts
    small = tmp_path / "tiny.mxcp"
    assert main(["generate", "--n", "4", "--out", str(small)]) == 0
    capsys.readouterr()
    code, _, err = run(capsys, "train", "--data", str(small), "--out", str(tmp_path / "t.ck"),
                       "--set", "preset=tiny", "--set", "epochs=1")
    assert code == 3 and json.loads(err)["error"] == "DimensionError"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mixcaps.cli", "generate", "--n", "2", "--out",
                           str(tmp_path / "a")], capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["count"] == 2
