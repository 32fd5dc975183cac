import json

import pytest

from dmsn.cli import main
from dmsn.trainer import TrainConfig


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--out", str(root / "data"), "--num-images", "6", "--test-images", "4"]) == 0
    cfg = TrainConfig(
        epochs=2, phase2_start_epoch=1, steps_per_epoch=3, n_proposals=32, probe_every=0,
        train_data="data/train", test_data="data/test",
    )
    cfg.to_file(root / "run.cfg")
    return root


def test_generate_layout(workspace):
    for split, n in (("train", 6), ("test", 4)):
        manifest = json.loads((workspace / "data" / split / "manifest.json").read_text())
        assert [d["num_images"] for d in manifest["domains"]] == [n, n, n]


def test_train_eval_report(workspace, capsys):
    out = workspace / "runs" / "dmsn"
    assert main(["train", "--config", str(workspace / "run.cfg"), "--out", str(out)]) == 0
    assert (out / "final.npz").is_file() and (out / "log.csv").is_file() and (out / "report.json").is_file()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["steps"] == 6 and summary["status"] == "ok"

    rep = workspace / "eval.json"
    code = main(["eval", "--ckpt", str(out / "final.npz"), "--data", str(workspace / "data"), "--split", "test",
                 "--out", str(rep), "--include-empty-classes"])
    assert code == 0
    data = json.loads(rep.read_text())
    assert data == json.loads((out / "report.json").read_text()) | {"config_fingerprint": data["config_fingerprint"]}
    assert "mAP" in capsys.readouterr().out

    assert main(["report", "--runs", str(workspace / "runs")]) == 0
    assert (workspace / "runs" / "report" / "summary.md").is_file()


def test_train_resume_and_max_steps(workspace):
    out = workspace / "runs" / "partial"
    cfg = str(workspace / "run.cfg")
    assert main(["train", "--config", cfg, "--out", str(out), "--max-steps", "2"]) == 0
    assert json.loads((out / "summary.json").read_text())["steps"] == 2
    assert main(["train", "--config", cfg, "--out", str(out), "--resume", str(out / "final.npz")]) == 0
    assert json.loads((out / "summary.json").read_text())["steps"] == 6


def test_errors_exit_two(workspace, capsys):
    code = main(["eval", "--ckpt", str(workspace / "missing.npz"), "--data", str(workspace / "data"),
                 "--split", "test", "--out", str(workspace / "x.json")])
    assert code == 2
    assert "error:" in capsys.readouterr().err
    (workspace / "bad.cfg").write_text("nonsense = 1\n")
    assert main(["train", "--config", str(workspace / "bad.cfg"), "--out", str(workspace / "bad")]) == 2
