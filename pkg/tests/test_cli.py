import csv

import pytest
import tomli

from halfsync.cli import EXIT_FAULT, EXIT_OK, EXIT_USAGE, main

TINY = """
[model]
feature_dim = 2
hidden = 4
n_lstm_layers = 1
fc_hidden = 4
seq_len = 16

[precision]
preset = "fp16"

[train]
batch_size = 2
epochs = 1
horizon = 20

[cluster]
n = 2

[data]
n_shots = 40
n_channels = 2
length_range = [60, 90]
lead_range = [25, 40]
n_test_shots = 10
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return str(p)


def test_estimate(capsys):
    assert main(["estimate", "--npar", "18.2e6", "--batch", "256", "--bytes", "2", "--bw", "6.25e9"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "9.3184 GB" in out and "1.4909 s" in out


def test_capacity(capsys):
    assert main(["capacity"]) == EXIT_OK
    rows = [line.split() for line in capsys.readouterr().out.splitlines()[1:]]
    assert ["fp16", "64", "232"] == rows[-1][:3]


def test_usage_errors(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["train"]) == EXIT_USAGE
    assert main(["train", "--config", str(tmp_path / "missing.toml")]) == EXIT_USAGE
    assert main(["no-such-command"]) == EXIT_USAGE
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nfeature_dim = 2\nwidth = 3\n")
    assert main(["train", "--config", str(bad)]) == EXIT_USAGE
    assert "model.width" in capsys.readouterr().err


def test_numeric_fault_exit(cfg, tmp_path):
    assert main(["train", "--config", cfg, "--set", "train.loss_scale=1e9", "--out", str(tmp_path)]) == EXIT_FAULT


def test_train_evaluate_roc(cfg, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out)]) == EXIT_OK
    for name in ("metrics.csv", "timing.csv", "best.ckpt", "final.ckpt", "training.svg", "manifest.toml"):
        assert (out / name).exists()
    meta = tomli.loads((out / "manifest.toml").read_text())["meta"]
    assert meta["command"] == "train" and meta["seed"] == 0

    ev = tmp_path / "ev"
    args = ["--config", cfg, "--checkpoint", str(out / "best.ckpt"), "--split", "test", "--out", str(ev)]
    assert main(["evaluate", *args]) == EXIT_OK
    with open(ev / "evaluation.csv") as fh:
        row = next(csv.DictReader(fh))
    assert row["split"] == "test" and 0.0 <= float(row["auc"]) <= 1.0
    assert main(["roc", *args]) == EXIT_OK
    assert (ev / "roc.csv").read_text().startswith("threshold,fpr,tpr")

    # the manifest alone reproduces the run
    again = tmp_path / "again"
    assert main(["train", "--config", str(out / "manifest.toml"), "--out", str(again)]) == EXIT_OK
    assert (again / "metrics.csv").read_text() == (out / "metrics.csv").read_text()


def test_gen_data(cfg, tmp_path):
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    assert {p.name for p in tmp_path.glob("*.shots")} == {"train.shots", "val.shots", "test.shots"}
    run = tmp_path / "fromdir"
    assert main(["train", "--config", cfg, "--set", f"data.dir=\"{tmp_path}\"", "--out", str(run)]) == EXIT_OK


def test_bench_scaling(tmp_path, capsys):
    assert main(["bench-scaling", "--ns", "1,2,4,8", "--batches", "16", "--payload", "8",
                 "--out", str(tmp_path)]) == EXIT_OK
    assert "B = 4.000 ms" in capsys.readouterr().out
    assert (tmp_path / "scaling.csv").exists() and (tmp_path / "t_epoch.svg").exists()
    assert main(["bench-scaling", "--ns", "1,2"]) == EXIT_USAGE
