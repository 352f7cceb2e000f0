import dataclasses
import json
import subprocess
import sys

import numpy as np
import pytest

from adtransfer import cli, presets
from adtransfer.datasets import load_dataset, save_dataset

FAST = ["--pretrain-epochs", "2", "--adversarial-epochs", "2", "--batch-size", "16"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "d"
    assert cli.main(["gen-data", "--out", str(out), "--seed", "1", "--n-s", "96", "--n-t", "96"]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "r"
    assert cli.main(["train", "--data", str(data_dir), "--out", str(out), "--preset", "synthetic",
                     "--hist-every", "2"] + FAST) == 0
    return out


def test_gen_data_outputs(data_dir):
    names = {p.name for p in data_dir.iterdir()}
    assert {"source.csv", "target.csv", "dataset.json", "manifest.json"} <= names
    man = json.loads((data_dir / "manifest.json").read_text())
    assert man["command"] == "gen-data" and man["seed"] == 1 and man["config"]["realized_anomalies"] == 24
    assert "source.csv" in man["outputs"] and man["build_id"]


def test_rate_out_of_range_is_usage_error(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "x"), "--anomaly-rate", "1.2"]) == 2
    assert "anomaly-rate" in capsys.readouterr().err


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as err:
        cli.main(["train"])
    assert err.value.code == 2


def test_train_outputs(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    assert {"epochs.csv", "checkpoint.npz", "weights.csv", "metrics.json", "manifest.json", "run.log",
            "hist_epoch000.csv", "hist_epoch002.csv"} <= names
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert 0 <= metrics["auc"] <= 1 and metrics["n_scored"] == 48
    assert "time" not in json.dumps(metrics)
    lines = (run_dir / "epochs.csv").read_text().splitlines()
    assert len(lines) == 5
    weights = np.loadtxt(run_dir / "weights.csv", delimiter=",", skiprows=1)
    assert weights.shape == (48, 4) and abs(weights[:, 3].mean() - 1) < 1e-9


def test_eval_reproduces_training_auc_and_is_byte_stable(run_dir, data_dir, tmp_path):
    args = ["eval", "--checkpoint", str(run_dir / "checkpoint.npz"), "--data", str(data_dir)]
    assert cli.main(args + ["--out", str(tmp_path / "e1")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "e2")]) == 0
    for name in ("metrics.json", "roc.csv", "scores.csv", "hist_final.csv"):
        assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()
    ev = json.loads((tmp_path / "e1" / "metrics.json").read_text())
    tr = json.loads((run_dir / "metrics.json").read_text())
    assert ev["auc"] == tr["auc"]


def test_eval_all_split(run_dir, data_dir, tmp_path):
    assert cli.main(["eval", "--checkpoint", str(run_dir / "checkpoint.npz"), "--data", str(data_dir),
                     "--out", str(tmp_path / "e"), "--split", "all"]) == 0
    assert json.loads((tmp_path / "e" / "metrics.json").read_text())["n_scored"] == 96


def test_eval_dimension_mismatch_exits_4(run_dir, tmp_path, caplog):
    save_dataset(presets.synthetic_task(0.25, 0, n_s=10, n_t=10, embed_dim=5), tmp_path / "d5")
    code = cli.main(["eval", "--checkpoint", str(run_dir / "checkpoint.npz"), "--data", str(tmp_path / "d5"),
                     "--out", str(tmp_path / "e")])
    assert code == 4
    assert "expects samples of shape (16,)" in caplog.text


def test_eval_without_labels_warns_and_skips_auc(run_dir, data_dir, tmp_path, caplog):
    data = load_dataset(data_dir)
    save_dataset(dataclasses.replace(data, target_eval_labels=None), tmp_path / "u")
    assert cli.main(["eval", "--checkpoint", str(run_dir / "checkpoint.npz"), "--data", str(tmp_path / "u"),
                     "--out", str(tmp_path / "e")]) == 0
    assert "AUC omitted" in caplog.text
    assert json.loads((tmp_path / "e" / "metrics.json").read_text())["auc"] is None
    assert not (tmp_path / "e" / "roc.csv").exists()


def test_missing_checkpoint_exits_4(data_dir, tmp_path):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.npz"), "--data", str(data_dir),
                     "--out", str(tmp_path / "e")]) == 4


def test_divergence_exits_3(data_dir, tmp_path):
    data = load_dataset(data_dir)
    save_dataset(dataclasses.replace(data, X_s=data.X_s * 1e200, X_t=data.X_t * 1e200), tmp_path / "h")
    assert cli.main(["train", "--data", str(tmp_path / "h"), "--out", str(tmp_path / "r")] + FAST) == 3


def test_config_precedence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nlambda = 0.2\nlr = 0.005\nnormalize_weights = no\n")
    cfg, origin = cli.resolve_config("synthetic", str(ini), {"lr": 0.002, "seed": None})
    assert cfg.lam == 0.2 and origin["lambda"] == f"file {ini}"
    assert cfg.lr == 0.002 and origin["lr"] == "flag"
    assert cfg.classifier_lr == 1e-4 and origin["classifier_lr"] == "default (synthetic)"
    assert cfg.weight_cfg.normalize is False
    assert cli.resolve_config("default", None, {})[0].lr == 0.01


@pytest.mark.parametrize("text", ["[train]\nbogus = 1\n", "[train]\nlambda = x\n", "[train]\neta = 2\n",
                                  "[train]\narch = vgg\n", "no section\n"])
def test_bad_config_is_usage_error(tmp_path, text):
    ini = tmp_path / "c.ini"
    ini.write_text(text)
    with pytest.raises(cli.UsageError):
        cli.resolve_config("default", str(ini), {})


def test_sweep_command(tmp_path):
    out = tmp_path / "s"
    assert cli.main(["sweep", "--axis", "anomaly-rate", "--grid", "0.1,0.3", "--repeats", "2", "--method", "both",
                     "--preset", "synthetic", "--out", str(out)] + FAST) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[1].startswith("anomaly_rate,0.1,proposed,")
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["methods"] == ["proposed", "finetune"]


def test_sweep_rejects_bad_grid(tmp_path):
    base = ["sweep", "--out", str(tmp_path / "s")]
    assert cli.main(base + ["--axis", "anomaly-rate", "--grid", "0.1,1.5"]) == 2
    assert cli.main(base + ["--axis", "w-adloss", "--grid", "a,b"]) == 2
    assert cli.main(base + ["--axis", "w-adloss", "--grid", "1", "--data-source", "idx"]) == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "adtransfer.cli", "gen-data", "--out", str(tmp_path / "d"),
                          "--n-s", "8", "--n-t", "8"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "d" / "dataset.json").exists()


def test_zero_adversarial_epochs_trains_pretraining_only(data_dir, tmp_path):
    out = tmp_path / "r"
    assert cli.main(["train", "--data", str(data_dir), "--out", str(out), "--preset", "synthetic",
                     "--pretrain-epochs", "2", "--adversarial-epochs", "0", "--batch-size", "16"]) == 0
    rows = (out / "epochs.csv").read_text().splitlines()[1:]
    assert len(rows) == 2 and all(",pretrain," in f",{r}," for r in rows)


def test_one_point_sweep_matches_train(tmp_path):
    data = tmp_path / "d"
    assert cli.main(["gen-data", "--out", str(data), "--seed", "0", "--anomaly-rate", "0.25"]) == 0
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--preset", "synthetic",
                     "--seed", "0"] + FAST) == 0
    assert cli.main(["sweep", "--axis", "anomaly-rate", "--grid", "0.25", "--repeats", "1", "--preset",
                     "synthetic", "--seed", "0", "--out", str(tmp_path / "s")] + FAST) == 0
    auc = json.loads((tmp_path / "r" / "metrics.json").read_text())["auc"]
    row = (tmp_path / "s" / "sweep.csv").read_text().splitlines()[1].split(",")
    assert float(row[-1]) == pytest.approx(auc, abs=1e-12)


def test_sweep_repeats_give_one_column_each(tmp_path):
    assert cli.main(["sweep", "--axis", "w-adloss", "--grid", "1", "--repeats", "5", "--preset", "synthetic",
                     "--out", str(tmp_path / "s"), "--pretrain-epochs", "1", "--adversarial-epochs", "0"]) == 0
    header = (tmp_path / "s" / "sweep.csv").read_text().splitlines()[0].split(",")
    assert header[-5:] == [f"auc_{i}" for i in range(5)]


def test_shipped_config_matches_synthetic_preset():
    from pathlib import Path
    ini = Path(__file__).resolve().parents[1] / "configs" / "synthetic.ini"
    assert cli.resolve_config("default", str(ini), {})[0] == presets.synthetic_train_config()
