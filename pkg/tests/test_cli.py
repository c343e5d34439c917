import csv
import json

import numpy as np
import pytest

from robustvit import training
from robustvit.cli import main
from robustvit.data import load_checkpoint, load_tensor
from robustvit.model import RobustViT

from conftest import tiny_config


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(finetune_epochs=1, det_epochs=1, pretrain_epochs=1)
    (root / "tiny.cfg").write_text(cfg.dumps())
    assert main(["synth-data", "--out", str(root / "data"), "--n", "24", "--size", "8x8x1", "--seed", "2"]) == 0
    assert main(["pretrain", "--config", str(root / "tiny.cfg"), "--data", str(root / "data"),
                 "--out", str(root / "pre")]) == 0
    assert main(["finetune", "--config", str(root / "tiny.cfg"), "--data", str(root / "data"),
                 "--checkpoint", str(root / "pre" / "checkpoint.mtar"), "--out", str(root / "ft")]) == 0
    return root


def common(work, *extra):
    return ["--config", str(work / "tiny.cfg"), "--data", str(work / "data"),
            "--checkpoint", str(work / "ft" / "checkpoint.mtar"), *extra]


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_training_logs_have_long_format(work):
    rows = read_csv(work / "pre" / "log.csv")
    assert list(rows[0]) == ["epoch", "split", "metric", "value"]
    assert {r["metric"] for r in rows} >= {"ce", "snn", "det_acc", "rec_clean", "rec_adv", "cl"}
    assert {r["metric"] for r in read_csv(work / "ft" / "log.csv")} == {"ce", "acc"}
    meta = load_checkpoint(work / "ft" / "checkpoint.mtar").meta
    assert meta["kind"] == "robustvit" and meta["stage"] == "finetuned"


def test_eval_counts_add_up(work):
    out = work / "eval"
    assert main(["eval", *common(work, "--out", str(out), "--attack", "none", "--attack", "fgsm")]) == 0
    rows = read_csv(out / "metrics.csv")
    assert [r["attack"] for r in rows] == ["none", "fgsm"]
    for r in rows:
        assert int(r["correct"]) + int(r["incorrect"]) == int(r["n"])
        assert float(r["accuracy"]) == pytest.approx(int(r["correct"]) / int(r["n"]))


def test_zero_budget_equals_standard_accuracy(work):
    out = work / "eval0"
    assert main(["eval", *common(work, "--out", str(out), "--attack", "none", "--attack", "pgd-10",
                                 "--epsilon", "0")]) == 0
    rows = read_csv(out / "metrics.csv")
    assert rows[0]["accuracy"] == rows[1]["accuracy"]


def test_attack_writes_sidecar(work):
    out = work / "adv"
    assert main(["attack", *common(work, "--out", str(out), "--attack", "fgsm", "--epsilon", "8/255")]) == 0
    meta = json.loads((out / "adversarial.json").read_text())
    x = load_tensor(out / "adversarial.mten")
    assert meta["attack"] == "fgsm" and meta["steps"] == 1 and meta["count"] == len(x)
    assert meta["epsilon"] == pytest.approx(8 / 255)
    clean = load_tensor(work / "data" / "test_images.mten")
    assert np.abs(x - clean).max() <= 8 / 255 + 1e-6
    assert len(load_tensor(out / "labels.mten")) == len(x)


def test_saliency_command(work):
    out = work / "sal"
    assert main(["saliency", *common(work, "--out", str(out))]) == 0
    maps = load_tensor(out / "saliency.mten")
    assert maps.shape == load_tensor(work / "data" / "test_images.mten").shape
    assert maps.min() >= 0 and maps.max() <= 1


def test_export_embeddings(work):
    out = work / "emb"
    assert main(["export-embeddings", *common(work, "--out", str(out))]) == 0
    rows = read_csv(out / "embeddings.csv")
    assert {r["kind"] for r in rows} == {"detector", "z_bar_clean", "z_bar_adv", "z_hat"}


def test_unknown_attack_and_switch_are_config_errors(work, capsys):
    assert main(["eval", *common(work, "--out", str(work / "x"), "--attack", "cw")]) == 2
    assert main(["ablate", *common(work, "--out", str(work / "x"), "--switch", "no-head")]) == 2
    assert "no-head" in capsys.readouterr().err


def test_bad_config_exit_code(work, tmp_path):
    (tmp_path / "bad.cfg").write_text("lam = 7\n")
    code = main(["pretrain", "--config", str(tmp_path / "bad.cfg"), "--data", str(work / "data"),
                 "--out", str(tmp_path / "o")])
    assert code == 2


def test_missing_files_exit_code(work, tmp_path):
    assert main(["pretrain", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 4
    (tmp_path / "junk.mtar").write_bytes(b"garbage")
    assert main(["eval", "--data", str(work / "data"), "--checkpoint", str(tmp_path / "junk.mtar"),
                 "--out", str(tmp_path / "o")]) == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(work, tmp_path):
    cfg = tiny_config(det_lr=1e38, scale_lr_by_batch=False, det_epochs=3)
    (tmp_path / "hot.cfg").write_text(cfg.dumps())
    code = main(["pretrain", "--config", str(tmp_path / "hot.cfg"), "--data", str(work / "data"),
                 "--out", str(tmp_path / "o")])
    assert code == 3


def test_zero_epochs_checkpoint_equals_initialisation(work, tmp_path):
    assert main(["pretrain", "--config", str(work / "tiny.cfg"), "--data", str(work / "data"),
                 "--epochs", "0", "--out", str(tmp_path)]) == 0
    ckpt = load_checkpoint(tmp_path / "checkpoint.mtar")
    fresh = RobustViT(tiny_config(det_epochs=0, pretrain_epochs=0), (8, 8, 1), 2).state_dict()
    assert list(ckpt.tensors) == list(fresh)
    for k in fresh:
        np.testing.assert_array_equal(ckpt.tensors[k], fresh[k])


def test_runs_are_byte_identical(work, tmp_path):
    for name in ("a", "b"):
        assert main(["finetune", "--config", str(work / "tiny.cfg"), "--data", str(work / "data"),
                     "--checkpoint", str(work / "pre" / "checkpoint.mtar"), "--out", str(tmp_path / name)]) == 0
    for f in ("checkpoint.mtar", "log.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_no_ae_switch_feeds_half(work, tmp_path, monkeypatch):
    seen = []
    original = training.ensemble_logits

    def spy(model, x, vc, va, p):
        seen.append(np.asarray(p.data if hasattr(p, "data") else p))
        return original(model, x, vc, va, p)
    monkeypatch.setattr(training, "ensemble_logits", spy)
    assert main(["ablate", *common(work, "--out", str(tmp_path), "--switch", "no-ae",
                                   "--attack", "fgsm")]) == 0
    assert seen and all(np.all(p == 0.5) for p in seen)
    rows = read_csv(tmp_path / "ablation.csv")
    assert [r["variant"] for r in rows] == ["full", "no-ae"]
    assert load_checkpoint(tmp_path / "variant.mtar").config["ensemble"] == "average"


def test_baseline_command(work, tmp_path):
    assert main(["train-baseline", "--config", str(work / "tiny.cfg"), "--data", str(work / "data"),
                 "--out", str(tmp_path)]) == 0
    assert load_checkpoint(tmp_path / "checkpoint.mtar").meta["kind"] == "baseline"
    assert main(["eval", "--data", str(work / "data"), "--checkpoint", str(tmp_path / "checkpoint.mtar"),
                 "--out", str(tmp_path / "e"), "--attack", "none"]) == 0
    # baseline checkpoints cannot be fine-tuned
    assert main(["finetune", "--data", str(work / "data"), "--checkpoint", str(tmp_path / "checkpoint.mtar"),
                 "--out", str(tmp_path / "f")]) == 2
