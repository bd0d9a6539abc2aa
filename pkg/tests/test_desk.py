"""Desk-scale training examples (minutes each; marked slow)."""

import csv
import json

import pytest

from hfbrimae.cli import main
from hfbrimae.data import synthetic_dataset
from hfbrimae.mae import HfbriMae, ModelConfig
from hfbrimae.training import finetune

pytestmark = pytest.mark.slow


def rows_of(path):
    return list(csv.DictReader(path.read_text().splitlines()[:-1]))


def test_pretrain_rerun_identical(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "epochs": 5}))
    for rep in ("a", "b"):
        assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / rep)]) == 0
    a, b = rows_of(tmp_path / "a" / "metrics.csv"), rows_of(tmp_path / "b" / "metrics.csv")
    assert [r["mean_loss"] for r in a] == [r["mean_loss"] for r in b]
    assert (tmp_path / "a" / "checkpoint.hfbm").read_bytes() == (tmp_path / "b" / "checkpoint.hfbm").read_bytes()


def test_pretrained_beats_random_weights(desk_run, tmp_path):
    cfg = str(desk_run["config"])
    ck = str(desk_run["out"] / "checkpoint.hfbm")
    assert main(["probe", "--config", cfg, "--checkpoint", ck, "--out", str(tmp_path / "pre")]) == 0
    assert main(["probe", "--config", cfg, "--out", str(tmp_path / "rand")]) == 0
    pre = float(rows_of(tmp_path / "pre" / "probe.csv")[0]["accuracy"])
    rand = float(rows_of(tmp_path / "rand" / "probe.csv")[0]["accuracy"])
    print(f"R/R probe: pretrained {pre:.3f}, random weights {rand:.3f}")
    assert pre - rand >= 0.10


def test_desk_classification_finetune(desk_run, tmp_path):
    code = main(["finetune", "--config", str(desk_run["config"]), "--out", str(tmp_path),
                 "--checkpoint", str(desk_run["out"] / "checkpoint.hfbm")])
    assert code == 0
    acc = float(rows_of(tmp_path / "finetune_classification.csv")[-1]["accuracy"])
    print(f"R/R finetuned test accuracy {acc:.3f}")
    assert acc >= 0.90


class _Reached(Exception):
    pass


def test_cylinder_part_segmentation():
    train = synthetic_dataset(["cylinder"], per_class=64, n_points=512, seed=0, split="train")
    test = synthetic_dataset(["cylinder"], per_class=32, n_points=512, seed=0, split="test")
    model = HfbriMae(ModelConfig())
    best = 0.0

    def watch(rec):
        nonlocal best
        best = max(best, rec.accuracy)
        if best >= 0.85:
            raise _Reached

    try:
        finetune(model, "segmentation", train, test, epochs=100, batch_size=16, seed=0, on_epoch=watch)
    except _Reached:
        pass
    print(f"best point accuracy {best:.3f}")
    assert best >= 0.85
