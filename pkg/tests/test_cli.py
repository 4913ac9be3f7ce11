import json
import subprocess
import sys

import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from translearn.cli import main
from translearn.datamodel import tree_digest
from translearn.experiment import ExperimentError, load_config, load_learner, toy_config
from translearn.training import read_train_log


def tiny_config(tmp_path) -> dict:
    data = tmp_path / "data"
    return {
        "seed": 1,
        "out": str(tmp_path / "run"),
        "image_size": [64, 32],
        "source": {"root": str(data / "source"), "layout": "synthetic"},
        "target": {"root": str(data / "target"), "layout": "synthetic"},
        "synthetic": {"num_identities": 3, "images_per_identity_per_domain": 4, "num_test_identities": 3,
                      "query_per_identity": 1, "gallery_per_identity": 2, "num_distractors": 1},
        "arch": {"ngf": 2, "n_res_blocks": 1, "ndf": 4, "disc_layers": 2, "residual_output": True,
                 "identity_init": True},
        "train": {"mode": "spgan", "batch_size": 2, "epochs": 1, "lr_constant_epochs": 1, "image_pool_size": 2},
        "pretrain": {"training": {"epochs": 1, "batch_size": 4}},
        "finetune": {"training": {"epochs": 1, "batch_size": 4}},
    }


@pytest.fixture
def setup(tmp_path):
    cfg = tiny_config(tmp_path)
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["generate-synthetic", "--config", str(path), "--out", str(tmp_path / "data")]) == 0
    return tmp_path, path


def test_generate_layout_and_rerun(setup):
    tmp_path, cfg = setup
    for domain in ("source", "target"):
        for split in ("bounding_box_train", "query", "bounding_box_test"):
            assert any((tmp_path / "data" / domain / split).iterdir())
    first = tree_digest(tmp_path / "data")
    assert main(["generate-synthetic", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    assert tree_digest(tmp_path / "data") == first
    assert (tmp_path / "data" / "config.resolved.yaml").is_file()


def test_invalid_out_dir(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["generate-synthetic", "--out", str(blocker / "sub")]) != 0
    assert "error" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("train:\n  epochz: 3\n")
    assert main(["train", "--config", str(path)]) != 0
    assert "epochz" in capsys.readouterr().err
    with pytest.raises(ExperimentError, match="epochz"):
        load_config(path)


def test_overrides_and_resolved_config(setup):
    tmp_path, cfg = setup
    c = load_config(cfg, seed=7, out="x", mode="cyclegan", lmp_parts=4, lmp_mode="max", protocol="mq")
    assert (c.seed, c.train.seed, c.out, c.train.mode.value) == (7, 7, "x", "cyclegan")
    assert (c.eval.parts, c.eval.mode, c.eval.protocol) == (4, "max", "mq")
    assert c.train.image_size == c.arch.image_shape == (64, 32)


def test_full_pipeline(setup, capsys):
    tmp_path, cfg = setup
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == 0
    assert (run / "translator.pt").is_file() and (run / "config.resolved.yaml").is_file()
    assert {n for _, n, _ in read_train_log(run / "train_log.tsv")} >= {"adv_G", "con", "D_T", "M_con"}

    tr = tmp_path / "translated"
    src = tmp_path / "data" / "source"
    assert main(["translate", "--checkpoint", str(run / "translator.pt"), "--in", str(src), "--out", str(tr)]) == 0
    before = sorted(p.name for p in (src / "bounding_box_train").iterdir())
    assert sorted(p.name for p in (tr / "bounding_box_train").iterdir()) == before

    learn = tmp_path / "learn"
    assert main(["learn", "--config", str(cfg), "--out", str(learn), "--translated", str(tr)]) == 0
    assert (learn / "pretrained.pt").is_file() and (learn / "learner.pt").is_file()

    capsys.readouterr()
    ev = tmp_path / "eval"
    args = ["evaluate", "--config", str(cfg), "--out", str(ev), "--checkpoint", str(learn / "learner.pt")]
    assert main(args + ["--lmp-parts", "1", "--lmp-mode", "avg"]) == 0
    assert main(args + ["--lmp-parts", "8", "--lmp-mode", "max"]) == 0
    p1, p8 = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert p8["dim"] == 8 * p1["dim"] and 0.0 <= p1["rank1"] <= 1.0
    report = ev / "report_p1_avg_sq.json"
    first = report.read_bytes()
    assert main(args + ["--lmp-parts", "1", "--lmp-mode", "avg"]) == 0
    assert report.read_bytes() == first

    # the direct-transfer baseline evaluates the pretrained checkpoint
    assert main(["evaluate", "--config", str(cfg), "--out", str(ev), "--checkpoint", str(learn / "pretrained.pt"),
                 "--protocol", "mq"]) == 0


def test_train_is_deterministic(setup):
    tmp_path, cfg = setup
    for k in range(2):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / f"r{k}"), "--max-iterations", "3"]) == 0
    a = torch.load(tmp_path / "r0" / "translator.pt", weights_only=False)["networks"]
    b = torch.load(tmp_path / "r1" / "translator.pt", weights_only=False)["networks"]
    for net in a:
        for key in a[net]:
            assert torch.equal(a[net][key], b[net][key]), (net, key)


def test_espgan_needs_pretrained_learner(setup, capsys):
    tmp_path, cfg = setup
    data = yaml.safe_load(cfg.read_text())
    data["pretrain"]["enabled"] = False
    cfg.write_text(yaml.safe_dump(data))
    assert main(["train", "--config", str(cfg), "--mode", "espgan", "--out", str(tmp_path / "e")]) != 0
    assert "pretrained learner" in capsys.readouterr().err


def test_espgan_writes_learner(setup):
    tmp_path, cfg = setup
    out = tmp_path / "e"
    assert main(["train", "--config", str(cfg), "--mode", "espgan", "--out", str(out),
                 "--max-iterations", "2"]) == 0
    C, id_map, _ = load_learner(out / "learner.pt")
    assert C.num_classes == len(id_map) == 3


def test_identity_translate(setup):
    tmp_path, _ = setup
    src = tmp_path / "data" / "source"
    out = tmp_path / "ident"
    assert main(["translate", "--identity", "--in", str(src), "--out", str(out), "--image-size", "64", "32"]) == 0
    for split in ("bounding_box_train", "query", "bounding_box_test"):
        names = sorted(p.name for p in (src / split).iterdir())
        assert sorted(p.name for p in (out / split).iterdir()) == names
        for name in names[:3]:
            a = np.asarray(Image.open(src / split / name), dtype=int)
            b = np.asarray(Image.open(out / split / name), dtype=int)
            assert np.abs(a - b).max() <= 1


def test_translate_errors(setup, capsys):
    tmp_path, _ = setup
    src = tmp_path / "data" / "source"
    assert main(["translate", "--in", str(src), "--out", str(tmp_path / "o")]) != 0
    assert main(["translate", "--identity", "--in", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) != 0
    assert capsys.readouterr().err.count(": error: ") == 2


def test_module_entry_point_exit_code(tmp_path):
    res = subprocess.run([sys.executable, "-m", "translearn", "evaluate", "--checkpoint", str(tmp_path / "none.pt")],
                         capture_output=True, text=True)
    assert res.returncode != 0 and "error" in res.stderr
    assert subprocess.run([sys.executable, "-m", "translearn", "--help"], capture_output=True).returncode == 0


def test_toy_preset_matches_shipped_config():
    from pathlib import Path
    shipped = Path(__file__).resolve().parents[1] / "configs" / "toy.yaml"
    assert load_config(shipped) == toy_config()
