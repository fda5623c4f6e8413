import json
from pathlib import Path

import pytest

from msht.cli import main, parse_config_file

TINY_CONFIG = """\
# desk-scale settings
input_edge = 64
stage_channels = 16,32,64,128
block_counts = 1,1,1,1
token_dim = 64
heads = 4
learning_rate = 1e-3
epochs = 1
batch_size = 16
rotation_degrees = 0
crop_edge = 64
flip_prob = 0.5
brightness = 0
contrast = 0
saturation = 0
hue = 0
resize_edge = 64
synth_edge = 64
synth_per_class = 24
"""


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return str(path)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory, config_path):
    out = tmp_path_factory.mktemp("data") / "synth"
    code = main(["synth", "--config", config_path, "--seed", "7", "--out", str(out)])
    assert code == 0
    return out


def test_config_parsing(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("epochs = 3  # short run\n\nheads = 4\n")
    assert parse_config_file(path) == {"epochs": "3", "heads": "4"}


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("epoch = 3\n")
    with pytest.raises(Exception, match="unknown config key"):
        parse_config_file(path)


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 1
    capsys.readouterr()


def test_synth_writes_dataset_and_manifest(synth_dir):
    assert (synth_dir / "manifest.csv").is_file()
    assert (synth_dir / "synth_spec.json").is_file()
    images = list((synth_dir / "images").glob("*.png"))
    assert len(images) == 48


def test_synth_identical_for_same_seed(tmp_path, config_path, synth_dir):
    out = tmp_path / "again"
    assert main(["synth", "--config", config_path, "--seed", "7", "--out", str(out)]) == 0
    first = sorted((synth_dir / "images").glob("*.png"))
    second = sorted((out / "images").glob("*.png"))
    assert [p.name for p in first] == [p.name for p in second]
    assert all(a.read_bytes() == b.read_bytes() for a, b in zip(first, second))


def test_train_runs_and_is_deterministic(tmp_path, config_path, synth_dir):
    args = ["train", "--variant", "MSHT", "--config", config_path, "--seed", "0",
            "--data", str(synth_dir)]
    assert main(args + ["--out", str(tmp_path / "run1")]) == 0
    assert main(args + ["--out", str(tmp_path / "run2")]) == 0
    report1 = (tmp_path / "run1" / "report.json").read_bytes()
    report2 = (tmp_path / "run2" / "report.json").read_bytes()
    assert report1 == report2
    parsed = json.loads(report1)
    assert parsed["variant"] == "MSHT" and len(parsed["per_fold"]) == 5


def test_eval_and_cam_from_checkpoint(tmp_path, config_path, synth_dir):
    run_dir = tmp_path / "run"
    assert main(["train", "--variant", "MSHT", "--config", config_path, "--seed", "1",
                 "--data", str(synth_dir), "--out", str(run_dir)]) == 0
    checkpoint = run_dir / "fold0_best.npz"
    assert checkpoint.is_file()

    eval_dir = tmp_path / "eval"
    assert main(["eval", "--config", config_path, "--checkpoint", str(checkpoint),
                 "--data", str(synth_dir), "--out", str(eval_dir)]) == 0
    metrics = json.loads((eval_dir / "metrics.json").read_text())
    assert set(metrics["metrics"]) == {"acc", "spe", "sen", "ppv", "npv", "f1"}
    assert metrics["counts"]["tp"] + metrics["counts"]["tn"] + \
        metrics["counts"]["fp"] + metrics["counts"]["fn"] == 48

    cam_dir = tmp_path / "cam"
    assert main(["cam", "--config", config_path, "--checkpoint", str(checkpoint),
                 "--data", str(synth_dir), "--ids", "synth-positive-0000",
                 "--target-class", "1", "--out", str(cam_dir)]) == 0
    assert (cam_dir / "synth-positive-0000_cam.png").is_file()
    sidecar = json.loads((cam_dir / "synth-positive-0000_cam.json").read_text())
    assert sidecar["target_class"] == 1


def test_cam_unknown_id_is_usage_error(tmp_path, config_path, synth_dir, capsys):
    run_dir = tmp_path / "run"
    assert main(["train", "--variant", "MSHT", "--config", config_path, "--seed", "2",
                 "--data", str(synth_dir), "--out", str(run_dir)]) == 0
    code = main(["cam", "--config", config_path, "--checkpoint", str(run_dir / "fold0_best.npz"),
                 "--data", str(synth_dir), "--ids", "nope", "--out", str(tmp_path / "cam")])
    assert code == 1
    assert "nope" in capsys.readouterr().err


def test_train_unknown_variant_exits_1(tmp_path, config_path, synth_dir, capsys):
    code = main(["train", "--variant", "Hybrid2", "--config", config_path,
                 "--data", str(synth_dir), "--out", str(tmp_path / "x")])
    assert code == 1
    assert "Hybrid2" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_ablate_unknown_variant_fails_before_training(tmp_path, config_path, synth_dir, capsys):
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text(TINY_CONFIG + "variants = MSHT,Hybrid9\n")
    code = main(["ablate", "--config", str(bad_cfg), "--data", str(synth_dir),
                 "--out", str(tmp_path / "ablate")])
    assert code == 1
    assert "Hybrid9" in capsys.readouterr().err
    assert not (tmp_path / "ablate" / "ablation.csv").exists()


def test_missing_data_path_is_usage_error(tmp_path, config_path, capsys):
    code = main(["train", "--variant", "MSHT", "--config", config_path,
                 "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "out")])
    assert code == 1
    capsys.readouterr()


def test_bad_synth_spec_is_usage_error(tmp_path, config_path, capsys):
    code = main(["synth", "--config", config_path, "--edge", "8", "--blobs", "99",
                 "--out", str(tmp_path / "s")])
    assert code == 1
    assert "blob area" in capsys.readouterr().err
