import json

import yaml

from soundboxes.cli import EXIT_CONFIG, EXIT_DATA, main

TINY = {
    "profile": "desk",
    "audio": {"clip_samples": 3968},
    "model": {"net_shape": [128, 32], "unet_base": 4, "unet_max_channels": 16, "encoder_channels": [8, 8, 8, 8],
              "crop_size": 16, "hidden": 16, "n_infer_boxes": 12},
    "train": {"batch_size": 4, "steps": 2},
    "data": {"n_train": 14, "n_val": 7, "n_val_pairs": 3},
}


def write_cfg(tmp_path, **extra):
    cfg = json.loads(json.dumps(TINY))
    cfg.update(extra)
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_full_cli_flow(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data), "--duets", "1"]) == 0
    assert (data / "manifest.jsonl").exists()
    ck = tmp_path / "ck"
    assert main(["train", "--config", str(cfg), "--seed", "3", "--head", "sigmoid", "--out", str(ck),
                 "--eval-pairs", "2"]) == 0
    manifest = json.loads((ck / "manifest.json").read_text())
    assert manifest["head"] == "sigmoid" and manifest["config"]["seed"] == 3 and manifest["step"] == 2
    duet = next((data / "duets").iterdir())
    out = tmp_path / "sep"
    assert main(["infer", "--checkpoint", str(ck), "--image", str(duet / "frame.png"),
                 "--audio", str(duet / "audio.wav"), "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == {"source0.wav", "source1.wav", "mask0.png", "mask1.png",
                                                "selection.json"}
    sel = json.loads((out / "selection.json").read_text())
    assert len(sel["box_indices"]) == 2 and len(sel["boxes"]) == 2
    csv_path = tmp_path / "m.csv"
    assert main(["eval", "--checkpoint", str(ck), "--out", str(csv_path), "--pairs", "2"]) == 0
    assert len(csv_path.read_text().strip().splitlines()) == 2 + 4
    assert main(["plot", "--checkpoint", str(ck), "--image", str(duet / "frame.png"),
                 "--audio", str(duet / "audio.wav"), "--out", str(tmp_path / "fig.png")]) == 0
    assert (tmp_path / "fig.png").stat().st_size > 0


def test_ideal_eval_without_checkpoint(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["eval", "--config", str(cfg), "--mode", "ideal", "--pairs", "2"]) == 0
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["sdr"] > 10


def test_config_error_exit_code(tmp_path):
    bad = write_cfg(tmp_path, model={"n_train_boxes": 1})
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    unknown = write_cfg(tmp_path, bogus=1)
    assert main(["gen-data", "--config", str(unknown), "--out", str(tmp_path / "y")]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "z")]) == EXIT_CONFIG


def test_data_error_exit_code(tmp_path):
    assert main(["infer", "--checkpoint", str(tmp_path / "none"), "--image", "a.png", "--audio", "a.wav",
                 "--out", str(tmp_path)]) == EXIT_DATA
    real = write_cfg(tmp_path, data={"source": "real", "root": str(tmp_path / "empty")})
    assert main(["train", "--config", str(real), "--out", str(tmp_path / "ck")]) == EXIT_DATA
