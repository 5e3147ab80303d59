import json
import shutil

import numpy as np
import pytest

from segcyclegan.cli import main
from segcyclegan.config import (ConfigError, TrainConfig, config_from_dict, config_to_dict, dumps_config,
                                load_config, preset_path)
from segcyclegan.dataset import ImageSample, SegMask, load_image, save_image, save_mask

TINY = ["--set", "generator.base_channels=4", "--set", "generator.residual_blocks=1",
        "--set", "discriminator.channels=[4, 8, 8, 8]", "--set", "segmenter.widths=[4, 4, 4]",
        "--set", "steps_per_epoch=4", "--set", "epochs=1", "--set", "seg_pretrain.epochs=2"]


def test_preprocess_800_gives_16_tiles_per_image(tmp_path, capsys):
    src = tmp_path / "in"
    (src / "images").mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i in range(2):
        save_image(ImageSample(rng.integers(0, 256, (3, 800, 800)).astype(np.float32)), src / "images" / f"{i}.png")
    assert main(["preprocess", "--input", str(src), "--output", str(tmp_path / "out"),
                 "--min-target-pixels", "0"]) == 0
    assert len(list((tmp_path / "out" / "images").iterdir())) == 32
    record = json.loads((tmp_path / "out" / "preprocess.json").read_text())
    assert record["counts"]["tiles"] == 32
    assert json.loads((tmp_path / "out" / "run.json").read_text())["command"] == "preprocess"
    assert "32 tiles" in capsys.readouterr().out


def test_invalid_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("epochs = 3\n\n[weights]\nalpha = 10.0\ngamma = 1.0\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "weights.gamma" in capsys.readouterr().err


def test_bad_override_value_exits_2(capsys):
    assert main(["train", "--preset", "toy", "--set", "gan_mode=wgan"]) == 2
    assert "gan_mode" in capsys.readouterr().err


def test_unknown_preset_lists_choices(capsys):
    assert main(["train", "--preset", "nope"]) == 2
    assert "ship_hrsid_dior" in capsys.readouterr().err


def test_missing_input_is_runtime_error(tmp_path):
    assert main(["preprocess", "--input", str(tmp_path / "none"), "--output", str(tmp_path / "o")]) == 1


@pytest.mark.parametrize("name,epochs,beta", [("ship_hrsid_dior", 100, 0.3), ("whu_farmland_guided", 200, 0.3),
                                             ("whu_unguided", 200, 0.0)])
def test_presets(name, epochs, beta):
    cfg = load_config(preset_path(name))
    assert (cfg.epochs, cfg.batch_size, cfg.weights.alpha, cfg.weights.beta) == (epochs, 1, 10.0, beta)


@pytest.mark.parametrize("name", ["ship_hrsid_dior", "whu_farmland_guided", "whu_unguided", "toy"])
def test_config_roundtrip_fixed_point(name, tmp_path):
    cfg = load_config(preset_path(name))
    text = dumps_config(cfg)
    (tmp_path / "c.toml").write_text(text)
    again = load_config(tmp_path / "c.toml")
    assert again == cfg
    assert dumps_config(again) == text


def test_config_strictness():
    assert config_from_dict(config_to_dict(TrainConfig())) == TrainConfig()
    with pytest.raises(ConfigError, match="optimizer.lr"):
        config_from_dict({"optimizer": {"lr": 1}})
    with pytest.raises(ConfigError):
        config_from_dict({"seg_pretrain": {"class_weights": [0.5, 0.6]}})


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """make-toy -> manifest -> pretrain-seg -> train, sharing one tiny run directory."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-toy", "--output", str(root / "toy"), "--n-sar", "6", "--n-opt", "6", "--size", "32"]) == 0
    assert main(["manifest", "--root", str(root / "toy"), "--output", str(root / "toy" / "manifest.tsv"),
                 "--require-masks", "SAR,OPT", "--test-fraction", "0.34"]) == 0
    common = ["--preset", "toy", *TINY, "--set", f"data.manifest={json.dumps(str(root / 'toy' / 'manifest.tsv'))}",
              "--set", f"run_dir={json.dumps(str(root / 'run'))}"]
    assert main(["pretrain-seg", *common]) == 0
    assert main(["train", *common]) == 0
    return root, common


def test_train_run_manifest_echoes_config(toy_run):
    root, _ = toy_run
    run = json.loads((root / "run" / "run.json").read_text())
    assert run["command"] == "train" and run["seed"] == 0
    assert run["config"]["epochs"] == 1 and run["config"]["batch_size"] == 1
    assert run["config"]["weights"] == {"alpha": 10.0, "beta": 0.3}
    assert all(len(h) == 64 for h in run["inputs"].values())
    assert (root / "run" / "train_log.jsonl").exists()
    assert (root / "run" / "checkpoints" / "epoch_0001.pt").exists()
    assert load_config(root / "run" / "config.toml").epochs == 1


def test_train_resume_appends(toy_run, tmp_path):
    root, common = toy_run
    run2 = tmp_path / "run2"
    shutil.copytree(root / "run", run2)
    args = [a.replace(str(root / "run"), str(run2)) for a in common]
    before = (run2 / "train_log.jsonl").read_text().count("\n")
    assert main(["train", *args, "--set", "epochs=2", "--resume", str(run2 / "checkpoints" / "epoch_0001.pt")]) == 0
    assert (run2 / "train_log.jsonl").read_text().count("\n") == 2 * before


def test_train_without_segmenter_is_config_error(toy_run, tmp_path, capsys):
    root, common = toy_run
    args = [a.replace(str(root / "run"), str(tmp_path / "empty")) for a in common]
    assert main(["train", *args]) == 2
    assert "pretrain-seg" in capsys.readouterr().err


def test_translate_and_evaluate(toy_run, tmp_path):
    root, _ = toy_run
    ckpt = root / "run" / "checkpoints" / "epoch_0001.pt"
    out = tmp_path / "fake"
    assert main(["translate", "--checkpoint", str(ckpt), "--input", str(root / "toy" / "SAR"),
                 "--output", str(out)]) == 0
    pngs = sorted(out.glob("*.png"))
    assert len(pngs) == 6
    img = load_image(pngs[0])
    assert img.pixels.shape == (3, 32, 32) and 0 <= img.pixels.min() and img.pixels.max() <= 255
    assert main(["translate", "--checkpoint", str(ckpt), "--input", str(root / "toy" / "SAR"),
                 "--output", str(tmp_path / "again")]) == 0
    assert all(a.read_bytes() == (tmp_path / "again" / a.name).read_bytes() for a in pngs)

    # paired against itself: infinite PSNR sentinel on every image, FID via the stub extractor
    assert main(["eval", "--mode", "paired", "--pred", str(out), "--ref", str(out), "--extractor", "stub",
                 "--report", str(tmp_path / "paired.json")]) == 0
    rep = json.loads((tmp_path / "paired.json").read_text())["methods"]["pred"]
    assert rep["metrics"]["psnr"] is None and rep["flags"]["psnr_inf_count"] == 6
    assert rep["metrics"]["ssim"] == pytest.approx(1.0)
    assert rep["metrics"]["fid"] == pytest.approx(0.0, abs=1e-6)

    assert main(["eval", "--mode", "unpaired", "--pred", str(out), "--ref", str(root / "toy" / "OPT" / "images"),
                 "--extractor", "stub", "--report", str(tmp_path / "unpaired.json")]) == 0
    assert json.loads((tmp_path / "unpaired.json").read_text())["methods"]["pred"]["metrics"]["fid"] > 0


def test_eval_without_extractor_is_config_error(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("SEGCYCLEGAN_FID_EXTRACTOR", raising=False)
    d = tmp_path / "imgs"
    d.mkdir()
    for i in range(2):
        save_image(ImageSample(np.full((3, 16, 16), 10.0 * i, dtype=np.float32)), d / f"{i}.png")
    assert main(["eval", "--mode", "unpaired", "--pred", str(d), "--ref", str(d),
                 "--report", str(tmp_path / "r.json")]) == 2
    assert "SEGCYCLEGAN_FID_EXTRACTOR" in capsys.readouterr().err


def test_eval_downstream(tmp_path):
    from segcyclegan.synthetic import disk_images

    x, y = disk_images(12, 32, seed=0)
    for split, idx in (("train", range(8)), ("test", range(8, 12))):
        for i in idx:
            save_image(ImageSample(x[i].astype(np.float32)), tmp_path / "pred" / split / f"{i}.png")
            save_mask(SegMask(y[i].astype(np.int64)), tmp_path / "masks" / split / f"{i}.png")
    assert main(["eval", "--mode", "downstream", "--pred", str(tmp_path / "pred"), "--masks",
                 str(tmp_path / "masks"), "--preset", "toy", "--set", "seg_pretrain.epochs=1",
                 "--report", str(tmp_path / "down.json")]) == 0
    metrics = json.loads((tmp_path / "down.json").read_text())["methods"]["pred"]["metrics"]
    assert set(metrics) == {"mpa", "miou", "fwiou"}


def test_annotate_command(tmp_path):
    (tmp_path / "img").mkdir()
    (tmp_path / "boxes").mkdir()
    save_image(ImageSample(np.zeros((3, 32, 32), dtype=np.float32)), tmp_path / "img" / "a.png")
    (tmp_path / "boxes" / "a.txt").write_text("ship 2 2 12 6\n")
    assert main(["annotate", "--images", str(tmp_path / "img"), "--boxes", str(tmp_path / "boxes"),
                 "--output", str(tmp_path / "masks")]) == 0
    assert (tmp_path / "masks" / "a.png").exists() and (tmp_path / "masks" / "run.json").exists()


def test_failed_command_quarantines_output(tmp_path):
    src = tmp_path / "in"
    (src / "images").mkdir(parents=True)
    save_image(ImageSample(np.zeros((3, 100, 100), dtype=np.float32)), src / "images" / "small.png")
    assert main(["preprocess", "--input", str(src), "--output", str(tmp_path / "out")]) == 1
    assert not (tmp_path / "out").exists()
