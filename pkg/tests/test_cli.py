import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image as PILImage

from conftest import TINY_D, TINY_G
from oracles import synthetic_image
from surge import checkpoint as ckpt_io
from surge.cli import CAPTION_HEIGHT, MARGIN, load_run_config, main
from surge.data import save_image


def write_config(tmp_path, image_dir, **overrides):
    cfg = dict(train_manifest=str(image_dir), output_dir="run", epochs=0, batch_size=2,
               patch_size=32, seed=5, generator=TINY_G,
               discriminator={**TINY_D, "block_filters": list(TINY_D["block_filters"])})
    cfg.update(overrides)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def trained(tmp_path, image_dir):
    assert main(["train", "--config", str(write_config(tmp_path, image_dir))]) == 0
    return tmp_path / "run" / "checkpoints" / "latest.srge"


# -- train -----------------------------------------------------------------------

def test_train_zero_epochs(tmp_path, image_dir, capsys):
    assert main(["train", "--config", str(write_config(tmp_path, image_dir))]) == 0
    assert "trained 0 steps" in capsys.readouterr().out
    assert ckpt_io.load_checkpoint(tmp_path / "run" / "checkpoints" / "latest.srge").epoch == 0


def test_train_one_epoch_writes_samples(tmp_path, image_dir):
    cfg = write_config(tmp_path, image_dir, epochs=1, eval_manifest=str(image_dir))
    assert main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "run"
    assert (run / "checkpoints" / "epoch_0001.srge").is_file()
    samples = sorted(p.name for p in (run / "samples").iterdir())
    assert samples == ["epoch_0001_sample0.png", "epoch_0001_sample1.png"]
    assert len((run / "eval_log.jsonl").read_text().splitlines()) == 1


def test_unknown_key_is_named(tmp_path, image_dir, capsys):
    cfg = write_config(tmp_path, image_dir, epcohs=3)
    assert main(["train", "--config", str(cfg)]) == 2
    assert "epcohs" in capsys.readouterr().err


def test_missing_manifest_key(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"epochs": 0}))
    assert main(["train", "--config", str(path)]) == 2
    assert "train_manifest" in capsys.readouterr().err


def test_existing_run_needs_resume_or_force(trained, tmp_path, image_dir):
    cfg = str(tmp_path / "run.json")
    assert main(["train", "--config", cfg]) == 2
    assert main(["train", "--config", cfg, "--resume"]) == 0
    assert main(["train", "--config", cfg, "--force"]) == 0


def test_seed_environment_override(tmp_path, image_dir, monkeypatch):
    path = write_config(tmp_path, image_dir)
    monkeypatch.setenv("SURGE_SEED", "99")
    cfg, paths = load_run_config(path)
    assert cfg.seed == 99
    assert paths["output_dir"] == (tmp_path / "run").resolve()
    assert paths["train_manifest"] == image_dir.resolve()


# -- infer -----------------------------------------------------------------------

def test_infer_scales_by_four(trained, tmp_path, capsys):
    src = tmp_path / "in.png"
    save_image(synthetic_image(9, 60, 100), src)
    out = tmp_path / "out.png"
    assert main(["infer", "--checkpoint", str(trained), "--input", str(src),
                 "--output", str(out), "--time"]) == 0
    assert PILImage.open(out).size == (400, 240)
    assert "forward_seconds" in capsys.readouterr().out
    assert main(["infer", "--checkpoint", str(trained), "--input", str(src), "--output", str(out)]) == 2
    assert main(["infer", "--checkpoint", str(trained), "--input", str(src),
                 "--output", str(out), "--force"]) == 0


def test_infer_missing_checkpoint_names_path(tmp_path, capsys):
    src = tmp_path / "in.png"
    save_image(synthetic_image(9, 20, 20), src)
    missing = tmp_path / "nowhere.srge"
    assert main(["infer", "--checkpoint", str(missing), "--input", str(src),
                 "--output", str(tmp_path / "o.png")]) == 1
    assert str(missing) in capsys.readouterr().err
    assert not (tmp_path / "o.png").exists()


def test_infer_rejects_tiny_input(trained, tmp_path):
    src = tmp_path / "in.png"
    save_image(synthetic_image(9, 8, 20), src)
    assert main(["infer", "--checkpoint", str(trained), "--input", str(src),
                 "--output", str(tmp_path / "o.png")]) == 2


# -- eval ------------------------------------------------------------------------

def test_eval_is_reproducible(trained, tmp_path, image_dir):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert main(["eval", "--checkpoint", str(trained), "--manifest", str(image_dir),
                     "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(json.loads(a.read_text())["per_image"]) == 4


def test_eval_bicubic_needs_no_checkpoint(tmp_path, image_dir):
    out = tmp_path / "bic.json"
    assert main(["eval", "--bicubic", "--luma", "--manifest", str(image_dir), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["psnr_db"] > 10


def test_eval_without_checkpoint_is_usage_error(tmp_path, image_dir):
    with pytest.raises(SystemExit) as info:
        main(["eval", "--manifest", str(image_dir), "--out", str(tmp_path / "x.json")])
    assert info.value.code == 2


# -- compare ---------------------------------------------------------------------

def test_compare_strip_geometry_and_captions(trained, tmp_path):
    src = tmp_path / "hr.png"
    save_image(synthetic_image(2, 70, 90), src)
    out = tmp_path / "cmp.png"
    assert main(["compare", "--checkpoint", str(trained), "--image", str(src),
                 "--patch", "4,8,32", "--out", str(out), "--display", "64"]) == 0
    strip = PILImage.open(out)
    assert strip.size == (3 * 64 + 4 * MARGIN, 64 + 2 * MARGIN + CAPTION_HEIGHT)
    assert strip.text["caption_sr"].startswith("SR\nPSNR")


def test_compare_identity_hook_caption(tmp_path):
    src = tmp_path / "hr.png"
    save_image(synthetic_image(2, 64, 64), src)
    out = tmp_path / "cmp.png"
    assert main(["compare", "--sr-equals-hr", "--image", str(src), "--patch", "0,0,32",
                 "--out", str(out)]) == 0
    assert PILImage.open(out).text["caption_sr"] == "SR\nPSNR inf dB  SSIM 1.0000"


@pytest.mark.parametrize("patch", ["40,0,32", "0,0,30", "-1,0,32", "0,0,8"])
def test_compare_bad_patch(tmp_path, patch):
    src = tmp_path / "hr.png"
    save_image(synthetic_image(2, 64, 64), src)
    assert main(["compare", "--sr-equals-hr", "--image", str(src), f"--patch={patch}",
                 "--out", str(tmp_path / "c.png")]) == 2


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "surge.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "compare" in proc.stdout
