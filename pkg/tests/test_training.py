import json
import math

import numpy as np
import pytest
import torch

from conftest import TINY_D, TINY_G
from surge import checkpoint as ckpt_io
from surge import training
from surge.data import DatasetManifest, bicubic_downscale
from surge.discriminator import DiscriminatorConfig
from surge.exceptions import ConfigurationError, NumericalDivergenceError, PreconditionError
from surge.generator import GeneratorConfig
from surge.training import (Trainer, TrainConfig, config_from_checkpoint, crop_to_multiple,
                            evaluate, evaluate_bicubic, generator_from_checkpoint, train)


def tiny_cfg(**overrides):
    base = dict(epochs=1, batch_size=2, patch_size=32, seed=3, dtype="float64",
                generator=GeneratorConfig(**TINY_G), discriminator=DiscriminatorConfig(**TINY_D))
    base.update(overrides)
    return TrainConfig(**base)


# -- configuration ---------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    dict(epochs=-1), dict(batch_size=1), dict(g_lr=0), dict(gp_lambda=0),
    dict(weighting_mode="magic"), dict(dtype="float16"), dict(patch_size=30), dict(scale=2),
    dict(sample_every=-1),
])
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


def test_from_dict_names_unknown_key():
    with pytest.raises(ConfigurationError, match="epcohs"):
        TrainConfig.from_dict({"epcohs": 3})
    with pytest.raises(ConfigurationError, match="gw.iters"):
        TrainConfig.from_dict({"gw": {"iters": 3}})


def test_dict_round_trip_and_digest():
    cfg = tiny_cfg(gp_lambda=5.0)
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.digest() == cfg.digest()
    assert back.generator == cfg.generator
    assert len(cfg.digest()) == 32
    # scheduling knobs do not change what is trained
    assert tiny_cfg(epochs=50, eval_every=3).digest() == tiny_cfg().digest()
    assert tiny_cfg(gp_lambda=5.0).digest() != tiny_cfg().digest()


# -- training loop ---------------------------------------------------------------

def test_zero_epochs_writes_initial_checkpoint(tmp_path, synthetic_images):
    res = train(synthetic_images, tiny_cfg(epochs=0), tmp_path)
    assert res.log == []
    ck = ckpt_io.load_checkpoint(tmp_path / "checkpoints" / "latest.srge")
    assert ck.epoch == 0
    G0 = Trainer(tiny_cfg()).generator
    for name, t in G0.state_dict().items():
        np.testing.assert_array_equal(ck.blocks[f"generator/{name}"], t.numpy())


def test_empty_or_small_manifest_rejected(tmp_path, synthetic_images):
    with pytest.raises(PreconditionError):
        train([], tiny_cfg(), tmp_path)
    with pytest.raises(ConfigurationError):
        train(synthetic_images[:1], tiny_cfg(), tmp_path)
    assert not (tmp_path / "checkpoints").exists()


def test_one_epoch_logs_and_checkpoints(tmp_path, synthetic_images):
    res = train(synthetic_images, tiny_cfg(), tmp_path, eval_manifest=synthetic_images[:2])
    assert len(res.log) == 2
    lines = (tmp_path / "loss_log.jsonl").read_text().splitlines()
    assert [json.loads(l) for l in lines] == res.log
    for rec in res.log:
        assert all(math.isfinite(rec[k]) for k in ("l_adv", "l_js", "l_gw", "l_g", "l_d", "gp"))
        assert rec["w_a"] + rec["w_js"] + rec["w_gw"] == pytest.approx(1.0, abs=1e-9)
    assert (tmp_path / "checkpoints" / "epoch_0001.srge").is_file()
    assert len((tmp_path / "epoch_log.jsonl").read_text().splitlines()) == 1
    assert res.eval_reports[0][0] == 1
    assert ckpt_io.load_checkpoint(res.checkpoint_path).epoch == 1


def test_fixed_sum_mode_has_unit_weights(synthetic_images):
    res = train(synthetic_images, tiny_cfg(weighting_mode="fixed_sum"))
    rec = res.log[0]
    assert (rec["w_a"], rec["w_js"], rec["w_gw"]) == (1.0, 1.0, 1.0)
    assert rec["l_g"] == pytest.approx(rec["l_adv"] + rec["l_js"] + rec["l_gw"], rel=1e-12)


def test_learned_mode_updates_logits(synthetic_images):
    res = train(synthetic_images, tiny_cfg(weighting_mode="learned"))
    assert res.log[0]["w_a"] == pytest.approx(1 / 3, abs=1e-12)
    assert not torch.all(res.trainer.weight_logits == 0)


def test_disabled_terms_get_zero_weight(synthetic_images):
    res = train(synthetic_images, tiny_cfg(enable_js=False, enable_gw=False))
    rec = res.log[0]
    assert (rec["w_a"], rec["w_js"], rec["w_gw"]) == (1.0, 0.0, 0.0)
    assert rec["l_js"] == 0.0 and rec["l_gw"] == 0.0


def test_resume_matches_uninterrupted_run(tmp_path, synthetic_images):
    full = train(synthetic_images, tiny_cfg(epochs=2), tmp_path / "a")
    train(synthetic_images, tiny_cfg(epochs=1), tmp_path / "b")
    resumed = train(synthetic_images, tiny_cfg(epochs=2), tmp_path / "b", resume=True)
    assert resumed.log == full.log[2:]
    for name, value in full.checkpoint.blocks.items():
        if name.startswith(("generator/", "discriminator/")):
            np.testing.assert_array_equal(resumed.checkpoint.blocks[name], value)


def test_digest_mismatch_warns(synthetic_images):
    ck = Trainer(tiny_cfg()).to_checkpoint()
    with pytest.warns(RuntimeWarning, match="digest"):
        Trainer(tiny_cfg(gp_lambda=3.0)).load_checkpoint(ck)


def test_checkpoint_restores_full_state(synthetic_images):
    trainer = Trainer(tiny_cfg())
    trainer.train_step(trainer.epoch_batches(synthetic_images, 0)[0])
    ck = ckpt_io.from_bytes(ckpt_io.to_bytes(trainer.to_checkpoint()))
    clone = Trainer.from_checkpoint(ck)
    assert clone.step == 1
    assert clone.cfg.digest() == trainer.cfg.digest()
    batch = trainer.epoch_batches(synthetic_images, 1)[0]
    assert clone.train_step(batch).to_dict() == trainer.train_step(batch).to_dict()


def test_divergence_aborts_with_checkpoint_path(tmp_path, synthetic_images, monkeypatch):
    monkeypatch.setattr(training, "adversarial_loss_g", lambda d: torch.tensor(float("nan"), dtype=d.dtype))
    with pytest.raises(NumericalDivergenceError, match="latest.srge") as info:
        train(synthetic_images, tiny_cfg(), tmp_path)
    assert info.value.iteration == 0
    assert ckpt_io.load_checkpoint(tmp_path / "checkpoints" / "latest.srge").epoch == 0


# -- evaluation ------------------------------------------------------------------

def test_crop_to_multiple():
    px = np.zeros((10, 13, 3))
    assert crop_to_multiple(px).shape == (8, 12, 3)


def test_evaluate_with_identity_hook_gives_perfect_ssim(synthetic_images):
    # the hook returns the HR crop, so SR equals HR exactly
    hrs = iter([crop_to_multiple(img.pixels) for img in synthetic_images])
    rep = evaluate(None, synthetic_images, super_resolve=lambda lr: next(hrs))
    assert rep.ssim == 1.0
    assert rep.psnr_db == math.inf and rep.n_infinite_psnr == 4


def test_bicubic_baseline_is_finite(image_dir):
    manifest = DatasetManifest.from_directory(image_dir, min_side=32)
    rep = evaluate_bicubic(manifest)
    assert len(rep.per_image) == 4
    assert 10 < rep.psnr_db < 60
    assert 0 < rep.ssim < 1


def test_evaluate_checkpoint_path(tmp_path, synthetic_images):
    train(synthetic_images, tiny_cfg(epochs=0), tmp_path)
    path = tmp_path / "checkpoints" / "latest.srge"
    rep = evaluate(path, synthetic_images[:2])
    assert math.isfinite(rep.psnr_db)
    G = generator_from_checkpoint(path)
    assert not G.training
    assert config_from_checkpoint(ckpt_io.load_checkpoint(path)).digest() == tiny_cfg(epochs=0).digest()
    with pytest.raises(PreconditionError):
        evaluate(path, [])


def test_super_resolve_array_shape(synthetic_images):
    G = Trainer(tiny_cfg()).generator
    lr = bicubic_downscale(synthetic_images[0].pixels[:32, :40], 4)
    out = training.super_resolve_array(G, lr)
    assert out.shape == (32, 40, 3)
    assert out.min() >= 0 and out.max() <= 1
