"""Alternating generator / critic training, evaluation and checkpointing."""
import dataclasses
import hashlib
import json
import logging
import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from ._validation import to_numpy, to_tensor
from .data import (PATCH_SIZE, SCALE, DatasetManifest, Image, bicubic_downscale,
                   bicubic_upscale, make_epoch_batches)
from .discriminator import Discriminator, DiscriminatorConfig
from .exceptions import ConfigurationError, FormatError, NumericalDivergenceError, PreconditionError
from .generator import Generator, GeneratorConfig
from .gw import GwSolverParams
from .losses import (LossReport, adversarial_loss_g, discriminator_loss, dynamic_weights,
                     gradient_penalty, gw_loss, js_loss)
from .metrics import MetricReport, evaluate_pairs, psnr

logger = logging.getLogger(__name__)

WEIGHTING_MODES = ("dynamic", "learned", "fixed_sum")
DTYPES = {"float32": torch.float32, "float64": torch.float64}
# keys left out of the config digest: changing them does not alter what is trained
_DIGEST_EXCLUDED = ("epochs", "eval_every", "checkpoint_every", "sample_every", "workers")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    g_lr: float = 1e-4
    g_betas: tuple = (0.9, 0.99)
    d_lr: float = 1e-4
    d_betas: tuple = (0.0, 0.9)
    gp_lambda: float = 10.0
    gw: GwSolverParams = field(default_factory=GwSolverParams)
    weighting_mode: str = "dynamic"
    enable_js: bool = True
    enable_gw: bool = True
    seed: int = 0
    eval_every: int = 1
    checkpoint_every: int = 1
    sample_every: int = 50
    patch_size: int = PATCH_SIZE
    scale: int = SCALE
    dtype: str = "float32"
    deterministic: bool = False
    grad_clip: float = None
    workers: int = 0
    cache_images: bool = True
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def __post_init__(self):
        self.g_betas = tuple(self.g_betas)
        self.d_betas = tuple(self.d_betas)
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.g_lr <= 0 or self.d_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.gp_lambda <= 0:
            raise ConfigurationError("gp_lambda must be positive")
        if self.weighting_mode not in WEIGHTING_MODES:
            raise ConfigurationError(f"weighting_mode must be one of {WEIGHTING_MODES}, got {self.weighting_mode!r}")
        if self.dtype not in DTYPES:
            raise ConfigurationError(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype!r}")
        if self.patch_size % self.scale:
            raise ConfigurationError("patch_size must be divisible by scale")
        if self.scale != 4:
            raise ConfigurationError("only 4x super-resolution is supported")
        for name in ("eval_every", "checkpoint_every", "sample_every"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["g_betas"], d["d_betas"] = list(self.g_betas), list(self.d_betas)
        d["gw"] = self.gw.to_dict()
        d["generator"] = self.generator.to_dict()
        d["discriminator"] = self.discriminator.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        """Build from a plain dict; unknown keys raise naming the key."""
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigurationError(f"unknown config key: {key!r}")
        nested = {"gw": GwSolverParams, "generator": GeneratorConfig, "discriminator": DiscriminatorConfig}
        for key, klass in nested.items():
            if key in d and isinstance(d[key], dict):
                sub_known = {f.name for f in dataclasses.fields(klass)}
                for sub in d[key]:
                    if sub not in sub_known:
                        raise ConfigurationError(f"unknown config key: '{key}.{sub}'")
                try:
                    d[key] = klass(**d[key])
                except TypeError as exc:
                    raise ConfigurationError(f"invalid {key} section: {exc}") from exc
        return cls(**d)

    def digest(self):
        d = self.to_dict()
        for key in _DIGEST_EXCLUDED:
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).digest()

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]


@contextmanager
def _seeded(seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


@contextmanager
def _deterministic(enabled):
    previous = torch.are_deterministic_algorithms_enabled()
    if enabled:
        torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


class Trainer:
    """Holds both networks, their optimisers and the loss-weighting state."""

    def __init__(self, cfg):
        self.cfg = cfg
        dtype = cfg.torch_dtype
        with _seeded(cfg.seed):
            self.generator = Generator(cfg.generator).to(dtype)
            self.discriminator = Discriminator(cfg.discriminator).to(dtype)
        self.weight_logits = torch.nn.Parameter(torch.zeros(3, dtype=dtype))
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=cfg.g_lr, betas=cfg.g_betas)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=cfg.d_lr, betas=cfg.d_betas)
        self.opt_w = torch.optim.Adam([self.weight_logits], lr=cfg.g_lr, betas=cfg.g_betas)
        self.gp_rng = torch.Generator().manual_seed(cfg.seed + 1)
        self.epoch = 0
        self.step = 0

    # -- one optimisation step -------------------------------------------------
    def _enabled(self):
        return torch.tensor([True, self.cfg.enable_js, self.cfg.enable_gw])

    def _combine(self, losses):
        mask = self._enabled()
        mode = self.cfg.weighting_mode
        if mode == "fixed_sum":
            w = mask.to(losses[0].dtype)
        elif mode == "dynamic":
            w = torch.zeros(3, dtype=torch.float64)
            w[mask] = dynamic_weights([l for l, m in zip(losses, mask) if m])
            w = w.to(losses[0].dtype)
        else:
            logits = self.weight_logits.masked_fill(~mask, float("-inf"))
            w = torch.softmax(logits, dim=0)
        l_g = sum(wi * li for wi, li, m in zip(w, losses, mask) if m)
        return l_g, w.detach()

    def _clip(self, params):
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)

    def train_step(self, batch):
        """One generator update followed by one critic update."""
        cfg, dtype = self.cfg, self.cfg.torch_dtype
        G, D = self.generator, self.discriminator
        G.train()
        D.train()
        lr = to_tensor(batch.lr(), dtype)
        hr = to_tensor(batch.hr(), dtype)

        sr = G(lr)
        zero = torch.zeros((), dtype=dtype)
        l_adv = adversarial_loss_g(D(sr))
        l_js = js_loss(sr, hr) if cfg.enable_js else zero
        l_gw = gw_loss(sr, lr, cfg.gw) if cfg.enable_gw else zero
        l_g, w = self._combine([l_adv, l_js, l_gw])
        _check_finite(l_g, "generator loss", self.step)
        self.opt_g.zero_grad(set_to_none=True)
        self.opt_w.zero_grad(set_to_none=True)
        l_g.backward()
        self._clip(G.parameters())
        self.opt_g.step()
        if cfg.weighting_mode == "learned":
            self.opt_w.step()

        with torch.no_grad():
            sr = G(lr)
        gp = gradient_penalty(D, hr, sr, cfg.gp_lambda, generator=self.gp_rng)
        l_d = discriminator_loss(D(hr), D(sr), gp)
        _check_finite(l_d, "critic loss", self.step)
        self.opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        self._clip(D.parameters())
        self.opt_d.step()
        self.step += 1

        vals = [float(t.detach()) for t in (l_adv, l_js, l_gw, *w, l_g, l_d, gp)]
        return LossReport(*vals)

    def epoch_batches(self, source, epoch):
        cfg = self.cfg
        return make_epoch_batches(source, cfg.batch_size, seed=cfg.seed, epoch=epoch,
                                  patch_size=cfg.patch_size, factor=cfg.scale,
                                  workers=cfg.workers, cache=cfg.cache_images)

    # -- checkpointing -----------------------------------------------------------
    def to_checkpoint(self):
        blocks = {}
        for prefix, module in (("generator", self.generator), ("discriminator", self.discriminator)):
            for name, t in module.state_dict().items():
                blocks[f"{prefix}/{name}"] = t.detach().cpu().numpy()
        blocks["loss_weights/logits"] = self.weight_logits.detach().cpu().numpy()
        for prefix, opt in (("optim_g", self.opt_g), ("optim_d", self.opt_d), ("optim_w", self.opt_w)):
            for idx, state in opt.state_dict()["state"].items():
                for key, value in state.items():
                    blocks[f"{prefix}/{idx}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
        config_json = json.dumps(self.cfg.to_dict(), sort_keys=True).encode("utf-8")
        blocks["meta/config_json"] = np.frombuffer(config_json, dtype=np.uint8)
        blocks["meta/gp_rng"] = self.gp_rng.get_state().numpy()
        blocks["meta/step"] = np.asarray(self.step, dtype=np.int64)
        return ckpt_io.Checkpoint(epoch=self.epoch, config_digest=self.cfg.digest(), blocks=blocks)

    def load_checkpoint(self, ckpt):
        if ckpt.config_digest != self.cfg.digest():
            warnings.warn("checkpoint config digest differs from the current configuration",
                          RuntimeWarning, stacklevel=2)
        blocks = ckpt.blocks
        for prefix, module in (("generator", self.generator), ("discriminator", self.discriminator)):
            state = {name: torch.from_numpy(blocks[f"{prefix}/{name}"]) for name in module.state_dict()}
            module.load_state_dict(state)
        with torch.no_grad():
            self.weight_logits.copy_(torch.from_numpy(blocks["loss_weights/logits"]))
        for prefix, opt in (("optim_g", self.opt_g), ("optim_d", self.opt_d), ("optim_w", self.opt_w)):
            sd = opt.state_dict()
            state = {}
            for name, value in blocks.items():
                if name.startswith(prefix + "/"):
                    _, idx, key = name.split("/", 2)
                    state.setdefault(int(idx), {})[key] = torch.from_numpy(value.copy())
            sd["state"] = state
            opt.load_state_dict(sd)
        self.gp_rng.set_state(torch.from_numpy(blocks["meta/gp_rng"].copy()))
        self.step = int(blocks["meta/step"])
        self.epoch = ckpt.epoch

    @classmethod
    def from_checkpoint(cls, ckpt, cfg=None):
        cfg = cfg or config_from_checkpoint(ckpt)
        trainer = cls(cfg)
        trainer.load_checkpoint(ckpt)
        return trainer


def config_from_checkpoint(ckpt):
    raw = ckpt.blocks.get("meta/config_json")
    if raw is None:
        raise FormatError("checkpoint carries no configuration block")
    return TrainConfig.from_dict(json.loads(bytes(raw).decode("utf-8")))


def generator_from_checkpoint(ckpt):
    """Rebuild the generator stored in a checkpoint (eval mode)."""
    if isinstance(ckpt, (str, Path)):
        ckpt = ckpt_io.load_checkpoint(ckpt)
    cfg = config_from_checkpoint(ckpt)
    G = Generator(cfg.generator).to(cfg.torch_dtype)
    state = {name: torch.from_numpy(ckpt.blocks[f"generator/{name}"]) for name in G.state_dict()}
    G.load_state_dict(state)
    return G.eval()


def _check_finite(value, what, step):
    if not torch.isfinite(value):
        raise NumericalDivergenceError(f"{what} became {float(value)}", iteration=step)


@dataclass
class TrainResult:
    checkpoint: ckpt_io.Checkpoint
    log: list
    epoch_means: list
    eval_reports: list = field(default_factory=list)
    checkpoint_path: Path = None
    trainer: Trainer = None


def _epoch_mean(reports, epoch):
    keys = ("l_adv", "l_js", "l_gw", "w_a", "w_js", "w_gw", "l_g", "l_d", "gp")
    records = [r.to_record(epoch, i) for i, r in enumerate(reports)]
    return {"epoch": epoch, "n_batches": len(records),
            **{k: float(np.mean([rec[k] for rec in records])) for k in keys}}


def _append_jsonl(path, record):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def train(manifest, cfg, output_dir=None, eval_manifest=None, resume=False, callback=None):
    """Run ``cfg.epochs`` epochs of alternating updates.

    ``manifest`` is a :class:`DatasetManifest` or a sequence of :class:`Image`.
    With ``output_dir`` set, checkpoints go to ``output_dir/checkpoints``
    (``latest.srge`` is always the last good one), per-batch losses to
    ``loss_log.jsonl`` and epoch means to ``epoch_log.jsonl``.
    ``callback(trainer, epoch)`` runs after every epoch.
    """
    if manifest is None or len(manifest) == 0:
        raise PreconditionError("training needs a non-empty manifest")
    if len(manifest) < cfg.batch_size:
        raise ConfigurationError(f"{len(manifest)} usable images cannot fill a batch of {cfg.batch_size}")
    out = Path(output_dir) if output_dir is not None else None
    latest = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        latest = out / "checkpoints" / "latest.srge"

    if resume and latest is not None and latest.exists():
        trainer = Trainer(cfg)
        trainer.load_checkpoint(ckpt_io.load_checkpoint(latest))
        logger.info("resumed from %s at epoch %d", latest, trainer.epoch)
    else:
        trainer = Trainer(cfg)
        if out is not None:
            for name in ("loss_log.jsonl", "epoch_log.jsonl", "eval_log.jsonl"):
                (out / name).unlink(missing_ok=True)
            ckpt_io.save_checkpoint(trainer.to_checkpoint(), latest)

    eval_patches = _eval_patch_set(eval_manifest, cfg) if eval_manifest is not None else None
    log, epoch_means, eval_reports = [], [], []
    with _deterministic(cfg.deterministic):
        for epoch in range(trainer.epoch, cfg.epochs):
            reports = []
            for b, batch in enumerate(trainer.epoch_batches(manifest, epoch)):
                try:
                    report = trainer.train_step(batch)
                except NumericalDivergenceError as exc:
                    where = f"; last good checkpoint: {latest}" if latest is not None else ""
                    step = exc.iteration if exc.iteration is not None else trainer.step
                    raise NumericalDivergenceError(f"{exc} at step {step}{where}", iteration=step) from exc
                reports.append(report)
                log.append(report.to_record(epoch, b))
                if out is not None:
                    _append_jsonl(out / "loss_log.jsonl", log[-1])
            trainer.epoch = epoch + 1
            epoch_means.append(_epoch_mean(reports, epoch))
            if out is not None:
                _append_jsonl(out / "epoch_log.jsonl", epoch_means[-1])
            if eval_patches is not None and cfg.eval_every and trainer.epoch % cfg.eval_every == 0:
                rep = evaluate_patches(trainer.generator, eval_patches, cfg)
                eval_reports.append((trainer.epoch, rep))
                if out is not None:
                    _append_jsonl(out / "eval_log.jsonl", {"epoch": trainer.epoch, **rep.to_dict()})
            if out is not None and cfg.checkpoint_every and (
                    trainer.epoch % cfg.checkpoint_every == 0 or trainer.epoch == cfg.epochs):
                ckpt = trainer.to_checkpoint()
                ckpt_io.save_checkpoint(ckpt, out / "checkpoints" / f"epoch_{trainer.epoch:04d}.srge")
                ckpt_io.save_checkpoint(ckpt, latest)
            if callback is not None:
                callback(trainer, epoch)
    final = trainer.to_checkpoint()
    if out is not None:
        ckpt_io.save_checkpoint(final, latest)
    return TrainResult(final, log, epoch_means, eval_reports, latest, trainer)


def _eval_patch_set(source, cfg):
    """Centre patches of the held-out images, fixed for the whole run."""
    patches = []
    for i in range(len(source)):
        img = source.load(i) if isinstance(source, DatasetManifest) else source[i]
        s = min(cfg.patch_size, img.height - img.height % cfg.scale, img.width - img.width % cfg.scale)
        top, left = (img.height - s) // 2, (img.width - s) // 2
        patches.append(Image(img.pixels[top:top + s, left:left + s].copy(), img.source_id))
    return patches


def super_resolve_array(G, lr_pixels, dtype=None):
    """H x W x 3 array in [0, 1] -> 4H x 4W x 3 array clipped to [0, 1]."""
    dtype = dtype or next(G.parameters()).dtype
    return to_numpy(G.super_resolve(to_tensor(lr_pixels, dtype)))[0]


def evaluate_patches(G, images, cfg=None, luma=False):
    pairs = []
    for img in images:
        lr = bicubic_downscale(img.pixels, SCALE)
        pairs.append((img.source_id, img.pixels, super_resolve_array(G, lr)))
    return evaluate_pairs(pairs, luma=luma)


def crop_to_multiple(pixels, multiple=SCALE):
    """Largest centred crop whose sides are divisible by ``multiple``."""
    h, w = pixels.shape[:2]
    nh, nw = h - h % multiple, w - w % multiple
    top, left = (h - nh) // 2, (w - nw) // 2
    return pixels[top:top + nh, left:left + nw]


def evaluate(model, manifest, luma=False, window=False, super_resolve=None):
    """PSNR/SSIM of 4x super-resolution on every image of ``manifest``.

    ``model`` is a Generator, a Checkpoint or a checkpoint path.  Passing
    ``super_resolve`` (a callable ``lr_pixels -> sr_pixels``) bypasses the
    model, e.g. to score the bicubic baseline with the same code path.
    """
    if manifest is None or len(manifest) == 0:
        raise PreconditionError("evaluation needs a non-empty manifest")
    if super_resolve is None:
        G = model if isinstance(model, Generator) else generator_from_checkpoint(model)
        super_resolve = lambda lr: super_resolve_array(G, lr)  # noqa: E731
    pairs = []
    for i in range(len(manifest)):
        img = manifest.load(i) if isinstance(manifest, DatasetManifest) else manifest[i]
        hr = crop_to_multiple(img.pixels)
        lr = bicubic_downscale(hr, SCALE)
        pairs.append((img.source_id, hr, np.clip(super_resolve(lr), 0.0, 1.0)))
    return evaluate_pairs(pairs, luma=luma, window=window)


def evaluate_bicubic(manifest, luma=False, window=False):
    """Same protocol as :func:`evaluate` with bicubic 4x upscaling as the model."""
    return evaluate(None, manifest, luma, window, super_resolve=lambda lr: bicubic_upscale(lr, SCALE))
