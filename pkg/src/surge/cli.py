"""Command-line entry point: ``surge train|infer|eval|compare``.

Exit status is 0 only when the requested artifact was fully written; bad
input or configuration exits with 2 and runtime failures with 1.  Outputs
are never overwritten without ``--force`` and are written atomically.
"""
import argparse
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw, ImageFont
from PIL.PngImagePlugin import PngInfo

from . import checkpoint as ckpt_io
from .data import SCALE, DatasetManifest, bicubic_downscale, bicubic_upscale, load_image
from .exceptions import ConfigurationError, PreconditionError, SurgeError
from .metrics import psnr, ssim
from .training import (TrainConfig, crop_to_multiple, evaluate, evaluate_bicubic,
                       generator_from_checkpoint, super_resolve_array, train)

logger = logging.getLogger("surge")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
MIN_INFER_SIDE = 16
PATH_KEYS = ("train_manifest", "eval_manifest", "output_dir")
SEED_ENV = "SURGE_SEED"


class CliError(Exception):
    def __init__(self, message, status=EXIT_FAILURE):
        super().__init__(message)
        self.status = status


# -- small helpers -------------------------------------------------------------

def _refuse_overwrite(path, force):
    if Path(path).exists() and not force:
        raise CliError(f"refusing to overwrite existing file {path} (pass --force)", EXIT_USAGE)


def _atomic_write(path, write):
    """Call ``write(tmp_path)`` then move the result onto ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _to_uint8(pixels):
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def _save_png(pixels, path, text=None):
    info = None
    if text:
        info = PngInfo()
        for k, v in text.items():
            info.add_text(k, v)
    _atomic_write(path, lambda tmp: PILImage.fromarray(_to_uint8(pixels), "RGB").save(
        tmp, format="PNG", pnginfo=info))


def _load_generator(path):
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    return generator_from_checkpoint(ckpt_io.load_checkpoint(path))


def _open_manifest(path, min_side):
    path = Path(path)
    if path.is_dir():
        return DatasetManifest.from_directory(path, min_side=min_side)
    if path.is_file():
        return DatasetManifest.from_file(path, min_side=min_side)
    raise CliError(f"manifest not found: {path}", EXIT_USAGE)


# -- train ---------------------------------------------------------------------

def load_run_config(path):
    """Parse a run config JSON into ``(TrainConfig, paths)``.

    Paths are resolved relative to the config file.  ``SURGE_SEED`` in the
    environment overrides the ``seed`` key.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"config not found: {path}", EXIT_USAGE) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}", EXIT_USAGE) from None
    if not isinstance(raw, dict):
        raise CliError(f"config {path} must be a JSON object", EXIT_USAGE)
    paths = {}
    for key in PATH_KEYS:
        if key in raw:
            value = raw.pop(key)
            paths[key] = None if value is None else (path.parent / value).resolve()
    if os.environ.get(SEED_ENV):
        raw["seed"] = int(os.environ[SEED_ENV])
    try:
        cfg = TrainConfig.from_dict(raw)
    except (ConfigurationError, TypeError) as exc:
        raise CliError(f"invalid config {path}: {exc}", EXIT_USAGE) from None
    if paths.get("train_manifest") is None:
        raise CliError(f"invalid config {path}: 'train_manifest' is required", EXIT_USAGE)
    paths.setdefault("output_dir", path.parent / "run")
    paths.setdefault("eval_manifest", None)
    return cfg, paths


def _sample_writer(sample_dir, images, cfg):
    """Callback writing SR centre patches every ``cfg.sample_every`` epochs."""
    lr_patches = []
    for img in images:
        s = min(cfg.patch_size, img.height - img.height % SCALE, img.width - img.width % SCALE)
        top, left = (img.height - s) // 2, (img.width - s) // 2
        lr_patches.append(bicubic_downscale(img.pixels[top:top + s, left:left + s], SCALE))

    def write(trainer, epoch):
        done = epoch + 1
        if not cfg.sample_every or (done % cfg.sample_every and done != cfg.epochs):
            return
        trainer.generator.eval()
        for i, lr in enumerate(lr_patches):
            sr = super_resolve_array(trainer.generator, lr)
            _save_png(sr, sample_dir / f"epoch_{done:04d}_sample{i}.png")
    return write


def cmd_train(args):
    cfg, paths = load_run_config(args.config)
    out = Path(paths["output_dir"])
    latest = out / "checkpoints" / "latest.srge"
    if latest.exists() and not (args.resume or args.force):
        raise CliError(f"{out} already holds a run; pass --resume to continue or --force to restart",
                       EXIT_USAGE)
    manifest = _open_manifest(paths["train_manifest"], cfg.patch_size)
    eval_manifest = (_open_manifest(paths["eval_manifest"], MIN_INFER_SIDE)
                     if paths["eval_manifest"] else None)
    sample_src = eval_manifest if eval_manifest is not None else manifest
    samples = [sample_src.load(i) for i in range(min(2, len(sample_src)))]
    result = train(manifest, cfg, output_dir=out, eval_manifest=eval_manifest,
                   resume=args.resume, callback=_sample_writer(out / "samples", samples, cfg))
    print(f"trained {len(result.log)} steps; latest checkpoint {result.checkpoint_path}")
    return EXIT_OK


# -- infer ---------------------------------------------------------------------

def cmd_infer(args):
    _refuse_overwrite(args.output, args.force)
    G = _load_generator(args.checkpoint)
    img = load_image(args.input)
    if min(img.height, img.width) < MIN_INFER_SIDE:
        raise CliError(f"input {img.height}x{img.width} is smaller than {MIN_INFER_SIDE} pixels per side",
                       EXIT_USAGE)
    start = time.perf_counter()
    sr = super_resolve_array(G, img.pixels)
    elapsed = time.perf_counter() - start
    _save_png(sr, args.output)
    if args.time:
        print(f"forward_seconds {elapsed:.6f}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------

def cmd_eval(args):
    _refuse_overwrite(args.out, args.force)
    manifest = _open_manifest(args.manifest, MIN_INFER_SIDE)
    if args.bicubic:
        report = evaluate_bicubic(manifest, luma=args.luma, window=args.window)
    else:
        report = evaluate(_load_generator(args.checkpoint), manifest, luma=args.luma, window=args.window)
    text = report.to_json() + "\n"
    _atomic_write(args.out, lambda tmp: Path(tmp).write_text(text, encoding="utf-8"))
    print(f"psnr_db {report.psnr_db} ssim {report.ssim:.6f}")
    return EXIT_OK


# -- compare -------------------------------------------------------------------

MARGIN = 8
CAPTION_HEIGHT = 36


def parse_patch(spec):
    try:
        row, col, size = (int(v) for v in spec.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"patch must be 'row,col,size', got {spec!r}") from None
    return row, col, size


def compose_strip(panels, captions, display):
    """Lay equally sized panels side by side with a caption under each."""
    n = len(panels)
    width = n * display + (n + 1) * MARGIN
    height = display + 2 * MARGIN + CAPTION_HEIGHT
    canvas = PILImage.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for i, (px, caption) in enumerate(zip(panels, captions)):
        tile = PILImage.fromarray(_to_uint8(px), "RGB").resize((display, display), PILImage.NEAREST)
        x = MARGIN + i * (display + MARGIN)
        canvas.paste(tile, (x, MARGIN))
        for j, line in enumerate(caption.split("\n")):
            draw.text((x, display + MARGIN + 4 + 14 * j), line, fill=(0, 0, 0), font=font)
    return canvas


def cmd_compare(args):
    _refuse_overwrite(args.out, args.force)
    row, col, size = args.patch
    if size < MIN_INFER_SIDE or size % SCALE:
        raise CliError(f"patch size must be a multiple of {SCALE} and at least {MIN_INFER_SIDE}", EXIT_USAGE)
    hr_full = crop_to_multiple(load_image(args.image).pixels)
    h, w = hr_full.shape[:2]
    if row < 0 or col < 0 or row + size > h or col + size > w:
        raise CliError(f"patch ({row},{col},{size}) lies outside the {h}x{w} image", EXIT_USAGE)
    hr = hr_full[row:row + size, col:col + size]
    lr = bicubic_downscale(hr, SCALE)
    bicubic = bicubic_upscale(lr, SCALE)
    if args.sr_equals_hr:
        sr = hr.copy()
    else:
        sr = super_resolve_array(_load_generator(args.checkpoint), lr)

    def caption(name, test):
        p = psnr(hr, test)
        return f"{name}\nPSNR {p:.2f} dB  SSIM {ssim(hr, test):.4f}"

    captions = [caption("Bicubic", bicubic), caption("SR", sr), "HR\nreference"]
    strip = compose_strip([bicubic, sr, hr], captions, args.display)
    info = PngInfo()
    for key, text in zip(("bicubic", "sr", "hr"), captions):
        info.add_text(f"caption_{key}", text)
    _atomic_write(args.out, lambda tmp: strip.save(tmp, format="PNG", pnginfo=info))
    for text in captions:
        print(text.replace("\n", ": "))
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="surge", description="4x GAN super-resolution")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True, help="JSON file with TrainConfig keys plus paths")
    p.add_argument("--resume", action="store_true", help="continue from output_dir/checkpoints/latest.srge")
    p.add_argument("--force", action="store_true", help="discard an existing run in output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--time", action="store_true", help="print forward-pass seconds (no I/O)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM report over a manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", required=True, help="manifest file or image directory")
    p.add_argument("--out", required=True)
    p.add_argument("--luma", action="store_true", help="score the BT.601 Y channel")
    p.add_argument("--window", action="store_true", help="Gaussian-window SSIM")
    p.add_argument("--bicubic", action="store_true", help="score the bicubic baseline instead")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="bicubic / SR / HR strip for one patch")
    p.add_argument("--checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--patch", required=True, type=parse_patch, help="row,col,size in HR pixels")
    p.add_argument("--out", required=True)
    p.add_argument("--display", type=int, default=192, help="panel side in pixels")
    p.add_argument("--force", action="store_true")
    p.add_argument("--sr-equals-hr", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    needs_ckpt = args.command == "infer" or (
        args.command in ("eval", "compare")
        and not (getattr(args, "bicubic", False) or getattr(args, "sr_equals_hr", False)))
    if needs_ckpt and not args.checkpoint:
        parser.error(f"{args.command} needs --checkpoint")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.status
    except (PreconditionError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SurgeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
