"""Image loading, random HR patches, bicubic LR synthesis and batching."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from ._validation import check_pixels
from .exceptions import ConfigurationError, DecodeError, FormatError, PreconditionError

logger = logging.getLogger(__name__)

SUPPORTED_SUFFIXES = (".png", ".bmp")
PATCH_SIZE = 256
SCALE = 4
CUBIC_A = -0.5


@dataclass(frozen=True, eq=False)
class Image:
    """H x W x 3 float64 raster with values in [0, 1]."""

    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        px = check_pixels(self.pixels)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True, eq=False)
class PatchPair:
    hr: Image
    lr: Image
    source_id: str
    crop_offset: tuple


@dataclass(frozen=True, eq=False)
class Batch:
    pairs: tuple

    def __post_init__(self):
        pairs = tuple(self.pairs)
        object.__setattr__(self, "pairs", pairs)
        if len(pairs) < 2:
            raise PreconditionError("a batch needs at least two patch pairs")
        hr_shape, lr_shape = pairs[0].hr.shape, pairs[0].lr.shape
        if any(p.hr.shape != hr_shape or p.lr.shape != lr_shape for p in pairs):
            raise PreconditionError("all pairs in a batch must share shapes")

    def __len__(self):
        return len(self.pairs)

    def hr(self):
        """(N, H, W, 3) stack of HR patches."""
        return np.stack([p.hr.pixels for p in self.pairs])

    def lr(self):
        """(N, H/4, W/4, 3) stack of LR patches."""
        return np.stack([p.lr.pixels for p in self.pairs])


@dataclass
class DatasetManifest:
    root_path: str
    entries: list
    split_tag: str = "train"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.entries:
            raise PreconditionError(f"manifest under {self.root_path!r} has no entries")

    def __len__(self):
        return len(self.entries)

    def path(self, i):
        p = Path(self.entries[i])
        return p if p.is_absolute() else Path(self.root_path) / p

    def load(self, i, cache=False):
        if i in self._cache:
            return self._cache[i]
        img = load_image(self.path(i))
        if cache:
            self._cache[i] = img
        return img

    @classmethod
    def from_file(cls, path, split_tag="train", min_side=PATCH_SIZE):
        """Read a line-delimited manifest; paths are relative to its directory."""
        path = Path(path)
        if not path.is_file():
            raise PreconditionError(f"manifest file not found: {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        entries = [ln.strip() for ln in lines if ln.strip() and not ln.strip().startswith("#")]
        return cls._build(path.parent, entries, split_tag, min_side)

    @classmethod
    def from_directory(cls, root, split_tag="train", min_side=PATCH_SIZE):
        root = Path(root)
        if not root.is_dir():
            raise PreconditionError(f"image directory not found: {root}")
        entries = sorted(p.name for p in root.iterdir() if p.suffix.lower() in SUPPORTED_SUFFIXES)
        return cls._build(root, entries, split_tag, min_side)

    @classmethod
    def _build(cls, root, entries, split_tag, min_side):
        kept = []
        for entry in entries:
            full = Path(entry) if Path(entry).is_absolute() else Path(root) / entry
            if not full.is_file():
                raise PreconditionError(f"manifest entry does not exist: {full}")
            try:
                with PILImage.open(full) as im:
                    w, h = im.size
            except (UnidentifiedImageError, OSError) as exc:
                raise DecodeError(f"cannot decode {full}: {exc}") from exc
            if min_side and min(h, w) < min_side:
                logger.warning("excluding %s: short side %d < %d", full, min(h, w), min_side)
                continue
            kept.append(entry)
        return cls(str(root), kept, split_tag)


def write_manifest(path, entries, comment=None):
    lines = [f"# {comment}"] if comment else []
    lines.extend(str(e) for e in entries)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_image(path):
    """Decode a PNG/BMP file into an :class:`Image` scaled to [0, 1]."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif mode == "I":
                # 16-bit PNGs are commonly surfaced as 32-bit integer mode
                arr = np.asarray(im, dtype=np.float64)
                if arr.min() < 0 or arr.max() > 65535:
                    raise FormatError(f"{path}: integer samples outside 16-bit range")
                arr = arr / 65535.0
            elif mode in ("L", "RGB"):
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif mode in ("RGBA", "LA", "P", "PA"):
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            else:
                raise FormatError(f"{path}: unsupported pixel format {mode!r}")
    except (UnidentifiedImageError, FileNotFoundError, OSError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return Image(np.ascontiguousarray(arr), source_id=str(path))


def save_image(pixels, path):
    """Write an H x W x 3 array in [0, 1] as an 8-bit PNG/BMP."""
    px = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    PILImage.fromarray(np.round(px * 255.0).astype(np.uint8), mode="RGB").save(path)


def extract_random_patch(img, size=PATCH_SIZE, rng=None):
    """Uniformly random ``size`` x ``size`` crop; returns ``(patch, (row, col))``."""
    if rng is None:
        rng = np.random.default_rng()
    h, w = img.height, img.width
    if h < size or w < size:
        raise PreconditionError(f"image {h}x{w} is smaller than the {size}x{size} patch")
    row = int(rng.integers(0, h - size + 1))
    col = int(rng.integers(0, w - size + 1))
    patch = img.pixels[row:row + size, col:col + size]
    return Image(patch.copy(), source_id=img.source_id), (row, col)


def cubic_kernel(x, a=CUBIC_A):
    """Keys cubic convolution kernel; ``a = -0.5`` is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _resize_matrix(n_in, factor):
    """(n_in // factor, n_in) matrix of antialiased bicubic weights, edge-clamped."""
    n_out = n_in // factor
    centers = (np.arange(n_out) + 0.5) * factor - 0.5
    half = 2 * factor
    taps = np.arange(-half, half + 1)
    src = np.floor(centers)[:, None] + taps[None, :]
    weights = cubic_kernel((centers[:, None] - src) / factor)
    weights /= weights.sum(axis=1, keepdims=True)
    idx = np.clip(src, 0, n_in - 1).astype(int)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps.size), idx.ravel()), weights.ravel())
    return mat


def bicubic_downscale(img, factor=SCALE):
    """Downscale by an integer ``factor`` with a bicubic (a = -0.5) kernel.

    The kernel is stretched by ``factor`` so every output pixel averages over
    its whole footprint (the usual antialiased resize used to make SR
    benchmarks).  Out-of-range taps reuse the nearest edge pixel.  Accepts an
    :class:`Image` (returns an Image) or an H x W x C array (returns an array).
    """
    is_image = isinstance(img, Image)
    px = img.pixels if is_image else np.asarray(img, dtype=np.float64)
    if factor < 2:
        raise PreconditionError(f"factor must be >= 2, got {factor}")
    h, w = px.shape[:2]
    if h % factor or w % factor:
        raise PreconditionError(f"image {h}x{w} is not divisible by {factor}")
    rows, cols = _resize_matrix(h, factor), _resize_matrix(w, factor)
    out = np.einsum("ih,hwc,jw->ijc", rows, px, cols, optimize=True)
    out = np.clip(out, 0.0, 1.0)
    if is_image:
        return Image(out, source_id=img.source_id)
    return out


def bicubic_upscale(img, factor=SCALE):
    """Plain bicubic interpolation upwards, used as the comparison baseline."""
    px = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    h, w = px.shape[:2]
    out = np.einsum("ih,hwc,jw->ijc", _upscale_matrix(h, factor), px,
                    _upscale_matrix(w, factor), optimize=True)
    return np.clip(out, 0.0, 1.0)


def _upscale_matrix(n_in, factor):
    n_out = n_in * factor
    centers = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.floor(centers)[:, None] + np.arange(-1, 3)[None, :]
    weights = cubic_kernel(centers[:, None] - src)
    idx = np.clip(src, 0, n_in - 1).astype(int)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), 4), idx.ravel()), weights.ravel())
    return mat


def make_patch_pair(img, rng, size=PATCH_SIZE, factor=SCALE):
    hr, offset = extract_random_patch(img, size, rng)
    return PatchPair(hr=hr, lr=bicubic_downscale(hr, factor), source_id=img.source_id, crop_offset=offset)


def make_epoch_batches(source, batch_size=16, seed=0, epoch=0, patch_size=PATCH_SIZE,
                       factor=SCALE, workers=0, cache=False):
    """One random patch per image, shuffled and grouped into batches.

    ``source`` is a :class:`DatasetManifest` or a sequence of :class:`Image`.
    Crops use an RNG stream keyed on ``(seed, epoch, image index)`` and the
    shuffle one keyed on ``(seed, epoch)``, so the result does not depend on
    the number of ``workers``.  The trailing partial batch is dropped.
    """
    if batch_size < 2:
        raise ConfigurationError(f"batch_size must be >= 2, got {batch_size}")
    n = len(source)
    if n == 0:
        raise PreconditionError("no images to sample from")
    if n < batch_size:
        raise ConfigurationError(f"{n} usable images cannot fill a batch of {batch_size}")

    def pair_for(i):
        img = source.load(i, cache=cache) if isinstance(source, DatasetManifest) else source[i]
        rng = np.random.default_rng([seed, epoch, i])
        return make_patch_pair(img, rng, patch_size, factor)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(pair_for, range(n)))
    else:
        pairs = [pair_for(i) for i in range(n)]
    order = np.random.default_rng([seed, epoch]).permutation(n)
    n_batches = n // batch_size
    return [Batch(tuple(pairs[j] for j in order[b * batch_size:(b + 1) * batch_size]))
            for b in range(n_batches)]
