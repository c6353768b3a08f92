"""PSNR / SSIM and aggregated metric reports."""
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from ._validation import check_pixels, check_same_shape
from .exceptions import PreconditionError

SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA_WEIGHTS = np.array([65.481, 128.553, 24.966]) / 255.0


def to_luma(pixels):
    """BT.601 Y channel of an RGB image in [0, 1], returned as H x W x 1."""
    px = np.asarray(pixels, dtype=np.float64)
    return (16.0 / 255.0 + px @ LUMA_WEIGHTS)[..., None]


def _prepare(ref, test, luma):
    ref = check_pixels(getattr(ref, "pixels", ref))
    test = check_pixels(getattr(test, "pixels", test))
    check_same_shape(ref, test)
    if luma:
        ref, test = to_luma(ref), to_luma(test)
    return ref, test


def psnr(ref, test, luma=False, max_value=1.0):
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    ref, test = _prepare(ref, test, luma)
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / mse)


def ssim(ref, test, luma=False, window=False, data_range=1.0):
    """Structural similarity averaged over channels.

    By default each channel is summarised by whole-image statistics (mean,
    population variance and covariance).  ``window=True`` switches to the
    11x11 Gaussian-window (sigma 1.5) variant and averages the local map.
    """
    ref, test = _prepare(ref, test, luma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    scores = []
    for ch in range(ref.shape[2]):
        a, b = ref[..., ch], test[..., ch]
        if window:
            scores.append(_windowed_ssim(a, b, c1, c2))
            continue
        mu_a, mu_b = a.mean(), b.mean()
        var_a = np.mean((a - mu_a) ** 2)
        var_b = np.mean((b - mu_b) ** 2)
        cov = np.mean((a - mu_a) * (b - mu_b))
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        scores.append(num / den)
    return float(np.mean(scores))


def _windowed_ssim(a, b, c1, c2, sigma=1.5):
    def filt(x):
        # radius 5 -> 11-tap window
        return gaussian_filter(x, sigma, truncate=5.0 / sigma, mode="reflect")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(smap.mean())


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    per_image: list = field(default_factory=list)
    n_infinite_psnr: int = 0

    def to_dict(self):
        return {
            "psnr_db": _json_number(self.psnr_db),
            "ssim": self.ssim,
            "n_infinite_psnr": self.n_infinite_psnr,
            "per_image": [
                {"source_id": sid, "psnr_db": _json_number(p), "ssim": s}
                for sid, p, s in self.per_image
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        per_image = [(r["source_id"], _from_json_number(r["psnr_db"]), r["ssim"]) for r in d["per_image"]]
        return cls(_from_json_number(d["psnr_db"]), d["ssim"], per_image, d.get("n_infinite_psnr", 0))


def _json_number(x):
    return "inf" if math.isinf(x) else x


def _from_json_number(x):
    return math.inf if x == "inf" else float(x)


def evaluate_pairs(pairs, luma=False, window=False):
    """Per-image PSNR/SSIM plus their means.

    ``pairs`` holds ``(ref, test)`` or ``(source_id, ref, test)`` tuples.
    Infinite PSNR values are left out of the mean and counted instead; when
    every pair is identical the mean PSNR is infinite.
    """
    pairs = list(pairs)
    if not pairs:
        raise PreconditionError("evaluate_pairs needs at least one pair")
    rows = []
    for i, item in enumerate(pairs):
        sid, ref, test = item if len(item) == 3 else (getattr(item[0], "source_id", str(i)) or str(i), *item)
        rows.append((sid, psnr(ref, test, luma), ssim(ref, test, luma, window)))
    finite = [p for _, p, _ in rows if math.isfinite(p)]
    mean_psnr = float(np.mean(finite)) if finite else math.inf
    return MetricReport(
        psnr_db=mean_psnr,
        ssim=float(np.mean([s for _, _, s in rows])),
        per_image=rows,
        n_infinite_psnr=len(rows) - len(finite),
    )
