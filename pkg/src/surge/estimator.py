"""scikit-learn style facade over training and inference."""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import checkpoint as ckpt_io
from ._validation import check_pixels
from .data import SCALE, DatasetManifest, Image, bicubic_downscale
from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig
from .training import (TrainConfig, config_from_checkpoint, crop_to_multiple,
                       generator_from_checkpoint, super_resolve_array, train)
from .metrics import evaluate_pairs


def _as_images(X):
    if isinstance(X, DatasetManifest):
        return X
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = [X]
    images = []
    for i, item in enumerate(X):
        if isinstance(item, Image):
            images.append(item)
        else:
            images.append(Image(check_pixels(item), source_id=f"image{i}"))
    return images


def _as_arrays(X):
    """Single H x W x 3 array -> [array]; batches and sequences -> list of arrays."""
    if isinstance(X, Image):
        return [X.pixels], True
    if isinstance(X, np.ndarray) and X.ndim == 3:
        return [check_pixels(X)], True
    return [check_pixels(getattr(x, "pixels", x)) for x in X], False


class SuperResolver(BaseEstimator):
    """4x super-resolution model trained adversarially on HR images.

    ``fit`` takes high-resolution images (a list of H x W x 3 arrays in
    [0, 1], :class:`Image` objects or a :class:`DatasetManifest`); LR inputs
    are made by bicubic downscaling.  ``predict`` maps LR images to SR
    images and ``score`` returns mean PSNR (dB) of 4x reconstruction of HR
    images.  Network shapes are passed as dicts of config fields.
    """

    def __init__(self, epochs=200, batch_size=16, patch_size=256, weighting_mode="dynamic",
                 enable_js=True, enable_gw=True, g_lr=1e-4, d_lr=1e-4, gp_lambda=10.0,
                 seed=0, dtype="float32", deterministic=False, generator=None,
                 discriminator=None, output_dir=None):
        self.epochs = epochs
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.weighting_mode = weighting_mode
        self.enable_js = enable_js
        self.enable_gw = enable_gw
        self.g_lr = g_lr
        self.d_lr = d_lr
        self.gp_lambda = gp_lambda
        self.seed = seed
        self.dtype = dtype
        self.deterministic = deterministic
        self.generator = generator
        self.discriminator = discriminator
        self.output_dir = output_dir

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, patch_size=self.patch_size,
            weighting_mode=self.weighting_mode, enable_js=self.enable_js,
            enable_gw=self.enable_gw, g_lr=self.g_lr, d_lr=self.d_lr,
            gp_lambda=self.gp_lambda, seed=self.seed, dtype=self.dtype,
            deterministic=self.deterministic,
            generator=GeneratorConfig(**(self.generator or {})),
            discriminator=DiscriminatorConfig(**(self.discriminator or {})),
            eval_every=0,
        )

    def fit(self, X, y=None):
        cfg = self._train_config()
        result = train(_as_images(X), cfg, output_dir=self.output_dir)
        self.config_ = cfg
        self.generator_ = result.trainer.generator.eval()
        self.loss_log_ = result.log
        self.checkpoint_ = result.checkpoint
        return self

    def predict(self, X):
        """Super-resolve one LR image or a sequence of them."""
        check_is_fitted(self, "generator_")
        arrays, single = _as_arrays(X)
        out = [super_resolve_array(self.generator_, a) for a in arrays]
        return out[0] if single else out

    def score(self, X, y=None):
        """Mean PSNR (dB) of SR against each HR image of ``X``."""
        check_is_fitted(self, "generator_")
        arrays, _ = _as_arrays(X)
        pairs = []
        for a in arrays:
            hr = crop_to_multiple(a)
            pairs.append((hr, self.predict(bicubic_downscale(hr, SCALE))))
        return evaluate_pairs(pairs).psnr_db

    def save(self, path):
        check_is_fitted(self, "checkpoint_")
        return ckpt_io.save_checkpoint(self.checkpoint_, path)

    @classmethod
    def from_checkpoint(cls, path):
        ckpt = ckpt_io.load_checkpoint(path) if not isinstance(path, ckpt_io.Checkpoint) else path
        cfg = config_from_checkpoint(ckpt)
        est = cls(epochs=cfg.epochs, batch_size=cfg.batch_size, patch_size=cfg.patch_size,
                  weighting_mode=cfg.weighting_mode, enable_js=cfg.enable_js,
                  enable_gw=cfg.enable_gw, g_lr=cfg.g_lr, d_lr=cfg.d_lr,
                  gp_lambda=cfg.gp_lambda, seed=cfg.seed, dtype=cfg.dtype,
                  deterministic=cfg.deterministic, generator=cfg.generator.to_dict(),
                  discriminator=cfg.discriminator.to_dict())
        est.config_ = cfg
        est.generator_ = generator_from_checkpoint(ckpt)
        est.checkpoint_ = ckpt
        est.loss_log_ = []
        return est
