"""Input validation and layout conversion helpers.

Public functions take images as H x W x 3 (or N x H x W x 3) arrays; the
networks work on NCHW torch tensors.
"""
import numpy as np
import torch

from .exceptions import PreconditionError, ShapeError


def check_pixels(pixels, allow_out_of_range=False):
    """Return ``pixels`` as a float64 H x W x 3 array, validating it."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got shape {px.shape}")
    if px.shape[0] < 1 or px.shape[1] < 1:
        raise ShapeError(f"image must be non-empty, got shape {px.shape}")
    if not np.all(np.isfinite(px)):
        raise PreconditionError("image contains non-finite values")
    if not allow_out_of_range and (px.min() < 0.0 or px.max() > 1.0):
        raise PreconditionError(f"image values must lie in [0, 1], got [{px.min()}, {px.max()}]")
    return px


def check_image_batch(images, min_size=1):
    """Validate a list of H x W x 3 arrays or an N x H x W x 3 array.

    Returns a float64 N x H x W x 3 array.  All images must share a shape.
    """
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = images[None]
    if isinstance(images, np.ndarray):
        arr = images.astype(np.float64, copy=False)
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ShapeError(f"expected N x H x W x 3, got shape {arr.shape}")
        for img in arr:
            check_pixels(img)
    else:
        imgs = [check_pixels(getattr(im, "pixels", im)) for im in images]
        if not imgs:
            raise PreconditionError("empty image batch")
        if any(im.shape != imgs[0].shape for im in imgs):
            raise ShapeError("images in a batch must share a shape")
        arr = np.stack(imgs)
    if min(arr.shape[1:3]) < min_size:
        raise PreconditionError(f"image sides must be >= {min_size}, got {arr.shape[1:3]}")
    return arr


def check_same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def to_tensor(batch, dtype=torch.float32, device="cpu"):
    """N x H x W x 3 array -> N x 3 x H x W tensor."""
    arr = np.asarray(batch)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=dtype, device=device)


def to_numpy(tensor):
    """N x 3 x H x W tensor -> float64 N x H x W x 3 array."""
    return tensor.detach().cpu().double().numpy().transpose(0, 2, 3, 1)
