"""Deterministic image enhancement and augmentation.

The enhancement chain is contrast -> 3x3 median -> sharpen -> bilinear
resize. All filters operate on uint8 RGB rasters (H, W, 3) and preserve
dimensions; resize happens only in `preprocess`. Borders are handled by
edge replication throughout.
"""

from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

# Unit-sum Laplacian sharpening kernel.
SHARPEN_KERNEL = np.array([[0, -1, 0],
                           [-1, 5, -1],
                           [0, -1, 0]], dtype=np.float64)

# ITU-R BT.601 luma weights.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)

# ImageNet normalization statistics (the pretrained source's published values).
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class PrepParams:
    """Preprocessing configuration. median kernel is fixed at 3x3."""
    contrast_factor: float = 1.5
    sharpen_enabled: bool = True
    target_size: int = 224
    normalize_mean: tuple = IMAGENET_MEAN
    normalize_std: tuple = IMAGENET_STD

    def __post_init__(self):
        if self.contrast_factor < 0:
            raise ValueError(f"contrast_factor must be >= 0, got {self.contrast_factor}")
        if self.target_size <= 0:
            raise ValueError(f"target_size must be > 0, got {self.target_size}")
        if any(s <= 0 for s in self.normalize_std):
            raise ValueError(f"normalize_std components must be > 0, got {self.normalize_std}")


@dataclass
class AugmentParams:
    """Training-time affine augmentation ranges."""
    rotation_range: float = 15.0   # degrees, sampled in [-r, +r]
    zoom_range: tuple = (0.9, 1.1)
    shear_range: float = 10.0      # degrees, sampled in [-s, +s]
    seed: int = 0

    def __post_init__(self):
        zmin, zmax = self.zoom_range
        if self.rotation_range < 0:
            raise ValueError(f"rotation_range must be >= 0, got {self.rotation_range}")
        if not (0 < zmin <= zmax):
            raise ValueError(f"zoom_range must satisfy 0 < min <= max, got {self.zoom_range}")
        if self.shear_range < 0:
            raise ValueError(f"shear_range must be >= 0, got {self.shear_range}")


def _check_image(img: np.ndarray, min_size: int = 1) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) RGB raster, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 intensities, got {img.dtype}")
    h, w = img.shape[:2]
    if h < min_size or w < min_size:
        raise ValueError(f"image {h}x{w} smaller than required {min_size}x{min_size}")
    return img


def enhance_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    """Mean-luma anchored linear contrast scaling.

    out = clamp(round(mean_gray + factor * (pixel - mean_gray)), 0, 255)
    where mean_gray is the image-wide mean luma. factor=1 is the identity,
    factor=0 collapses to the constant round(mean_gray).
    """
    img = _check_image(img)
    if factor < 0:
        raise ValueError(f"contrast factor must be >= 0, got {factor}")
    if factor == 1.0:
        return img.copy()
    mean_gray = float((img.astype(np.float64) * LUMA_WEIGHTS).sum(axis=2).mean())
    out = mean_gray + factor * (img.astype(np.float64) - mean_gray)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def median_filter3(img: np.ndarray) -> np.ndarray:
    """3x3 per-channel median with edge-replicated borders."""
    img = _check_image(img, min_size=3)
    out = np.empty_like(img)
    for c in range(3):
        out[..., c] = ndimage.median_filter(img[..., c], size=3, mode="nearest")
    return out


def sharpen(img: np.ndarray) -> np.ndarray:
    """3x3 Laplacian sharpening, edge-replicated, rounded and clamped."""
    img = _check_image(img, min_size=3)
    out = np.empty_like(img)
    for c in range(3):
        conv = ndimage.convolve(img[..., c].astype(np.float64), SHARPEN_KERNEL,
                                mode="nearest")
        out[..., c] = np.clip(np.rint(conv), 0, 255).astype(np.uint8)
    return out


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    img = _check_image(img)
    if img.shape[0] == size and img.shape[1] == size:
        return img.copy()
    return np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))


def preprocess(img: np.ndarray, params: PrepParams) -> np.ndarray:
    """Full deterministic chain: contrast -> median -> sharpen -> resize."""
    out = enhance_contrast(img, params.contrast_factor)
    out = median_filter3(out)
    if params.sharpen_enabled:
        out = sharpen(out)
    return resize_bilinear(out, params.target_size)


def to_tensor(img: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """uint8 raster -> normalized float32 tensor, (H, W, 3) channel-last."""
    img = _check_image(img)
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    return ((img.astype(np.float32) / 255.0) - mean) / std


def _affine_matrix(rotation_deg: float, zoom: float, shear_deg: float) -> np.ndarray:
    """Forward affine map in (row, col) coordinates about the image center."""
    th = np.deg2rad(rotation_deg)
    sh = np.deg2rad(shear_deg)
    rot = np.array([[np.cos(th), -np.sin(th)],
                    [np.sin(th), np.cos(th)]])
    scale = np.array([[zoom, 0.0], [0.0, zoom]])
    shear = np.array([[1.0, np.tan(sh)], [0.0, 1.0]])
    return rot @ scale @ shear


def affine_warp(img: np.ndarray, rotation_deg: float, zoom: float,
                shear_deg: float) -> np.ndarray:
    """Apply one composed affine warp with bilinear sampling and
    edge-replicate fill. Exact-identity parameters return the input bytes."""
    img = _check_image(img)
    if rotation_deg == 0.0 and zoom == 1.0 and shear_deg == 0.0:
        return img.copy()
    m = _affine_matrix(rotation_deg, zoom, shear_deg)
    minv = np.linalg.inv(m)
    center = (np.array(img.shape[:2], dtype=np.float64) - 1.0) / 2.0
    offset = center - minv @ center
    out = np.empty_like(img)
    for c in range(3):
        warped = ndimage.affine_transform(img[..., c].astype(np.float64), minv,
                                          offset=offset, order=1, mode="nearest")
        out[..., c] = np.clip(np.rint(warped), 0, 255).astype(np.uint8)
    return out


def augment(img: np.ndarray, params: AugmentParams,
            rng: np.random.Generator) -> np.ndarray:
    """Sample (rotation, zoom, shear) from the configured ranges and warp.

    Deterministic for a given generator state; pass a freshly seeded
    generator for reproducible outputs.
    """
    theta = rng.uniform(-params.rotation_range, params.rotation_range)
    zoom = rng.uniform(params.zoom_range[0], params.zoom_range[1])
    phi = rng.uniform(-params.shear_range, params.shear_range)
    return affine_warp(img, theta, zoom, phi)
