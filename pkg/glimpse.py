"""Foveal retina sensor and glimpse network.

The retina cuts ``num_scales`` square patches around a location, the k-th one
``scale_factor**k`` times wider than the base patch, averages each one back
down to ``patch_size`` and concatenates them. Cropping is a hard,
non-differentiable operation: no gradient reaches the location through the
image.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Tuple, Union

import numpy as np

from nn_core import DimensionError, Linear, Tensor, relu, relu_backward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GlimpseConfig:
    """Retina geometry."""

    patch_size: int = 8
    num_scales: int = 1
    scale_factor: int = 2

    def __post_init__(self):
        if self.patch_size < 2 or self.patch_size % 2:
            raise DimensionError(f"patch_size must be even and >= 2, got {self.patch_size}")
        if self.num_scales < 1:
            raise DimensionError(f"num_scales must be >= 1, got {self.num_scales}")
        if self.scale_factor < 2:
            raise DimensionError(f"scale_factor must be >= 2, got {self.scale_factor}")

    def scale_size(self, scale: int) -> int:
        """Side in pixels of the patch cut at ``scale`` (0-based)."""
        return self.patch_size * self.scale_factor ** scale

    @property
    def retina_size(self) -> int:
        return self.num_scales * self.patch_size * self.patch_size


@dataclass(frozen=True)
class Location:
    """Normalised glimpse location; (0, 0) is the image centre."""

    x: float
    y: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(np.clip(self.x, -1.0, 1.0)))
        object.__setattr__(self, "y", float(np.clip(self.y, -1.0, 1.0)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


LocationLike = Union[Location, np.ndarray, Tuple[float, float]]


def _loc_array(loc: LocationLike) -> np.ndarray:
    return loc.as_array() if isinstance(loc, Location) else np.asarray(loc, dtype=np.float64)


def to_pixel(loc: LocationLike, image_size: int) -> np.ndarray:
    """Map normalised coordinates in [-1, 1] onto [0, image_size - 1].

    Works elementwise, so ``loc`` may also be an array of shape (..., 2).
    """
    if image_size < 1:
        raise DimensionError(f"image_size must be >= 1, got {image_size}")
    return (_loc_array(loc) + 1.0) / 2.0 * (image_size - 1)


def _anchor(center: np.ndarray, size: int) -> np.ndarray:
    # round half up, then shift to the top-left corner
    return np.floor(np.asarray(center) + 0.5).astype(np.int64) - size // 2


def extract_patch(image: np.ndarray, center: Tuple[float, float], size: int) -> np.ndarray:
    """Cut a ``size`` x ``size`` patch around pixel ``center`` = (x, y).

    Pixels falling outside the image are zero.
    """
    if size < 1:
        raise DimensionError(f"patch size must be >= 1, got {size}")
    height, width = image.shape
    col0, row0 = _anchor(center, size)
    patch = np.zeros((size, size), dtype=image.dtype)

    r_lo, r_hi = max(row0, 0), min(row0 + size, height)
    c_lo, c_hi = max(col0, 0), min(col0 + size, width)
    if r_lo < r_hi and c_lo < c_hi:
        patch[r_lo - row0:r_hi - row0, c_lo - col0:c_hi - col0] = image[r_lo:r_hi, c_lo:c_hi]
    return patch


def downsample(patch: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping ``factor`` x ``factor`` blocks over the last two axes."""
    side = patch.shape[-1]
    if patch.shape[-2] != side or side % factor:
        raise DimensionError(f"downsample: patch {list(patch.shape[-2:])} not divisible by {factor}")
    n = side // factor
    blocks = patch.reshape(patch.shape[:-2] + (n, factor, n, factor))
    return blocks.mean(axis=(-3, -1))


def build_retina(image: np.ndarray, loc: LocationLike, cfg: GlimpseConfig) -> np.ndarray:
    """Multi-scale retina vector for one image, scales concatenated in order."""
    size = image.shape[0]
    center = to_pixel(loc, size)
    parts = []
    for scale in range(cfg.num_scales):
        patch = extract_patch(image, center, cfg.scale_size(scale))
        if scale:
            patch = downsample(patch, cfg.scale_factor ** scale)
        parts.append(patch.reshape(-1))
    return np.concatenate(parts)


def build_retina_batch(images: np.ndarray, locs: np.ndarray, cfg: GlimpseConfig) -> np.ndarray:
    """Vectorised ``build_retina`` over a batch.

    Args:
        images: (B, H, W)
        locs: (B, 2) normalised locations

    Returns:
        (B, num_scales * patch_size**2)
    """
    batch, height, width = images.shape
    if locs.shape != (batch, 2):
        raise DimensionError(f"build_retina_batch: locations {list(locs.shape)} for {batch} images")
    pad = cfg.scale_size(cfg.num_scales - 1)
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad)))
    centers = to_pixel(locs, height)
    rows_b = np.arange(batch)[:, None, None]

    parts = []
    for scale in range(cfg.num_scales):
        size = cfg.scale_size(scale)
        anchors = _anchor(centers, size) + pad
        offsets = np.arange(size)
        cols = anchors[:, 0, None] + offsets
        rows = anchors[:, 1, None] + offsets
        patches = padded[rows_b, rows[:, :, None], cols[:, None, :]]
        if scale:
            patches = downsample(patches, cfg.scale_factor ** scale)
        parts.append(patches.reshape(batch, -1))
    return np.concatenate(parts, axis=1)


class GlimpseNetwork:
    """Fuses the retina ("what") and the location ("where") into G_t."""

    def __init__(self, cfg: GlimpseConfig, glimpse_hidden: int, loc_hidden: int, output_size: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.output_size = output_size
        self.what = Linear("glimpse.what", cfg.retina_size, glimpse_hidden, rng, dtype)
        self.where = Linear("glimpse.where", 2, loc_hidden, rng, dtype)
        self.what_out = Linear("glimpse.what_out", glimpse_hidden, output_size, rng, dtype)
        self.where_out = Linear("glimpse.where_out", loc_hidden, output_size, rng, dtype)

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for layer in (self.what, self.where, self.what_out, self.where_out):
            params.update(layer.parameters())
        return params

    def forward(self, retina: np.ndarray, loc: np.ndarray) -> Tuple[np.ndarray, tuple]:
        dtype = self.what.weight.values.dtype
        a_what, c_what = self.what.forward(retina.astype(dtype, copy=False))
        h_what = relu(a_what)
        a_where, c_where = self.where.forward(np.asarray(loc, dtype=dtype))
        h_where = relu(a_where)
        o_what, c_what_out = self.what_out.forward(h_what)
        o_where, c_where_out = self.where_out.forward(h_where)
        pre = o_what + o_where
        cache = (a_what, c_what, a_where, c_where, c_what_out, c_where_out, pre)
        return relu(pre), cache

    def backward(self, d_glimpse: np.ndarray, cache: tuple):
        """Accumulate parameter gradients; retina and location get none."""
        a_what, c_what, a_where, c_where, c_what_out, c_where_out, pre = cache
        d_pre = relu_backward(d_glimpse, pre)
        dh_what = self.what_out.backward(d_pre, c_what_out)
        dh_where = self.where_out.backward(d_pre, c_where_out)
        self.what.backward(relu_backward(dh_what, a_what), c_what)
        self.where.backward(relu_backward(dh_where, a_where), c_where)


def glimpse_forward(retina: np.ndarray, loc: LocationLike, network: GlimpseNetwork) -> np.ndarray:
    """G_t for a single retina vector and location."""
    glimpse, _ = network.forward(retina[None, :], _loc_array(loc)[None, :])
    return glimpse[0]
