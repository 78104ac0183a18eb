"""Isotropic resampling, intensity windowing and fixed-grid crop/pad."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume_io import ImageVolume, LabelVolume


class NonPositiveWidth(ValueError):
    pass


@dataclass
class PreprocessConfig:
    target_spacing: float = 1.0
    window_level: float = -60.0
    window_width: float = 300.0
    target_dims: tuple = (32, 256, 256)
    normalization: str = "window"  # or "minmax" (per volume)

    def __post_init__(self):
        self.target_dims = tuple(int(d) for d in self.target_dims)
        if not self.target_spacing > 0:
            raise ValueError("target_spacing must be > 0")
        if not self.window_width > 0:
            raise NonPositiveWidth("window_width must be > 0")
        if len(self.target_dims) != 3 or min(self.target_dims) < 1:
            raise ValueError("target_dims must be three extents >= 1")
        if self.normalization not in ("window", "minmax"):
            raise ValueError("normalization must be 'window' or 'minmax'")


def resampled_dims(dims, spacing, target_spacing):
    return tuple(max(1, int(round(n * s / target_spacing))) for n, s in zip(dims, spacing))


def _source_coords(n_out, ratio):
    # voxel i sits at (i + 0.5) * spacing; ratio = target / source spacing
    return (np.arange(n_out, dtype=np.float64) + 0.5) * ratio - 0.5


def _linear_along(arr, coords, axis):
    n = arr.shape[axis]
    c = np.clip(coords, 0.0, n - 1)
    lo = np.floor(c).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = c - lo
    shape = [1] * arr.ndim
    shape[axis] = -1
    frac = frac.reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    return a * (1.0 - frac) + b * frac


def _nearest_along(arr, coords, axis):
    n = arr.shape[axis]
    idx = np.clip(np.floor(coords + 0.5), 0, n - 1).astype(np.intp)
    return np.take(arr, idx, axis=axis)


def resample_image(v: ImageVolume, target_spacing: float) -> ImageVolume:
    """Trilinear resample onto isotropic ``target_spacing`` (clamp-to-edge)."""
    if all(s == target_spacing for s in v.spacing):
        return v.with_data(v.data)
    out = np.asarray(v.data, dtype=np.float64)
    for axis, n_out in enumerate(resampled_dims(v.dims, v.spacing, target_spacing)):
        ratio = target_spacing / v.spacing[axis]
        out = _linear_along(out, _source_coords(n_out, ratio), axis)
    return v.with_data(out, spacing=(float(target_spacing),) * 3)


def resample_labels(v: LabelVolume, target_spacing: float) -> LabelVolume:
    """Nearest-neighbour counterpart of resample_image; never invents class IDs."""
    if all(s == target_spacing for s in v.spacing):
        return v.with_data(v.data)
    out = v.data
    for axis, n_out in enumerate(resampled_dims(v.dims, v.spacing, target_spacing)):
        ratio = target_spacing / v.spacing[axis]
        out = _nearest_along(out, _source_coords(n_out, ratio), axis)
    return v.with_data(out, spacing=(float(target_spacing),) * 3)


def normalize_intensity(v: ImageVolume, level: float = -60.0, width: float = 300.0) -> ImageVolume:
    if not width > 0:
        raise NonPositiveWidth(f"window width must be > 0, got {width}")
    lower = level - width / 2.0
    out = np.clip((np.asarray(v.data, dtype=np.float64) - lower) / width, 0.0, 1.0)
    return v.with_data(out)


def normalize_minmax(v: ImageVolume) -> ImageVolume:
    data = np.asarray(v.data, dtype=np.float64)
    lo, hi = data.min(), data.max()
    if hi == lo:
        return v.with_data(np.zeros_like(data))
    return v.with_data((data - lo) / (hi - lo))


def crop_or_pad(v, target_dims, pad_value=0):
    """Center-crop or symmetrically pad each axis; odd leftovers go to the high side."""
    src = v.data
    out = np.full(tuple(target_dims), pad_value, dtype=src.dtype)
    src_sl, dst_sl = [], []
    for n, t in zip(src.shape, target_dims):
        if n >= t:
            start = (n - t) // 2
            src_sl.append(slice(start, start + t))
            dst_sl.append(slice(0, t))
        else:
            start = (t - n) // 2
            src_sl.append(slice(0, n))
            dst_sl.append(slice(start, start + n))
    out[tuple(dst_sl)] = src[tuple(src_sl)]
    return v.with_data(out)


def preprocess_case(image: ImageVolume, labels: LabelVolume | None, cfg: PreprocessConfig):
    """Full preparation chain: resample, normalise, then fit to ``cfg.target_dims``."""
    img = resample_image(image, cfg.target_spacing)
    if cfg.normalization == "window":
        img = normalize_intensity(img, cfg.window_level, cfg.window_width)
    else:
        img = normalize_minmax(img)
    img = crop_or_pad(img, cfg.target_dims, 0.0)
    if labels is None:
        return img, None
    lab = crop_or_pad(resample_labels(labels, cfg.target_spacing), cfg.target_dims, 0)
    return img, lab
