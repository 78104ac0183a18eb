"""Dense displacement fields, scaling-and-squaring exponentials and demons registration.

Fields are arrays of shape (3, D, H, W) holding voxel-unit displacements in
(z, y, x) order.  A displacement ``u`` denotes the map ``p -> p + u(p)``, and
warping a volume by it samples the volume at ``p + u(p)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume_io import ImageVolume, LabelVolume

log = logging.getLogger(__name__)


class DimsMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DisplacementField:
    vectors: np.ndarray

    def __post_init__(self):
        arr = np.array(self.vectors, dtype=np.float64, copy=True)
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise ValueError(f"field must have shape (3, D, H, W), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("field contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "vectors", arr)

    @property
    def dims(self):
        return self.vectors.shape[1:]

    @classmethod
    def zeros(cls, dims):
        return cls(np.zeros((3,) + tuple(dims)))

    @classmethod
    def constant(cls, dims, vec):
        return cls(np.broadcast_to(np.asarray(vec, float).reshape(3, 1, 1, 1), (3,) + tuple(dims)))

    def max_norm(self):
        return float(np.sqrt((self.vectors ** 2).sum(axis=0)).max())

    def __neg__(self):
        return type(self)(-self.vectors)


class VelocityField(DisplacementField):
    """Stationary velocity; ``exp_velocity(v)`` and ``exp_velocity(-v)`` are mutual inverses."""


@dataclass
class RegistrationConfig:
    pyramid_levels: int = 3
    iterations_per_level: int = 30
    smoothing_sigma: float = 2.0
    force_normalization: float = 1.0
    exp_steps: int = 6

    def __post_init__(self):
        if self.pyramid_levels < 1 or self.iterations_per_level < 1:
            raise ValueError("pyramid_levels and iterations_per_level must be positive")
        if not (self.smoothing_sigma > 0 and self.force_normalization > 0):
            raise ValueError("smoothing_sigma and force_normalization must be positive")
        if self.exp_steps < 1:
            raise ValueError("exp_steps must be >= 1")


def identity_grid(dims):
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij"))


def sample_linear(arr, coords):
    """Trilinear lookup of ``arr`` (shape (..., D, H, W)) at ``coords`` (3, ...), clamped to edges."""
    dims = arr.shape[-3:]
    lead = arr.shape[:-3]
    flat = arr.reshape(lead + (-1,))
    lo, frac = [], []
    for ax in range(3):
        c = np.clip(coords[ax], 0.0, dims[ax] - 1)
        f = np.floor(c)
        lo.append(f.astype(np.intp))
        frac.append(c - f)
    hi = [np.minimum(lo[ax] + 1, dims[ax] - 1) for ax in range(3)]
    out = 0.0
    for cz in (0, 1):
        iz = hi[0] if cz else lo[0]
        wz = frac[0] if cz else 1.0 - frac[0]
        for cy in (0, 1):
            iy = hi[1] if cy else lo[1]
            wy = frac[1] if cy else 1.0 - frac[1]
            for cx in (0, 1):
                ix = hi[2] if cx else lo[2]
                wx = frac[2] if cx else 1.0 - frac[2]
                idx = (iz * dims[1] + iy) * dims[2] + ix
                out = out + flat[..., idx] * (wz * wy * wx)
    return out


def sample_nearest(arr, coords):
    dims = arr.shape[-3:]
    idx = [np.clip(np.floor(coords[ax] + 0.5), 0, dims[ax] - 1).astype(np.intp) for ax in range(3)]
    return arr[..., idx[0], idx[1], idx[2]]


def _check_dims(a, b):
    if tuple(a) != tuple(b):
        raise DimsMismatch(f"dims {tuple(a)} and {tuple(b)} differ")


def warp_array(arr, u: DisplacementField, order: int = 1):
    _check_dims(arr.shape[-3:], u.dims)
    coords = identity_grid(u.dims) + u.vectors
    return sample_linear(arr, coords) if order == 1 else sample_nearest(arr, coords)


def warp_image(x: ImageVolume, u: DisplacementField) -> ImageVolume:
    return x.with_data(warp_array(np.asarray(x.data, np.float64), u, order=1))


def warp_labels(s: LabelVolume, u: DisplacementField) -> LabelVolume:
    return s.with_data(warp_array(s.data, u, order=0))


def compose_fields(u1: DisplacementField, u2: DisplacementField) -> DisplacementField:
    """Displacement of ``phi1 o phi2``: u2(p) + u1(p + u2(p))."""
    _check_dims(u1.dims, u2.dims)
    coords = identity_grid(u2.dims) + u2.vectors
    return DisplacementField(u2.vectors + sample_linear(u1.vectors, coords))


def exp_velocity(v: DisplacementField, steps: int = 6) -> DisplacementField:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    u = DisplacementField(v.vectors / 2.0 ** steps)
    for _ in range(steps):
        u = compose_fields(u, u)
    return u


def invert_field(u: DisplacementField, iters: int = 20) -> DisplacementField:
    """Fixed-point inverse: w <- -u(p + w(p))."""
    grid = identity_grid(u.dims)
    w = np.zeros_like(u.vectors)
    for _ in range(iters):
        w = -sample_linear(u.vectors, grid + w)
    return DisplacementField(w)


def interior_residual(u: DisplacementField, margin: int = 3) -> float:
    """Max displacement norm excluding a ``margin``-voxel boundary shell."""
    sl = tuple(slice(margin, n - margin) for n in u.dims)
    inner = u.vectors[(slice(None),) + sl]
    if inner.size == 0:
        raise ValueError("margin leaves no interior voxels")
    return float(np.sqrt((inner ** 2).sum(axis=0)).max())


def smooth_field(vectors, sigma):
    return np.stack([ndimage.gaussian_filter(c, sigma, mode="nearest") for c in vectors])


def random_smooth_velocity(dims, max_norm, sigma, rng) -> VelocityField:
    """Gaussian-smoothed white noise rescaled so its largest vector has length ``max_norm``."""
    noise = rng.standard_normal((3,) + tuple(dims))
    vec = smooth_field(noise, sigma)
    peak = np.sqrt((vec ** 2).sum(axis=0)).max()
    if peak > 0:
        vec *= max_norm / peak
    return VelocityField(vec)


# -- multi-resolution helpers --------------------------------------------------

def _resize_linear(arr, out_dims):
    out = arr
    for ax, n_out in enumerate(out_dims):
        axis = arr.ndim - 3 + ax
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        c = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
        lo = np.floor(c).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        shape = [1] * out.ndim
        shape[axis] = -1
        frac = (c - lo).reshape(shape)
        out = np.take(out, lo, axis=axis) * (1 - frac) + np.take(out, hi, axis=axis) * frac
    return out


def _pyramid_dims(dims, levels):
    out = [tuple(dims)]
    for _ in range(levels - 1):
        nxt = tuple(max(1, (n + 1) // 2) for n in out[-1])
        if min(nxt) < 4:
            break
        out.append(nxt)
    return out[::-1]


def _upsample_velocity(vec, dims):
    scale = np.array([n_out / n_in for n_out, n_in in zip(dims, vec.shape[1:])]).reshape(3, 1, 1, 1)
    return _resize_linear(vec, dims) * scale


def _demons_level(f, m, v, cfg, keep_best):
    grad = np.stack(np.gradient(f))
    grad_sq = (grad ** 2).sum(axis=0)
    alpha = cfg.force_normalization
    grid = identity_grid(f.shape)
    best_v, best_mse = v, np.inf
    for it in range(cfg.iterations_per_level + 1):
        u = exp_velocity(VelocityField(v), cfg.exp_steps).vectors
        diff = sample_linear(m, grid + u) - f
        mse = float(np.mean(diff ** 2))
        if mse < best_mse:
            best_v, best_mse = v, mse
        if it == cfg.iterations_per_level:
            break
        denom = grad_sq + alpha * diff ** 2
        safe = np.where(denom > 1e-12, denom, 1.0)
        update = np.where(denom > 1e-12, -diff / safe, 0.0) * grad
        v = smooth_field(v + update, cfg.smoothing_sigma)
    return (best_v, best_mse) if keep_best else (v, mse)


def register(fixed: ImageVolume, moving: ImageVolume, cfg: RegistrationConfig | None = None) -> VelocityField:
    """Log-domain demons: velocity ``v`` with ``moving o exp(v)`` close to ``fixed``.

    The returned iterate is the lowest-MSE one seen at the finest level, with
    ``v = 0`` among the candidates, so registration never increases the error.
    """
    cfg = cfg or RegistrationConfig()
    _check_dims(fixed.dims, moving.dims)
    f_full = np.asarray(fixed.data, np.float64)
    m_full = np.asarray(moving.data, np.float64)
    levels = _pyramid_dims(fixed.dims, cfg.pyramid_levels)
    v = np.zeros((3,) + levels[0])
    for k, dims in enumerate(levels):
        finest = k == len(levels) - 1
        if k > 0:
            v = _upsample_velocity(v, dims)
        if finest:
            f, m = f_full, m_full
        else:
            sigma = tuple(0.5 * n / c for n, c in zip(f_full.shape, dims))
            f = _resize_linear(ndimage.gaussian_filter(f_full, sigma, mode="nearest"), dims)
            m = _resize_linear(ndimage.gaussian_filter(m_full, sigma, mode="nearest"), dims)
        v, mse = _demons_level(f, m, v, cfg, keep_best=finest)
        log.debug("demons level %d dims %s mse %.6g", k, dims, mse)
    pre = float(np.mean((m_full - f_full) ** 2))
    if not mse <= pre:
        v = np.zeros_like(v)
    return VelocityField(v)


# -- serialization ---------------------------------------------------------------

def save_field(field: DisplacementField, path) -> None:
    """Raw float32 little-endian blob (3, D, H, W) C-order plus a ``.txt`` sidecar."""
    path = Path(path)
    path.write_bytes(field.vectors.astype("<f4").tobytes())
    d, h, w = field.dims
    kind = "velocity" if isinstance(field, VelocityField) else "displacement"
    sidecar = (
        f"kind = {kind}\n"
        f"dims = {d} {h} {w}\n"
        "components = 3\n"
        "component_order = z y x\n"
        "units = voxel\n"
        "dtype = float32\n"
        "byte_order = little\n"
        "layout = component-major, C order (component, D, H, W)\n"
    )
    path.with_suffix(".txt").write_text(sidecar)


def load_field(path) -> DisplacementField:
    path = Path(path)
    meta = {}
    for line in path.with_suffix(".txt").read_text().splitlines():
        if "=" in line:
            key, val = line.split("=", 1)
            meta[key.strip()] = val.strip()
    dims = tuple(int(x) for x in meta["dims"].split())
    arr = np.frombuffer(path.read_bytes(), dtype="<f4")
    if arr.size != 3 * int(np.prod(dims)):
        raise ValueError(f"field blob has {arr.size} values, sidecar promises 3x{dims}")
    cls = VelocityField if meta.get("kind") == "velocity" else DisplacementField
    return cls(arr.reshape((3,) + dims).astype(np.float64))
