"""Procedural nine-segment liver phantoms.

An ellipsoid is carved by three oblique, roughly sagittal planes and one
axial plane.  The two outer oblique planes cross inside the ellipsoid; the
wedge behind their crossing becomes segment I, and the remaining four
sectors are split superior/inferior by the axial plane into II/III, IVa/IVb,
VIII/V and VII/VI.  Every segment draws its intensity from the same
distribution, so only the bright vessel tubes running along the partition
planes (and the geometry itself) separate them.

Geometry is evaluated analytically through a random smooth diffeomorphism,
i.e. voxel ``p`` takes the label of ``p + u(p)`` in the undeformed phantom,
which keeps labels exact (no resampling of a voxelised label map).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .deform import exp_velocity, identity_grid, random_smooth_velocity
from .volume_io import ImageVolume, LabelVolume

# normalised ellipsoid coordinates (z, y, x) in [-1, 1]; plane f = c . (z, y, x) - offset
DEFAULT_PLANES = (
    (0.10, 0.55, 1.0, 0.22),     # right: splits the right posterior sector off
    (0.05, 0.05, 1.0, -0.02),    # middle: right anterior vs left medial
    (-0.10, -0.60, 1.0, -0.30),  # left: left lateral sector; crosses the right plane posteriorly
    (1.0, 0.10, 0.0, 0.10),      # axial: superior (f < 0) vs inferior
)


class DegenerateGeometry(ValueError):
    pass


@dataclass
class PhantomConfig:
    dims: tuple = (16, 64, 64)
    semi_axes: tuple = (0.42, 0.42, 0.44)  # fractions of dims
    planes: tuple = DEFAULT_PLANES
    segment_intensity_mean: float = 0.55
    segment_intensity_std: float = 0.05
    background_intensity: float = 0.1
    vessel_intensity: float = 0.85
    vessel_radius: float = 1.0
    noise_std: float = 0.02
    warp_magnitude: float = 3.0
    warp_smoothness: float = 4.0
    plane_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.semi_axes = tuple(float(a) for a in self.semi_axes)
        self.planes = tuple(tuple(float(c) for c in p) for p in self.planes)
        if len(self.planes) != 4 or any(len(p) != 4 for p in self.planes):
            raise ValueError("need exactly four planes of four coefficients")
        for name in ("segment_intensity_mean", "background_intensity", "vessel_intensity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def _jittered_planes(cfg, rng):
    planes = np.array(cfg.planes, dtype=np.float64)
    if cfg.plane_jitter > 0:
        planes[:, 3] += rng.uniform(-cfg.plane_jitter, cfg.plane_jitter, size=4)
    return planes


def _geometry(coords, cfg, planes):
    """Labels and vessel mask for voxel-space sample positions ``coords`` (3, ...)."""
    dims = np.asarray(cfg.dims, dtype=np.float64)
    center = (dims - 1) / 2.0
    axes = np.asarray(cfg.semi_axes) * dims
    norm = [(coords[i] - center[i]) / axes[i] for i in range(3)]
    rho = np.sqrt(norm[0] ** 2 + norm[1] ** 2 + norm[2] ** 2)
    inside = rho <= 1.0

    fvals, dists = [], []
    for cz, cy, cx, off in planes:
        f = cz * norm[0] + cy * norm[1] + cx * norm[2] - off
        grad = np.sqrt((cz / axes[0]) ** 2 + (cy / axes[1]) ** 2 + (cx / axes[2]) ** 2)
        fvals.append(f)
        dists.append(np.abs(f) / grad)
    right, middle, left, axial = fvals
    a, c, m, sup = right > 0, left > 0, middle > 0, axial < 0

    labels = np.zeros(rho.shape, dtype=np.uint8)
    sector = [
        (a & c, 8, 7),        # right posterior: VII / VI
        (~a & c & m, 9, 6),   # right anterior: VIII / V
        (~a & c & ~m, 4, 5),  # left medial: IVa / IVb
        (~a & ~c, 2, 3),      # left lateral: II / III
    ]
    for mask, superior, inferior in sector:
        labels[mask & sup] = superior
        labels[mask & ~sup] = inferior
    labels[a & ~c] = 1  # caudate
    labels[~inside] = 0

    r = cfg.vessel_radius
    depth = (1.0 - rho) * axes.min()
    near_surface = depth < r
    vessel = np.zeros(rho.shape, dtype=bool)
    for i in range(3):
        # oblique planes: tube where they meet the axial plane and where they meet the surface
        vessel |= (dists[i] < r) & ((dists[3] < r) | near_surface)
    vessel |= (dists[3] < r) & near_surface
    vessel &= inside
    return labels, vessel


def phantom_warp(cfg, rng):
    v = random_smooth_velocity(cfg.dims, cfg.warp_magnitude, cfg.warp_smoothness, rng)
    return exp_velocity(v, 6)


def render(cfg: PhantomConfig, seed: int):
    """(image array, label array, vessel mask) for one seed."""
    rng = np.random.default_rng(seed)
    planes = _jittered_planes(cfg, rng)
    coords = identity_grid(cfg.dims)
    if cfg.warp_magnitude > 0:
        coords = coords + phantom_warp(cfg, rng).vectors
    labels, vessel = _geometry(coords, cfg, planes)
    labels = absorb_fragments(labels)
    vessel &= labels > 0
    image = np.full(cfg.dims, cfg.background_intensity)
    liver = labels > 0
    image[liver] = cfg.segment_intensity_mean + cfg.segment_intensity_std * rng.standard_normal(int(liver.sum()))
    image[vessel] = cfg.vessel_intensity
    image += cfg.noise_std * rng.standard_normal(cfg.dims)
    return np.clip(image, 0.0, 1.0), labels, vessel


def generate_phantom(cfg: PhantomConfig | None = None, seed: int | None = None, case_id: str | None = None):
    from .augment import LabeledCase, Provenance

    cfg = cfg or PhantomConfig()
    seed = cfg.seed if seed is None else seed
    image, labels, _ = render(cfg, seed)
    present = set(np.unique(labels).tolist())
    missing = sorted(set(range(1, 10)) - present)
    if missing:
        raise DegenerateGeometry(f"segments {missing} are empty for seed {seed}")
    return LabeledCase(
        case_id or f"phantom_{seed:04d}",
        ImageVolume(image),
        LabelVolume(labels),
        Provenance("original"),
    )


def generate_dataset(n: int, cfg: PhantomConfig | None = None, base_seed: int = 0):
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = cfg or PhantomConfig()
    return [generate_phantom(cfg, base_seed + i) for i in range(n)]


def absorb_fragments(labels, max_rounds=20):
    """Relabel voxels outside each class's largest 6-connected component.

    Orphans take the most common label among their 6-neighbours that are not
    orphans themselves; voxel-scale staircase islands along oblique planes are
    removed this way without moving any boundary by more than a voxel.
    """
    labels = labels.copy()
    for _ in range(max_rounds):
        orphan = np.zeros(labels.shape, dtype=bool)
        for c in range(1, 10):
            comp, n = ndimage.label(labels == c)
            if n > 1:
                sizes = np.bincount(comp.ravel())
                sizes[0] = 0
                orphan |= (comp > 0) & (comp != sizes.argmax())
        if not orphan.any():
            break
        padded = np.pad(labels, 1, mode="edge")
        keep = np.pad(~orphan, 1, constant_values=False)
        votes = np.zeros((10,) + labels.shape, dtype=np.int16)
        for ax in range(3):
            for shift in (-1, 1):
                nb = np.roll(padded, shift, axis=ax)[1:-1, 1:-1, 1:-1]
                ok = np.roll(keep, shift, axis=ax)[1:-1, 1:-1, 1:-1]
                for c in range(10):
                    votes[c] += (nb == c) & ok
        # prefer foreground neighbours when any exist so orphans do not punch holes
        best = votes.argmax(axis=0).astype(np.uint8)
        has_vote = votes.sum(axis=0) > 0
        labels[orphan & has_vote] = best[orphan & has_vote]
    return labels


def components_per_class(labels):
    """Number of 6-connected components of each class 1..9."""
    return {c: int(ndimage.label(labels == c)[1]) for c in range(1, 10)}
