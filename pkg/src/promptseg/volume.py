"""3D scalar volumes, binary masks, filtering, resampling and phantoms.

Array layout: ``data`` has shape ``dims`` in C order, so axis 2 varies
fastest in memory. ``spacing[k]`` is the voxel size in mm along axis ``k``.
Volumes are stored as float32, masks as bool; both are read-only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .seeding import make_rng


class InvalidGeometryError(ValueError):
    """Non-positive dims or spacing."""


class NonFiniteDataError(ValueError):
    """NaN or Inf in volume data."""


def _check_geometry(shape, spacing) -> tuple[float, float, float]:
    if len(shape) != 3 or any(int(d) <= 0 for d in shape):
        raise InvalidGeometryError(f"dims must be 3 positive integers, got {tuple(shape)}")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
        raise InvalidGeometryError(f"spacing must be 3 positive reals, got {spacing}")
    return spacing


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        spacing = _check_geometry(arr.shape, self.spacing)
        arr = np.array(arr, dtype=np.float32, order="C")
        if not np.isfinite(arr).all():
            raise NonFiniteDataError("volume contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        spacing = _check_geometry(arr.shape, self.spacing)
        if arr.dtype != np.bool_:
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")
            arr = arr.astype(bool)
        else:
            arr = np.array(arr, order="C")
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    def as_volume(self) -> Volume:
        return Volume(self.data.astype(np.float32), self.spacing)

    def with_data(self, data) -> "BinaryMask":
        return BinaryMask(data, self.spacing)


def same_grid(a, b) -> bool:
    return a.dims == b.dims and np.allclose(a.spacing, b.spacing, rtol=1e-6, atol=0)


def require_same_grid(a, b, what: str = "inputs") -> None:
    if not same_grid(a, b):
        raise ValueError(
            f"{what} must share dims/spacing: {a.dims}@{a.spacing} vs {b.dims}@{b.spacing}"
        )


# --------------------------------------------------------------------------
# filtering


def gaussian_kernel(sigma_vox: float) -> np.ndarray:
    """Normalised 1D Gaussian truncated at 3 sigma, radius at least 1."""
    radius = max(1, int(math.ceil(3.0 * sigma_vox)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return k / k.sum()


def gaussian_blur(v: Volume, sigma_mm: float) -> Volume:
    """Separable Gaussian filter with replicate padding.

    The per-axis standard deviation in voxels is ``sigma_mm / spacing``.
    """
    if not sigma_mm > 0:
        raise ValueError(f"sigma_mm must be positive, got {sigma_mm}")
    out = v.data.astype(np.float64)
    for axis in range(3):
        k = gaussian_kernel(sigma_mm / v.spacing[axis])
        out = ndimage.correlate1d(out, k, axis=axis, mode="nearest")
    return Volume(out, v.spacing)


# --------------------------------------------------------------------------
# resampling


def _source_coords(n_src: int, n_dst: int) -> np.ndarray:
    # voxel-centre alignment; identity when n_src == n_dst
    c = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    return np.clip(c, 0.0, n_src - 1)


def _linear_axis(a: np.ndarray, axis: int, n_dst: int) -> np.ndarray:
    n_src = a.shape[axis]
    if n_src == n_dst:
        return a
    c = _source_coords(n_src, n_dst)
    i0 = np.floor(c).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    w = c - i0
    shape = [1, 1, 1]
    shape[axis] = n_dst
    w = w.reshape(shape)
    return np.take(a, i0, axis=axis) * (1.0 - w) + np.take(a, i1, axis=axis) * w


def _nearest_axis(a: np.ndarray, axis: int, n_dst: int) -> np.ndarray:
    n_src = a.shape[axis]
    if n_src == n_dst:
        return a
    idx = np.floor((np.arange(n_dst) + 0.5) * (n_src / n_dst)).astype(np.intp)
    return np.take(a, np.clip(idx, 0, n_src - 1), axis=axis)


def resample(v, target_dims):
    """Resample to ``target_dims`` keeping the physical extent.

    Volumes use trilinear interpolation, masks nearest neighbour.
    """
    target_dims = tuple(int(d) for d in target_dims)
    if len(target_dims) != 3 or any(d <= 0 for d in target_dims):
        raise InvalidGeometryError(f"target_dims must be 3 positive integers, got {target_dims}")
    spacing = tuple(s * n / m for s, n, m in zip(v.spacing, v.dims, target_dims))
    if isinstance(v, BinaryMask):
        out = v.data
        for axis, n in enumerate(target_dims):
            out = _nearest_axis(out, axis, n)
        return BinaryMask(out, spacing)
    out = v.data.astype(np.float64)
    for axis, n in enumerate(target_dims):
        out = _linear_axis(out, axis, n)
    return Volume(out, spacing)


# --------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a lesion-free ellipsoidal brain phantom.

    ``semi_axes`` are fractions of the half-extent of the grid along each
    axis. ``amplitude`` scales both the smooth low-frequency field and the
    fine texture (``texture_fraction`` of it), so ``amplitude=0`` gives a
    constant-intensity brain.
    """

    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    base_intensity: float = 100.0
    amplitude: float = 20.0
    semi_axes: tuple[float, float, float] = (0.8, 0.8, 0.8)
    seed: int = 0
    texture_fraction: float = 0.5
    n_waves: int = field(default=4, repr=False)

    def __post_init__(self):
        _check_geometry(self.dims, self.spacing)
        if not all(0 < f <= 1 for f in self.semi_axes):
            raise ValueError(f"semi-axis fractions must lie in (0, 1], got {self.semi_axes}")
        if self.amplitude < 0 or self.texture_fraction < 0:
            raise ValueError("amplitude and texture_fraction must be non-negative")


def ellipsoid_mask(dims, spacing, semi_axes) -> BinaryMask:
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    r2 = np.zeros(dims)
    for g, n, f in zip(grids, dims, semi_axes):
        c = (n - 1) / 2.0
        r2 += ((g - c) / (f * n / 2.0)) ** 2
    return BinaryMask(r2 <= 1.0, spacing)


def make_phantom(spec: PhantomSpec) -> tuple[Volume, BinaryMask]:
    rng = make_rng(spec.seed)
    brain = ellipsoid_mask(spec.dims, spec.spacing, spec.semi_axes)
    coords = np.meshgrid(
        *[(np.arange(n) + 0.5) / n for n in spec.dims], indexing="ij"
    )
    smooth = np.zeros(spec.dims)
    for _ in range(spec.n_waves):
        freq = rng.uniform(-1.5, 1.5, size=3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        smooth += np.cos(2.0 * np.pi * sum(f * c for f, c in zip(freq, coords)) + phase)
    smooth /= spec.n_waves
    noise = ndimage.gaussian_filter(rng.standard_normal(spec.dims), 0.6, mode="nearest")
    noise /= noise.std()
    values = spec.base_intensity + spec.amplitude * (smooth + spec.texture_fraction * noise)
    data = np.where(brain.data, values, 0.0)
    return Volume(data, spec.spacing), brain
