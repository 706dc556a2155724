"""Random convex polyhedra: sampling, rasterisation and placement in a brain."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation

from .seeding import draw_seed, make_rng
from .volume import BinaryMask


class TargetTooSmallError(ValueError):
    """Requested polyhedron volume is below one voxel."""


class PolyhedronTooLargeError(ValueError):
    """Polyhedron does not fit in the requested grid."""


class PlacementError(RuntimeError):
    """No placement produced a large enough intersection with the brain."""


@dataclass(frozen=True)
class SizeDistribution:
    """Mixture of uniform distributions over lesion volume in mm^3."""

    components: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        comps = tuple(tuple(float(x) for x in c) for c in self.components)
        if not comps:
            raise ValueError("size distribution needs at least one component")
        for w, lo, hi in comps:
            if not w > 0:
                raise ValueError(f"component weight must be positive, got {w}")
            if not 0 < lo < hi:
                raise ValueError(f"component bounds must satisfy 0 < lower < upper, got {lo}, {hi}")
        if not math.isclose(sum(c[0] for c in comps), 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError("component weights must sum to 1")
        object.__setattr__(self, "components", comps)

    @classmethod
    def uniform(cls, lower: float, upper: float) -> "SizeDistribution":
        return cls(((1.0, lower, upper),))

    def contains(self, x: float) -> bool:
        return any(lo <= x <= hi for _, lo, hi in self.components)


TUMOR_SIZES = SizeDistribution.uniform(20000.0, 80000.0)
STROKE_SIZES = SizeDistribution(((0.5, 200.0, 300.0), (0.5, 5000.0, 30000.0)))


def sample_size(dist: SizeDistribution, rng: np.random.Generator) -> float:
    weights = [c[0] for c in dist.components]
    k = rng.choice(len(weights), p=weights) if len(weights) > 1 else 0
    _, lo, hi = dist.components[k]
    return float(rng.uniform(lo, hi))


@dataclass(frozen=True)
class PolyhedronSpec:
    vertex_count: int
    radius_perturbation: float
    rotation: tuple[float, float, float]
    target_volume_mm3: float
    seed: int

    def __post_init__(self):
        if self.vertex_count < 4:
            raise ValueError(f"vertex_count must be >= 4, got {self.vertex_count}")
        if not 0 <= self.radius_perturbation < 1:
            raise ValueError(f"radius_perturbation must lie in [0, 1), got {self.radius_perturbation}")
        if not self.target_volume_mm3 > 0:
            raise ValueError(f"target_volume_mm3 must be positive, got {self.target_volume_mm3}")


def random_polyhedron_spec(target_volume_mm3: float, rng: np.random.Generator) -> PolyhedronSpec:
    return PolyhedronSpec(
        vertex_count=int(rng.integers(10, 31)),
        radius_perturbation=float(rng.uniform(0.0, 0.6)),
        rotation=tuple(float(a) for a in rng.uniform(0.0, 2.0 * np.pi, size=3)),
        target_volume_mm3=float(target_volume_mm3),
        seed=draw_seed(rng),
    )


def unit_vertices(spec: PolyhedronSpec) -> np.ndarray:
    """Perturbed points on the unit sphere, rotated and centred on their mean."""
    rng = make_rng(spec.seed)
    d = rng.standard_normal((spec.vertex_count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = 1.0 + spec.radius_perturbation * rng.uniform(-1.0, 1.0, size=(spec.vertex_count, 1))
    pts = Rotation.from_euler("xyz", spec.rotation).apply(d * r)
    return pts - pts.mean(axis=0)


@dataclass(frozen=True, eq=False)
class Polyhedron:
    """A rasterised polyhedron.

    ``vertices`` are in mm relative to the grid point ``(n - 1) / 2`` of
    ``mask``, which is where the polyhedron's vertex mean sits.
    """

    mask: BinaryMask
    vertices: np.ndarray
    scale: float
    target_volume_mm3: float

    @property
    def volume_mm3(self) -> float:
        return self.mask.count * self.mask.voxel_volume


def _gauge(hull: ConvexHull, dims, spacing) -> np.ndarray:
    """Smallest scale at which each voxel centre lies inside the scaled hull.

    With facets ``n.x + d <= 0`` (``d < 0`` since the origin is interior),
    ``p`` is inside ``s * hull`` iff ``max_f n_f.p / -d_f <= s``.
    """
    axes = [(np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(dims, spacing)]
    g = np.full(dims, -np.inf)
    for normal, offset in zip(hull.equations[:, :3], hull.equations[:, 3]):
        proj = (
            normal[0] * axes[0][:, None, None]
            + normal[1] * axes[1][None, :, None]
            + normal[2] * axes[2][None, None, :]
        ) / -offset
        np.maximum(g, proj, out=g)
    return g


def _grid_for(radius_mm: float, spacing) -> tuple[int, int, int]:
    return tuple(2 * int(math.ceil(radius_mm / s)) + 3 for s in spacing)


def build_polyhedron(
    spec: PolyhedronSpec,
    spacing=(1.0, 1.0, 1.0),
    dims=None,
    max_iter: int = 30,
) -> Polyhedron:
    """Sample, scale and rasterise a polyhedron of ``spec.target_volume_mm3``.

    The scale is found by bisection on the rasterised voxel count, aiming at
    the exact target count; symmetric voxel shells can make the closest
    reachable count differ by a few voxels. Voxels are
    foreground when their centre lies inside the hull. Without ``dims`` the
    grid is sized to fit and cropped to the foreground bounding box.
    """
    spacing = tuple(float(s) for s in spacing)
    voxel_volume = float(np.prod(spacing))
    if spec.target_volume_mm3 < voxel_volume:
        raise TargetTooSmallError(
            f"target volume {spec.target_volume_mm3} mm^3 is below one voxel ({voxel_volume} mm^3)"
        )
    target = spec.target_volume_mm3 / voxel_volume
    pts = unit_vertices(spec)
    hull = ConvexHull(pts)
    extent = float(np.linalg.norm(pts, axis=1).max())
    s_hi = 1.25 * (spec.target_volume_mm3 / hull.volume) ** (1.0 / 3.0) + max(spacing)

    while True:
        grid = tuple(dims) if dims is not None else _grid_for(extent * s_hi, spacing)
        g = _gauge(hull, grid, spacing)
        flat = np.sort(g, axis=None)
        if np.searchsorted(flat, s_hi, side="right") >= target or dims is not None:
            break
        s_hi *= 1.5

    def count(s):
        return int(np.searchsorted(flat, s, side="right"))

    lo, hi = 0.0, s_hi
    best_s, best_err = hi, abs(count(hi) - target)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        c = count(mid)
        err = abs(c - target)
        if err < best_err:
            best_s, best_err = mid, err
        if err < 1.0:
            break
        if c < target:
            lo = mid
        else:
            hi = mid

    scale = best_s
    if dims is not None:
        half = np.array([(n - 1) / 2.0 * s for n, s in zip(dims, spacing)])
        if (np.abs(pts * scale) > half).any():
            raise PolyhedronTooLargeError(f"polyhedron of scale {scale:.3g} exceeds grid {dims}")
    inside = g <= scale
    vertices = pts * scale
    if dims is None:
        idx = np.argwhere(inside)
        lo_i, hi_i = idx.min(axis=0), idx.max(axis=0)
        # keep the vertex mean on a grid point by cropping symmetrically
        centre = np.array([(n - 1) // 2 for n in grid])
        half = np.maximum(centre - lo_i, hi_i - centre)
        sl = tuple(slice(c - h, c + h + 1) for c, h in zip(centre, half))
        inside = inside[sl]
    return Polyhedron(BinaryMask(inside, spacing), vertices, scale, spec.target_volume_mm3)


def rasterize_polyhedron(spec: PolyhedronSpec, spacing=(1.0, 1.0, 1.0), dims=None) -> BinaryMask:
    return build_polyhedron(spec, spacing, dims).mask


def place_in_brain(
    poly: BinaryMask,
    brain: BinaryMask,
    rng: np.random.Generator,
    min_voxels: int = 100,
    max_tries: int = 20,
) -> BinaryMask:
    """Translate ``poly`` so its centroid lands on a random brain voxel.

    Returns the intersection with ``brain``. Parts of the polyhedron falling
    outside the brain grid are clipped.
    """
    if min_voxels < 1:
        raise ValueError("min_voxels must be >= 1")
    if not np.allclose(poly.spacing, brain.spacing, rtol=1e-6, atol=0):
        raise ValueError(f"spacing mismatch: {poly.spacing} vs {brain.spacing}")
    candidates = np.flatnonzero(brain.data)
    if candidates.size == 0:
        raise PlacementError("brain mask is empty")
    fg = np.argwhere(poly.data)
    if fg.size == 0:
        raise PlacementError("polyhedron mask is empty")
    centroid = np.rint(fg.mean(axis=0)).astype(int)
    bdims = np.array(brain.dims)
    pdims = np.array(poly.dims)
    for _ in range(max_tries):
        target = np.array(np.unravel_index(candidates[rng.integers(candidates.size)], brain.dims))
        offset = target - centroid
        dst_lo = np.maximum(offset, 0)
        dst_hi = np.minimum(offset + pdims, bdims)
        out = np.zeros(brain.dims, dtype=bool)
        if (dst_hi > dst_lo).all():
            src = tuple(slice(a - o, b - o) for a, b, o in zip(dst_lo, dst_hi, offset))
            dst = tuple(slice(a, b) for a, b in zip(dst_lo, dst_hi))
            out[dst] = poly.data[src]
        out &= brain.data
        if np.count_nonzero(out) >= min_voxels:
            return BinaryMask(out, brain.spacing)
    raise PlacementError(f"no placement reached {min_voxels} voxels in {max_tries} tries")
