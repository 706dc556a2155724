"""Synthetic abnormality generation for the prompt and validation tasks.

Prompt task (hyper-intensity, optionally with a darker core)::

    X = lam * blur(X_i) * A + X_i * (1 - A),      Y = [A >= a]
    X~ = lam~ * blur(X_i) * A~ + X * (1 - A~),    Y~ = Y

Validation task: no blurring and a binary weight, i.e. ``X = lam * X_i`` on
the placed region ``M`` and ``X_i`` elsewhere, ``Y = M``.

RNG draw order for one prompt sample (one Generator per sample): branch
uniform, lesion volume, polyhedron spec, placement, ``lam``, then for the
dark branch: core fraction, core polyhedron spec, core placement, ``lam~``.
Validation samples skip the branch draw and the dark-branch draws.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .geometry import (
    STROKE_SIZES,
    TUMOR_SIZES,
    SizeDistribution,
    build_polyhedron,
    place_in_brain,
    random_polyhedron_spec,
    sample_size,
)
from .seeding import derive_seed, make_rng
from .volume import BinaryMask, Volume, gaussian_blur, require_same_grid

# lesion volumes scaled to a 64^3 / 1 mm phantom brain (~7e4 mm^3)
DESK_TUMOR_SIZES = SizeDistribution.uniform(1000.0, 4000.0)

TASKS = ("prompt", "validation", "pasted")


@dataclass(frozen=True)
class SynthesisConfig:
    threshold_a: float = 0.1
    lambda_range: tuple[float, float] = (1.5, 5.0)
    lambda_dark_range: tuple[float, float] = (0.8, 1.2)
    dark_component_probability: float = 0.1
    mask_smoothing_sigma_mm: float = 1.0
    blur_sigma_mm: float = 2.0
    size_dist: SizeDistribution = TUMOR_SIZES
    dark_size_fraction_range: tuple[float, float] = (0.1, 0.5)
    enable_dark: bool = True
    # None: reuse lambda_range for the validation task
    validation_lambda_range: tuple[float, float] | None = None
    min_lesion_voxels: int = 100

    def __post_init__(self):
        if not 0 < self.threshold_a < 1:
            raise ValueError(f"threshold_a must lie in (0, 1), got {self.threshold_a}")
        for name in ("lambda_range", "lambda_dark_range", "dark_size_fraction_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lower <= upper, got {(lo, hi)}")
        if not self.lambda_range[0] > 1:
            raise ValueError("lambda_range lower bound must exceed 1")
        if self.validation_lambda_range is not None:
            lo, hi = self.validation_lambda_range
            if not 0 < lo <= hi:
                raise ValueError(f"validation_lambda_range invalid: {(lo, hi)}")
        if not 0 <= self.dark_component_probability <= 1:
            raise ValueError("dark_component_probability must lie in [0, 1]")
        if not (self.mask_smoothing_sigma_mm > 0 and self.blur_sigma_mm > 0):
            raise ValueError("smoothing sigmas must be positive")
        if self.dark_size_fraction_range[1] >= 1:
            raise ValueError("dark core must be smaller than the lesion (fraction < 1)")
        if self.min_lesion_voxels < 1:
            raise ValueError("min_lesion_voxels must be >= 1")

    @classmethod
    def tumor(cls, **kw) -> "SynthesisConfig":
        return cls(**kw)

    @classmethod
    def stroke(cls, **kw) -> "SynthesisConfig":
        kw.setdefault("size_dist", STROKE_SIZES)
        kw.setdefault("enable_dark", False)
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "SynthesisConfig":
        kw.setdefault("size_dist", DESK_TUMOR_SIZES)
        return cls(**kw)

    @property
    def effective_validation_lambda_range(self) -> tuple[float, float]:
        return self.validation_lambda_range or self.lambda_range

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["size_dist"] = [list(c) for c in self.size_dist.components]
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SynthesisConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown synthesis keys: {sorted(unknown)}")
        kw = dict(d)
        if "size_dist" in kw:
            kw["size_dist"] = SizeDistribution(tuple(tuple(c) for c in kw["size_dist"]))
        for k in ("lambda_range", "lambda_dark_range", "dark_size_fraction_range", "validation_lambda_range"):
            if kw.get(k) is not None:
                kw[k] = tuple(float(x) for x in kw[k])
        return cls(**kw)


@dataclass(frozen=True)
class Provenance:
    source_id: str
    seed: int | None
    task: str
    branch: str
    lam: float | None = None
    lam_dark: float | None = None
    target_volume_mm3: float | None = None
    polyhedron_volume_mm3: float | None = None
    lesion_voxels: int = 0
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class LabeledSample:
    """A synthetic image with its abnormality mask.

    ``weight`` is the mixing image A (absent for pasted samples); ``brain``
    is the tissue mask of the source when known.
    """

    image: Volume
    mask: BinaryMask
    provenance: Provenance
    weight: Volume | None = None
    brain: BinaryMask | None = None

    def __post_init__(self):
        require_same_grid(self.image, self.mask, "image and mask")


# --------------------------------------------------------------------------
# building blocks


def make_weight_image(m: BinaryMask, brain: BinaryMask, sigma_mm: float) -> Volume:
    """Smoothed lesion region, clamped to the brain mask."""
    require_same_grid(m, brain, "lesion and brain masks")
    if (m.data & ~brain.data).any():
        raise ValueError("lesion region must lie inside the brain mask")
    a = gaussian_blur(m.as_volume(), sigma_mm).data.astype(np.float64)
    a = np.clip(a, 0.0, 1.0) * brain.data
    return Volume(a, m.spacing)


def threshold_weight(a_img: Volume, threshold_a: float) -> BinaryMask:
    return BinaryMask(a_img.data >= threshold_a, a_img.spacing)


def _mix(t: np.ndarray, a: np.ndarray, base: np.ndarray) -> np.ndarray:
    # exact identity where a == 0: base * 1 + t * 0
    return t * a + base * (1.0 - a)


def apply_prompt_transform(
    x_i: Volume, a_img: Volume, lam: float, blur_sigma_mm: float, threshold_a: float
) -> tuple[Volume, BinaryMask]:
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    require_same_grid(x_i, a_img, "image and weight")
    a = a_img.data.astype(np.float64)
    if a.min() < 0 or a.max() > 1:
        raise ValueError("weight image must lie in [0, 1]")
    t = lam * gaussian_blur(x_i, blur_sigma_mm).data.astype(np.float64)
    x = _mix(t, a, x_i.data.astype(np.float64))
    return Volume(x, x_i.spacing), threshold_weight(a_img, threshold_a)


def mix_dark(x: Volume, x_i: Volume, a_dark: Volume, lam_dark: float, blur_sigma_mm: float) -> Volume:
    require_same_grid(x, a_dark, "image and dark weight")
    t = lam_dark * gaussian_blur(x_i, blur_sigma_mm).data.astype(np.float64)
    return Volume(_mix(t, a_dark.data.astype(np.float64), x.data.astype(np.float64)), x.spacing)


def sample_dark_weight(
    m: BinaryMask, brain: BinaryMask, cfg: SynthesisConfig, rng: np.random.Generator
) -> tuple[Volume, BinaryMask]:
    """Weight image of a smaller polyhedron centred inside ``m``."""
    frac = rng.uniform(*cfg.dark_size_fraction_range)
    target = max(frac * m.count * m.voxel_volume, m.voxel_volume)
    poly = build_polyhedron(random_polyhedron_spec(target, rng), m.spacing).mask
    core = place_in_brain(poly, m, rng, min_voxels=1)
    return make_weight_image(core, brain, cfg.mask_smoothing_sigma_mm), core


def apply_dark_component(
    x: Volume,
    x_i: Volume,
    y: BinaryMask,
    m: BinaryMask,
    cfg: SynthesisConfig,
    rng: np.random.Generator,
    brain: BinaryMask | None = None,
) -> tuple[Volume, BinaryMask]:
    a_dark, _ = sample_dark_weight(m, brain if brain is not None else m, cfg, rng)
    lam_dark = rng.uniform(*cfg.lambda_dark_range)
    return mix_dark(x, x_i, a_dark, lam_dark, cfg.blur_sigma_mm), y


def draw_dark_branch(cfg: SynthesisConfig, rng: np.random.Generator) -> bool:
    u = rng.random()
    return bool(cfg.enable_dark and u < cfg.dark_component_probability)


def _place_lesion(brain: BinaryMask, cfg: SynthesisConfig, rng: np.random.Generator):
    target = sample_size(cfg.size_dist, rng)
    poly = build_polyhedron(random_polyhedron_spec(target, rng), brain.spacing)
    m = place_in_brain(poly.mask, brain, rng, min_voxels=cfg.min_lesion_voxels)
    return m, target, poly.volume_mm3


# --------------------------------------------------------------------------
# samples


def synth_prompt_sample(
    x_i: Volume,
    brain: BinaryMask,
    cfg: SynthesisConfig,
    rng: np.random.Generator,
    source_id: str = "",
    seed: int | None = None,
) -> LabeledSample:
    require_same_grid(x_i, brain, "image and brain mask")
    dark = draw_dark_branch(cfg, rng)
    m, target, poly_volume = _place_lesion(brain, cfg, rng)
    a_img = make_weight_image(m, brain, cfg.mask_smoothing_sigma_mm)
    lam = float(rng.uniform(*cfg.lambda_range))
    x, y = apply_prompt_transform(x_i, a_img, lam, cfg.blur_sigma_mm, cfg.threshold_a)
    lam_dark = None
    if dark:
        a_dark, _ = sample_dark_weight(m, brain, cfg, rng)
        lam_dark = float(rng.uniform(*cfg.lambda_dark_range))
        x = mix_dark(x, x_i, a_dark, lam_dark, cfg.blur_sigma_mm)
    prov = Provenance(
        source_id=source_id,
        seed=seed,
        task="prompt",
        branch="hyper+dark" if dark else "hyper",
        lam=lam,
        lam_dark=lam_dark,
        target_volume_mm3=target,
        polyhedron_volume_mm3=poly_volume,
        lesion_voxels=y.count,
    )
    return LabeledSample(x, y, prov, weight=a_img, brain=brain)


def synth_validation_sample(
    x_i: Volume,
    brain: BinaryMask,
    cfg: SynthesisConfig,
    rng: np.random.Generator,
    source_id: str = "",
    seed: int | None = None,
) -> LabeledSample:
    require_same_grid(x_i, brain, "image and brain mask")
    m, target, poly_volume = _place_lesion(brain, cfg, rng)
    lam = float(rng.uniform(*cfg.effective_validation_lambda_range))
    a = m.data.astype(np.float64)
    xi = x_i.data.astype(np.float64)
    x = Volume(_mix(lam * xi, a, xi), x_i.spacing)
    prov = Provenance(
        source_id=source_id,
        seed=seed,
        task="validation",
        branch="validation",
        lam=lam,
        target_volume_mm3=target,
        polyhedron_volume_mm3=poly_volume,
        lesion_voxels=m.count,
    )
    return LabeledSample(x, m, prov, weight=m.as_volume(), brain=brain)


def sample_seed(master_seed: int, task: str, index: int) -> int:
    return derive_seed(master_seed, f"{task}-sample", index)


def generate_sample(
    task: str,
    x_i: Volume,
    brain: BinaryMask,
    cfg: SynthesisConfig,
    master_seed: int,
    index: int,
    source_id: str = "",
) -> LabeledSample:
    """Sample ``index`` of a task, using its own derived RNG stream."""
    seed = sample_seed(master_seed, task, index)
    rng = make_rng(seed)
    if task == "prompt":
        return synth_prompt_sample(x_i, brain, cfg, rng, source_id, seed)
    if task == "validation":
        return synth_validation_sample(x_i, brain, cfg, rng, source_id, seed)
    raise ValueError(f"unknown task {task!r}")


def split_sources(ids, seed: int, validation_fraction: float = 0.5) -> tuple[list[str], list[str]]:
    """Disjoint prompt/validation source pools by a seeded permutation."""
    ids = sorted(ids)
    if len(ids) < 2:
        raise ValueError("need at least two source volumes to split")
    perm = make_rng(derive_seed(seed, "source-split")).permutation(len(ids))
    n_val = min(max(1, int(round(validation_fraction * len(ids)))), len(ids) - 1)
    val = sorted(ids[i] for i in perm[:n_val])
    prompt = sorted(ids[i] for i in perm[n_val:])
    return prompt, val
