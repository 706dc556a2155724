"""Pseudo-label pasting onto lesion-free volumes.

``X_p = S_j * P_j + X_i * (1 - P_j)`` and ``Y_p = P_j``. When grids differ the
lesion image and its pseudo-label are resampled onto the lesion-free grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_seed, make_rng
from .synthesis import LabeledSample, Provenance
from .volume import BinaryMask, Volume, require_same_grid, resample

log = logging.getLogger(__name__)

MIN_LABEL_VOXELS = 10


class EmptyPseudoLabel(Exception):
    """Pseudo-label is empty (or too small) after resizing; sample skipped."""


class PairingSpecError(ValueError):
    pass


@dataclass(frozen=True)
class PlusSetSpec:
    unlabeled_count: int
    tumor_free_count: int
    uses_per_pseudo_label: int = 2
    uses_per_tumor_free: int = 1
    seed: int = 0
    renormalize: bool = False
    min_label_voxels: int = MIN_LABEL_VOXELS

    def __post_init__(self):
        counts = (
            self.unlabeled_count,
            self.tumor_free_count,
            self.uses_per_pseudo_label,
            self.uses_per_tumor_free,
        )
        if min(counts) < 1:
            raise PairingSpecError(f"all counts must be >= 1, got {counts}")
        lhs = self.uses_per_pseudo_label * self.unlabeled_count
        rhs = self.uses_per_tumor_free * self.tumor_free_count
        if lhs != rhs:
            raise PairingSpecError(
                f"pairing is not a perfect cover: {self.uses_per_pseudo_label} x {self.unlabeled_count}"
                f" pseudo-label uses != {self.uses_per_tumor_free} x {self.tumor_free_count}"
                f" tumor-free uses ({lhs} != {rhs})"
            )

    @property
    def n_pairs(self) -> int:
        return self.uses_per_pseudo_label * self.unlabeled_count


def _brain_mean(a: np.ndarray) -> float:
    nz = a[a != 0]
    return float(nz.mean()) if nz.size else 0.0


def paste_sample(
    s_j: Volume,
    p_j: BinaryMask,
    x_i: Volume,
    renormalize: bool = False,
    min_voxels: int = 1,
    provenance: Provenance | None = None,
) -> LabeledSample:
    require_same_grid(s_j, p_j, "lesion image and pseudo-label")
    if s_j.dims != x_i.dims:
        s_j = resample(s_j, x_i.dims)
        p_j = resample(p_j, x_i.dims)
    p_j = BinaryMask(p_j.data, x_i.spacing)
    if p_j.count < min_voxels:
        raise EmptyPseudoLabel(f"pseudo-label has {p_j.count} voxels (< {min_voxels})")
    src = s_j.data.astype(np.float64)
    if renormalize:
        ms = _brain_mean(src)
        if ms > 0:
            src = src * (_brain_mean(x_i.data) / ms)
    p = p_j.data
    xp = np.where(p, src, x_i.data.astype(np.float64))
    prov = provenance or Provenance(source_id="", seed=None, task="pasted", branch="pasted")
    prov = Provenance(**{**prov.to_dict(), "lesion_voxels": p_j.count})
    return LabeledSample(Volume(xp, x_i.spacing), p_j, prov)


def make_pairing(spec: PlusSetSpec) -> list[tuple[int, int]]:
    """Random (pseudo-label index, tumor-free index) pairs covering both exactly."""
    rng = make_rng(derive_seed(spec.seed, "plus-pairing"))
    labels = np.repeat(np.arange(spec.unlabeled_count), spec.uses_per_pseudo_label)
    free = np.repeat(np.arange(spec.tumor_free_count), spec.uses_per_tumor_free)
    labels = labels[rng.permutation(labels.size)]
    free = free[rng.permutation(free.size)]
    return [(int(j), int(i)) for j, i in zip(labels, free)]


@dataclass
class PlusSet:
    pasted: list[LabeledSample]
    originals: list[LabeledSample]
    pairing: list[tuple[int, int]]
    skipped: list[int] = field(default_factory=list)

    @property
    def training_set(self) -> list[LabeledSample]:
        """Pasted samples followed by the unlabeled images with their pseudo-labels."""
        return self.pasted + self.originals


def build_plus_set(
    unlabeled,
    tumor_free,
    spec: PlusSetSpec,
    unlabeled_ids=None,
    tumor_free_ids=None,
) -> PlusSet:
    """Paste every pseudo-label onto tumor-free volumes per the pairing spec.

    ``unlabeled`` is a sequence of (image, pseudo-label) pairs. Pairs whose
    pseudo-label has fewer than ``spec.min_label_voxels`` voxels are skipped
    and their pairing indices listed in ``skipped``.
    """
    unlabeled = list(unlabeled)
    tumor_free = list(tumor_free)
    if len(unlabeled) != spec.unlabeled_count or len(tumor_free) != spec.tumor_free_count:
        raise PairingSpecError(
            f"got {len(unlabeled)} unlabeled / {len(tumor_free)} tumor-free volumes,"
            f" spec expects {spec.unlabeled_count} / {spec.tumor_free_count}"
        )
    u_ids = list(unlabeled_ids or [f"unlabeled-{j:04d}" for j in range(len(unlabeled))])
    t_ids = list(tumor_free_ids or [f"tumor-free-{i:04d}" for i in range(len(tumor_free))])
    pairing = make_pairing(spec)
    pasted, skipped = [], []
    for k, (j, i) in enumerate(pairing):
        s_j, p_j = unlabeled[j]
        prov = Provenance(
            source_id=t_ids[i],
            seed=spec.seed,
            task="pasted",
            branch="pasted",
            extra={"pair_index": k, "pseudo_label": u_ids[j], "tumor_free": t_ids[i]},
        )
        try:
            pasted.append(
                paste_sample(s_j, p_j, tumor_free[i], spec.renormalize, spec.min_label_voxels, prov)
            )
        except EmptyPseudoLabel as exc:
            log.warning("skipping pair %d (%s onto %s): %s", k, u_ids[j], t_ids[i], exc)
            skipped.append(k)
    originals = [
        LabeledSample(
            s_j,
            p_j,
            Provenance(source_id=u_ids[j], seed=None, task="pasted", branch="pseudo-label",
                       lesion_voxels=p_j.count),
        )
        for j, (s_j, p_j) in enumerate(unlabeled)
    ]
    return PlusSet(pasted, originals, pairing, skipped)
