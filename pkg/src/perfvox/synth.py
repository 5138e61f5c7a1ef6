"""Deterministic synthetic CBF phantoms and cohorts.

All randomness comes from :class:`perfvox.rng.SplitMix64`; participant ``i``
of a cohort draws from ``child_seed(seed, i)`` (first its age, then its
noise field) so participants can be generated independently. Noise fields
are filled in NIfTI order (x fastest).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError
from .rng import SplitMix64, child_seed
from .slic3d import SlicParams, SupervoxelLabeling, segment_volume
from .volume_io import BrainMask, CohortManifest, ParticipantMeta, Volume3D


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    spacing: tuple = (1.0, 1.0, 1.0)
    base_mean: float = 50.0
    radial_decay: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ConfigError(f"phantom dims must be >= 4 per axis, got {self.dims}")
        if not self.base_mean > 0:
            raise ConfigError("base_mean must be > 0")
        if self.radial_decay < 0 or self.noise_sigma < 0:
            raise ConfigError("radial_decay and noise_sigma must be >= 0")


@dataclass(frozen=True)
class CohortSpec:
    """Cohort layout and injected effects.

    ``n_per_group`` is the count in every (sex, age bin) cell unless
    ``counts`` gives per-sex totals, which are then spread over the bins as
    evenly as possible (earlier bins take the remainder).
    """

    age_bins: tuple = ((8, 12), (13, 20), (21, 30), (31, 50), (51, 70), (71, 92))
    n_per_group: int = 10
    counts: Optional[Mapping[str, int]] = None
    effect_clusters: tuple = ()
    effect_size: float = 0.0
    age_slope: float = 0.0
    seed: int = 0

    def validate(self):
        if not self.age_bins:
            raise ConfigError("at least one age bin is required")
        prev_hi = None
        for lo, hi in self.age_bins:
            if lo > hi:
                raise ConfigError(f"age bin [{lo}, {hi}] is reversed")
            if prev_hi is not None and lo <= prev_hi:
                raise ConfigError("age bins must be disjoint and ascending")
            prev_hi = hi
        if self.effect_size < 0 or self.age_slope < 0:
            raise ConfigError("effect_size and age_slope must be >= 0")
        if self.counts is None and self.n_per_group < 1:
            raise ConfigError("n_per_group must be >= 1")
        if self.counts is not None and set(self.counts) - {"F", "M"}:
            raise ConfigError("counts keys must be 'F' and/or 'M'")

    def cell_counts(self) -> list:
        """``[(bin_index, sex, n), ...]`` in generation order."""
        nb = len(self.age_bins)
        per = {}
        for sex in ("F", "M"):
            if self.counts is None:
                per[sex] = [self.n_per_group] * nb
            else:
                total = int(self.counts.get(sex, 0))
                base, rem = divmod(total, nb)
                per[sex] = [base + (1 if b < rem else 0) for b in range(nb)]
        return [(b, sex, per[sex][b]) for b in range(nb) for sex in ("F", "M")]


def phantom_mean_field(spec: PhantomSpec) -> np.ndarray:
    """Noise-free intensity ``max(0, base - decay * r_mm)`` around voxel dims//2."""
    spec.validate()
    idx = np.indices(spec.dims, dtype=np.float64)
    r2 = np.zeros(spec.dims)
    for a in range(3):
        r2 += ((idx[a] - spec.dims[a] // 2) * spec.spacing[a]) ** 2
    return np.maximum(0.0, spec.base_mean - spec.radial_decay * np.sqrt(r2))


def _noise(gen: SplitMix64, dims, sigma: float) -> np.ndarray:
    n = int(np.prod(dims))
    if sigma == 0:
        return np.zeros(dims)
    return sigma * gen.normal(n).reshape(dims, order="F")


def generate_phantom(spec: PhantomSpec) -> Volume3D:
    data = phantom_mean_field(spec) + _noise(SplitMix64(spec.seed), spec.dims, spec.noise_sigma)
    return Volume3D(data, spacing=spec.spacing)


@dataclass
class SyntheticCohort:
    manifest: CohortManifest
    volumes: list
    reference: SupervoxelLabeling
    footprint: np.ndarray
    reference_mask: BrainMask = field(repr=False, default=None)

    def __iter__(self):
        # unpacks as (manifest, volumes)
        return iter((self.manifest, self.volumes))


def reference_labeling(phantom: PhantomSpec, slic: SlicParams = SlicParams(),
                       mask_fraction: float = 0.05, normalization: Optional[str] = "zscore"):
    clean = Volume3D(phantom_mean_field(phantom), spacing=phantom.spacing)
    return segment_volume(clean, slic, mask_fraction=mask_fraction, normalization=normalization)


def generate_cohort(spec: CohortSpec, phantom: PhantomSpec, slic: SlicParams = SlicParams(),
                    mask_fraction: float = 0.05, normalization: Optional[str] = "zscore",
                    id_prefix: str = "sub-") -> SyntheticCohort:
    """Build a cohort of noisy phantoms with age decline and a female uplift.

    Participant volume = clean phantom * (1 - age_slope * (age - min_age)),
    times (1 + effect_size) for females inside the footprint of
    ``effect_clusters`` in the reference labeling of the clean phantom, plus
    Gaussian noise of ``phantom.noise_sigma``.
    """
    spec.validate()
    phantom.validate()
    ref, ref_mask = reference_labeling(phantom, slic, mask_fraction, normalization)
    bad = [c for c in spec.effect_clusters if not 0 <= int(c) < ref.k]
    if bad:
        raise ConfigError(f"effect cluster indices {bad} out of range for K={ref.k}")
    footprint = np.isin(ref.labels, np.asarray(spec.effect_clusters, dtype=np.int64))

    clean = phantom_mean_field(phantom)
    min_age = min(lo for lo, _ in spec.age_bins)
    cells = spec.cell_counts()
    total = sum(n for _, _, n in cells)
    width = max(3, len(str(total)))

    rows, vols = [], []
    i = 0
    for b, sex, n in cells:
        lo, hi = spec.age_bins[b]
        for _ in range(n):
            gen = SplitMix64(child_seed(spec.seed, i))
            age = int(gen.integers(lo, hi, 1)[0])
            factor = 1.0 - spec.age_slope * (age - min_age)
            if factor <= 0:
                raise ConfigError(f"age_slope {spec.age_slope} drives CBF non-positive at age {age}")
            data = clean * factor
            if sex == "F" and spec.effect_size:
                data = np.where(footprint, data * (1.0 + spec.effect_size), data)
            data = data + _noise(gen, phantom.dims, phantom.noise_sigma)
            pid = f"{id_prefix}{i + 1:0{width}d}"
            rows.append(ParticipantMeta(pid, age, sex, f"{pid}.nii.gz"))
            vols.append(Volume3D(data, spacing=phantom.spacing))
            i += 1
    return SyntheticCohort(CohortManifest(rows), vols, ref, footprint, ref_mask)


def spread_clusters(k: int, n: int, offset: int = 0) -> tuple:
    """``n`` cluster ids spread evenly over ``range(k)``."""
    if n > k:
        raise ConfigError("more effect clusters than clusters")
    return tuple(int((offset + (j * k) // n) % k) for j in range(n))


# the cohort used by the recovery checks: 97 F / 89 M, 15 effect clusters
CANONICAL_PHANTOM = PhantomSpec(dims=(32, 32, 32), base_mean=50.0, radial_decay=1.0,
                                noise_sigma=2.5, seed=20240101)
CANONICAL_EFFECT_CLUSTERS = spread_clusters(100, 15, offset=3)


def canonical_cohort_spec(seed: int = 7, effect_size: float = 0.10, age_slope: float = 0.002,
                          effect_clusters: Sequence[int] = CANONICAL_EFFECT_CLUSTERS,
                          counts: Union[Mapping[str, int], None] = None) -> CohortSpec:
    return CohortSpec(
        counts=dict(counts or {"F": 97, "M": 89}),
        effect_clusters=tuple(effect_clusters),
        effect_size=effect_size,
        age_slope=age_slope,
        seed=seed,
    )
