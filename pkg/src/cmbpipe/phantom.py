"""Synthetic multi-modal subjects with dark spherical lesions and boundary confounders.

Intensities are built on a unit scale (background 0.6, brain ~1.0), with
lesion depth and noise given as multiples of the clean volume's standard
deviation so that they read approximately as z-units after normalisation.
Stored values are scaled by 1000 to look like scanner units.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .catalog import SubjectRecord, Volume
from .errors import PlacementFailure

BACKGROUND = 0.6
BRAIN = 1.0
CONFOUNDER = 0.05
RAW_SCALE = 1000.0


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (16, 128, 128)
    lesion_count: tuple[int, int] = (3, 5)
    lesion_radius: tuple[int, int] = (1, 3)
    depth: float = 3.0
    confounders: int = 3
    noise: float = 0.1
    seed: int = 0
    spacing: tuple[float, float, float] = (3.0, 1.0, 1.0)
    subject_id: str = "9001"

    def __post_init__(self):
        if min(self.shape) < 8:
            raise ValueError(f"phantom shape components must be >= 8, got {self.shape}")
        if self.lesion_radius[0] < 1 or self.lesion_radius[1] < self.lesion_radius[0]:
            raise ValueError(f"bad lesion radius range {self.lesion_radius}")
        if self.lesion_count[0] < 0 or self.lesion_count[1] < self.lesion_count[0]:
            raise ValueError(f"bad lesion count range {self.lesion_count}")
        if self.depth <= 0:
            raise ValueError("lesion depth must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    @property
    def semi_axes(self) -> np.ndarray:
        s, h, w = self.shape
        return np.array([0.46 * s, 0.40 * h, 0.34 * w])

    @property
    def center(self) -> np.ndarray:
        return (np.array(self.shape) - 1) / 2.0


def _grids(shape):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")


def ellipsoid_radius(spec: PhantomSpec) -> np.ndarray:
    """Normalised ellipsoid radius per voxel; the brain is where it is <= 1."""
    z, y, x = _grids(spec.shape)
    c, a = spec.center, spec.semi_axes
    return np.sqrt(((z - c[0]) / a[0]) ** 2 + ((y - c[1]) / a[1]) ** 2 + ((x - c[2]) / a[2]) ** 2)


def _confounder_mask(spec: PhantomSpec, rho: np.ndarray, rng) -> np.ndarray:
    z, y, x = _grids(spec.shape)
    c = spec.center
    inplane = min(spec.semi_axes[1:])
    inner, outer = 1 + 3.0 / inplane, 1 + 5.0 / inplane
    angle = np.arctan2(y - c[1], x - c[2])
    mask = np.zeros(spec.shape, dtype=bool)
    zspan = max(spec.semi_axes[0] / 3, 1.0)
    for _ in range(spec.confounders):
        theta = rng.uniform(-np.pi, np.pi)
        z0 = rng.uniform(c[0] - zspan, c[0] + zspan)
        dtheta = np.angle(np.exp(1j * (angle - theta)))
        mask |= (rho >= inner) & (rho <= outer) & (np.abs(dtheta) <= 0.3) & (np.abs(z - z0) <= 1.0)
    return mask


def _place_lesions(spec: PhantomSpec, rho: np.ndarray, rng) -> list[tuple[np.ndarray, int]]:
    n = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    lo = np.ceil(spec.center - spec.semi_axes).astype(int)
    hi = np.floor(spec.center + spec.semi_axes).astype(int)
    placed = []
    for _ in range(n):
        r = int(rng.integers(spec.lesion_radius[0], spec.lesion_radius[1] + 1))
        reach = r + 2
        bounds = [(max(l, reach), min(h, s - 1 - reach)) for l, h, s in zip(lo, hi, spec.shape)]
        if any(a > b for a, b in bounds):
            raise PlacementFailure(f"no room for a radius-{r} lesion in shape {spec.shape}")
        for _attempt in range(100):
            center = np.array([rng.integers(a, b + 1) for a, b in bounds])
            box = tuple(slice(ci - reach, ci + reach + 1) for ci in center)
            local = rho[box]
            zz, yy, xx = np.ogrid[-reach:reach + 1, -reach:reach + 1, -reach:reach + 1]
            near = zz ** 2 + yy ** 2 + xx ** 2 <= reach ** 2
            if local.shape != near.shape or (local[near] >= 1.0).any():
                continue
            if all(np.linalg.norm(center - c2) > r + r2 + 2 for c2, r2 in placed):
                placed.append((center, r))
                break
        else:
            raise PlacementFailure(f"could not place lesion {len(placed) + 1} of {n} after 100 attempts")
    return placed


def generate_phantom(spec: PhantomSpec) -> SubjectRecord:
    """Build one annotated subject; the confounder mask is kept in ``extras``."""
    rng = np.random.default_rng(spec.seed)
    rho = ellipsoid_radius(spec)
    brain = rho <= 1.0
    z, y, x = _grids(spec.shape)
    h, w = spec.shape[1:]
    shading = 0.05 * np.sin(2 * np.pi * x / w) * np.cos(2 * np.pi * y / h)
    clean = np.where(brain, BRAIN + shading, BACKGROUND)
    confounders = _confounder_mask(spec, rho, rng) & ~brain
    clean[confounders] = CONFOUNDER
    sigma = clean.std()

    annotation = np.zeros(spec.shape, dtype=np.uint8)
    lesions = _place_lesions(spec, rho, rng)
    for center, r in lesions:
        d = np.sqrt((z - center[0]) ** 2 + (y - center[1]) ** 2 + (x - center[2]) ** 2)
        inside = d <= r
        # darkest at the centre, half depth at the rim (partial-volume look)
        clean[inside] -= spec.depth * sigma * (1 - 0.5 * (d[inside] / r) ** 2)
        annotation[inside] = 1

    noise = spec.noise * sigma

    def modality(img):
        return Volume(((img + rng.normal(0, noise, spec.shape)) * RAW_SCALE).astype(np.float32), spec.spacing)

    t2s = modality(clean)
    t1 = modality(0.2 + 0.6 * clean)
    t2 = modality(1.3 - 0.7 * clean)
    return SubjectRecord(
        spec.subject_id, t1, t2, t2s, Volume(annotation, spec.spacing),
        extras={"confounders": confounders.astype(np.uint8), "brain": brain.astype(np.uint8)},
    )


def phantom_id(index: int) -> str:
    return f"9{index + 1:03d}"


def generate_cohort(n: int, template: PhantomSpec = PhantomSpec(), base_seed: int = 0) -> list[SubjectRecord]:
    if n < 1:
        raise ValueError(f"cohort size must be >= 1, got {n}")
    seeds = np.random.SeedSequence(base_seed).generate_state(n)
    return [generate_phantom(replace(template, seed=int(s), subject_id=phantom_id(i))) for i, s in enumerate(seeds)]
