"""False-positive reduction filters and the morphology kernels they rely on."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .catalog import SubjectRecord, Volume
from .errors import EmptyMask, NoLesionsInDataset, ShapeMismatch

DEFAULT_BINARIZE = 0.001
DEFAULT_DILATION = 3
DEFAULT_CONNECTIVITY = 26
PIPELINE_ORDER = ("intensity_filter", "brain_mask", "binarize")


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def _array(v) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v)


@dataclass
class LesionSet:
    labels: np.ndarray
    count: int
    connectivity: int = DEFAULT_CONNECTIVITY
    _voxels: list | None = field(default=None, repr=False)

    def voxels(self, k: int) -> np.ndarray:
        """(n, 3) voxel coordinates of lesion ``k`` (1-based)."""
        if self._voxels is None:
            flat = self.labels.ravel()
            order = np.argsort(flat, kind="stable")
            bounds = np.searchsorted(flat[order], np.arange(self.count + 2))
            coords = np.stack(np.unravel_index(order, self.labels.shape), axis=1)
            self._voxels = [coords[bounds[i]:bounds[i + 1]] for i in range(self.count + 1)]
        return self._voxels[k]

    def centroids(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros((0, 3))
        return np.array(ndimage.center_of_mass(np.ones_like(self.labels), self.labels, range(1, self.count + 1)))

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.count + 1)[1:]


def connected_components(mask, connectivity: int = DEFAULT_CONNECTIVITY) -> LesionSet:
    """Label a binary mask; labels ordered by each component's first voxel in raster order."""
    arr = _array(mask).astype(bool)
    labels, count = ndimage.label(arr, structure=_structure(connectivity))
    if count:
        flat = labels.ravel()
        present, first = np.unique(flat, return_index=True)
        order = np.argsort(first[present > 0], kind="stable")
        remap = np.zeros(count + 1, dtype=labels.dtype)
        remap[present[present > 0][order]] = np.arange(1, count + 1)
        labels = remap[labels]
    return LesionSet(labels.astype(np.int32), int(count), connectivity)


def ball(radius: int, ndim: int = 3) -> np.ndarray:
    """Structuring element holding every offset within Euclidean ``radius``."""
    r = int(radius)
    grids = np.ogrid[tuple(slice(-r, r + 1) for _ in range(ndim))]
    return sum(g.astype(np.int64) ** 2 for g in grids) <= r * r


def dilate(mask, radius: int):
    if radius < 0:
        raise ValueError("dilation radius must be >= 0")
    arr = _array(mask).astype(bool)
    out = arr.copy() if radius == 0 else ndimage.binary_dilation(arr, structure=ball(radius, arr.ndim))
    out = out.astype(np.uint8)
    return mask.with_data(out) if isinstance(mask, Volume) else out


def binarize(prob, threshold: float = DEFAULT_BINARIZE):
    out = (_array(prob) > threshold).astype(np.uint8)
    return prob.with_data(out) if isinstance(prob, Volume) else out


@dataclass
class IntensityThreshold:
    value: float
    provenance: list[tuple[str, int, float]]
    margin: float = 0.0

    def __post_init__(self):
        if not self.provenance:
            raise NoLesionsInDataset("threshold needs at least one lesion")

    def to_text(self) -> str:
        lines = [f"value {self.value!r}", f"margin {self.margin!r}"]
        lines += [f"{sid}\t{lid}\t{m!r}" for sid, lid, m in self.provenance]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "IntensityThreshold":
        lines = text.strip().splitlines()
        value = float(lines[0].split()[1])
        margin = float(lines[1].split()[1])
        prov = []
        for line in lines[2:]:
            sid, lid, m = line.split("\t")
            prov.append((sid, int(lid), float(m)))
        return cls(value, prov, margin)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path) -> "IntensityThreshold":
        return cls.from_text(Path(path).read_text())


def derive_intensity_threshold(
    subjects: Iterable[SubjectRecord],
    connectivity: int = DEFAULT_CONNECTIVITY,
    margin: float = 0.0,
) -> IntensityThreshold:
    """Maximum, over every annotated lesion, of that lesion's darkest normalised T2* voxel.

    ``margin`` is added on top of the max-of-minima value (default none).
    """
    provenance = []
    for s in subjects:
        if s.annotation is None:
            raise ValueError(f"subject {s.id} has no annotation")
        lesions = connected_components(s.annotation, connectivity)
        if lesions.count == 0:
            continue
        minima = ndimage.minimum(s.t2s.data, lesions.labels, np.arange(1, lesions.count + 1))
        provenance += [(s.id, k + 1, float(m)) for k, m in enumerate(np.atleast_1d(minima))]
    if not provenance:
        raise NoLesionsInDataset("no annotated lesions in the training subjects")
    value = max(m for _, _, m in provenance) + margin
    return IntensityThreshold(float(value), provenance, margin)


def apply_intensity_filter(
    scores, t2s_norm, thr: IntensityThreshold, mode: str = "voxel", connectivity: int = DEFAULT_CONNECTIVITY
):
    """Zero scores at voxels brighter than the threshold.

    In ``object`` mode a connected component of positive scores is kept whole
    when any of its voxels passes the intensity test.
    """
    s = _array(scores)
    img = _array(t2s_norm)
    if s.shape != img.shape:
        raise ShapeMismatch(f"score shape {s.shape} != T2* shape {img.shape}")
    passes = img <= thr.value
    if mode == "voxel":
        out = np.where(passes, s, 0).astype(s.dtype)
    elif mode == "object":
        lesions = connected_components(s > 0, connectivity)
        keep = np.zeros(lesions.count + 1, dtype=bool)
        keep[np.unique(lesions.labels[passes & (lesions.labels > 0)])] = True
        keep[0] = False
        out = np.where(keep[lesions.labels], s, 0).astype(s.dtype)
    else:
        raise ValueError(f"unknown filter mode {mode!r}")
    return scores.with_data(out) if isinstance(scores, Volume) else out


@dataclass
class BrainMask:
    mask: Volume
    dilation_radius_voxels: int
    core: np.ndarray = field(repr=False, default=None)


def compute_brain_mask(t2s: Volume, dilation_radius: int = DEFAULT_DILATION) -> BrainMask:
    """Largest bright component (Otsu split), holes filled per slice, then dilated by a ball."""
    data = t2s.data
    if np.ptp(data) == 0:
        raise EmptyMask("constant T2* image has no foreground")
    fg = data > threshold_otsu(data)
    lesions = connected_components(fg, 26)
    if lesions.count == 0:
        raise EmptyMask("no foreground above the Otsu threshold")
    core = lesions.labels == (int(np.argmax(lesions.sizes())) + 1)
    core = np.stack([ndimage.binary_fill_holes(sl) for sl in core])
    final = dilate(core, dilation_radius)
    return BrainMask(Volume(final, t2s.spacing), int(dilation_radius), core.astype(np.uint8))


def postprocess_pipeline(
    prob,
    t2s_norm,
    thr: IntensityThreshold,
    brain: BrainMask,
    mode: str = "voxel",
    binarize_threshold: float = DEFAULT_BINARIZE,
    connectivity: int = DEFAULT_CONNECTIVITY,
    log: list | None = None,
):
    """Intensity filter, then brain-mask multiply, then binarisation."""
    p = _array(prob)
    if p.shape != brain.mask.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} != brain mask shape {brain.mask.shape}")
    filtered = apply_intensity_filter(p, t2s_norm, thr, mode, connectivity)
    if log is not None:
        log.append("intensity_filter")
    masked = filtered * brain.mask.data
    if log is not None:
        log.append("brain_mask")
    out = binarize(masked, binarize_threshold)
    if log is not None:
        log.append("binarize")
    return prob.with_data(out) if isinstance(prob, Volume) else out
