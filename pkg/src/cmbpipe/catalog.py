"""Subject ingestion, validation and routing to model groups.

On-disk layout, one directory per subject::

    <root>/<id>/<id>_T1.nii.gz
    <root>/<id>/<id>_T2.nii.gz
    <root>/<id>/<id>_T2S.nii.gz
    <root>/<id>/<id>_CMB.nii.gz      # annotation, optional at inference

Arrays are held in (slice, row, col) order; NIfTI files store them as
(x, y, z) = (col, row, slice).
"""

from __future__ import annotations

import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import nibabel as nib
import numpy as np

from .errors import MissingFile, NonFiniteVoxel, ShapeMismatch, UnknownCohort

MODALITIES = ("T1", "T2", "T2S")
ANNOTATION = "CMB"
SUFFIX = ".nii.gz"


@dataclass
class Volume:
    """3D scalar grid indexed (slice, row, col) with spacing (dz, dy, dx) in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeMismatch(f"volume must be 3D with non-empty axes, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or not all(s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)


class ModelGroup(enum.Enum):
    A = "A"  # cohorts 1 and 3, 3.0 mm slices
    B = "B"  # cohort 2, 0.8 mm slices

    @classmethod
    def parse(cls, value: "str | ModelGroup") -> "ModelGroup":
        if isinstance(value, ModelGroup):
            return value
        return cls(str(value).upper().removeprefix("GROUP"))


COHORT_GROUPS = {"1": ModelGroup.A, "3": ModelGroup.A, "2": ModelGroup.B}


def route_cohort(subject_id: str, extra: Mapping[str, ModelGroup] | None = None) -> ModelGroup:
    """Map a subject id to its model group by the leading cohort digit.

    ``extra`` adds routes for non-clinical cohorts (phantoms use digit '9').
    """
    if not subject_id:
        raise UnknownCohort("empty subject id")
    routes = dict(COHORT_GROUPS)
    if extra:
        routes.update({k: ModelGroup.parse(v) for k, v in extra.items()})
    try:
        return routes[subject_id[0]]
    except KeyError:
        raise UnknownCohort(f"subject {subject_id!r}: cohort digit {subject_id[0]!r} is not routable") from None


@dataclass
class SubjectRecord:
    id: str
    t1: Volume
    t2: Volume
    t2s: Volume
    annotation: Volume | None = None
    slice_thickness_mm: float | None = None
    # auxiliary arrays that travel with a subject (phantom ground truth etc.)
    extras: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.id:
            raise UnknownCohort("empty subject id")
        shape = self.t2s.shape
        for name in ("t1", "t2"):
            if getattr(self, name).shape != shape:
                raise ShapeMismatch(
                    f"subject {self.id}: {name} shape {getattr(self, name).shape} != T2* shape {shape}"
                )
        if self.annotation is not None:
            if self.annotation.shape != shape:
                raise ShapeMismatch(
                    f"subject {self.id}: annotation shape {self.annotation.shape} != T2* shape {shape}"
                )
            values = np.unique(self.annotation.data)
            if not np.isin(values, (0, 1)).all():
                raise ValueError(f"subject {self.id}: annotation is not binary (values {values[:5]})")
            self.annotation = Volume(self.annotation.data.astype(np.uint8), self.annotation.spacing)
        if self.slice_thickness_mm is None:
            self.slice_thickness_mm = self.t2s.spacing[0]
        elif not math.isclose(self.slice_thickness_mm, self.t2s.spacing[0], rel_tol=1e-6):
            raise ValueError(
                f"subject {self.id}: slice thickness {self.slice_thickness_mm} != T2* dz {self.t2s.spacing[0]}"
            )

    @property
    def cohort(self) -> str:
        return self.id[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.t2s.shape

    def volumes(self) -> dict[str, Volume]:
        return {"T1": self.t1, "T2": self.t2, "T2S": self.t2s}

    def replace(self, **changes) -> "SubjectRecord":
        if "t2s" in changes and "slice_thickness_mm" not in changes:
            changes["slice_thickness_mm"] = changes["t2s"].spacing[0]
        return replace(self, **changes)


def subject_path(root: str | Path, subject_id: str, kind: str) -> Path:
    return Path(root) / subject_id / f"{subject_id}_{kind}{SUFFIX}"


def read_volume(path: str | Path) -> Volume:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"missing volume file {path}")
    img = nib.load(str(path))
    data = np.asanyarray(img.dataobj)
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise ShapeMismatch(f"{path}: expected a 3D volume, got shape {data.shape}")
    zooms = img.header.get_zooms()[:3]
    return Volume(np.ascontiguousarray(data.transpose(2, 1, 0)), (zooms[2], zooms[1], zooms[0]))


def write_volume(volume: Volume, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dz, dy, dx = volume.spacing
    affine = np.diag([dx, dy, dz, 1.0])
    img = nib.Nifti1Image(np.ascontiguousarray(volume.data.transpose(2, 1, 0)), affine)
    img.header.set_zooms((dx, dy, dz))
    nib.save(img, str(path))
    return path


def load_subject(root: str | Path, subject_id: str, require_annotation: bool = False) -> SubjectRecord:
    """Read and validate one subject from ``root``.

    Raises MissingFile when a modality (or a required annotation) is absent,
    ShapeMismatch when the volumes are not on one grid and NonFiniteVoxel when
    any image holds NaN or inf.
    """
    vols = {}
    for modality in MODALITIES:
        vols[modality] = read_volume(subject_path(root, subject_id, modality))
    ann_path = subject_path(root, subject_id, ANNOTATION)
    annotation = None
    if ann_path.exists():
        annotation = read_volume(ann_path)
    elif require_annotation:
        raise MissingFile(f"subject {subject_id}: annotation {ann_path} is required")

    for name, vol in list(vols.items()) + [("annotation", annotation)]:
        if vol is not None and not np.isfinite(vol.data).all():
            raise NonFiniteVoxel(f"subject {subject_id}: {name} contains non-finite voxels")
    return SubjectRecord(subject_id, vols["T1"], vols["T2"], vols["T2S"], annotation)


def save_subject(subject: SubjectRecord, root: str | Path) -> Path:
    for modality, vol in subject.volumes().items():
        write_volume(vol, subject_path(root, subject.id, modality))
    if subject.annotation is not None:
        write_volume(subject.annotation, subject_path(root, subject.id, ANNOTATION))
    return Path(root) / subject.id


def list_subject_ids(root: str | Path) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise MissingFile(f"data root {root} does not exist")
    return sorted(p.name for p in root.iterdir() if (p / f"{p.name}_T2S{SUFFIX}").exists())


def catalog_index(root: str | Path, extra_routes: Mapping[str, ModelGroup] | None = None) -> str:
    """One line per subject: id, group, shape and spacing (tab separated)."""
    lines = []
    for sid in list_subject_ids(root):
        img = nib.load(str(subject_path(root, sid, "T2S")))
        x, y, z = img.shape[:3]
        zx, zy, zz = img.header.get_zooms()[:3]
        try:
            group = route_cohort(sid, extra_routes).value
        except UnknownCohort:
            group = "?"
        lines.append(f"{sid}\t{group}\t{z}x{y}x{x}\t{zz:g}x{zy:g}x{zx:g}")
    return "\n".join(lines) + ("\n" if lines else "")


def _subject_key(s) -> str:
    return s.id if hasattr(s, "id") else str(s)


def _allocate(counts: dict[str, int], n_train: int) -> dict[str, int]:
    # largest-remainder allocation of n_train over cohorts, then push every
    # cohort with >= 2 members into both partitions where the totals allow
    total = sum(counts.values())
    quota = {c: n_train * n / total for c, n in counts.items()}
    alloc = {c: math.floor(q) for c, q in quota.items()}
    rest = n_train - sum(alloc.values())
    for c in sorted(counts, key=lambda c: (-(quota[c] - alloc[c]), c))[:rest]:
        alloc[c] += 1

    def movable_from(pred):
        return sorted((c for c in counts if pred(c)), key=lambda c: (-alloc[c], c))

    for c in sorted(counts):
        if counts[c] < 2:
            continue
        if alloc[c] == 0:
            donors = movable_from(lambda d: d != c and alloc[d] > (1 if counts[d] >= 2 else 0))
            if donors:
                alloc[donors[0]] -= 1
                alloc[c] += 1
        elif alloc[c] == counts[c]:
            takers = movable_from(lambda d: d != c and alloc[d] < counts[d] - (1 if counts[d] >= 2 else 0))
            if takers:
                alloc[takers[-1]] += 1
                alloc[c] -= 1
    return alloc


def split_train_val(subjects: Sequence, fraction: float, seed: int) -> tuple[list, list]:
    """Deterministic split stratified by cohort digit.

    ``|train| == round(fraction * N)`` (half rounds up). Works on
    SubjectRecords or on plain id strings.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    if not subjects:
        raise ValueError("cannot split an empty subject list")
    by_cohort = defaultdict(list)
    for s in sorted(subjects, key=_subject_key):
        by_cohort[_subject_key(s)[0]].append(s)
    n_train = math.floor(fraction * len(subjects) + 0.5)
    alloc = _allocate({c: len(v) for c, v in by_cohort.items()}, n_train)

    rng = np.random.default_rng(seed)
    train, val = [], []
    for cohort in sorted(by_cohort):
        members = by_cohort[cohort]
        order = rng.permutation(len(members))
        train.extend(members[i] for i in order[: alloc[cohort]])
        val.extend(members[i] for i in order[alloc[cohort]:])
    return sorted(train, key=_subject_key), sorted(val, key=_subject_key)
