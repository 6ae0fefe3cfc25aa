"""Intensity normalisation, in-plane resampling and model input assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .catalog import SubjectRecord, Volume
from .errors import DegenerateVolume, IndexOutOfRange, ShapeMismatch

TARGET_SIZE = 512

DETECTOR_INPUT = "detector_input"
SEGMENTER_INPUT = "segmenter_input"
_CHANNELS = {DETECTOR_INPUT: 3, SEGMENTER_INPUT: 4}


def zscore_normalize(v: Volume) -> Volume:
    """Zero mean, unit standard deviation over every voxel of the volume."""
    data = np.asarray(v.data, dtype=np.float64)
    if data.size < 2:
        raise DegenerateVolume("z-score needs at least two voxels")
    mean = data.mean()
    std = data.std()
    if not np.isfinite(std) or std == 0:
        raise DegenerateVolume("volume has zero intensity variance")
    return Volume(((data - mean) / std).astype(np.float32), v.spacing)


@dataclass(frozen=True)
class ResizeTransform:
    """In-plane resampling from ``source`` (H, W) to ``target``.

    Pixel centres are aligned half-pixel style: output index ``o`` samples
    input coordinate ``(o + 0.5) * H / target_H - 0.5``.
    """

    source: tuple[int, int]
    target: tuple[int, int] = (TARGET_SIZE, TARGET_SIZE)
    kind: str = "linear"

    def __post_init__(self):
        if self.kind not in ("linear", "nearest"):
            raise ValueError(f"unknown interpolation {self.kind!r}")
        object.__setattr__(self, "source", tuple(int(s) for s in self.source))
        object.__setattr__(self, "target", tuple(int(s) for s in self.target))

    @property
    def scale(self) -> tuple[float, float]:
        return (self.target[0] / self.source[0], self.target[1] / self.source[1])

    @property
    def is_identity(self) -> bool:
        return self.source == self.target

    def inverse(self) -> "ResizeTransform":
        return ResizeTransform(self.target, self.source, self.kind)

    def with_kind(self, kind: str) -> "ResizeTransform":
        return ResizeTransform(self.source, self.target, kind)

    def forward_coord(self, row: float, col: float) -> tuple[float, float]:
        sy, sx = self.scale
        return ((row + 0.5) * sy - 0.5, (col + 0.5) * sx - 0.5)

    def inverse_coord(self, row: float, col: float) -> tuple[float, float]:
        return self.inverse().forward_coord(row, col)

    def to_manifest(self) -> dict:
        return {"source": list(self.source), "target": list(self.target), "kind": self.kind}

    @classmethod
    def from_manifest(cls, d: dict) -> "ResizeTransform":
        return cls(tuple(d["source"]), tuple(d["target"]), d.get("kind", "linear"))


def bilinear_resize(array: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of the last two axes, edge values replicated."""
    arr = np.asarray(array)
    dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    lead = arr.shape[:-2]
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=dtype)).reshape(1, -1, *arr.shape[-2:])
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out.reshape(*lead, *size).numpy()


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    # source pixel whose footprint contains the output pixel centre
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def nearest_resize(array: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    arr = np.asarray(array)
    rows = nearest_indices(arr.shape[-2], size[0])
    cols = nearest_indices(arr.shape[-1], size[1])
    return arr[..., rows[:, None], cols[None, :]]


def _resample(v: Volume, t: ResizeTransform, kind: str) -> Volume:
    if v.shape[1:] != t.source:
        raise ShapeMismatch(f"in-plane shape {v.shape[1:]} does not match transform source {t.source}")
    dz, dy, dx = v.spacing
    sy, sx = t.scale
    spacing = (dz, dy / sy, dx / sx)
    if t.is_identity:
        return Volume(v.data.copy(), spacing)
    if kind == "nearest":
        data = nearest_resize(v.data, t.target)
    else:
        data = bilinear_resize(v.data, t.target)
    return Volume(data, spacing)


def resize_inplane(v: Volume, t: ResizeTransform) -> Volume:
    """Resample every slice of ``v`` onto ``t.target``; slice count unchanged."""
    return _resample(v, t, t.kind)


def invert_resize(prediction: Volume, t: ResizeTransform, kind: str = "nearest") -> Volume:
    """Bring a prediction on the target grid back to the source grid."""
    return _resample(prediction, t.inverse(), kind)


@dataclass
class ChannelStack:
    data: np.ndarray  # (channels, H, W)
    tag: str

    def __post_init__(self):
        if self.tag not in _CHANNELS:
            raise ValueError(f"unknown channel tag {self.tag!r}")
        if self.data.ndim != 3 or self.data.shape[0] != _CHANNELS[self.tag]:
            raise ShapeMismatch(f"{self.tag} needs {_CHANNELS[self.tag]} channels, got shape {self.data.shape}")


def _check_index(n_slices: int, slice_idx: int):
    if not 0 <= slice_idx < n_slices:
        raise IndexOutOfRange(f"slice {slice_idx} outside [0, {n_slices})")


def stack_detector_channels(t1: Volume, t2: Volume, t2s: Volume, slice_idx: int) -> ChannelStack:
    if not t1.shape == t2.shape == t2s.shape:
        raise ShapeMismatch(f"modalities not co-registered: {t1.shape}, {t2.shape}, {t2s.shape}")
    _check_index(t2s.shape[0], slice_idx)
    data = np.stack([t1.data[slice_idx], t2.data[slice_idx], t2s.data[slice_idx]]).astype(np.float32)
    return ChannelStack(data, DETECTOR_INPUT)


def assemble_segmenter_input(t2s: Volume, stage1: Volume, slice_idx: int) -> ChannelStack:
    """(T2*[i-1], T2*[i], T2*[i+1], stage1[i]); missing neighbours are blank."""
    if t2s.shape != stage1.shape:
        raise ShapeMismatch(f"T2* shape {t2s.shape} != stage-1 shape {stage1.shape}")
    n = t2s.shape[0]
    _check_index(n, slice_idx)
    blank = np.zeros(t2s.shape[1:], dtype=np.float32)
    prev = t2s.data[slice_idx - 1] if slice_idx > 0 else blank
    nxt = t2s.data[slice_idx + 1] if slice_idx < n - 1 else blank
    data = np.stack([prev, t2s.data[slice_idx], nxt, stage1.data[slice_idx]]).astype(np.float32)
    return ChannelStack(data, SEGMENTER_INPUT)


def preprocess_subject(subject: SubjectRecord, size: int = TARGET_SIZE) -> tuple[SubjectRecord, ResizeTransform]:
    """Normalise each modality, then resample images (linear) and annotation (nearest)."""
    t = ResizeTransform(subject.shape[1:], (size, size), "linear")
    vols = {k: resize_inplane(zscore_normalize(v), t) for k, v in subject.volumes().items()}
    annotation = None
    if subject.annotation is not None:
        annotation = resize_inplane(subject.annotation, t.with_kind("nearest"))
    extras = {}
    for k, v in subject.extras.items():
        if isinstance(v, np.ndarray) and v.shape == subject.shape:
            extras[k] = nearest_resize(v, (size, size))
    out = SubjectRecord(subject.id, vols["T1"], vols["T2"], vols["T2S"], annotation, extras=extras)
    return out, t
