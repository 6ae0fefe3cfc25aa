"""Run configuration: one flat ``key = value`` file, one key per field.

Unknown keys are rejected so that a misspelled hyperparameter cannot fall
back to its default silently.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .catalog import ModelGroup
from .detector import DetectorHyperparams
from .segmenter import SegmenterHyperparams
from .training import AugmentRanges


def _f(default, doc):
    return field(default=default, metadata={"doc": doc})


@dataclass
class RunConfig:
    data_root: str = _f("data", "directory holding one sub-directory per subject")
    output_dir: str = _f("run", "where models, predictions and reports are written")
    model_group: str = _f("A", "model group to train or apply: A (cohorts 1, 3) or B (cohort 2)")
    phantom_group: str = _f("", "group that phantom ids (cohort digit 9) route to; empty disables them")
    seed: int = _f(0, "seed for splitting, sampling, augmentation and weight init")
    workers: int = _f(1, "subjects processed in parallel by predict and evaluate")
    split_fraction: float = _f(0.8, "fraction of subjects used for training")
    inplane_size: int = _f(512, "common in-plane grid after resampling")

    detector_backend: str = _f("tiny", "stage-1 backend: tiny or maskrcnn")
    detector_weights: str = _f("", "maskrcnn only: DEFAULT or a state-dict path; empty means random init")
    detector_width: int = _f(16, "tiny backend base channel count")
    detector_epochs: int = _f(15, "stage-1 training epochs")
    detector_batch_size: int = _f(6, "stage-1 batch size")
    detector_learning_rate: float = _f(5e-6, "stage-1 learning rate")
    patch_side: int = _f(64, "stage-1 patch side in voxels")
    upsample_factor: int = _f(4, "stage-1 patch upsampling factor")
    negative_per_positive: float = _f(1.0, "background patches per lesion patch")
    patch_jitter: int = _f(16, "maximum lesion-centre jitter of positive patches")
    inference_stride: int = _f(32, "stage-1 tiling stride")
    instance_threshold: float = _f(0.5, "tiny backend probability that starts an instance")

    aug_rotation_deg: float = _f(15.0, "augmentation rotation range (+/- degrees)")
    aug_scale_min: float = _f(0.9, "augmentation minimum scale")
    aug_scale_max: float = _f(1.1, "augmentation maximum scale")
    aug_translation: float = _f(8.0, "augmentation translation range (+/- voxels)")
    aug_flip_probability: float = _f(0.5, "horizontal flip probability")

    segmenter_epochs: int = _f(50, "stage-2 training epochs")
    segmenter_batch_size: int = _f(4, "stage-2 batch size")
    segmenter_learning_rate: float = _f(5e-5, "stage-2 learning rate")
    segmenter_widths: tuple = _f((16, 32, 64, 128), "U-Net channel widths per level")
    empty_slice_keep: float = _f(0.25, "probability of keeping a lesion-free training slice")
    pos_weight_cap: float = _f(1000.0, "upper bound of the positive-class loss weight")

    binarize_threshold: float = _f(0.001, "final probability cut (strictly greater is positive)")
    dilation_radius: int = _f(3, "brain mask dilation radius in voxels")
    filter_mode: str = _f("voxel", "intensity filter granularity: voxel or object")
    connectivity: int = _f(26, "3D connectivity for lesions: 6 or 26")
    threshold_margin: float = _f(0.0, "added to the max-of-minima intensity threshold")
    overlays_per_subject: int = _f(2, "overlay images rendered per subject by evaluate")

    def __post_init__(self):
        self.segmenter_widths = _parse_tuple(self.segmenter_widths)
        ModelGroup.parse(self.model_group)
        if self.phantom_group:
            ModelGroup.parse(self.phantom_group)
        if self.filter_mode not in ("voxel", "object"):
            raise ValueError(f"filter_mode must be voxel or object, got {self.filter_mode!r}")
        if self.connectivity not in (6, 26):
            raise ValueError(f"connectivity must be 6 or 26, got {self.connectivity}")
        if self.detector_backend not in ("tiny", "maskrcnn"):
            raise ValueError(f"unknown detector backend {self.detector_backend!r}")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def group(self) -> ModelGroup:
        return ModelGroup.parse(self.model_group)

    @property
    def extra_routes(self) -> dict:
        return {"9": ModelGroup.parse(self.phantom_group)} if self.phantom_group else {}

    @property
    def augment(self) -> AugmentRanges:
        return AugmentRanges(self.aug_rotation_deg, self.aug_scale_min, self.aug_scale_max,
                             self.aug_translation, self.aug_flip_probability)

    def detector_hyperparams(self) -> DetectorHyperparams:
        return DetectorHyperparams(
            epochs=self.detector_epochs, batch_size=self.detector_batch_size,
            learning_rate=self.detector_learning_rate, patch_side=self.patch_side,
            upsample_factor=self.upsample_factor, negative_per_positive=self.negative_per_positive,
            jitter=self.patch_jitter, stride=self.inference_stride, augment=self.augment,
        )

    def segmenter_hyperparams(self) -> SegmenterHyperparams:
        return SegmenterHyperparams(
            epochs=self.segmenter_epochs, batch_size=self.segmenter_batch_size,
            learning_rate=self.segmenter_learning_rate, pos_weight_cap=self.pos_weight_cap,
            empty_slice_keep=self.empty_slice_keep, augment=self.augment,
        )

    def model_dir(self) -> Path:
        return Path(self.output_dir) / "models" / self.group.value

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def overrides(self) -> dict:
        default = RunConfig()
        return {k: v for k, v in self.to_dict().items() if getattr(default, k) != v}

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"# {f.metadata['doc']}")
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=None)
        parser.optionxform = str
        parser.read_string("[run]\n" + text)
        known = {f.name: f for f in fields(cls)}
        values = {}
        for key, raw in parser["run"].items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _convert(known[key].default, raw.strip())
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig(**d)


def _parse_tuple(value) -> tuple:
    if isinstance(value, str):
        return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
    return tuple(int(v) for v in value)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(default, raw: str):
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw.lower() == "true"
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return _parse_tuple(raw)
    return raw
