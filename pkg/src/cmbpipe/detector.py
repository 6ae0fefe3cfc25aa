"""Stage 1: candidate detection on upsampled 64x64 patches.

Training samples lesion-centred and background patches; inference tiles every
slice with overlapping windows and fuses tile scores by voxel-wise maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .backends import ModelBackend, TorchBackend, register
from .catalog import SubjectRecord, Volume
from .errors import BackendFailure, NoLesions, ShapeMismatch
from .postprocess import connected_components
from .preprocess import bilinear_resize, stack_detector_channels
from .training import AffineParams, AugmentRanges, apply_affine, draw_affine, run_epochs, tight_box

EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class SamplingPolicy:
    patch_side: int = 64
    negative_per_positive: float = 1.0
    jitter: int = 16
    allow_negative_only: bool = False


@dataclass(frozen=True)
class DetectorHyperparams:
    epochs: int = 15
    batch_size: int = 6
    learning_rate: float = 5e-6
    patch_side: int = 64
    upsample_factor: int = 4
    negative_per_positive: float = 1.0
    jitter: int = 16
    stride: int = 32
    augment: AugmentRanges = field(default_factory=AugmentRanges)

    def __post_init__(self):
        for name in ("epochs", "batch_size", "patch_side", "upsample_factor", "stride"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.negative_per_positive < 0:
            raise ValueError("learning rate must be positive and the negative ratio non-negative")
        if self.patch_side * self.upsample_factor != 256:
            raise ValueError("patch_side * upsample_factor must equal 256")

    @property
    def policy(self) -> SamplingPolicy:
        return SamplingPolicy(self.patch_side, self.negative_per_positive, self.jitter)


@dataclass
class PatchSample:
    image: np.ndarray  # (3, 256, 256)
    boxes: np.ndarray  # (k, 4) half-open (row0, col0, row1, col1)
    masks: np.ndarray  # (k, 256, 256) uint8
    source: tuple = ()  # (subject id, slice, row0, col0)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.int64).reshape(-1, 4)
        side = self.image.shape[-1]
        if self.masks.shape[0] != len(self.boxes):
            raise ShapeMismatch("one instance mask per box required")
        for (r0, c0, r1, c1), m in zip(self.boxes, self.masks):
            if not (0 <= r0 < r1 <= side and 0 <= c0 < c1 <= side):
                raise ValueError(f"box {(r0, c0, r1, c1)} outside the patch")
            if not m.any():
                raise ValueError("empty instance mask")
            if m.sum() != m[r0:r1, c0:c1].sum():
                raise ValueError("instance mask leaks outside its box")


@dataclass
class DetectionResult:
    score_volume: Volume
    instances: list[list[tuple[tuple[float, float, float, float], float]]]


def upsample_patch(patch: np.ndarray, factor: int = 4, kind: str = "linear", side: int = 64) -> np.ndarray:
    """Upsample the last two axes of a ``side`` x ``side`` patch by ``factor``."""
    p = np.asarray(patch)
    if p.shape[-2:] != (side, side):
        raise ShapeMismatch(f"expected a {side}x{side} patch, got {p.shape[-2:]}")
    if kind == "nearest":
        return np.repeat(np.repeat(p, factor, axis=-2), factor, axis=-1)
    return bilinear_resize(p.astype(np.float32), (side * factor, side * factor))


def scale_boxes(boxes: np.ndarray, factor: int = 4) -> np.ndarray:
    return np.asarray(boxes, dtype=np.int64).reshape(-1, 4) * factor


def clamp_window(center: float, side: int, size: int) -> int:
    return int(min(max(round(center - side / 2), 0), size - side))


def _make_sample(subject: SubjectRecord, z: int, r0: int, c0: int, side: int, factor: int) -> PatchSample:
    stack = stack_detector_channels(subject.t1, subject.t2, subject.t2s, z).data[:, r0:r0 + side, c0:c0 + side]
    ann = subject.annotation.data[z, r0:r0 + side, c0:c0 + side]
    labels, n = ndimage.label(ann > 0, structure=EIGHT)
    masks = np.stack([labels == k for k in range(1, n + 1)]) if n else np.zeros((0, side, side), bool)
    masks = upsample_patch(masks.astype(np.uint8), factor, "nearest", side) if n else np.zeros(
        (0, side * factor, side * factor), np.uint8)
    boxes = np.array([tight_box(m) for m in masks]).reshape(-1, 4)
    return PatchSample(upsample_patch(stack, factor, "linear", side), boxes, masks, (subject.id, z, r0, c0))


def extract_training_patches(
    subject: SubjectRecord, policy: SamplingPolicy, rng: np.random.Generator, upsample_factor: int = 4
) -> list[PatchSample]:
    """Lesion-centred positives (one per 3D lesion) plus background negatives."""
    if subject.annotation is None:
        raise ValueError(f"subject {subject.id} has no annotation")
    side = policy.patch_side
    n_slices, h, w = subject.shape
    if h < side or w < side:
        raise ShapeMismatch(f"slice {h}x{w} smaller than the {side} patch")
    ann = subject.annotation.data
    lesions = connected_components(ann, 26)
    if lesions.count == 0 and not policy.allow_negative_only:
        raise NoLesions(f"subject {subject.id} has no annotated lesions")

    samples = []
    for k in range(1, lesions.count + 1):
        vox = lesions.voxels(k)
        zs, counts = np.unique(vox[:, 0], return_counts=True)
        cz = vox[:, 0].mean()
        z = int(zs[np.lexsort((np.abs(zs - cz), -counts))[0]])
        on = vox[vox[:, 0] == z]
        cr, cc = on[:, 1].mean(), on[:, 2].mean()
        jr, jc = rng.integers(-policy.jitter, policy.jitter + 1, size=2)
        r0 = clamp_window(cr + jr + 0.5, side, h)
        c0 = clamp_window(cc + jc + 0.5, side, w)
        samples.append(_make_sample(subject, z, r0, c0, side, upsample_factor))

    n_neg = round(policy.negative_per_positive * max(lesions.count, 1))
    t2s = subject.t2s.data
    support = t2s != t2s.min()
    attempts = 0
    negatives = 0
    while negatives < n_neg and attempts < 100 * max(n_neg, 1):
        attempts += 1
        z = int(rng.integers(0, n_slices))
        r0 = int(rng.integers(0, h - side + 1))
        c0 = int(rng.integers(0, w - side + 1))
        if ann[z, r0:r0 + side, c0:c0 + side].any() or not support[z, r0 + side // 2, c0 + side // 2]:
            continue
        samples.append(_make_sample(subject, z, r0, c0, side, upsample_factor))
        negatives += 1
    return samples


def augment(sample: PatchSample, rng: np.random.Generator, ranges: AugmentRanges = AugmentRanges(),
            pixel_scale: float = 4.0, params: AffineParams | None = None) -> PatchSample:
    """Random affine + flip applied identically to image and instance masks.

    Draws are rejected when an instance vanishes; after 10 rejections the
    sample is returned unchanged.
    """
    for _ in range(10):
        p = params if params is not None else draw_affine(rng, ranges, pixel_scale)
        masks = apply_affine(sample.masks, p, order=0) if len(sample.masks) else sample.masks
        if all(m.any() for m in masks):
            boxes = np.array([tight_box(m) for m in masks]).reshape(-1, 4)
            return PatchSample(apply_affine(sample.image, p, order=1), boxes, masks, sample.source)
        if params is not None:
            break
    return sample


# -- backends ---------------------------------------------------------------


class _TinyNet(nn.Module):
    def __init__(self, width: int, pool: int):
        super().__init__()
        w = width
        self.pool = pool
        self.enc1 = nn.Sequential(nn.Conv2d(3, w, 3, padding=1), nn.ReLU(), nn.Conv2d(w, w, 3, padding=1), nn.ReLU())
        self.enc2 = nn.Sequential(nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU(),
                                  nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.ReLU())
        self.mid = nn.Sequential(nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.ReLU())
        self.dec2 = nn.Sequential(nn.Conv2d(4 * w, 2 * w, 3, padding=1), nn.ReLU())
        self.dec1 = nn.Sequential(nn.Conv2d(3 * w, w, 3, padding=1), nn.ReLU())
        self.head = nn.Conv2d(w, 1, 1)

    def forward(self, x):
        size = x.shape[-2:]
        x = F.avg_pool2d(x, self.pool)
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        m = self.mid(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(m, scale_factor=2.0), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2.0), e1], 1))
        return F.interpolate(self.head(d1), size=size, mode="bilinear", align_corners=False)


def _instances_from_prob(prob: np.ndarray, threshold: float) -> dict:
    labels, n = ndimage.label(prob > threshold, structure=EIGHT)
    if n == 0:
        return {"boxes": np.zeros((0, 4)), "scores": np.zeros(0), "masks": np.zeros((0,) + prob.shape, np.float32)}
    idx = np.arange(1, n + 1)
    masks = np.stack([np.where(labels == k, prob, 0).astype(np.float32) for k in idx])
    boxes = np.array([[s[0].start, s[1].start, s[0].stop, s[1].stop] for s in ndimage.find_objects(labels)])
    scores = np.asarray(ndimage.maximum(prob, labels, idx), dtype=np.float64)
    return {"boxes": boxes.astype(np.float64), "scores": scores, "masks": masks}


@register
class TinyDetector(TorchBackend):
    """Small randomly initialised fully convolutional stand-in for a region-based detector.

    Per-pixel probabilities are grouped into instances by thresholding and
    8-connected labelling; an instance's confidence is its peak probability.
    """

    kind = "tiny_detector"
    thread_safe = False

    def __init__(self, width: int = 16, pool: int = 4, instance_threshold: float = 0.5,
                 pos_weight: float = 2.0, seed: int = 0):
        super().__init__(dict(width=width, pool=pool, instance_threshold=instance_threshold,
                              pos_weight=pos_weight), seed)

    def build(self, width, pool, **_):
        return _TinyNet(width, pool)

    def _loss(self, inputs, targets):
        logits = self.model(torch.from_numpy(inputs))
        target = torch.from_numpy(targets)[:, None].float()
        pw = torch.tensor(self.config["pos_weight"])
        return F.binary_cross_entropy_with_logits(logits, target, pos_weight=pw)

    def train_step(self, inputs, targets) -> float:
        self.model.train()
        return self.step(self._loss(inputs, targets))

    @torch.no_grad()
    def eval_loss(self, inputs, targets) -> float:
        self.model.eval()
        return float(self._loss(inputs, targets))

    @torch.no_grad()
    def predict_prob(self, inputs: np.ndarray) -> np.ndarray:
        self.model.eval()
        return torch.sigmoid(self.model(torch.from_numpy(np.ascontiguousarray(inputs, np.float32))))[:, 0].numpy()

    def predict(self, inputs: np.ndarray) -> list[dict]:
        thr = self.config["instance_threshold"]
        return [_instances_from_prob(p, thr) for p in self.predict_prob(inputs)]

    @staticmethod
    def collate(samples: list[PatchSample]):
        images = np.stack([s.image for s in samples]).astype(np.float32)
        targets = np.stack([
            s.masks.max(axis=0) if len(s.masks) else np.zeros(s.image.shape[1:], np.uint8) for s in samples
        ]).astype(np.uint8)
        return images, targets


@register
class MaskRCNNDetector(TorchBackend):
    """torchvision Mask R-CNN (ResNet-50 FPN) fine-tuned as a two-class detector.

    ``weights`` is None (random init), ``"DEFAULT"`` (torchvision COCO weights,
    fetched by torchvision) or a path to a saved state dict of the COCO model.
    """

    kind = "maskrcnn"

    def __init__(self, weights: str | None = None, seed: int = 0):
        super().__init__(dict(weights=weights), seed)

    def build(self, weights=None, **_):
        from torchvision.models.detection import maskrcnn_resnet50_fpn
        from torchvision.models.detection.faster_rcnn import FastRCNNPredictor
        from torchvision.models.detection.mask_rcnn import MaskRCNNPredictor

        common = dict(min_size=256, max_size=256, image_mean=[0.0] * 3, image_std=[1.0] * 3)
        if weights is None:
            return maskrcnn_resnet50_fpn(weights=None, weights_backbone=None, num_classes=2, **common)
        try:
            if weights == "DEFAULT":
                model = maskrcnn_resnet50_fpn(weights="DEFAULT", **common)
            else:
                model = maskrcnn_resnet50_fpn(weights=None, weights_backbone=None, num_classes=91, **common)
                model.load_state_dict(torch.load(weights, map_location="cpu"))
        except Exception as exc:
            raise BackendFailure(f"could not load pretrained detection weights {weights!r}: {exc}") from exc
        in_features = model.roi_heads.box_predictor.cls_score.in_features
        model.roi_heads.box_predictor = FastRCNNPredictor(in_features, 2)
        in_mask = model.roi_heads.mask_predictor.conv5_mask.in_channels
        model.roi_heads.mask_predictor = MaskRCNNPredictor(in_mask, 256, 2)
        return model

    @classmethod
    def from_checkpoint(cls, ckpt):
        # the checkpoint already holds fine-tuned weights; skip re-fetching the base model
        obj = cls(weights=None)
        obj.config = ckpt["config"]
        obj.model.load_state_dict(ckpt["state"])
        obj.model.eval()
        return obj

    @staticmethod
    def _targets(samples_targets):
        out = []
        for boxes, masks in samples_targets:
            b = torch.as_tensor(boxes, dtype=torch.float32).reshape(-1, 4)[:, [1, 0, 3, 2]]
            out.append({
                "boxes": b,
                "labels": torch.ones(len(b), dtype=torch.int64),
                "masks": torch.as_tensor(masks, dtype=torch.uint8),
            })
        return out

    def _losses(self, inputs, targets):
        images = [torch.from_numpy(np.ascontiguousarray(x, np.float32)) for x in inputs]
        return sum(self.model(images, self._targets(targets)).values())

    def train_step(self, inputs, targets) -> float:
        self.model.train()
        return self.step(self._losses(inputs, targets))

    @torch.no_grad()
    def eval_loss(self, inputs, targets) -> float:
        self.model.train()
        for m in self.model.modules():
            if isinstance(m, nn.modules.batchnorm._BatchNorm):
                m.eval()
        loss = float(self._losses(inputs, targets))
        self.model.eval()
        return loss

    @torch.no_grad()
    def predict(self, inputs: np.ndarray) -> list[dict]:
        self.model.eval()
        outs = self.model([torch.from_numpy(np.ascontiguousarray(x, np.float32)) for x in inputs])
        res = []
        for o in outs:
            res.append({
                "boxes": o["boxes"].numpy()[:, [1, 0, 3, 2]].astype(np.float64),
                "scores": o["scores"].numpy().astype(np.float64),
                "masks": o["masks"][:, 0].numpy().astype(np.float32),
            })
        return res

    @staticmethod
    def collate(samples: list[PatchSample]):
        return [s.image for s in samples], [(s.boxes, s.masks) for s in samples]


def make_detector_backend(kind: str = "tiny", seed: int = 0, **kwargs) -> ModelBackend:
    if kind == "tiny":
        return TinyDetector(seed=seed, **kwargs)
    if kind == "maskrcnn":
        return MaskRCNNDetector(seed=seed, **kwargs)
    raise ValueError(f"unknown detector backend {kind!r}")


# -- training and inference ---------------------------------------------------


def finetune_detector(train: list[PatchSample], val: list[PatchSample], hp: DetectorHyperparams,
                      backend: ModelBackend, seed: int = 0) -> ModelBackend:
    """Train ``backend`` for ``hp.epochs`` passes; per-epoch losses land in ``backend.history``."""
    if not train:
        raise ValueError("finetune_detector needs a non-empty training set")
    backend.set_learning_rate(hp.learning_rate)

    def aug(sample, rng):
        return augment(sample, rng, hp.augment, pixel_scale=hp.upsample_factor)

    backend.history = run_epochs(backend, train, val, hp.epochs, hp.batch_size, seed, aug,
                                 backend.collate, name="detector")
    return backend


def tile_origins(size: int, side: int = 64, stride: int = 32) -> list[int]:
    """Window starts along one axis; the last window is clamped to the image edge."""
    if size < side:
        raise ShapeMismatch(f"axis of length {size} shorter than the {side} window")
    starts = list(range(0, size - side + 1, stride))
    if starts[-1] != size - side:
        starts.append(size - side)
    return starts


def instances_to_scores(inst: dict, shape) -> np.ndarray:
    """Voxel-wise max over instances of confidence x soft mask."""
    if len(inst["scores"]) == 0:
        return np.zeros(shape, np.float32)
    weighted = inst["masks"] * inst["scores"][:, None, None].astype(np.float32)
    return weighted.max(axis=0)


def infer_detector(backend: ModelBackend, subject: SubjectRecord, hp: DetectorHyperparams = DetectorHyperparams(),
                   tile_batch: int = 64) -> DetectionResult:
    """Score every voxel of a preprocessed subject with overlapping tiles."""
    side, factor = hp.patch_side, hp.upsample_factor
    n_slices, h, w = subject.shape
    origins = [(r, c) for r in tile_origins(h, side, hp.stride) for c in tile_origins(w, side, hp.stride)]
    scores = np.zeros(subject.shape, np.float32)
    instances = []
    lock = None if backend.thread_safe else backend.lock
    for z in range(n_slices):
        stack = stack_detector_channels(subject.t1, subject.t2, subject.t2s, z).data
        slice_inst = []
        for start in range(0, len(origins), tile_batch):
            chunk = origins[start:start + tile_batch]
            tiles = np.stack([stack[:, r:r + side, c:c + side] for r, c in chunk])
            up = upsample_patch(tiles, factor, "linear", side)
            try:
                if lock is not None:
                    with lock:
                        preds = backend.predict(up)
                else:
                    preds = backend.predict(up)
            except Exception as exc:
                raise BackendFailure(f"detector inference failed on subject {subject.id} slice {z}: {exc}") from exc
            for (r, c), inst in zip(chunk, preds):
                if len(inst["scores"]) == 0:
                    continue
                tile = instances_to_scores(inst, (side * factor, side * factor))
                tile = tile.reshape(side, factor, side, factor).mean(axis=(1, 3))
                view = scores[z, r:r + side, c:c + side]
                np.maximum(view, tile, out=view)
                for (r0, c0, r1, c1), conf in zip(inst["boxes"], inst["scores"]):
                    slice_inst.append(((r + r0 / factor, c + c0 / factor, r + r1 / factor, c + c1 / factor),
                                       float(conf)))
        instances.append(slice_inst)
    np.clip(scores, 0.0, 1.0, out=scores)
    return DetectionResult(Volume(scores, subject.t2s.spacing), instances)


def detector_patches(subjects, hp: DetectorHyperparams, seed: int) -> list[PatchSample]:
    rng = np.random.default_rng(seed)
    policy = replace(hp.policy, allow_negative_only=True)
    out = []
    for s in subjects:
        out.extend(extract_training_patches(s, policy, rng, hp.upsample_factor))
    return out


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
