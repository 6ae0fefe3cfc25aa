"""Affine/flip augmentation and the epoch loop shared by both stages."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage

from .errors import BackendFailure

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentRanges:
    rotation_deg: float = 15.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    translation: float = 8.0  # voxels on the grid the sample came from
    flip_probability: float = 0.5


@dataclass(frozen=True)
class AffineParams:
    angle_deg: float = 0.0
    scale: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)  # (rows, cols) in sample pixels
    flip: bool = False

    @property
    def is_identity_affine(self) -> bool:
        return self.angle_deg == 0 and self.scale == 1 and self.shift == (0.0, 0.0)


def draw_affine(rng: np.random.Generator, ranges: AugmentRanges, pixel_scale: float = 1.0) -> AffineParams:
    """``pixel_scale`` converts the translation range into sample pixels (e.g. 4 after upsampling)."""
    t = ranges.translation * pixel_scale
    return AffineParams(
        angle_deg=float(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg)),
        scale=float(rng.uniform(ranges.scale_min, ranges.scale_max)),
        shift=(float(rng.uniform(-t, t)), float(rng.uniform(-t, t))),
        flip=bool(rng.random() < ranges.flip_probability),
    )


def apply_affine(arrays: np.ndarray, params: AffineParams, order: int) -> np.ndarray:
    """Transform each (H, W) plane of a (C, H, W) stack about the plane centre.

    Positive angles turn clockwise as displayed (rows pointing down): the
    top-centre pixel moves to the right-centre under +90 degrees. The
    horizontal flip is applied after the affine part.
    """
    arr = np.asarray(arrays)
    out = arr
    if not params.is_identity_affine:
        h, w = arr.shape[-2:]
        centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        a = np.deg2rad(params.angle_deg)
        fwd = params.scale * np.array([[np.cos(a), np.sin(a)], [-np.sin(a), np.cos(a)]])
        inv = np.linalg.inv(fwd)
        offset = centre - inv @ (centre + np.asarray(params.shift))
        mode = "nearest" if order > 0 else "constant"
        out = np.stack([
            ndimage.affine_transform(plane, inv, offset=offset, order=order, mode=mode, cval=0)
            for plane in arr.reshape(-1, h, w)
        ]).reshape(arr.shape).astype(arr.dtype)
    if params.flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Half-open (row0, col0, row1, col1) box around the nonzero pixels."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None
    steps: int

    def to_dict(self):
        return {"epoch": self.epoch, "train_loss": self.train_loss, "val_loss": self.val_loss, "steps": self.steps}


def run_epochs(
    backend,
    train: Sequence,
    val: Sequence,
    epochs: int,
    batch_size: int,
    seed: int,
    augment: Callable | None,
    collate: Callable,
    name: str = "model",
) -> list[EpochRecord]:
    """Shuffle, augment, batch and step ``backend`` for ``epochs`` passes.

    The last short batch of an epoch is kept, so one epoch is
    ``ceil(len(train) / batch_size)`` optimiser steps.
    """
    if not train:
        raise ValueError(f"{name}: empty training set")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    history = []
    n_batches = math.ceil(len(train) / batch_size)
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        losses = []
        for b in range(n_batches):
            items = [train[i] for i in order[b * batch_size:(b + 1) * batch_size]]
            if augment is not None:
                items = [augment(item, rng) for item in items]
            try:
                losses.append(float(backend.train_step(*collate(items))))
            except BackendFailure:
                raise
            except Exception as exc:
                raise BackendFailure(f"{name} training failed: {exc}", epoch, b) from exc
        val_loss = None
        if val:
            try:
                vals = [
                    backend.eval_loss(*collate(val[i:i + batch_size])) for i in range(0, len(val), batch_size)
                ]
            except Exception as exc:
                raise BackendFailure(f"{name} validation failed: {exc}", epoch) from exc
            val_loss = float(np.mean(vals))
        rec = EpochRecord(epoch, float(np.mean(losses)), val_loss, len(losses))
        log.info("%s epoch %d: train %.5f val %s", name, epoch, rec.train_loss, rec.val_loss)
        history.append(rec)
    return history
