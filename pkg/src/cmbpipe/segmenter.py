"""Stage 2: U-Net on four-channel slice stacks (three T2* slices + stage-1 scores)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backends import TorchBackend, register
from .catalog import SubjectRecord, Volume
from .errors import BackendFailure, ShapeMismatch
from .preprocess import ChannelStack, assemble_segmenter_input
from .training import AugmentRanges, apply_affine, draw_affine, run_epochs

DEFAULT_WIDTHS = (16, 32, 64, 128)


@dataclass(frozen=True)
class SegmenterHyperparams:
    epochs: int = 50
    batch_size: int = 4
    learning_rate: float = 5e-5
    loss: str = "weighted_bce"
    pos_weight_cap: float = 1000.0
    empty_slice_keep: float = 0.25
    augment: AugmentRanges = field(default_factory=AugmentRanges)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.pos_weight_cap <= 0:
            raise ValueError("segmenter hyperparameters must be positive")
        if self.loss != "weighted_bce":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if not 0 <= self.empty_slice_keep <= 1:
            raise ValueError("empty_slice_keep must lie in [0, 1]")


def _block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True),
                         nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True))


class UNet(nn.Module):
    def __init__(self, in_channels: int = 4, widths=DEFAULT_WIDTHS):
        super().__init__()
        self.down = nn.ModuleList()
        c = in_channels
        for w in widths:
            self.down.append(_block(c, w))
            c = w
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(nn.ConvTranspose2d(c, w, 2, stride=2))
            self.dec.append(_block(2 * w, w))
            c = w
        self.head = nn.Conv2d(c, 1, 1)
        self.depth = len(widths)

    def forward(self, x):
        h, w = x.shape[-2:]
        k = 2 ** (self.depth - 1)
        ph, pw = (-h) % k, (-w) % k
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph))
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < self.depth - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for up, block in zip(self.up, self.dec):
            x = block(torch.cat([up(x), skips.pop()], 1))
        return self.head(x)[..., :h, :w]


@register
class UNetSegmenter(TorchBackend):
    kind = "unet"

    def __init__(self, widths=DEFAULT_WIDTHS, in_channels: int = 4, seed: int = 0):
        super().__init__(dict(widths=tuple(int(w) for w in widths), in_channels=in_channels), seed)
        self.pos_weight = 1.0

    def build(self, widths, in_channels, **_):
        return UNet(in_channels, widths)

    def extra_state(self):
        return {"pos_weight": self.pos_weight}

    def load_extra_state(self, state):
        self.pos_weight = float(state.get("pos_weight", 1.0))

    def _loss(self, inputs, targets):
        logits = self.model(torch.from_numpy(inputs))
        target = torch.from_numpy(targets)[:, None].float()
        return F.binary_cross_entropy_with_logits(logits, target, pos_weight=torch.tensor(self.pos_weight))

    def train_step(self, inputs, targets) -> float:
        self.model.train()
        return self.step(self._loss(inputs, targets))

    @torch.no_grad()
    def eval_loss(self, inputs, targets) -> float:
        self.model.eval()
        return float(self._loss(inputs, targets))

    @torch.no_grad()
    def predict(self, inputs: np.ndarray) -> np.ndarray:
        self.model.eval()
        x = torch.from_numpy(np.ascontiguousarray(inputs, np.float32))
        return torch.sigmoid(self.model(x))[:, 0].numpy()

    @staticmethod
    def collate(pairs):
        x = np.stack([p[0].data if isinstance(p[0], ChannelStack) else p[0] for p in pairs]).astype(np.float32)
        y = np.stack([p[1] for p in pairs]).astype(np.uint8)
        return x, y


def _stage1_volume(stage1) -> Volume:
    return stage1.score_volume if hasattr(stage1, "score_volume") else stage1


def build_training_pairs(subject: SubjectRecord, stage1, keep_probability: float = 0.25,
                         rng: np.random.Generator | None = None) -> list[tuple[ChannelStack, np.ndarray]]:
    """One (input stack, annotation slice) pair per slice; lesion-free slices kept with ``keep_probability``."""
    if subject.annotation is None:
        raise ValueError(f"subject {subject.id} has no annotation")
    s1 = _stage1_volume(stage1)
    if s1.shape != subject.shape:
        raise ShapeMismatch(f"stage-1 shape {s1.shape} != subject shape {subject.shape}")
    rng = rng if rng is not None else np.random.default_rng(0)
    pairs = []
    for z in range(subject.shape[0]):
        target = subject.annotation.data[z]
        # always draw so the stream does not depend on which slices hold lesions
        keep = rng.random() < keep_probability
        if target.any() or keep:
            pairs.append((assemble_segmenter_input(subject.t2s, s1, z), target.astype(np.uint8)))
    return pairs


def positive_weight(pairs, cap: float = 1000.0) -> float:
    pos = sum(int(t.sum()) for _, t in pairs)
    total = sum(t.size for _, t in pairs)
    if pos == 0:
        return 1.0
    return float(min((total - pos) / pos, cap))


def train_segmenter(pairs, hp: SegmenterHyperparams, backend: UNetSegmenter, seed: int = 0,
                    val_pairs=None) -> UNetSegmenter:
    """Weighted-BCE training; the same affine/flip draw is applied to all four channels and the target."""
    if not pairs:
        raise ValueError("train_segmenter needs at least one training pair")
    if hp.epochs == 0:
        backend.history = []
        return backend
    backend.set_learning_rate(hp.learning_rate)
    backend.pos_weight = positive_weight(pairs, hp.pos_weight_cap)

    def aug(pair, rng):
        p = draw_affine(rng, hp.augment, pixel_scale=1.0)
        stack = pair[0].data if isinstance(pair[0], ChannelStack) else pair[0]
        return apply_affine(stack, p, order=1), apply_affine(pair[1][None], p, order=0)[0]

    backend.history = run_epochs(backend, pairs, val_pairs or [], hp.epochs, hp.batch_size, seed, aug,
                                 backend.collate, name="segmenter")
    return backend


def infer_segmenter(backend: UNetSegmenter, subject: SubjectRecord, stage1, batch: int = 4) -> Volume:
    """Probability volume in [0, 1] on the subject grid."""
    s1 = _stage1_volume(stage1)
    if s1.shape != subject.shape:
        raise ShapeMismatch(f"stage-1 shape {s1.shape} != subject shape {subject.shape}")
    n = subject.shape[0]
    out = np.zeros(subject.shape, np.float32)
    for start in range(0, n, batch):
        idx = range(start, min(start + batch, n))
        x = np.stack([assemble_segmenter_input(subject.t2s, s1, z).data for z in idx])
        try:
            with backend.lock:
                out[start:start + len(idx)] = backend.predict(x)
        except Exception as exc:
            raise BackendFailure(f"segmenter inference failed on subject {subject.id}: {exc}") from exc
    return Volume(np.clip(out, 0.0, 1.0), subject.t2s.spacing)
