"""Trainable model backends behind a small common interface.

A backend owns its weights and optimiser. The pipeline only calls
``train_step``, ``eval_loss``, ``predict``, ``save`` and ``load_backend``.
"""

from __future__ import annotations

import threading
from abc import ABC, abstractmethod
from pathlib import Path

import torch

_REGISTRY: dict[str, type] = {}


def register(cls):
    _REGISTRY[cls.kind] = cls
    return cls


class ModelBackend(ABC):
    kind = "abstract"
    # set True only when predict() may run concurrently on shared weights
    thread_safe = False

    def __init__(self):
        self.history: list = []
        self.lock = threading.Lock()

    @abstractmethod
    def train_step(self, inputs, targets) -> float: ...

    @abstractmethod
    def eval_loss(self, inputs, targets) -> float: ...

    @abstractmethod
    def predict(self, inputs): ...

    @abstractmethod
    def save(self, path) -> Path: ...


class TorchBackend(ModelBackend):
    """Backend wrapping one ``torch.nn.Module`` trained with Adam."""

    def __init__(self, config: dict, seed: int = 0):
        super().__init__()
        self.config = dict(config)
        self.seed = seed
        torch.manual_seed(seed)
        self.model = self.build(**self.config)
        self.model.eval()
        self.learning_rate = 1e-3
        self._optimizer = None

    @abstractmethod
    def build(self, **config) -> torch.nn.Module: ...

    def set_learning_rate(self, lr: float):
        self.learning_rate = float(lr)
        self._optimizer = None

    @property
    def optimizer(self):
        if self._optimizer is None:
            params = [p for p in self.model.parameters() if p.requires_grad]
            self._optimizer = torch.optim.Adam(params, lr=self.learning_rate)
        return self._optimizer

    def step(self, loss: torch.Tensor) -> float:
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        return float(loss.detach())

    def extra_state(self) -> dict:
        return {}

    def load_extra_state(self, state: dict):
        pass

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {"kind": self.kind, "config": self.config, "state": self.model.state_dict(), "extra": self.extra_state()},
            path,
        )
        return path

    @classmethod
    def from_checkpoint(cls, ckpt: dict):
        obj = cls(**ckpt["config"])
        obj.model.load_state_dict(ckpt["state"])
        obj.load_extra_state(ckpt.get("extra", {}))
        obj.model.eval()
        return obj


def load_backend(path) -> ModelBackend:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    try:
        cls = _REGISTRY[ckpt["kind"]]
    except KeyError:
        raise ValueError(f"{path}: unknown backend kind {ckpt.get('kind')!r}") from None
    return cls.from_checkpoint(ckpt)
