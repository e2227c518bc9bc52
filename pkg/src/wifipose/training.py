"""Optimiser, learning-rate schedule and training configuration."""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, fields

import torch

from .errors import ConfigError

PHASES = ("pretrain", "decode")


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    optimizer: str = "adamw"
    epochs: int = 400
    batch_size: int = 256
    lr: float = 1.5e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 40
    schedule: str = "cosine"
    seed: int = 0
    steps_per_epoch: int | None = None  # None: one pass over the data
    momentum: float = 0.9  # SGD only
    grad_clip: float | None = None
    deterministic: bool = True

    @classmethod
    def defaults(cls, phase: str, **overrides) -> "TrainConfig":
        if phase == "pretrain":
            base = cls()
        elif phase == "decode":
            base = cls(phase="decode", optimizer="adamw", epochs=50, batch_size=32, lr=1e-3,
                       weight_decay=0.01, warmup_epochs=0, schedule="constant")
        else:
            raise ConfigError(f"unknown training phase {phase!r}; expected one of {PHASES}")
        known = {f.name for f in fields(cls)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**{**asdict(base), **overrides})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.phase not in PHASES:
            raise ConfigError(f"unknown training phase {self.phase!r}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"train.optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"train.schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        for name in ("epochs", "batch_size"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ConfigError("train.weight_decay and train.warmup_epochs must be >= 0")
        if self.warmup_epochs >= self.epochs and self.schedule == "cosine" and self.warmup_epochs > 0:
            raise ConfigError("train.warmup_epochs must be smaller than train.epochs")
        if self.steps_per_epoch is not None and self.steps_per_epoch <= 0:
            raise ConfigError("train.steps_per_epoch must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("train.grad_clip must be positive when set")


def lr_at(epoch: float, base_lr: float, warmup_epochs: float, total_epochs: float,
          schedule: str = "cosine") -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero (fractional epochs)."""
    if warmup_epochs > 0 and epoch < warmup_epochs:
        return base_lr * epoch / warmup_epochs
    if schedule == "constant":
        return base_lr
    span = max(total_epochs - warmup_epochs, 1e-12)
    progress = min(max((epoch - warmup_epochs) / span, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


@contextlib.contextmanager
def single_threaded(enabled: bool = True):
    """Run torch on one intra-op thread so float reductions have a fixed order."""
    if not enabled:
        yield
        return
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


@contextlib.contextmanager
def seeded_torch(seed: int):
    """Seed torch's global generator for parameter init without leaking state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield
