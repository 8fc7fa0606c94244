"""MSE loss, Adam, the epoch/batch training loop, and checkpoint helpers.

Per-epoch randomness (shuffle order, augmentation draws, dropout masks) is
derived from ``(cfg.seed, epoch, batch)`` rather than a consumed stream, so
a run resumed from a checkpoint continues exactly as the uninterrupted run
would have.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from typing import Mapping

import numpy as np

from .errors import DimensionError, TrainingDivergedError
from . import tensor as T
from .tensor import Tensor
from .data import AugmentPolicy, DishRecord, make_batches
from .models import ArchConfig, Model, save_checkpoint, load_checkpoint


@dataclass
class TrainConfig:
    """Training hyperparameters plus the embedded architecture config."""

    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_adam: float = 1e-7
    seed: int = 0
    split_ratio: float = 0.8
    augment: bool = True
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchConfig.from_dict(self.arch)
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ValueError(f"beta1/beta2 must be in (0, 1), got {self.beta1}, {self.beta2}")
        if self.learning_rate < 0 or self.epsilon_adam <= 0:
            raise ValueError("learning_rate must be >= 0 and epsilon_adam > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class AdamState:
    """First/second moment estimates mirroring the parameter dict."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})

    def to_plain(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    @classmethod
    def from_plain(cls, d: dict) -> "AdamState":
        return cls(m=d["m"], v=d["v"], t=d["t"])


@dataclass
class TrainLog:
    """One row per completed epoch: mean training loss (kcal^2) and wall time."""

    seed: int
    epochs: list[tuple[int, float, float]] = field(default_factory=list)

    def append(self, epoch: int, loss: float, seconds: float) -> None:
        self.epochs.append((epoch, loss, seconds))

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("epoch,loss,seconds\n")
            for epoch, loss, seconds in self.epochs:
                f.write(f"{epoch},{loss!r},{seconds:.3f}\n")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over the batch (kcal^2), differentiable."""
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = T.sub(pred, target)
    return T.reduce_mean(T.mul(diff, diff))


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> tuple[Mapping[str, Tensor], AdamState]:
    """One Adam update with bias correction.

    t += 1;  m = b1*m + (1-b1)*g;  v = b2*v + (1-b2)*g^2;
    p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    """
    if set(params.keys()) != set(grads.keys()):
        missing = set(params) ^ set(grads)
        raise ValueError(f"params and grads keys differ on {sorted(missing)[:5]}")
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for key, p in params.items():
        g = grads[key]
        state.m[key] = b1 * state.m[key] + (1.0 - b1) * g
        state.v[key] = b2 * state.v[key] + (1.0 - b2) * (g * g)
        m_hat = state.m[key] / bc1
        v_hat = state.v[key] / bc2
        p.data = (p.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon_adam)
                  ).astype(p.data.dtype, copy=False)
    return params, state


def _epoch_seed(seed: int, epoch: int, purpose: int) -> int:
    return int(np.random.SeedSequence((seed, epoch, purpose)).generate_state(1)[0])


def train(model: Model, train_records: list[DishRecord], cfg: TrainConfig, *,
          start_epoch: int = 0, state: AdamState | None = None,
          log: TrainLog | None = None) -> tuple[Model, TrainLog, AdamState]:
    """Run the epoch/batch loop: shuffle, batch, train-mode forward, MSE,
    backprop, Adam step.  Fully deterministic under cfg.seed; aborts with
    TrainingDivergedError on a non-finite loss."""
    params = model.params()
    if state is None:
        state = AdamState.fresh(params)
    if log is None:
        log = TrainLog(seed=cfg.seed)
    policy = AugmentPolicy() if cfg.augment else None
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        sq_sum = 0.0
        n_seen = 0
        batches = make_batches(
            train_records, cfg.batch_size,
            model.vectorizer if model.kind == "multimodal" else None,
            cfg.arch.image_size, shuffle_seed=_epoch_seed(cfg.seed, epoch, 0),
            augment_policy=policy)
        for bi, (images, ids, targets) in enumerate(batches):
            model.set_step_seed(_epoch_seed(cfg.seed, epoch, 1000 + bi))
            pred = model.forward(images, ids if model.kind == "multimodal" else None,
                                 mode="train")
            loss = mse_loss(pred, Tensor(targets))
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {bi}")
            grads = T.backward(loss, params)
            adam_step(params, grads, state, cfg)
            sq_sum += loss_val * len(targets)
            n_seen += len(targets)
        log.append(epoch, sq_sum / max(n_seen, 1), time.perf_counter() - t0)
    return model, log, state


def save_training_checkpoint(path: str, model: Model, state: AdamState,
                             extra: dict | None = None) -> None:
    save_checkpoint(path, model, opt_state=state.to_plain(), extra=extra)


def load_training_checkpoint(path: str) -> tuple[Model, AdamState | None, dict]:
    model, opt_plain, extra = load_checkpoint(path)
    state = AdamState.from_plain(opt_plain) if opt_plain is not None else None
    return model, state, extra
