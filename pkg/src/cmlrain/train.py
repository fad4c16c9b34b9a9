"""Deterministic mini-batch training with Adam and best-validation selection."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from cmlrain.autodiff import Tensor, derive
from cmlrain.errors import ConfigInvalid, DivergedLoss, EmptySplit, ShapeMismatch
from cmlrain.model import ModelParams, ModelSpec, forward, init_params, predict
from cmlrain.preprocess import WindowedDataset

log = logging.getLogger(__name__)

# sub-stream keys under the run seed
_INIT, _SHUFFLE, _DROPOUT = 0, 1, 2


@dataclass
class TrainConfig:
    lr: float = 5e-4
    epochs: int = 150
    batch_size: int = 64
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip_norm: float | None = None
    loss: str = "MSE"
    max_steps: int | None = None
    eval_batch_size: int = 512

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if not self.lr >= 0:
            raise ConfigInvalid("lr must be non-negative")
        if self.epochs < 1:
            raise ConfigInvalid("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be >= 1")
        if self.loss != "MSE":
            raise ConfigInvalid(f"unsupported loss {self.loss!r}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigInvalid("grad_clip_norm must be positive when set")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigInvalid(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeMismatch("one gradient per parameter required")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {g.shape} vs parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred - target
    return (diff * diff).mean()


def clip_grads(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total <= max_norm:
        return grads
    scale = max_norm / (total + 1e-12)
    return [g * scale for g in grads]


@dataclass
class TrainHistory:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for row in zip(self.epochs, self.train_loss, self.val_loss):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def evaluate_loss(params: ModelParams, x: np.ndarray, y: np.ndarray, batch_size: int = 512) -> float:
    pred = predict(params, x, batch_size)
    return float(np.mean((pred - y) ** 2))


def train(
    spec: ModelSpec, dataset: WindowedDataset, cfg: TrainConfig, params: ModelParams | None = None
) -> tuple[ModelParams, TrainHistory]:
    """Fit ``spec`` on the train split; return the parameters of the best
    validation epoch together with the loss history."""
    train_idx = dataset.indices("train")
    val_idx = dataset.indices("val")
    if not len(train_idx):
        raise EmptySplit("training split is empty")
    if not len(val_idx):
        raise EmptySplit("validation split is empty")
    if dataset.n_features != spec.n_features or dataset.window_len != spec.window_len:
        raise ConfigInvalid(
            f"dataset windows [{dataset.window_len} x {dataset.n_features}] do not match "
            f"spec [{spec.window_len} x {spec.n_features}]"
        )

    if params is None:
        params = init_params(spec, derive(cfg.seed, _INIT))
    tensors = list(params)
    state = AdamState()
    x_val, y_val = dataset.inputs(val_idx), dataset.targets(val_idx)
    history = TrainHistory()
    best_loss, best_snapshot = math.inf, params.snapshot()
    steps = 0

    for epoch in range(cfg.epochs):
        order = derive(cfg.seed, _SHUFFLE, epoch).permutation(train_idx)
        drop_rng = derive(cfg.seed, _DROPOUT, epoch)
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            x, y = dataset.inputs(batch), dataset.targets(batch)
            loss = mse(forward(spec, params, x, train=True, rng=drop_rng), y)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergedLoss(f"loss became {value} at epoch {epoch}, step {steps}")
            params.zero_grad()
            loss.backward()
            grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
            if cfg.grad_clip_norm is not None:
                grads = clip_grads(grads, cfg.grad_clip_norm)
            adam_step(tensors, grads, state, cfg.lr, cfg.adam_betas, cfg.adam_eps)
            history.step_loss.append(value)
            total += value * len(batch)
            count += len(batch)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        val_loss = evaluate_loss(params, x_val, y_val, cfg.eval_batch_size)
        if not math.isfinite(val_loss):
            raise DivergedLoss(f"validation loss became {val_loss} at epoch {epoch}")
        history.epochs.append(epoch)
        history.train_loss.append(total / count)
        history.val_loss.append(val_loss)
        if val_loss < best_loss:
            best_loss, best_snapshot = val_loss, params.snapshot()
            history.best_epoch = epoch
        log.debug("epoch=%d train_loss=%.6g val_loss=%.6g", epoch, total / count, val_loss)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break

    params.zero_grad()
    params.load_snapshot(best_snapshot)
    return params, history
