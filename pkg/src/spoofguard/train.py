"""Adam training with early stopping on validation loss.

Each epoch shuffles the training set with an epoch-seeded generator,
runs BCE/Adam over mini-batches (the last short batch is kept), then
scores the validation set in inference mode. Training stops once
``patience`` consecutive epochs fail to improve the validation loss by
more than ``min_delta``, and the returned weights are the snapshot from
the epoch with the lowest recorded validation loss.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autograd import DropoutRng, Tensor, sigmoid_bce
from .errors import EmptySet, ShapeMismatch, SingleClassTrainSet
from .features import FeatureMatrix
from .models import ModelWeights, features_to_input, forward_logits, trainable_names

log = logging.getLogger(__name__)

LABEL_BONAFIDE = 1
LABEL_SPOOF = 0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 16
    seed: int = 0
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be < max_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class LabeledItem:
    features: FeatureMatrix
    label: int  # bonafide=1, spoof=0
    utt_id: str


@dataclass
class LabeledSet:
    items: list[LabeledItem] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def labels(self) -> set[int]:
        return {it.label for it in self.items}


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
    t: int,
) -> None:
    """One bias-corrected Adam update, in place.

    m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2;
    theta <- theta - lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
    """
    if t < 1:
        raise ValueError("step index t starts at 1")
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad shape {g.shape} != param {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


class EarlyStopper:
    """Patience counter over validation losses.

    ``should_stop`` trips after ``patience`` consecutive updates without
    an improvement greater than ``min_delta`` over the best significant
    loss seen so far.
    """

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.bad_epochs = 0

    def update(self, val_loss: float) -> None:
        if self.best - val_loss > self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    wall_s: float


TrainingLog = list[EpochStats]


def training_log_lines(log_entries: TrainingLog) -> list[str]:
    return [
        json.dumps({"epoch": e.epoch, "train_loss": e.train_loss, "val_loss": e.val_loss})
        for e in log_entries
    ]


def _batch_arrays(items: Sequence[LabeledItem], model: ModelWeights, dtype):
    xs = np.concatenate([features_to_input(it.features, model.spec, dtype) for it in items])
    ys = np.array([it.label for it in items], dtype=dtype)
    return xs, ys


def evaluate_loss(model: ModelWeights, data: LabeledSet, batch_size: int = 16) -> float:
    """Mean BCE over a set, inference mode (no dropout, running BN stats)."""
    if not data.items:
        raise EmptySet("cannot evaluate an empty set")
    dtype = next(iter(model.tensors.values())).dtype
    total = 0.0
    for start in range(0, len(data.items), batch_size):
        chunk = data.items[start : start + batch_size]
        xs, ys = _batch_arrays(chunk, model, dtype)
        logits = forward_logits(model, xs, mode="infer")
        loss = sigmoid_bce(logits, ys)
        total += float(loss.data) * len(chunk)
    return total / len(data.items)


def train(
    model: ModelWeights,
    train_set: LabeledSet,
    val_set: LabeledSet,
    cfg: TrainConfig,
    on_epoch=None,
) -> tuple[ModelWeights, TrainingLog]:
    """Optimize ``model`` in place and return the best-epoch snapshot.

    The snapshot (weights plus BN running stats) always corresponds to
    the minimum recorded validation loss; the patience rule only decides
    when to stop looking.
    """
    if not train_set.items or not val_set.items:
        raise EmptySet("train and validation sets must be non-empty")
    if len(train_set.labels()) < 2:
        raise SingleClassTrainSet("training set needs both bonafide and spoof items")

    dtype = next(iter(model.tensors.values())).dtype
    params = {n: Tensor(model.tensors[n], requires_grad=True) for n in trainable_names(model.spec)}
    state = AdamState.init({n: p.data for n, p in params.items()})
    drop = DropoutRng(cfg.seed)
    stopper = EarlyStopper(cfg.patience, cfg.min_delta)

    best_val = float("inf")
    best_snapshot = {k: v.copy() for k, v in model.tensors.items()}
    history: TrainingLog = []
    step = 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, epoch])
        ).permutation(len(train_set.items))
        loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_set.items[i] for i in order[start : start + cfg.batch_size]]
            xs, ys = _batch_arrays(chunk, model, dtype)
            for p in params.values():
                p.zero_grad()
            logits = forward_logits(model, xs, mode="train", drop=drop, params=params)
            loss = sigmoid_bce(logits, ys)
            loss.backward()
            step += 1
            adam_step(
                {n: p.data for n, p in params.items()},
                {n: p.grad for n, p in params.items()},
                state,
                cfg,
                step,
            )
            loss_sum += float(loss.data) * len(chunk)

        train_loss = loss_sum / len(train_set.items)
        val_loss = evaluate_loss(model, val_set, cfg.batch_size)
        stats = EpochStats(epoch, train_loss, val_loss, time.perf_counter() - t0)
        history.append(stats)
        log.info(
            "epoch %d: train_loss=%.5f val_loss=%.5f (%.1fs)",
            epoch, train_loss, val_loss, stats.wall_s,
        )
        if on_epoch is not None:
            on_epoch(stats)

        if val_loss < best_val:
            best_val = val_loss
            best_snapshot = {k: v.copy() for k, v in model.tensors.items()}

        stopper.update(val_loss)
        if stopper.should_stop:
            log.info("early stop after epoch %d (patience %d)", epoch, cfg.patience)
            break

    best = ModelWeights(model.spec, best_snapshot, model.calibrated_threshold)
    return best, history
