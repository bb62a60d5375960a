"""Plateau-scheduled Adam training loop shared by all pipelines.

A pipeline here is anything with a `store` (ParamStore) and a
`loss_on_batch(*arrays, rng=...)` returning (scalar node, LossReport).
Validation is the same objective evaluated noise-free on a held-out split.
The learning rate decays on plateau; training stops once the rate floor has
been reached and patience runs out again. The best-validation parameters are
restored into the pipeline at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DivergenceError


@dataclass(frozen=True)
class TrainSchedule:
    learning_rate: float = 1e-4
    decay_factor: float = 0.75
    plateau_patience: int = 5
    early_stop_patience: int = 10
    max_epochs: int = 60
    batch_size: int = 8
    min_learning_rate: float = 1e-6
    min_relative_improvement: float = 1e-4
    grad_clip: float = 5.0
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.min_learning_rate < 0:
            raise ContractError("learning rates must be >= 0")
        if not 0 < self.decay_factor < 1:
            raise ContractError("decay_factor must be in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ContractError("patience values must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ContractError("max_epochs and batch_size must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ContractError("validation_fraction must be in (0, 1)")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    learning_rate: float


@dataclass
class TrainResult:
    best_val: float
    history: list
    best_state: dict
    stop_reason: str


def _first_nonfinite(pipeline, loss_value):
    for name, p in pipeline.store.items():
        if not np.all(np.isfinite(p.data)):
            return f"parameter '{name}'"
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return f"gradient of '{name}'"
    if not math.isfinite(loss_value):
        return "loss"
    return None


def _batch_iter(n, batch_size, order):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train(pipeline, arrays, schedule):
    """Trains the pipeline on aligned example arrays (first axis = example).
    Returns a TrainResult; the pipeline holds the best-validation parameters."""
    if not arrays:
        raise ContractError("train: no example arrays")
    n = arrays[0].shape[0]
    for a in arrays[1:]:
        if a is not None and a.shape[0] != n:
            raise ContractError("train: example arrays misaligned")
    if n < 2:
        raise ContractError("train: need at least 2 examples to split")

    split_rng = np.random.default_rng(schedule.seed)
    perm = split_rng.permutation(n)
    n_val = max(1, int(round(schedule.validation_fraction * n)))
    if n_val >= n:
        n_val = n - 1
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]
    seeds = np.random.SeedSequence(schedule.seed).spawn(schedule.max_epochs)

    def pick(idx):
        return [None if a is None else a[idx] for a in arrays]

    def validation_loss():
        total, count = 0.0, 0
        for batch in _batch_iter(len(val_idx), schedule.batch_size, val_idx):
            _, report = pipeline.loss_on_batch(*pick(batch), rng=None)
            total += report.total * len(batch)
            count += len(batch)
        return total / count

    lr = schedule.learning_rate
    best_val = math.inf
    best_state = pipeline.store.state_arrays()
    since_improve = 0
    history = []
    stop_reason = "max_epochs"

    for epoch in range(1, schedule.max_epochs + 1):
        epoch_rng = np.random.default_rng(seeds[epoch - 1])
        order = train_idx[epoch_rng.permutation(len(train_idx))]
        train_total, train_count = 0.0, 0
        for batch in _batch_iter(len(order), schedule.batch_size, order):
            loss, report = pipeline.loss_on_batch(*pick(batch), rng=epoch_rng)
            if not math.isfinite(report.total):
                culprit = _first_nonfinite(pipeline, report.total)
                raise DivergenceError(
                    f"training diverged at epoch {epoch}: first non-finite "
                    f"tensor is {culprit}"
                )
            pipeline.store.zero_grads()
            loss.backward()
            T.clip_gradients(pipeline.store, schedule.grad_clip)
            T.adam_step(pipeline.store, lr)
            train_total += report.total * len(batch)
            train_count += len(batch)
        val = validation_loss()
        if not math.isfinite(val):
            culprit = _first_nonfinite(pipeline, val)
            raise DivergenceError(
                f"validation diverged at epoch {epoch}: first non-finite "
                f"tensor is {culprit}"
            )
        history.append(EpochStats(epoch, train_total / max(train_count, 1), val, lr))

        if not math.isfinite(best_val):
            improvement = math.inf
        elif best_val == 0.0:
            improvement = best_val - val
        else:
            improvement = (best_val - val) / abs(best_val)
        if improvement > schedule.min_relative_improvement:
            best_val = val
            best_state = pipeline.store.state_arrays()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= schedule.plateau_patience:
                if lr > schedule.min_learning_rate:
                    lr = max(lr * schedule.decay_factor,
                             schedule.min_learning_rate)
                    since_improve = 0
                elif since_improve >= schedule.early_stop_patience:
                    stop_reason = "early_stop"
                    break

    pipeline.store.load_arrays(best_state, strict=False)
    return TrainResult(best_val=best_val, history=history,
                       best_state=best_state, stop_reason=stop_reason)


def history_csv(history):
    """Epoch history as CSV text; floats use repr so re-parsing round-trips."""
    lines = ["epoch,train_loss,val_loss,learning_rate"]
    for h in history:
        lines.append(f"{h.epoch},{h.train_loss!r},{h.val_loss!r},{h.learning_rate!r}")
    return "\n".join(lines) + "\n"
