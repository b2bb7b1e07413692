"""Adam training on the ordering-family objective with best-on-validation selection."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import AdamState, apply_adam, backward, clip_grad_norm
from .graph import Graph
from .model import GranConfig, GranParams, build_step_batch, family_loss
from .orderings import build_family, parse_kinds

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, loss: float, detail: str):
        super().__init__(f"non-finite loss {loss} at step {step}: {detail}")
        self.step = step
        self.loss = loss


@dataclass
class TrainSettings:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    val_interval: int = 50
    seed: int = 0
    orderings: tuple = ("dfs",)
    record_wall_time: bool = False
    grad_clip: float = 0.0  # max global gradient norm; 0 disables

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ValueError(f"learning rate must be finite and >= 0, got {self.lr}")
        if self.grad_clip < 0 or not math.isfinite(self.grad_clip):
            raise ValueError(f"grad_clip must be finite and >= 0, got {self.grad_clip}")
        if self.val_interval < 1:
            raise ValueError("val_interval must be >= 1")
        parse_kinds(self.orderings)


@dataclass
class TrainResult:
    params: GranParams  # best on validation (last if no validation graphs)
    last_params: GranParams
    adam: AdamState
    log: list
    step: int
    best_val: float | None
    best_step: int | None


class _Prepared:
    """Ordering families and packed step batches, computed once per graph."""

    def __init__(self, graphs: Sequence[Graph], kinds, config: GranConfig):
        self.batches = []
        for g in graphs:
            fam = build_family(g, kinds, config.n_max)
            self.batches.append([build_step_batch(r, config) for r in fam.rows])

    def __len__(self):
        return len(self.batches)


def mean_family_loss(prepared: _Prepared, indices, params: GranParams, config: GranConfig):
    total = None
    for i in indices:
        term = family_loss(None, None, params, config, batches=prepared.batches[i])
        total = term if total is None else total + term
    return total * (1.0 / len(indices))


def _clone(params: GranParams, config: GranConfig) -> GranParams:
    fresh = GranParams.init(config, np.random.default_rng(0))
    return fresh.load(params.arrays())


def train(train_graphs: Sequence[Graph], val_graphs: Sequence[Graph], config: GranConfig,
          settings: TrainSettings, params: GranParams | None = None,
          adam: AdamState | None = None, start_step: int = 0,
          best: tuple | None = None,
          on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Minimize mean family loss with Adam for ``settings.epochs`` epochs.

    Mini-batch order depends only on ``(seed, epoch)``, so resuming from a saved
    ``start_step`` reproduces an uninterrupted run exactly.
    """
    if not train_graphs:
        raise ValueError("training split is empty")
    kinds = parse_kinds(settings.orderings)
    if params is None:
        params = GranParams.init(config, np.random.default_rng(settings.seed))
    if adam is None:
        adam = AdamState(lr=settings.lr)
    adam.lr = settings.lr
    train_set = _Prepared(train_graphs, kinds, config)
    val_set = _Prepared(val_graphs, kinds, config) if val_graphs else None

    n = len(train_set)
    per_epoch = math.ceil(n / settings.batch_size)
    total_steps = settings.epochs * per_epoch
    tensors = params.named_tensors()
    best_val, best_step, best_arrays = (best or (None, None, None))
    if best_arrays is None and best_val is not None:
        best_val = best_step = None
    records = []
    t0 = time.perf_counter()

    step = start_step
    while step < total_steps:
        epoch, k = divmod(step, per_epoch)
        order = np.random.default_rng([settings.seed, epoch]).permutation(n)
        idx = order[k * settings.batch_size:(k + 1) * settings.batch_size].tolist()
        params.zero_grad()
        loss = mean_family_loss(train_set, idx, params, config)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, value, f"batch graphs {idx}")
        backward(loss)
        for name, t in tensors.items():
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise TrainingDiverged(step, value, f"non-finite gradient in {name}")
        if settings.grad_clip > 0:
            clip_grad_norm(tensors, settings.grad_clip)
        apply_adam(tensors, adam)
        step += 1

        record = {"step": step, "train_loss": value, "val_loss": None}
        if val_set is not None and (step % settings.val_interval == 0 or step == total_steps):
            vloss = mean_family_loss(val_set, range(len(val_set)), params, config).item()
            record["val_loss"] = vloss
            if best_val is None or vloss < best_val:
                best_val, best_step, best_arrays = vloss, step, params.arrays()
        if settings.record_wall_time:
            record["wall_time"] = time.perf_counter() - t0
        records.append(record)
        if on_record is not None:
            on_record(record)
        if step % max(1, per_epoch * 10) == 0:
            log.info("step %d/%d train %.4f val %s", step, total_steps, value, record["val_loss"])

    last = params
    if best_arrays is not None:
        chosen = _clone(params, config).load(best_arrays)
    else:
        chosen = _clone(params, config)
    return TrainResult(chosen, last, adam, records, step, best_val, best_step)
