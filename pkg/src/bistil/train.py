"""Generic step loop shared by pretraining, LT-SFT phases and distillation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from . import tensor as T
from .errors import DomainError, TrainingError
from .model import Model

log = logging.getLogger(__name__)

# objective(model, batch, rng) -> (loss, {component: value})
Objective = Callable[[Model, object, np.random.Generator], "tuple[T.Tensor, dict[str, float]]"]


@dataclass
class FitResult:
    arrays: dict[str, np.ndarray]          # parameters of the selected checkpoint
    history: list[tuple[int, float]]        # (step, validation loss)
    best_step: int
    rows: list[dict] = field(default_factory=list)


def fit(
    model: Model,
    objective: Objective,
    batches: Iterator,
    steps: int,
    lr: float,
    trainable: Iterable[str],
    mask: dict[str, np.ndarray] | None = None,
    validate: Callable[[Model], float] | None = None,
    eval_interval: int = 0,
    seed: int = 0,
    weight_decay: float = 0.0,
    log_every: int = 0,
) -> FitResult:
    """Train ``model`` in place for ``steps`` AdamW steps and pick a checkpoint.

    When ``validate`` is given it runs every ``eval_interval`` steps and after
    the final step; the parameters with the lowest validation loss are
    returned (earliest wins ties). Otherwise the final parameters are returned.
    """
    trainable = [n for n in model.params if n in set(trainable)]
    rng = np.random.default_rng(seed)
    flags = {n: p.requires_grad for n, p in model.params.items()}
    for n, p in model.params.items():
        p.requires_grad = n in trainable
    params = {n: model.params[n] for n in trainable}
    opt = T.init_optimizer(params, lr, steps, weight_decay=weight_decay)
    history: list[tuple[int, float]] = []
    rows: list[dict] = []
    best_val, best_step = math.inf, 0
    best = {n: p.data.copy() for n, p in model.params.items()}
    batch_iter = iter(batches)
    try:
        for step in range(1, steps + 1):
            try:
                batch = next(batch_iter)
            except StopIteration:
                raise DomainError("training data is empty") from None
            T.zero_grads(params.values())
            loss, parts = objective(model, batch, rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value}", step)
            T.backward(loss)
            T.adamw_step(params, None, opt, mask)
            row = {"step": step, "loss": value, **parts}
            if validate is not None and eval_interval and (step % eval_interval == 0 or step == steps):
                val = float(validate(model))
                if not math.isfinite(val):
                    raise TrainingError(f"non-finite validation loss {val}", step)
                history.append((step, val))
                row["val_loss"] = val
                if val < best_val:
                    best_val, best_step = val, step
                    best = {n: p.data.copy() for n, p in model.params.items()}
            rows.append(row)
            if log_every and step % log_every == 0:
                log.info("step %d loss %.5f", step, value)
    finally:
        T.zero_grads(model.params.values())
        for n, p in model.params.items():
            p.requires_grad = flags[n]
    if validate is None or not history:
        best = {n: p.data.copy() for n, p in model.params.items()}
        best_step = steps
    return FitResult(best, history, best_step, rows)


def load_arrays(model: Model, arrays: dict[str, np.ndarray]) -> None:
    for n, arr in arrays.items():
        model.params[n].data[...] = arr
