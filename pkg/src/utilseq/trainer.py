"""Adam optimization loop with inverse-square-root warmup and early stopping.

Batches are assembled by sorting pairs by source length into fixed
buckets and shuffling the bucket order with a seeded generator each
epoch, so a run is a pure function of its seed.  Weight decay is
decoupled (applied to the weights directly rather than through the
gradients).  The returned parameters are those of the best validation
evaluation, not the last step.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import Corpus
from .errors import ConfigError, DomainError, NumericError, ValidationError
from .losses import UtilLossConfig, total_loss
from .model import ModelConfig, param_names
from .ontology import Ontology
from .tensor import DropoutStream, Tape, backward


@dataclass
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    base_lr: float = 5e-4
    warmup_steps: int = 400
    weight_decay: float = 1e-4
    batch_size: int = 16
    max_steps: int = 1000
    eval_every: int = 200
    patience: int = 5
    label_smoothing: float = 0.1
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.base_lr < 0:
            raise ConfigError("base_lr must be nonnegative")
        if self.warmup_steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("warmup_steps, batch_size, eval_every must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be nonnegative")


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to base_lr, then inverse-square-root decay."""
    if step < 1:
        raise DomainError("learning-rate schedule starts at step 1")
    return config.base_lr * min(step / config.warmup_steps, math.sqrt(config.warmup_steps / step))


class AdamState:
    """First/second moment accumulators shaped like the parameters."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {name: np.zeros_like(arr) for name, arr in params.items()}
        self.v = {name: np.zeros_like(arr) for name, arr in params.items()}
        self.t = 0

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        lr: float,
        config: TrainConfig,
    ) -> None:
        self.t += 1
        b1, b2 = config.beta1, config.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, g in grads.items():
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + config.adam_eps)
            params[name] = params[name] - lr * update - lr * config.weight_decay * params[name]


@dataclass
class LogRow:
    step: int
    lr: float
    train_loss: float
    train_nll: float
    train_util: float
    valid_objective: float | None = None


def _length_bucketed_batches(corpus: Corpus, batch_size: int) -> list[list[int]]:
    order = sorted(range(len(corpus.pairs)), key=lambda i: (len(corpus.pairs[i].source), i))
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def validation_objective(
    corpus: Corpus,
    params: dict[str, np.ndarray],
    model_config: ModelConfig,
    util_config: UtilLossConfig,
    ontology: Ontology,
    label_smoothing: float,
) -> float:
    """Mean per-pair training objective on a held-out split, dropout off."""
    total = 0.0
    for pair in corpus.pairs:
        parts = total_loss(
            pair, params, model_config, util_config, ontology, corpus.vocab,
            label_smoothing=label_smoothing, mode="eval",
        )
        total += parts.total.item()
    return total / len(corpus.pairs)


def train(
    train_corpus: Corpus,
    valid_corpus: Corpus,
    params: dict[str, np.ndarray],
    model_config: ModelConfig,
    train_config: TrainConfig,
    util_config: UtilLossConfig,
    ontology: Ontology,
) -> tuple[dict[str, np.ndarray], list[LogRow]]:
    """Run the optimization loop; returns (best-validation params, step log)."""
    train_config.validate()
    util_config.validate()
    if train_config.max_steps == 0:
        return copy.deepcopy(dict(params)), []
    if not train_corpus.pairs or not valid_corpus.pairs:
        raise ValidationError("train and valid splits must be nonempty")

    params = copy.deepcopy(dict(params))
    names = param_names(model_config)
    adam = AdamState(params)
    batches = _length_bucketed_batches(train_corpus, train_config.batch_size)
    shuffle_rng = np.random.default_rng([train_config.seed % (2**63), 1])

    log: list[LogRow] = []
    best_objective = math.inf
    best_params = copy.deepcopy(params)
    evals_since_improvement = 0
    step = 0
    stopped = False

    while not stopped:
        epoch_order = shuffle_rng.permutation(len(batches))
        for batch_pos in epoch_order:
            step += 1
            batch = batches[batch_pos]
            tape = Tape()
            bound = {name: tape.leaf(params[name]) for name in names}
            nll_sum = 0.0
            util_sum = 0.0
            pair_losses = []
            for j, pair_idx in enumerate(batch):
                stream = DropoutStream(train_config.seed, step, j)
                try:
                    parts = total_loss(
                        train_corpus.pairs[pair_idx],
                        bound,
                        model_config,
                        util_config,
                        ontology,
                        train_corpus.vocab,
                        label_smoothing=train_config.label_smoothing,
                        mode="train",
                        dropout_stream=stream,
                    )
                except NumericError as exc:
                    raise NumericError(
                        f"non-finite loss at step {step}, batch index {j} "
                        f"(pair {pair_idx}): {exc}"
                    ) from exc
                pair_losses.append(parts.total)
                nll_sum += parts.nll_value
                util_sum += parts.util_value
            batch_loss = T.mul(T.add_n(pair_losses), 1.0 / len(batch))
            grads_obj = backward(tape, batch_loss)
            grads = {name: grads_obj.wrt(bound[name]) for name in names}
            lr = lr_at(step, train_config)
            adam.step(params, grads, lr, train_config)

            row = LogRow(
                step=step,
                lr=lr,
                train_loss=batch_loss.item(),
                train_nll=nll_sum / len(batch),
                train_util=util_sum / len(batch),
            )
            if step % train_config.eval_every == 0:
                objective = validation_objective(
                    valid_corpus, params, model_config, util_config, ontology,
                    train_config.label_smoothing,
                )
                row.valid_objective = objective
                if objective < best_objective:
                    best_objective = objective
                    best_params = copy.deepcopy(params)
                    evals_since_improvement = 0
                else:
                    evals_since_improvement += 1
                    if evals_since_improvement >= train_config.patience:
                        log.append(row)
                        stopped = True
                        break
            log.append(row)
            if step >= train_config.max_steps:
                stopped = True
                break

    if best_objective == math.inf:
        best_params = copy.deepcopy(params)
    return best_params, log


def write_log_csv(log: Sequence[LogRow], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "lr", "train_loss", "train_nll", "train_util", "valid_objective"])
        for row in log:
            writer.writerow(
                [
                    row.step,
                    f"{row.lr:.10g}",
                    f"{row.train_loss:.10g}",
                    f"{row.train_nll:.10g}",
                    f"{row.train_util:.10g}",
                    "" if row.valid_objective is None else f"{row.valid_objective:.10g}",
                ]
            )
