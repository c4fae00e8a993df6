"""Minibatch training with Adam, per-epoch contrastive resampling,
validation-based model selection, and early stopping.

Single-threaded and deterministic: instance visitation order, contrastive
plans, and dropout masks are all pure functions of (seed, epoch).
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError
from .evaluation import IMAGE_TO_SENTENCE, SENTENCE_TO_IMAGE, rank_cross_modal
from .model import (
    MlmmeModel,
    joint_loss,
    plan_directions,
    sample_contrastive,
)
from .numerics import AdamState, adam_step, clip_global_norm, rng_stream

METRIC_SUM_OF_RECALLS = "sum_of_recalls"
METRIC_LOSS = "loss"


@dataclass
class TrainingConfig:
    batch_size: int = 128
    max_epochs: int = 30
    patience: int = 10
    seed: int = 0
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    selection_metric: str = METRIC_SUM_OF_RECALLS
    grad_clip: float = 0.0
    log_timing: bool = True

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.selection_metric not in (METRIC_SUM_OF_RECALLS, METRIC_LOSS):
            raise ConfigError(f"unknown selection metric '{self.selection_metric}'")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    score: float
    seconds: float


@dataclass
class TrainingHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    plan_counts: dict[str, int] = field(default_factory=lambda: {
        "multimodal": 0, "multilingual": 0,
    })
    best_epoch: int = 0
    best_score: float = float("-inf")

    def log_lines(self) -> list[str]:
        return [
            json.dumps({"epoch": r.epoch, "loss": r.loss, "score": r.score,
                        "seconds": r.seconds}, sort_keys=True)
            for r in self.epochs
        ]

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.log_lines():
                fh.write(line + "\n")


def validation_score(model: MlmmeModel, instances, metric: str,
                     seed: int = 0) -> float:
    """Model-selection score; higher is better for both metrics.

    sum_of_recalls: r@1 + r@5 + r@10 over both retrieval directions and all
    languages. loss: negative mean joint loss under a fixed contrastive
    plan (dropout off), so epochs are comparable.
    """
    if not instances:
        raise ValueError("validation set is empty")
    if metric == METRIC_SUM_OF_RECALLS:
        total = 0.0
        for lang in model.language_ids:
            for direction in (SENTENCE_TO_IMAGE, IMAGE_TO_SENTENCE):
                report = rank_cross_modal(model, instances, direction, lang)
                total += sum(report.r_at.values())
        return total
    if metric == METRIC_LOSS:
        directions = plan_directions(model.language_ids, model.config.beta < 1.0)
        plan = sample_contrastive(len(instances),
                                  model.config.negatives_per_instance,
                                  0, seed, directions)
        result = joint_loss(model, instances, np.arange(len(instances)), plan,
                            training=False)
        return -result.total / len(instances)
    raise ConfigError(f"unknown selection metric '{metric}'")


def train(model: MlmmeModel, dataset, validation, config: TrainingConfig):
    """Train in place; returns (best model snapshot, history).

    Per epoch: resample the contrastive plan, shuffle deterministically,
    sum per-instance gradients over each minibatch, take one Adam step per
    parameter group, then score the validation set and keep the best
    checkpoint. Stops at max_epochs or when patience epochs pass without
    improvement.
    """
    config.validate()
    if not dataset:
        raise ValueError("training set is empty")
    if config.selection_metric == METRIC_SUM_OF_RECALLS and not validation:
        raise ConfigError("sum_of_recalls selection needs a validation set")
    if not validation:
        raise ConfigError("validation set is empty")

    n = len(dataset)
    params = model.parameters()
    states = {
        name: AdamState.for_param(
            p, learning_rate=config.learning_rate, beta1=config.beta1,
            beta2=config.beta2, epsilon=config.epsilon,
        )
        for name, p in params.items()
    }

    include_multilingual = model.config.beta < 1.0
    include_multimodal = model.config.beta > 0.0
    directions = plan_directions(model.language_ids, include_multilingual)
    if not include_multimodal:
        directions = [d for d in directions if d.startswith("sentence_pair:")]

    history = TrainingHistory()
    best_model = None
    since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        plan = sample_contrastive(n, model.config.negatives_per_instance,
                                  epoch, config.seed, directions)
        if include_multimodal:
            history.plan_counts["multimodal"] += 1
        if include_multilingual:
            history.plan_counts["multilingual"] += 1

        order = rng_stream(config.seed, "shuffle", epoch).permutation(n)
        dropout_rng = rng_stream(config.seed, "dropout", epoch)
        epoch_loss = 0.0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            batch = order[lo:lo + config.batch_size]
            try:
                result = joint_loss(model, dataset, batch, plan,
                                    training=True, rng=dropout_rng)
            except NumericalError as exc:
                raise NumericalError(
                    f"epoch {epoch}, batch {b}: {exc}"
                ) from exc
            epoch_loss += result.total
            if config.grad_clip > 0:
                clip_global_norm(result.grads, config.grad_clip)
            for name in sorted(params):
                adam_step(params[name], result.grads[name], states[name])
                if name.endswith(".emb"):
                    params[name][0] = 0.0  # padding row stays exactly zero

        score = validation_score(model, validation, config.selection_metric,
                                 seed=config.seed)
        seconds = time.perf_counter() - start if config.log_timing else 0.0
        history.epochs.append(EpochRecord(epoch, epoch_loss / n, score, seconds))

        if score > history.best_score:
            history.best_score = score
            history.best_epoch = epoch
            best_model = copy.deepcopy(model)
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    return best_model, history
