"""Shared training configuration and the early-stopping loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .augment import AugmentConfig
from .tinynn import AdamConfig, MiniNet, NonFiniteError, backward

log = logging.getLogger(__name__)

FULL_SCALE_PATIENCE = 10_000


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    adam: AdamConfig = AdamConfig()
    batch_size: int = 4
    max_iterations: int = 2000
    patience_iterations: int = 500
    eval_every: int = 25
    augment: AugmentConfig = AugmentConfig()
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batchnorm needs batch statistics)")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.patience_iterations < self.eval_every:
            raise ValueError("patience_iterations must be >= eval_every")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        if "adam" in doc:
            doc["adam"] = AdamConfig(**doc["adam"])
        if "augment" in doc:
            doc["augment"] = AugmentConfig.from_json(doc["augment"])
        return cls(**doc)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass
class TrainResult:
    net: MiniNet
    best_iteration: int
    best_score: float
    log: list = field(default_factory=list)

    def write_log(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def fit(net: MiniNet, next_batch, evaluate, cfg: TrainConfig, metric="val_kappa",
        log_records=None) -> TrainResult:
    """Adam on cross-entropy with best-checkpoint early stopping.

    ``next_batch(iteration) -> (x, targets)``; ``evaluate(net) -> score``
    (higher is better). Training stops once ``patience_iterations`` pass
    without a strictly better score. The latest checkpoint attaining the best
    score is restored into ``net``, so a saturated metric keeps the most
    trained of its tied checkpoints.
    """
    records = list(log_records or [])
    best_score, best_it, best_state = -math.inf, 0, net.state()
    improved_it = 0
    losses = []
    for it in range(1, cfg.max_iterations + 1):
        x, y = next_batch(it)
        try:
            loss, grads = backward(net, x, y)
        except NonFiniteError as exc:
            raise TrainingError(f"iteration {it}: {exc}") from exc
        net.adam_step(grads, cfg.adam)
        losses.append(loss)
        if it % cfg.eval_every and it != cfg.max_iterations:
            continue
        try:
            score = float(evaluate(net))
        except NonFiniteError as exc:
            raise TrainingError(f"validation at iteration {it}: {exc}") from exc
        rec = {"iteration": it, "loss": float(np.mean(losses)), metric: score}
        records.append(rec)
        log.debug("%s", rec)
        losses = []
        if score > best_score:
            improved_it = it
        if score >= best_score:
            best_score, best_it, best_state = score, it, net.state()
        if it - improved_it >= cfg.patience_iterations:
            records.append({"event": "early_stop", "iteration": it, "best_iteration": best_it})
            break
    net.load_state(best_state)
    return TrainResult(net, best_it, best_score, records)
