import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from .checkpoint import save_checkpoint
from .errors import PretrainingError
from .model_config import ModelConfig, PretrainConfig
from .model_scenario import BaseTask
from .networks import TestDGModel, classify, cross_entropy, logits
from .numerics import Tensor, backward, make_rng, optimizer_step
from .stream import LabeledBatch, sample_source

logger = logging.getLogger(__name__)


@dataclass
class PretrainResult:
    model: TestDGModel
    source_error: float
    passed: bool
    loss_trace: List[float] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None

    @property
    def diagnostic(self) -> str:
        if self.passed:
            return f"source error {self.source_error:.4f}"
        trace = ", ".join(f"{v:.4f}" for v in self.loss_trace)
        return f"source error {self.source_error:.4f} above the bar; epoch losses: [{trace}]"


def holdout_batch(task: BaseTask, n: int) -> LabeledBatch:
    return sample_source(task, n, make_rng(task.seed, "holdout"))


def error_rate(model: TestDGModel, batch: LabeledBatch, amplifier_on: bool = False) -> float:
    with Tensor.no_grad():
        probs = classify(model.encoder, model.features(batch.x, amplifier_on=amplifier_on)).data
    return float(np.mean(probs.argmax(axis=1) != batch.y))


def pretrain_source(task: BaseTask, model_cfg: ModelConfig, cfg: PretrainConfig, seed: int = 0,
                    output_path: Optional[Union[str, Path]] = None) -> PretrainResult:
    """Fit encoder and head on clean source data by supervised cross-entropy."""
    if model_cfg.input_dim != task.dim or model_cfg.num_classes != task.num_classes:
        raise PretrainingError(
            f"model shape ({model_cfg.input_dim} -> {model_cfg.num_classes}) does not match "
            f"task ({task.dim} -> {task.num_classes})")
    model = TestDGModel.init(model_cfg, seed)
    rng = make_rng(seed, "pretrain")
    train = sample_source(task, cfg.train_size, make_rng(seed, "pretrain-data"))
    params = model.encoder.params
    trace: List[float] = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(cfg.train_size)
        losses = []
        try:
            for start in range(0, cfg.train_size, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                params.zero_grad()
                out = logits(model.encoder, model.features(train.x[idx], amplifier_on=False))
                loss = cross_entropy(out, train.y[idx], model_cfg.num_classes)
                backward(loss)
                optimizer_step(params, cfg.lr, "adaptive-moment")
                losses.append(loss.item())
        except ArithmeticError as e:
            raise PretrainingError(f"pretraining diverged in epoch {epoch}: {e}", trace) from e
        trace.append(float(np.mean(losses)))
        logger.info("pretrain epoch %d/%d: loss %.4f", epoch + 1, cfg.epochs, trace[-1])

    params.reset_optimizer()
    model.reset_teacher()
    source_error = error_rate(model, holdout_batch(task, cfg.holdout_size))
    passed = source_error <= cfg.max_source_error
    if not passed:
        logger.warning("source error %.4f exceeds %.4f", source_error, cfg.max_source_error)
    result = PretrainResult(model, source_error, passed, trace)
    if output_path is not None:
        result.checkpoint_path = save_checkpoint(model, output_path, task, seed, source_error)
    return result
