"""Loss, Adam, the warmup + cosine schedule and the training / evaluation loops."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from dataclasses_json import dataclass_json

from lrlc_core.errors import ConfigurationError, DataError, NonFiniteError
from lrlc_core.network import Network, build_network
from lrlc_core.specs import ModelSpec
from lrlc_core.tensor_ops import Tensor, current_mode

from .checkpoints import Checkpoint, load_checkpoint, restore_network, save_checkpoint
from .config import TrainingConfig
from .datasets import DatasetSplit

logger = logging.getLogger(__name__)

BEST_DIR = "best"


def cross_entropy(logits: Tensor, labels: np.ndarray):
    """Mean negative log-likelihood and its gradient with respect to the logits."""

    n, classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DataError(f"cross_entropy: {labels.shape} labels for {n} logits")
    if n and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"cross_entropy: labels must lie in 0..{classes - 1}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / n


@dataclass
class AdamState:
    peak_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: TrainingConfig) -> "AdamState":
        return cls(peak_rate=config.peak_rate, beta1=config.beta1, beta2=config.beta2, epsilon=config.epsilon)


def adam_step(
    state: AdamState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], rate: float
) -> AdamState:
    """Bias-corrected Adam; parameters are updated in place. Non-finite gradients abort before any change."""

    if set(params) != set(grads):
        raise ConfigurationError(f"adam_step: parameter and gradient names differ: {sorted(set(params) ^ set(grads))}")
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise ConfigurationError(f"adam_step: {name} gradient {grad.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"adam_step: gradient of {name} is not finite")
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, param in params.items():
        grad = grads[name]
        first = state.first.setdefault(name, np.zeros_like(param))
        second = state.second.setdefault(name, np.zeros_like(param))
        first *= state.beta1
        first += (1.0 - state.beta1) * grad
        second *= state.beta2
        second += (1.0 - state.beta2) * np.square(grad)
        param -= (rate * (first / correction1) / (np.sqrt(second / correction2) + state.epsilon)).astype(param.dtype)
    return state


@dataclass
class Schedule:
    total_epochs: int
    warmup_epochs: int
    peak_rate: float
    steps_per_epoch: int

    def __post_init__(self) -> None:
        if self.total_epochs > 0 and self.warmup_epochs >= self.total_epochs:
            raise ConfigurationError(
                f"warmup of {self.warmup_epochs} epoch(s) leaves no decay within {self.total_epochs} epoch(s)"
            )

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return min(self.warmup_epochs, self.total_epochs) * self.steps_per_epoch


def schedule_rate(schedule: Schedule, step: int) -> float:
    """Linear warmup from 0 to the peak, then cosine decay reaching 0 at the final step."""

    warmup = schedule.warmup_steps
    if step < warmup:
        return schedule.peak_rate * step / warmup
    decay_steps = schedule.total_steps - 1 - warmup
    if decay_steps <= 0:
        return 0.0
    progress = min(1.0, (step - warmup) / decay_steps)
    return schedule.peak_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass_json
@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    top1: float
    lr: float
    seconds: float


@dataclass
class Evaluation:
    loss: float
    top1: float


@dataclass
class TrainRun:
    """Network, optimizer state and history of one training run."""

    spec: ModelSpec
    seed: int
    config: TrainingConfig
    network: Network
    optimizer: AdamState
    history: List[EpochMetrics] = field(default_factory=list)
    checkpoint_dir: Optional[Path] = None
    epoch: int = 0
    best_valid_top1: float = -1.0
    best_epoch: int = -1
    best_state: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(
        cls, spec: ModelSpec, seed: int, config: TrainingConfig, checkpoint_dir: Optional[Path] = None
    ) -> "TrainRun":
        network = build_network(spec, np.random.default_rng(seed))
        return cls(
            spec=spec,
            seed=seed,
            config=config,
            network=network,
            optimizer=AdamState.from_config(config),
            checkpoint_dir=checkpoint_dir,
        )

    @classmethod
    def resume(cls, checkpoint_dir: Path, config: TrainingConfig) -> "TrainRun":
        """Restore parameters, running statistics, Adam moments and progress from a checkpoint."""

        checkpoint = load_checkpoint(checkpoint_dir)
        optimizer = AdamState.from_config(config)
        optimizer.step = checkpoint.optimizer_step
        optimizer.first = checkpoint.moments.get("m", {})
        optimizer.second = checkpoint.moments.get("v", {})
        metadata = checkpoint.metadata
        run = cls(
            spec=checkpoint.spec,
            seed=int(metadata.get("seed", 0)),
            config=config,
            network=restore_network(checkpoint),
            optimizer=optimizer,
            history=[EpochMetrics.from_dict(row) for row in metadata.get("history", [])],
            checkpoint_dir=Path(checkpoint_dir),
            epoch=checkpoint.epoch,
            best_valid_top1=float(metadata.get("best_valid_top1", -1.0)),
            best_epoch=int(metadata.get("best_epoch", -1)),
        )
        best_dir = Path(checkpoint_dir) / BEST_DIR
        if (best_dir / "manifest.json").exists():
            run.best_state = load_checkpoint(best_dir).state
        logger.info("Resumed run at epoch %d (step %d) from %s", run.epoch, optimizer.step, checkpoint_dir)
        return run

    def checkpoint(self) -> Checkpoint:
        metadata = {
            "seed": self.seed,
            "history": [row.to_dict() for row in self.history],
            "best_valid_top1": self.best_valid_top1,
            "best_epoch": self.best_epoch,
        }
        return Checkpoint.from_network(
            self.network,
            moments={"m": self.optimizer.first, "v": self.optimizer.second},
            optimizer_step=self.optimizer.step,
            epoch=self.epoch,
            metadata=metadata,
        )


def evaluate(network: Network, split: DatasetSplit, *, batch_size: int = 256) -> Evaluation:
    """Inference-mode loss and top-1 accuracy over a whole split."""

    if len(split) == 0:
        return Evaluation(loss=0.0, top1=0.0)
    total_loss = 0.0
    correct = 0
    for start in range(0, len(split), batch_size):
        images = split.images[start : start + batch_size]
        labels = split.labels[start : start + batch_size]
        logits = network.forward(images, training=False)
        loss, _ = cross_entropy(logits, labels)
        total_loss += loss * len(labels)
        correct += int((np.argmax(logits, axis=1) == labels).sum())
    return Evaluation(loss=total_loss / len(split), top1=correct / len(split))


def predict(network: Network, images: Tensor, *, batch_size: int = 256) -> np.ndarray:
    return network.predict(images, batch_size=batch_size)


def _epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(count)


def train(
    run: TrainRun,
    train_split: DatasetSplit,
    valid_split: DatasetSplit,
    *,
    on_epoch: Optional[Callable[[TrainRun], None]] = None,
) -> TrainRun:
    """Shuffled minibatch Adam with drop-last batching; metrics and a checkpoint after every epoch."""

    config = run.config
    steps_per_epoch = len(train_split) // config.batch_size
    if config.epochs > 0 and steps_per_epoch == 0:
        raise ConfigurationError(
            f"batch size {config.batch_size} exceeds the {len(train_split)} training examples"
        )
    schedule = Schedule(config.epochs, config.warmup_epochs, config.peak_rate, steps_per_epoch)
    frozen_clock = current_mode().test_mode
    for epoch in range(run.epoch, config.epochs):
        started = time.perf_counter()
        order = _epoch_order(run.seed, epoch, len(train_split))
        loss_sum, correct, seen, rate = 0.0, 0, 0, 0.0
        for batch in range(steps_per_epoch):
            indices = order[batch * config.batch_size : (batch + 1) * config.batch_size]
            labels = train_split.labels[indices]
            rate = schedule_rate(schedule, epoch * steps_per_epoch + batch)
            logits = run.network.forward(train_split.images[indices], training=True)
            loss, grad = cross_entropy(logits, labels)
            run.network.backward(grad)
            adam_step(run.optimizer, run.network.parameters(), run.network.gradients(), rate)
            loss_sum += loss * len(indices)
            correct += int((np.argmax(logits, axis=1) == labels).sum())
            seen += len(indices)
            logger.debug("epoch %d batch %d loss %.4f lr %.5f", epoch, batch, loss, rate)
        validation = evaluate(run.network, valid_split)
        seconds = 0.0 if frozen_clock else time.perf_counter() - started
        run.history.append(EpochMetrics(epoch, "train", loss_sum / max(seen, 1), correct / max(seen, 1), rate, seconds))
        run.history.append(EpochMetrics(epoch, "validation", validation.loss, validation.top1, rate, seconds))
        run.epoch = epoch + 1
        improved = validation.top1 > run.best_valid_top1
        if improved:
            run.best_valid_top1 = validation.top1
            run.best_epoch = epoch
            run.best_state = {key: value.copy() for key, value in run.network.state().items()}
        logger.info(
            "epoch %d/%d train loss %.4f top1 %.4f | validation top1 %.4f",
            epoch + 1,
            config.epochs,
            run.history[-2].loss,
            run.history[-2].top1,
            validation.top1,
        )
        if run.checkpoint_dir is not None:
            snapshot = run.checkpoint()
            save_checkpoint(run.checkpoint_dir, snapshot)
            if improved:
                save_checkpoint(run.checkpoint_dir / BEST_DIR, snapshot)
        if on_epoch is not None:
            on_epoch(run)
    return run
