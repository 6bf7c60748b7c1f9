"""Training one individual and measuring its fitness."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as data_lib
from .backend import Network, OptimizerState, WeightBundle, initialize_slots, sgd_momentum_step
from .backend import ops
from .backend.optim import MOMENTUM
from .compiler import CompiledModel

DEFAULT_STEPS = 256
DEFAULT_BATCH_SIZE = 50


class QuarantineError(RuntimeError):
    """Raised when the test split reaches a code path that selects individuals."""


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = DEFAULT_STEPS
    batch_size: int = DEFAULT_BATCH_SIZE
    momentum: float = MOMENTUM
    augment: bool = True
    augment_pad: int = 4

    def __post_init__(self):
        if self.steps < 0 or self.batch_size <= 0 or self.augment_pad < 0:
            raise ValueError("steps, batch_size and augment_pad must be non-negative "
                             "(batch_size positive)")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    def validation_batches(self, validation_examples: int) -> int:
        return math.ceil(validation_examples / self.batch_size)


@dataclass(frozen=True)
class Fitness:
    validation_accuracy: float

    def __post_init__(self):
        if not 0.0 <= self.validation_accuracy <= 1.0:
            raise ValueError("accuracy must be in [0, 1]")


UNTRAINABLE = Fitness(0.0)


@dataclass
class TrainResult:
    weights: WeightBundle
    fitness: Fitness
    final_loss: float
    steps: int
    seconds: float
    inherited: list[str] = field(default_factory=list)
    failure: str | None = None


def inherit_weights(parent: WeightBundle | None, child_model: CompiledModel) -> WeightBundle:
    """Copies of the parent tensors whose id and shape both match a child slot."""
    if not parent:
        return {}
    out: WeightBundle = {}
    for name, spec in child_model.slots.items():
        w = parent.get(name)
        if w is not None and tuple(w.shape) == spec.shape:
            out[name] = np.array(w, dtype=np.float32, copy=True)
    return out


def _batch_indices(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    """Shuffled epochs, cut into batches; an epoch boundary may fall inside a batch."""
    pool = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        while len(pool) < batch_size:
            pool = np.concatenate([pool, rng.permutation(n)])
        yield pool[:batch_size]
        pool = pool[batch_size:]


def train_individual(model: CompiledModel, inherited: WeightBundle | None,
                     dataset: data_lib.Dataset, config: TrainingConfig,
                     rng: np.random.Generator) -> TrainResult:
    """Run ``config.steps`` SGD steps then score the validation split.

    Slots missing from ``inherited`` are freshly initialized. A non-finite loss
    marks the individual untrainable, with fitness 0.
    """
    if dataset.train.name != data_lib.TRAIN or dataset.validation.name != data_lib.VALIDATION:
        raise QuarantineError("training requires the train and validation splits")
    start = time.perf_counter()
    inherited = dict(inherited or {})
    fresh = [name for name in model.slots if name not in inherited]
    weights = {**inherited, **initialize_slots(model, rng, fresh)}
    net = Network(model, weights)
    state = OptimizerState(momentum=config.momentum, weight_decay=model.weight_decay_rate)
    decay = {name for name, spec in model.slots.items() if spec.decay}
    trainable = set(model.trainable_slots())
    train = dataset.train
    loss = float("nan")
    for step, idx in enumerate(_batch_indices(len(train), config.batch_size, config.steps, rng)):
        x = train.images[idx]
        if config.augment:
            x = data_lib.augment(x, rng, config.augment_pad)
        logits = net.forward(x, training=True)
        loss, dlogits = ops.softmax_cross_entropy(logits, train.labels[idx])
        if not math.isfinite(loss):
            return TrainResult(weights, UNTRAINABLE, loss, step + 1,
                               time.perf_counter() - start, sorted(inherited),
                               failure="non-finite loss")
        grads = net.backward(dlogits)
        sgd_momentum_step(weights, {k: g for k, g in grads.items() if k in trainable},
                          state, model.learning_rate, decay)
    accuracy = evaluate(model, weights, dataset.validation, config.batch_size)
    if not math.isfinite(accuracy):
        accuracy = 0.0
    return TrainResult(weights, Fitness(accuracy), loss, config.steps,
                       time.perf_counter() - start, sorted(inherited))


def evaluate(model: CompiledModel, weights: WeightBundle, split: data_lib.Split,
             batch_size: int = DEFAULT_BATCH_SIZE) -> float:
    """Top-1 accuracy over every example of ``split``, without augmentation."""
    if split.name not in (data_lib.VALIDATION, data_lib.TEST):
        raise ValueError(f"evaluate takes the validation or test split, not {split.name!r}")
    if len(split) == 0:
        return 0.0
    net = Network(model, weights)
    correct = 0
    with np.errstate(all="ignore"):
        for x, y in data_lib.batches(split, batch_size):
            logits = net.forward(x, training=False)
            if not np.all(np.isfinite(logits)):
                continue
            hits, _ = ops.predict_correct(logits, y)
            correct += hits
    return correct / len(split)


def predict(model: CompiledModel, weights: WeightBundle, images: np.ndarray,
            batch_size: int = DEFAULT_BATCH_SIZE) -> np.ndarray:
    """Top-1 class predictions, used for ensembling."""
    return Network(model, weights).predict(images, batch_size)
