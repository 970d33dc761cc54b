"""Synthetic disk-vs-square task and a small training loop for the micro model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .autodiff import OptimState, backward, cross_entropy, optimizer_step
from .backbone import MICRO, HGpeModel, ModelConfig, build_model
from .tensor import GradTape, Tensor


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step


def make_shapes_dataset(n: int = 512, size: int = 32, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Bright disk (label 0) or bright axis-aligned square (label 1) on a dark field.

    Squares get the same area as the disk they would replace, so mean
    brightness carries no label information. Returns normalized N x 3 x H x W
    images and int labels, balanced between classes.
    """
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    images = np.empty((n, 3, size, size))
    for i, label in enumerate(labels):
        r = rng.uniform(0.15, 0.3) * size
        cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
        if label == 0:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            half = r * np.sqrt(np.pi) / 2
            mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        img = 0.1 + 0.05 * rng.standard_normal((size, size))
        img[mask] = 0.9 + 0.05 * rng.standard_normal(int(mask.sum()))
        images[i] = (np.clip(img, 0.0, 1.0) - 0.5) / 0.5
    return images, labels


@dataclass
class TrainResult:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    final_accuracy: float = 0.0
    model: HGpeModel | None = None

    def moving_average(self, window: int = 20) -> np.ndarray:
        losses = np.asarray(self.losses)
        if len(losses) < window:
            return np.empty(0)
        return np.convolve(losses, np.ones(window) / window, mode="valid")


def evaluate(model: HGpeModel, images: np.ndarray, labels: np.ndarray, batch_size: int = 128) -> float:
    correct = 0
    for lo in range(0, len(labels), batch_size):
        logits = model.forward(Tensor(images[lo:lo + batch_size]), "infer").data
        correct += int((logits.argmax(axis=1) == labels[lo:lo + batch_size]).sum())
    return correct / len(labels)


def train_toy(cfg: ModelConfig = MICRO, steps: int = 300, seed: int = 0, lr: float = 1e-3,
              batch_size: int | None = None, n_train: int = 512, optimizer: str = "adamw",
              weight_decay: float = 0.01, log: TextIO | Callable[[str], None] | None = None,
              ) -> TrainResult:
    """Train ``cfg`` on the synthetic task; final accuracy is over the full train set.

    ``batch_size=None`` trains full-batch. That is the default because the
    loss curve is then smooth enough for its moving average to be monotone;
    minibatch noise makes it wobble.
    """
    if cfg.num_classes != 2:
        cfg = cfg.replace(num_classes=2)
    images, labels = make_shapes_dataset(n_train, cfg.input_size[0], seed)
    batch_size = n_train if batch_size is None else batch_size
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    model = build_model(cfg, seed)
    params = model.params
    state = OptimState(kind=optimizer, lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed + 1)
    order = np.empty(0, dtype=np.int64)
    result = TrainResult(model=model)
    emit = log.write if hasattr(log, "write") else log

    for step in range(steps):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(n_train)])
        idx, order = order[:batch_size], order[batch_size:]
        x, y = Tensor(images[idx]), labels[idx]
        with GradTape() as tape:
            logits = model.forward(x, "train")
            loss = cross_entropy(logits, y)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(step, value)
        grads = backward(tape, loss, params)
        optimizer_step(params, grads, state)
        acc = float((logits.data.argmax(axis=1) == y).mean())
        result.steps.append(step)
        result.losses.append(value)
        result.accuracies.append(acc)
        if emit is not None:
            emit(f"{step} {value:.17g} {acc:.17g}\n")

    result.final_accuracy = evaluate(model, images, labels)
    return result
