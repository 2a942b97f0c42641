"""Adam and the mini-batch training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .formats import Dataset, load_weights, save_weights
from .head import assign_targets, yolo_loss
from .model import Detector, load_state, state_arrays
from .tensor import GradientTape, ShapeError, Tensor, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3
    batch_size: int = 8
    epochs: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 disables
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.checkpoint_every < 0:
            raise ValueError("epochs and checkpoint_every must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")

    @classmethod
    def paper(cls, dataset: str = "ffu") -> "TrainConfig":
        """Published recipe: Adam, lr 1e-5, batch 8; 100 epochs (FFU) or 150 (small cells)."""
        epochs = {"ffu": 100, "small_cell": 150}[dataset]
        return cls(learning_rate=1e-5, batch_size=8, epochs=epochs)

    @classmethod
    def desk(cls) -> "TrainConfig":
        return cls()


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(t.data) for k, t in params.items()},
                   {k: np.zeros_like(t.data) for k, t in params.items()})


class NonFiniteLoss(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


def adam_step(params: dict, grads: dict, state: OptimizerState, config: TrainConfig):
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if state.m[name].shape != p.shape:
            raise ShapeError(f"optimizer state for {name} does not match parameter shape {p.shape}")
    state.step += 1
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.epsilon
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass
class TrainResult:
    detector: Detector
    history: list = field(default_factory=list)  # mean loss per epoch (float32 values)
    state: Optional[OptimizerState] = None


def _checkpoint_entries(state: OptimizerState, epoch: int, history: list) -> dict:
    out = {"train.epoch": np.float32(epoch), "adam.step": np.float32(state.step),
           "train.loss_history": np.asarray(history, np.float32)}
    for k in state.m:
        out[f"adam.m.{k}"] = state.m[k]
        out[f"adam.v.{k}"] = state.v[k]
    return out


def save_checkpoint(path, detector: Detector, state: OptimizerState, epoch: int, history: list) -> None:
    save_weights(path, state_arrays(detector), _checkpoint_entries(state, epoch, history))


def load_checkpoint(path, detector: Detector):
    """Restore weights in place; return (optimizer state, completed epochs, history)."""
    params, opts = load_weights(path)
    if opts is None:
        raise ValueError(f"{path} holds weights only, no optimizer state to resume from")
    load_state(detector, params)
    trainable = detector.parameters()
    state = OptimizerState(
        {k: opts[f"adam.m.{k}"].copy() for k in trainable},
        {k: opts[f"adam.v.{k}"].copy() for k in trainable},
        int(opts["adam.step"]),
    )
    return state, int(opts["train.epoch"]), [np.float32(x) for x in opts["train.loss_history"]]


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_loop(detector: Detector, dataset: Dataset, config: TrainConfig,
               checkpoint_dir=None, resume=None,
               on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Seeded-shuffle mini-batch training with Adam.

    Every epoch draws its order from ``(seed, epoch)``, so a run resumed from
    an epoch checkpoint follows the uninterrupted trajectory exactly.
    Raises :class:`NonFiniteLoss` on a NaN or infinite batch loss.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    params = detector.parameters()
    dtype = detector.head.weight.dtype
    if resume is not None:
        state, start, history = load_checkpoint(resume, detector)
    else:
        state, start, history = OptimizerState.zeros(params), 0, []
    anchors, grid = detector.anchors, detector.config.grid
    n = len(dataset)
    for epoch in range(start, config.epochs):
        order = epoch_order(config.seed, epoch, n)
        losses = []
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            x = Tensor(dataset.images[idx].astype(dtype, copy=False))
            targets = assign_targets([dataset.gts[i] for i in idx], anchors, grid)
            with GradientTape() as tape:
                raw = detector.forward(x, training=True)
                loss = yolo_loss(raw, targets, anchors, config.lambda_coord, config.lambda_noobj)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(epoch, b, value)
            grads = backward(tape, loss)
            adam_step(params, {k: grads[t] for k, t in params.items() if t in grads}, state, config)
            losses.append(value)
        mean = np.float32(np.mean(losses))
        history.append(mean)
        log.info("epoch %d/%d loss %.6f", epoch + 1, config.epochs, mean)
        if on_epoch is not None:
            on_epoch(epoch + 1, float(mean))
        if checkpoint_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            d = Path(checkpoint_dir)
            d.mkdir(parents=True, exist_ok=True)
            save_checkpoint(d / f"epoch_{epoch + 1:04d}.foci", detector, state, epoch + 1, history)
    return TrainResult(detector, history, state)
