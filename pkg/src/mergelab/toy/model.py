"""A small tanh MLP with hand-written backprop, stored as a Checkpoint."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ..checkpoint import Checkpoint
from ..errors import ArgumentError, TrainingError

DEFAULT_HIDDEN = (64, 64)
_F32_MAX = float(np.finfo(np.float32).max)


@dataclass(frozen=True)
class ToyModel:
    sizes: tuple[int, ...]
    params: Checkpoint

    def __post_init__(self):
        expected = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            expected[f"layer_{i}.w"] = (fan_in, fan_out)
            expected[f"layer_{i}.b"] = (fan_out,)
        got = {n: t.shape for n, t in self.params.items()}
        if got != expected:
            raise ArgumentError(f"parameters do not match layer sizes {self.sizes}")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_classes(self) -> int:
        return self.sizes[-1]

    def arrays(self) -> dict[str, np.ndarray]:
        """Writable float64 copies of the parameters."""
        return {n: t.astype(np.float64) for n, t in self.params.items()}

    @classmethod
    def from_arrays(cls, sizes: Sequence[int], arrays: dict[str, np.ndarray], metadata=None) -> "ToyModel":
        return cls(tuple(sizes), Checkpoint(arrays, metadata))


def init_model(sizes: Sequence[int], seed: int, gain: float = 1.0) -> ToyModel:
    """Gaussian weights with std gain/sqrt(fan_in), zero biases."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ArgumentError(f"bad layer sizes {sizes}")
    rng = np.random.default_rng(seed)
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        arrays[f"layer_{i}.w"] = gain * rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        arrays[f"layer_{i}.b"] = np.zeros(fan_out)
    return ToyModel.from_arrays(sizes, arrays, {"init_seed": str(seed)})


def _forward(params: dict[str, np.ndarray], x: np.ndarray, n_layers: int) -> tuple[np.ndarray, list[np.ndarray]]:
    acts = []
    h = x
    for i in range(n_layers):
        z = h @ params[f"layer_{i}.w"] + params[f"layer_{i}.b"]
        if i == n_layers - 1:
            return z, acts
        h = np.tanh(z)
        acts.append(h)
    raise AssertionError("unreachable")


def forward(model: ToyModel, batch: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits and post-tanh activations of every hidden layer, shallow to deep."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.sizes[0]:
        raise ArgumentError(f"batch must have shape (n, {model.sizes[0]}), got {x.shape}")
    return _forward(model.arrays(), x, model.n_layers)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(y)), y]))


def loss_and_grads(params: dict[str, np.ndarray], x: np.ndarray, y: np.ndarray, n_layers: int) -> tuple[float, dict[str, np.ndarray]]:
    """Mean softmax cross-entropy and its gradient w.r.t. every parameter."""
    hs = [x]
    h = x
    for i in range(n_layers - 1):
        h = np.tanh(h @ params[f"layer_{i}.w"] + params[f"layer_{i}.b"])
        hs.append(h)
    logits = h @ params[f"layer_{n_layers - 1}.w"] + params[f"layer_{n_layers - 1}.b"]
    loss = cross_entropy(logits, y)

    n = x.shape[0]
    delta = softmax(logits)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = {}
    for i in range(n_layers - 1, -1, -1):
        grads[f"layer_{i}.w"] = hs[i].T @ delta
        grads[f"layer_{i}.b"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params[f"layer_{i}.w"].T) * (1.0 - hs[i] ** 2)
    return loss, grads


@dataclass(frozen=True)
class TrainResult:
    model: ToyModel
    losses: tuple[float, ...]  # full-train-set loss before training and after each epoch


def train(
    model: ToyModel,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
) -> TrainResult:
    """Plain minibatch SGD on softmax cross-entropy."""
    if lr < 0 or not np.isfinite(lr):
        raise ArgumentError(f"lr must be a finite non-negative number, got {lr}")
    if epochs < 0 or batch_size < 1:
        raise ArgumentError("epochs must be >= 0 and batch_size >= 1")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if lr == 0 or epochs == 0:
        params = model.arrays()
        return TrainResult(model, (cross_entropy(_forward(params, x, model.n_layers)[0], y),))
    params = model.arrays()
    rng = np.random.default_rng(seed)
    losses = [cross_entropy(_forward(params, x, model.n_layers)[0], y)]
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            loss, grads = loss_and_grads(params, x[idx], y[idx], model.n_layers)
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite in epoch {epoch}")
            for k, g in grads.items():
                params[k] -= lr * g
        epoch_loss = cross_entropy(_forward(params, x, model.n_layers)[0], y)
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"loss became non-finite after epoch {epoch}")
        if any(np.abs(p).max() > _F32_MAX for p in params.values()):
            raise TrainingError(f"parameters overflowed float32 after epoch {epoch}")
        losses.append(epoch_loss)
    return TrainResult(ToyModel.from_arrays(model.sizes, params, model.params.metadata), tuple(losses))


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    scores: np.ndarray  # per-item 0/1 correctness


def evaluate(model: ToyModel, x: np.ndarray, y: np.ndarray) -> EvalResult:
    x = np.asarray(x)
    y = np.asarray(y)
    if len(x) == 0:
        raise ArgumentError("cannot evaluate on an empty set")
    if len(x) != len(y):
        raise ArgumentError("inputs and labels differ in length")
    logits, _ = forward(model, x)
    scores = (np.argmax(logits, axis=1) == y).astype(np.float64)
    return EvalResult(float(scores.mean()), scores)
