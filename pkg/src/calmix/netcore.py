"""Small dense ReLU network with hand-written backprop and momentum SGD.

Everything is float64 numpy. The forward pass optionally applies a rank-one
multiplicative perturbation per layer, which is how BatchEnsemble members are
evaluated without materialising their weight matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EPS = 1e-12


class ShapeError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass
class PredictionBatch:
    """Per-example class probabilities, with the logits they came from when known."""

    probs: np.ndarray
    logits: np.ndarray | None = None

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    @property
    def confidence(self) -> np.ndarray:
        return np.max(self.probs, axis=1)

    def __len__(self) -> int:
        return self.probs.shape[0]


@dataclass
class DenseNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout_rate: float = 0.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} does not match bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} expects {w.shape[1]} inputs, previous layer gives "
                                 f"{self.weights[i - 1].shape[0]}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "DenseNet":
        return DenseNet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.dropout_rate)


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    # rank-one factor gradients, present only for perturbed forwards
    r: list[np.ndarray] | None = None
    s: list[np.ndarray] | None = None


@dataclass
class TrainConfig:
    epochs: int = 200
    base_lr: float = 0.03
    lr_decay_ratio: float = 0.1
    lr_decay_epochs: list[int] = field(default_factory=lambda: [80, 160])
    momentum: float = 0.9
    l2: float = 1e-4
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.lr_decay_epochs = [int(e) for e in self.lr_decay_epochs]
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 so Mixup has partners")
        d = self.lr_decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError("lr_decay_epochs must be strictly increasing")
        if d and d[-1] >= self.epochs:
            raise ValueError("lr_decay_epochs must all be < epochs")

    def lr(self, epoch: int) -> float:
        passed = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.base_lr * self.lr_decay_ratio ** passed


def init_net(sizes: Sequence[int], rng: np.random.Generator, dropout_rate: float = 0.0) -> DenseNet:
    """He-normal weights, zero biases. ``sizes`` is (d_in, hidden..., n_classes)."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNet(weights, biases, dropout_rate)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_input(net: DenseNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.weights[0].shape[1]:
        raise ShapeError(f"input of shape {x.shape} does not fit a net expecting "
                         f"{net.weights[0].shape[1]} features")
    if not np.all(np.isfinite(x)):
        raise InputError("input contains non-finite values")
    return x


def _forward(net, x, dropout_rng=None, rank_one=None):
    """Return (logits, cache). ``dropout_rng`` set means masks are sampled."""
    n_layers = len(net.weights)
    cache = {"inputs": [], "pre": [], "masks": [], "rank_one": rank_one}
    h = x
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        cache["inputs"].append(h)
        if rank_one is None:
            z = h @ w.T + b
        else:
            r, s = rank_one[i]
            z = ((h * s) @ w.T) * r + b
        if i == n_layers - 1:
            return z, cache
        cache["pre"].append(z)
        h = np.maximum(z, 0.0)
        mask = None
        if dropout_rng is not None and net.dropout_rate > 0:
            keep = 1.0 - net.dropout_rate
            mask = (dropout_rng.random(h.shape) < keep) / keep
            h = h * mask
        cache["masks"].append(mask)
    raise AssertionError("unreachable")


def forward(net: DenseNet, x, mode: str = "eval", rng: np.random.Generator | None = None,
            rank_one=None) -> PredictionBatch:
    """Run the network.

    ``mode`` is ``"train"`` (dropout on), ``"eval"`` (dropout off) or ``"mc"``
    (evaluation with dropout masks sampled, as MC-Dropout prediction needs).
    """
    if mode not in ("train", "eval", "mc"):
        raise ValueError(f"unknown mode {mode!r}")
    x = _check_input(net, x)
    sample = mode in ("train", "mc") and net.dropout_rate > 0
    if sample and rng is None:
        raise ValueError("dropout sampling needs an rng")
    logits, _ = _forward(net, x, rng if sample else None, rank_one)
    return PredictionBatch(softmax(logits), logits)


def soft_cross_entropy(pred: PredictionBatch | np.ndarray, target: np.ndarray) -> float:
    probs = pred.probs if isinstance(pred, PredictionBatch) else np.asarray(pred)
    target = np.asarray(target, dtype=float)
    if probs.shape != target.shape:
        raise ShapeError(f"prediction {probs.shape} and target {target.shape} differ")
    return float(np.mean(-np.sum(target * np.log(probs + EPS), axis=1)))


def backward(net: DenseNet, x, target, l2: float = 0.0, cache=None, logits=None) -> Gradients:
    """Gradient of mean soft cross-entropy plus (l2/2)*sum ||W||^2.

    Without ``cache`` a dropout-free forward pass is recomputed. Biases and
    rank-one factors are not decayed.
    """
    if cache is None:
        x = _check_input(net, x)
        logits, cache = _forward(net, x)
    target = np.asarray(target, dtype=float)
    p = softmax(logits)
    if p.shape != target.shape:
        raise ShapeError(f"prediction {p.shape} and target {target.shape} differ")
    n = p.shape[0]
    # exact derivative of -sum t log(p + eps) through the softmax
    q = target / (p + EPS)
    dz = (p * np.sum(q * p, axis=1, keepdims=True) - q * p) / n

    rank_one = cache["rank_one"]
    n_layers = len(net.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    gr = [None] * n_layers if rank_one is not None else None
    gs = [None] * n_layers if rank_one is not None else None
    for i in reversed(range(n_layers)):
        w = net.weights[i]
        h = cache["inputs"][i]
        gb[i] = dz.sum(axis=0)
        if rank_one is None:
            gw[i] = dz.T @ h + l2 * w
            dh = dz @ w
        else:
            r, s = rank_one[i]
            u = h * s
            v = u @ w.T
            gr[i] = np.sum(dz * v, axis=0)
            dv = dz * r
            gw[i] = dv.T @ u + l2 * w
            du = dv @ w
            gs[i] = np.sum(du * h, axis=0)
            dh = du * s
        if i == 0:
            break
        mask = cache["masks"][i - 1]
        if mask is not None:
            dh = dh * mask
        dz = dh * (cache["pre"][i - 1] > 0)
    return Gradients(gw, gb, gr, gs)


def loss_and_grads(net: DenseNet, x, target, l2: float = 0.0, rng=None, rank_one=None):
    """Training-mode forward (dropout sampled when ``rng`` given) and backward."""
    x = _check_input(net, x)
    dropout_rng = rng if net.dropout_rate > 0 else None
    logits, cache = _forward(net, x, dropout_rng, rank_one)
    loss = soft_cross_entropy(softmax(logits), target)
    return loss, backward(net, x, target, l2, cache=cache, logits=logits)


class MomentumState:
    """Velocity buffers keyed by parameter identity order."""

    def __init__(self):
        self.velocity: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float, momentum: float):
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.velocity):
            v *= momentum
            v += g
            p -= lr * v


def sgd_step(net: DenseNet, grads: Gradients, config: TrainConfig, epoch: int,
             state: MomentumState | None = None, extra_params=None, extra_grads=None) -> DenseNet:
    """In-place momentum step: v <- mu*v + g; p <- p - lr(epoch)*v.

    ``extra_params``/``extra_grads`` carry non-net parameters (rank-one factors)
    through the same momentum state.
    """
    if epoch >= config.epochs:
        raise ValueError(f"epoch {epoch} is past the configured {config.epochs} epochs")
    state = state if state is not None else MomentumState()
    params = list(net.weights) + list(net.biases) + list(extra_params or [])
    g = list(grads.weights) + list(grads.biases) + list(extra_grads or [])
    state.step(params, g, config.lr(epoch), config.momentum)
    return net


def train_net(net: DenseNet, x, y, config: TrainConfig, shuffle_seed: int,
              dropout_rng: np.random.Generator | None = None) -> list[float]:
    """Plain minibatch training on fixed (soft) targets; returns per-epoch mean loss."""
    x = _check_input(net, x)
    y = np.asarray(y, dtype=float)
    n = len(x)
    state = MomentumState()
    losses = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, g = loss_and_grads(net, x[idx], y[idx], config.l2, dropout_rng)
            sgd_step(net, g, config, epoch, state)
            total += loss * len(idx)
        losses.append(total / n)
    return losses
