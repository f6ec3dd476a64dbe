"""Softmax cross-entropy, momentum SGD and the epoch loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..patch import TrainingSet, to_network_input
from .network import Network

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 15
    dropout_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning rate, momentum and weight decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be positive")
        if not 0 <= self.dropout_ratio < 1:
            raise ValueError("dropout ratio must be in [0, 1)")


def softmax(scores):
    s = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def loss_softmax_xent(scores, labels):
    """Mean negative log-likelihood of ``labels``; returns ``(loss, d loss / d scores)``."""
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = scores.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError("label out of range")
    shifted = scores - scores.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(n), labels] - logsum
    loss = -logp.mean()
    grad = np.exp(shifted - logsum[:, None])
    grad[np.arange(n), labels] -= 1
    return float(loss), (grad / n).astype(scores.dtype)


class SGD:
    """Momentum SGD; the buffer lives here so a Network stays a pure parameter set."""

    def __init__(self, net: Network):
        self.buffers = [{k: np.zeros_like(v) for k, v in p.items()} for p in net.params]

    def step(self, net: Network, grads, cfg: TrainConfig) -> None:
        lr, mom, wd = cfg.learning_rate, cfg.momentum, cfg.weight_decay
        for p, g, buf in zip(net.params, grads, self.buffers):
            for k, v in p.items():
                update = g[k] if k == "alpha" else g[k] + wd * v
                buf[k] *= mom
                buf[k] -= lr * update
                v += buf[k]


def sgd_step(net: Network, grads, cfg: TrainConfig, state: SGD | None = None) -> SGD:
    """One momentum step in place; returns the optimiser state for the next call."""
    state = state or SGD(net)
    state.step(net, grads, cfg)
    return state


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float
    val_accuracy: float | None = None


def accuracy(net: Network, x, y, batch_size: int = 256) -> float:
    scores, _ = net.predict(x, batch_size)
    return float((scores.argmax(axis=1) == y).mean())


def train(net: Network, ts: TrainingSet, cfg: TrainConfig, val: TrainingSet | None = None):
    """Shuffled mini-batch SGD for ``cfg.epochs`` epochs.

    Returns ``(net, logs)``; ``net`` is trained in place. The batch order and
    dropout masks depend only on ``cfg.seed``.
    """
    if len(ts) == 0:
        raise ValueError("empty training set")
    net.dropout_ratio = cfg.dropout_ratio
    x = to_network_input(ts.values, ts.mode).astype(net.dtype, copy=False)
    y = ts.labels.astype(np.int64)
    xv = yv = None
    if val is not None and len(val):
        xv = to_network_input(val.values, val.mode).astype(net.dtype, copy=False)
        yv = val.labels.astype(np.int64)
    opt = SGD(net)
    seeds = np.random.SeedSequence(cfg.seed)
    logs = []
    n = len(y)
    for epoch in range(cfg.epochs):
        ep_seed = seeds.spawn(1)[0]
        order = np.random.Generator(np.random.Philox(ep_seed)).permutation(n)
        batch_seeds = ep_seed.generate_state((n + cfg.batch_size - 1) // cfg.batch_size, dtype=np.uint64)
        total, correct = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            scores, _ = net.forward(x[idx], train_mode=True, dropout_seed=int(batch_seeds[b]))
            loss, grad = loss_softmax_xent(scores, y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            grads = net.backward(grad)
            opt.step(net, grads, cfg)
            total += loss * len(idx)
            correct += int((scores.argmax(axis=1) == y[idx]).sum())
        net._cache = None
        entry = EpochLog(epoch + 1, total / n, correct / n)
        if xv is not None:
            entry.val_accuracy = accuracy(net, xv, yv)
        logs.append(entry)
        log.info("epoch %d loss %.4f acc %.4f val %s", entry.epoch, entry.loss, entry.accuracy, entry.val_accuracy)
    return net, logs
