"""Mini-batch SGD with momentum, frozen-layer support and per-epoch error logs."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import rng
from .data import Dataset
from .network import Network

log = logging.getLogger(__name__)

CSV_FIELDS = ("epoch", "train_error", "test_error", "mean_loss")
STREAM_SHUFFLE = 2


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class SGDConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    shuffle_seed: int = 0
    lr_decay: float = 0.98
    log_steps: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


class EpochRecord(NamedTuple):
    epoch: int
    train_error: float
    test_error: float
    mean_loss: float


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    # (step, loss) pairs, filled only when SGDConfig.log_steps is set
    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def to_csv(self, comment: Optional[str] = None) -> str:
        buf = io.StringIO()
        if comment:
            for line in comment.splitlines():
                buf.write(f"# {line}\n")
        buf.write(",".join(CSV_FIELDS) + "\n")
        for r in self.records:
            buf.write(f"{r.epoch},{r.train_error:.6f},{r.test_error:.6f},{r.mean_loss:.6f}\n")
        return buf.getvalue()

    def steps_csv(self) -> str:
        lines = ["step,loss"] + [f"{s},{l:.6f}" for s, l in self.steps]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrainingLog":
        rows = [l for l in text.splitlines() if l.strip() and not l.startswith("#")]
        reader = csv.DictReader(rows)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"unexpected log header {reader.fieldnames}")
        recs = [EpochRecord(int(r["epoch"]), float(r["train_error"]),
                            float(r["test_error"]), float(r["mean_loss"])) for r in reader]
        return cls(recs)


def _error(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(pred != labels))


def _predict(net: Network, x: np.ndarray, start: int = 0, batch_size: int = 64) -> np.ndarray:
    # argmax returns the lowest index on ties
    out = [net.forward(x[i:i + batch_size], start=start).argmax(axis=1)
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def _features(net: Network, x: np.ndarray, stop: int, batch_size: int = 64) -> np.ndarray:
    if stop == 0:
        return x
    return np.concatenate([net.forward(x[i:i + batch_size], stop=stop)
                           for i in range(0, len(x), batch_size)])


def evaluate(net: Network, dataset: Dataset, batch_size: int = 64) -> float:
    """Fraction of samples whose arg-max logit differs from the label."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return _error(_predict(net, dataset.images, batch_size=batch_size), dataset.labels)


class SGD:
    """Momentum SGD that keeps masked-out weights and velocities at zero."""

    def __init__(self, net: Network, cfg: SGDConfig):
        self.net = net
        self.cfg = cfg
        self.velocity = {id(l): (np.zeros_like(l.weights), np.zeros_like(l.bias))
                         for l in net.masked_layers}

    def step(self, layers, grads, lr: float):
        mu = self.cfg.momentum
        for layer, g in zip(layers, grads):
            if g is None or layer.frozen:
                continue
            gw, gb = g
            vw, vb = self.velocity[id(layer)]
            bits = layer.mask.bits
            vw *= mu
            vw -= lr * gw
            vw *= bits
            vb *= mu
            vb -= lr * gb
            layer.weights += vw
            layer.weights *= bits
            layer.bias += vb


def trainable_start(net: Network) -> int:
    """Index of the first layer with trainable parameters.

    Everything before it is a fixed function of the input, so its output can
    be computed once per dataset.
    """
    for i, layer in enumerate(net.layers):
        if layer.has_params and not layer.frozen:
            return i
    return len(net.layers)


def train(net: Network, train_set: Dataset, test_set: Dataset, cfg: SGDConfig,
          optimizer: Optional[SGD] = None) -> TrainingLog:
    """Train ``net`` in place and return the per-epoch log.

    Frozen layers are never updated. Each epoch visits the training set in a
    fresh permutation derived from ``cfg.shuffle_seed`` and the epoch index.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    opt = optimizer or SGD(net, cfg)
    tlog = TrainingLog()
    if cfg.epochs == 0:
        return tlog

    start = trainable_start(net)
    if start == len(net.layers):
        log.warning("every layer is frozen; training only re-evaluates")
    x_train = _features(net, train_set.images, start)
    x_test = _features(net, test_set.images, start)
    layers = net.layers[start:]
    n = len(train_set)
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay ** epoch
        key = rng.derive_seed(cfg.shuffle_seed, STREAM_SHUFFLE, epoch)
        order = np.argsort(rng.uniform_stream(key, n), kind="stable")
        total = 0.0
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            loss, _, grads = net.loss_and_grads(x_train[idx], train_set.labels[idx], start=start)
            if not math.isfinite(loss):
                raise TrainingDiverged(step, loss)
            opt.step(layers, grads, lr)
            total += loss * len(idx)
            if cfg.log_steps:
                tlog.steps.append((step, loss))
            step += 1
        rec = EpochRecord(
            epoch + 1,
            _error(_predict(net, x_train, start), train_set.labels),
            _error(_predict(net, x_test, start), test_set.labels),
            total / n,
        )
        tlog.records.append(rec)
        log.debug("epoch %d train_err=%.4f test_err=%.4f loss=%.4f", *rec)
    return tlog


class FreezeRow(NamedTuple):
    layer_index: int
    kind: str
    frozen: bool
    param_count: int
    surviving_count: int


def freeze_report(net: Network) -> list:
    """One row per masked layer; counts cover weights only (biases are unmasked)."""
    return [FreezeRow(i, l.kind, bool(l.frozen), l.weights.size, l.mask.surviving)
            for i, l in enumerate(net.layers) if l.has_params]
