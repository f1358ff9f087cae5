"""Mini-batch SGD with momentum, accuracy evaluation and seed derivation."""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from . import net
from .errors import DivergedError

SEED_MASK = (1 << 64) - 1


def derive_seed(parent_seed: int, label: str, index: int) -> int:
    """Child seed from ``(parent_seed, label, index)``.

    BLAKE2b with an 8-byte digest over the little-endian parent seed, the
    UTF-8 label and the index. Pure, platform independent and order
    sensitive, so ``derive(derive(s, a), b) != derive(derive(s, b), a)``.
    """
    h = hashlib.blake2b(digest_size=8, person=b"voxnas-seed")
    h.update((parent_seed & SEED_MASK).to_bytes(8, "little"))
    h.update(len(label.encode()).to_bytes(4, "little"))
    h.update(label.encode())
    h.update((index & SEED_MASK).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class SeedTree:
    root_seed: int

    def child(self, label, index=0):
        return SeedTree(derive_seed(self.root_seed, label, index))

    def seed(self, label, index=0):
        return derive_seed(self.root_seed, label, index)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 20
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class History:
    loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_accuracy"])
        for i, (l, a) in enumerate(zip(self.loss, self.train_accuracy), 1):
            w.writerow([i, repr(l), repr(a)])
        return buf.getvalue()


def _xy(split):
    x, y = split
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0 or len(x) != len(y):
        raise ValueError("dataset split is empty or misaligned")
    return x, y


def predict(arch, params, x, batch_size=64):
    """Argmax class per sample; ties go to the lowest index (``np.argmax``)."""
    preds = []
    for i in range(0, len(x), batch_size):
        logits = net.forward(arch, params, x[i : i + batch_size])
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds)


def accuracy_from_logits(logits, labels):
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def evaluate(arch, params, split, batch_size=64):
    """Return ``(mean loss, accuracy)`` over a split."""
    x, y = _xy(split)
    total, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        logits = net.forward(arch, params, x[i : i + batch_size])
        yb = y[i : i + batch_size]
        loss, _ = net.T.softmax_cross_entropy(logits, yb)
        total += loss * len(yb)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
    return total / len(y), correct / len(y)


def evaluate_accuracy(arch, params, split):
    return evaluate(arch, params, split)[1]


def sgd_step(params, grads, velocity, lr, momentum):
    """In-place momentum update: ``v = m*v - lr*g; p += v``."""
    for p, g, v in zip(params.arrays(), grads.arrays(), velocity.arrays()):
        v *= momentum
        v -= lr * g
        p += v


def train(arch, params, split, config: TrainConfig, epochs=None):
    """Fine-tune a copy of ``params`` on ``split = (x, y)``.

    Every epoch visits the samples in a fresh permutation drawn from a seed
    derived from ``config.seed`` and the epoch index, then records the loss
    and accuracy of the whole split under the updated parameters.
    """
    x, y = _xy(split)
    net.check_params(arch, params)
    epochs = config.epochs if epochs is None else epochs
    params = params.copy()
    velocity = net.ParamSet(
        [np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases]
    )
    history = History()
    for epoch in range(epochs):
        rng = np.random.default_rng(derive_seed(config.seed, "shuffle", epoch))
        order = rng.permutation(len(y))
        for start in range(0, len(y), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads, _ = net.loss_and_grads(arch, params, x[idx], y[idx])
            if not np.isfinite(loss):
                raise DivergedError(epoch + 1)
            sgd_step(params, grads, velocity, config.learning_rate, config.momentum)
        loss, acc = evaluate(arch, params, (x, y))
        if not np.isfinite(loss):
            raise DivergedError(epoch + 1)
        history.loss.append(loss)
        history.train_accuracy.append(acc)
    return params, history
