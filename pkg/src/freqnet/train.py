"""Adam, the step learning-rate schedule, the training loop and Acc/AP evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import Model

log = logging.getLogger(__name__)


class DataContractError(ValueError):
    """Dataset unusable for the requested operation (e.g. a single class)."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    batch_size: int = 16
    epochs: int = 20
    decay_every: int = 10
    decay_factor: float = 0.8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.decay_every < 1:
            raise ValueError("batch_size and decay_every must be >= 1, epochs >= 0")
        return self


DESK = TrainConfig()
PAPER = TrainConfig(lr0=2e-2, batch_size=32, epochs=100)
PRESETS = {"desk": DESK, "paper": PAPER}


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


# -- Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> tuple:
    """Bias-corrected Adam. Returns ``(new_params, state)``; inputs are not mutated.

    ``params`` and ``grads`` map names to arrays; a missing gradient counts as zero.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ad.ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = g * (1 - b1) if m is None else b1 * m + (1 - b1) * g
        v = g * g * (1 - b2) if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        out[name] = (p - upd).astype(p.dtype, copy=False)
    return out, state


# -- data container ---------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray  # N×3×S×S float32 in [0, 1]
    labels: np.ndarray  # N int64 in {0, 1}
    sources: list

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx], [self.sources[i] for i in idx])


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    train_acc: float

    def line(self) -> str:
        return f"{self.epoch},{self.lr:.8g},{self.loss:.8f},{self.train_acc:.6f}"


def train(model: Model, data: Dataset, cfg: TrainConfig, on_epoch=None) -> list:
    """Minimise cross-entropy with Adam under the step schedule; returns per-epoch logs."""
    cfg.validate()
    if len(data) == 0:
        raise DataContractError("training set is empty")
    classes = set(np.unique(data.labels).tolist())
    if classes != {0, 1}:
        raise DataContractError(f"training needs both classes, found only {sorted(classes)}")
    rng = np.random.default_rng(cfg.seed)
    params = model.named_params()
    state = AdamState()
    logs = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(data))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = data.images[idx], data.labels[idx]
            logits = model.forward(x, training=True)
            loss = ad.softmax_cross_entropy(logits, y)
            store = ad.backward(loss)
            grads = {v.name: g for v, g in store.items()}
            new, state = adam_step({k: v.value for k, v in params.items()}, grads, state, lr,
                                   (cfg.beta1, cfg.beta2), cfg.eps)
            for k, v in params.items():
                v.value = new[k]
            loss_sum += float(loss.value) * len(idx)
            correct += int((logits.value.argmax(axis=1) == y).sum())
        entry = EpochLog(epoch, lr, loss_sum / len(data), correct / len(data))
        log.info("epoch %d lr %.3g loss %.4f acc %.4f", epoch, lr, entry.loss, entry.train_acc)
        logs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return logs


def format_log(logs) -> str:
    return "# epoch,lr,loss,train_acc\n" + "".join(e.line() + "\n" for e in logs)


# -- evaluation ------------------------------------------------------------------------

def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean precision at the rank of each positive.

    Ranking is by descending score; ties keep their original order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    npos = int((labels == 1).sum())
    if npos == 0:
        raise ValueError("average_precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] == 1
    ranks = np.flatnonzero(hits) + 1
    precisions = np.arange(1, npos + 1) / ranks
    return float(precisions.mean())


def fake_probability(model: Model, images, batch_size: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        z = model.forward(images[start:start + batch_size], training=False).value.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        out.append(p[:, 1] / p.sum(axis=1))
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class SourceStats:
    source: str
    count: int
    accuracy: float
    average_precision: float  # nan when the source holds no fakes


@dataclass
class EvalReport:
    accuracy: float
    average_precision: float
    count: int
    n_real: int
    n_fake: int
    per_source: list

    @property
    def error_rate(self) -> float:
        return 1.0 - self.accuracy

    def to_text(self) -> str:
        lines = [
            f"accuracy = {self.accuracy:.6f}",
            f"average_precision = {self.average_precision:.6f}",
            f"count = {self.count}",
            f"count_real = {self.n_real}",
            f"count_fake = {self.n_fake}",
            "",
            "source,count,accuracy,average_precision",
        ]
        for s in self.per_source:
            lines.append(f"{s.source},{s.count},{s.accuracy:.6f},{s.average_precision:.6f}")
        return "\n".join(lines) + "\n"


def _ap_or_nan(scores, labels) -> float:
    return average_precision(scores, labels) if np.any(labels == 1) else math.nan


def report_from_scores(scores, labels, sources) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate an empty dataset")
    pred = (scores > 0.5).astype(labels.dtype)
    correct = pred == labels
    per = []
    src = np.asarray(sources, dtype=object)
    for name in sorted(set(sources)):
        sel = src == name
        per.append(SourceStats(name, int(sel.sum()), float(correct[sel].mean()),
                               _ap_or_nan(scores[sel], labels[sel])))
    return EvalReport(float(correct.mean()), _ap_or_nan(scores, labels), int(labels.size),
                      int((labels == 0).sum()), int((labels == 1).sum()), per)


def evaluate(model: Model, data: Dataset, batch_size: int = 64) -> EvalReport:
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    return report_from_scores(fake_probability(model, data.images, batch_size), data.labels, data.sources)
