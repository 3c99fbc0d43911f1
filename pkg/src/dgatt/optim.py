"""Adam optimization, the per-epoch learning-rate decay, and the training
loop over seeded mini-batches."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import Model, loss_components, save_checkpoint
from .tensor import ShapeError, Tape

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

METRICS_HEADER = ("epoch", "lr", "loss_total", "loss_rgb", "loss_guidance",
                  "loss_attention", "train_acc")


@dataclass
class TrainConfig:
    lr0: float = 1e-5
    decay: float = 0.9
    batch_size: int = 30
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """lr0 * decay^epoch; a 0.9 decay drops the rate 10% per epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.decay ** epoch


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, params):
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}
        self.t = 0


def adam_step(state: AdamState, params, grads: dict[str, np.ndarray], lr: float) -> None:
    """Standard bias-corrected Adam update, in place."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    state.t += 1
    c1 = 1.0 - ADAM_BETA1 ** state.t
    c2 = 1.0 - ADAM_BETA2 ** state.t
    for name, p in params:
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - ADAM_BETA1) * (g - m)
        v += (1.0 - ADAM_BETA2) * (g * g - v)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + ADAM_EPS)


def stack_samples(samples, dtype):
    rgb = np.stack([s.rgb for s in samples]).astype(dtype, copy=False)
    guidance = np.stack([s.guidance for s in samples]).astype(dtype, copy=False)
    labels = np.array([s.identity for s in samples], dtype=np.int64)
    return rgb, guidance, labels


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_rgb: float | None
    loss_guidance: float | None
    loss_attention: float | None
    train_acc: float

    def row(self):
        def fmt(v):
            return "" if v is None else repr(float(v))
        return (self.epoch, repr(self.lr), fmt(self.loss_total), fmt(self.loss_rgb),
                fmt(self.loss_guidance), fmt(self.loss_attention), repr(self.train_acc))


def train(model: Model, samples, cfg: TrainConfig, *,
          metrics_path=None, checkpoint_path=None,
          log=None) -> list[EpochRecord]:
    """Seeded mini-batch training; returns the per-epoch metric trace.

    Batches are drawn from one seeded permutation per epoch; the last
    incomplete batch is kept. Metrics and the final checkpoint are written
    when paths are given.
    """
    if not samples:
        raise ValueError("training set is empty")
    ncls = model.cfg.num_classes
    labels_all = [s.identity for s in samples]
    bad = [l for l in labels_all if not 0 <= l < ncls]
    if bad:
        raise ValueError(f"label {bad[0]} out of range [0, {ncls})")

    params = model.parameters()
    state = AdamState(params)
    rng = np.random.default_rng(cfg.seed)
    dtype = model.cfg.np_dtype
    history: list[EpochRecord] = []

    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        order = rng.permutation(len(samples))
        correct = 0
        sums: dict[str, float] = {}
        weights = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            rgb, guidance, labels = stack_samples(batch, dtype)
            with Tape() as tape:
                out = model.forward(rgb, guidance if model.cfg.has_guidance else None)
                loss = model.loss_total(out, labels)
                T.backward(tape, loss)
                grads = {name: tape.grad(p) for name, p in params}
            comps = loss_components(model, out, labels)
            for key, val in comps.items():
                sums[key] = sums.get(key, 0.0) + val * len(batch)
            weights += len(batch)
            correct += int(np.sum(np.argmax(out.logits.data, axis=1) == labels))
            adam_step(state, params, grads, lr)

        means = {k: v / weights for k, v in sums.items()}
        record = EpochRecord(
            epoch=epoch,
            lr=lr,
            loss_total=means["loss_total"],
            loss_rgb=means.get("loss_rgb"),
            loss_guidance=means.get("loss_guidance"),
            loss_attention=means.get("loss_attention"),
            train_acc=correct / len(samples),
        )
        history.append(record)
        if log is not None:
            log(f"epoch {epoch:3d}  lr {lr:.3e}  loss {record.loss_total:.4f}  "
                f"acc {record.train_acc:.3f}")

    if metrics_path is not None:
        write_metrics(metrics_path, history)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model)
    return history


def write_metrics(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for record in history:
            writer.writerow(record.row())


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
