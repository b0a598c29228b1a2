"""Teacher-forced training loop with Adam and per-epoch validation."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetRecord
from .errors import NumericError
from .model import SpeechMotionModel
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    max_steps: int | None = None
    shuffle: bool = True


class Adam(object):
    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class CurvePoint:
    step: int
    train_loss: float
    val_loss: float | None = None


@dataclass
class TrainResult:
    steps: int
    initial_loss: float
    final_loss: float
    curve: list[CurvePoint] = field(default_factory=list)
    epoch_times: list[float] = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.epoch_times)

    @property
    def mean_epoch_time(self) -> float:
        return float(np.mean(self.epoch_times)) if self.epoch_times else 0.0


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    return ((pred - Tensor(target)) ** 2.0).mean()


def sequence_loss(model: SpeechMotionModel, record: DatasetRecord) -> Tensor:
    pred = model.teacher_forced(record.audio, record.motion.frames,
                                record.subject_id)
    return mse_loss(pred, record.motion.frames)


def validation_loss(model: SpeechMotionModel,
                    records: list[DatasetRecord]) -> float | None:
    if not records:
        return None
    return float(np.mean([sequence_loss(model, r).item() for r in records]))


def train_model(model: SpeechMotionModel, train_records: list[DatasetRecord],
                cfg: TrainConfig, seed: int = 0,
                val_records: list[DatasetRecord] | None = None) -> TrainResult:
    """Teacher-forced next-frame regression, one sequence per step.

    Data order is a seeded shuffle per epoch, so a fixed seed reproduces the
    loss curve exactly. A NaN loss aborts with the offending step.
    """
    if not train_records:
        raise NumericError("training requires a non-empty train split")
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    order_rng = np.random.default_rng([seed, 55])
    curve: list[CurvePoint] = []
    epoch_times: list[float] = []
    initial_loss: float | None = None
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = (order_rng.permutation(len(train_records)) if cfg.shuffle
                 else np.arange(len(train_records)))
        for i in order:
            record = train_records[int(i)]
            loss = sequence_loss(model, record)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss {value} at step {step} "
                    f"(epoch {epoch}, record {record.record_id})")
            if initial_loss is None:
                initial_loss = value
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            curve.append(CurvePoint(step=step, train_loss=value))
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        val = validation_loss(model, val_records or [])
        if curve:
            curve[-1].val_loss = val
        epoch_times.append(time.perf_counter() - t0)
        if done:
            break
    return TrainResult(steps=step, initial_loss=float(initial_loss),
                       final_loss=curve[-1].train_loss, curve=curve,
                       epoch_times=epoch_times)


def write_loss_curve(path, curve: list[CurvePoint]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "train_loss", "val_loss"])
        for point in curve:
            writer.writerow([point.step, f"{point.train_loss:.10g}",
                             "" if point.val_loss is None else f"{point.val_loss:.10g}"])
