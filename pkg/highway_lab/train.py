"""Single-process training harness and pixel-accuracy evaluation."""

from __future__ import annotations

import hashlib
import logging
import math
import time

import numpy as np
from pydantic import BaseModel, Field, computed_field

from highway_lab.config import BackboneConfig, HeadConfig, MethodConfig, TrainConfig
from highway_lab.data import SyntheticDataset
from highway_lab.errors import NonFiniteError
from highway_lab.model import Model, build_model
from highway_lab.optim import AdamW, AdamWHyper
from highway_lab.tape import backward

log = logging.getLogger(__name__)

EVAL_BATCH = 16
# Final loss is averaged over this many trailing steps.
FINAL_WINDOW = 10


class TrainReport(BaseModel):
    method: str
    backbone: str
    seed: int
    steps: int
    loss_curve: list[float] = Field(default_factory=list)
    final_pixel_acc: float = 0.0
    wall_time_total: float = 0.0
    trainable_params: int = 0
    frozen_checksum_before: str = ""
    frozen_checksum_after: str = ""

    @computed_field
    @property
    def final_loss(self) -> float:
        if not self.loss_curve:
            return float("nan")
        return float(np.mean(self.loss_curve[-FINAL_WINDOW:]))

    @computed_field
    @property
    def loss_drop_pct(self) -> float:
        """Drop from the step-1 loss to :attr:`final_loss`, in percent."""
        if len(self.loss_curve) < 2:
            return 0.0
        first = self.loss_curve[0]
        return 100.0 * (first - self.final_loss) / first


def frozen_checksum(model: Model) -> str:
    h = hashlib.sha256()
    for entry in model.registry:
        if not entry.trainable:
            h.update(entry.name.encode())
            h.update(entry.tensor.data.tobytes())
    return h.hexdigest()


def batches(n: int, batch: int, steps: int, seed: int):
    """Yield ``steps`` index arrays, reshuffling each epoch."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch > n:
            order, pos = rng.permutation(n), 0
        yield order[pos:pos + batch]
        pos += batch


def evaluate(model, data: SyntheticDataset, batch: int = EVAL_BATCH) -> float:
    """Fraction of cells whose argmax logit matches the label."""
    correct = 0
    for start in range(0, len(data), batch):
        images, labels = data.images[start:start + batch], data.labels[start:start + batch]
        correct += int(np.sum(np.argmax(model.predict(images), axis=-1) == labels.reshape(len(labels), -1)))
    return correct / data.labels.size


def train(cfg: BackboneConfig, method: MethodConfig, data: SyntheticDataset, *, steps: int,
          seed: int = 0, train_cfg: TrainConfig | None = None, head: HeadConfig | None = None,
          model: Model | None = None) -> TrainReport:
    """Train ``method`` for ``steps`` AdamW steps; pass ``model`` to keep it afterwards."""
    if steps < 0:
        raise ValueError(f"steps must be non-negative, got {steps}")
    train_cfg = train_cfg or TrainConfig()
    if model is None:
        model = build_model(cfg, method, head or HeadConfig(num_classes=data.num_classes), seed)
    if train_cfg.batch > len(data):
        raise ValueError(f"batch {train_cfg.batch} exceeds dataset size {len(data)}")

    opt = AdamW(model.registry.trainable(), AdamWHyper(
        lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps,
        weight_decay=train_cfg.weight_decay,
    ))
    report = TrainReport(method=method.label, backbone=cfg.name, seed=seed, steps=steps,
                         trainable_params=sum(t.size for t in opt.params),
                         frozen_checksum_before=frozen_checksum(model))
    start = time.perf_counter()
    for step, index in enumerate(batches(len(data), train_cfg.batch, steps, seed)):
        images, labels = data.batch(index)
        tape, loss, _ = model.forward_loss(images, labels)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteError(f"loss became {value} at step {step}", step=step)
        opt.step(backward(tape, loss))
        report.loss_curve.append(value)
        if step % 50 == 0:
            log.info("%s step %d loss %.4f", method.label, step, value)
    report.wall_time_total = time.perf_counter() - start
    report.final_pixel_acc = evaluate(model, data)
    report.frozen_checksum_after = frozen_checksum(model)
    log.info("%s done: %d steps, acc %.3f, %.1fs", method.label, steps, report.final_pixel_acc,
             report.wall_time_total)
    return report
