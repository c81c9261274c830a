"""Seeded synthetic dense-labeling data.

Images are smooth sums of random 2-D sinusoids per channel, in ``[0, 1]``.
Each ``cell x cell`` patch gets a label from a fixed random rule on its mean
colour. Scores are standardized, and per-class offsets are fitted, on a
calibration sample so the classes come out roughly balanced.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

log = logging.getLogger(__name__)

Rule = Literal["sine", "linear"]

N_WAVES = 2
MAX_FREQ = 1.5
N_CALIBRATION = 64
SINE_WEIGHT = 0.15
BALANCE_ROUNDS = 200
BALANCE_STEP = 1.0


@dataclass(frozen=True)
class SyntheticDataset:
    images: np.ndarray  # [n, img, img, 3]
    labels: np.ndarray  # [n, img/cell, img/cell]
    seed: int
    rule: Rule
    num_classes: int
    cell: int

    def __len__(self) -> int:
        return len(self.images)

    def batch(self, index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.images[index], self.labels[index]

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels.reshape(-1), minlength=self.num_classes) / self.labels.size


@dataclass(frozen=True)
class LabelRule:
    """``argmax`` of standardized ``c P + w sin(2 pi c Q)`` over classes, ``c`` a cell's mean colour."""

    directions: np.ndarray  # [3, C]
    phase_directions: np.ndarray  # [3, C]
    nonlinear: bool
    center: np.ndarray
    spread: np.ndarray
    offsets: np.ndarray

    def scores(self, colours: np.ndarray) -> np.ndarray:
        raw = colours @ self.directions
        if self.nonlinear:
            raw = raw + SINE_WEIGHT * np.sin(2.0 * np.pi * (colours @ self.phase_directions))
        return raw

    def __call__(self, colours: np.ndarray) -> np.ndarray:
        return np.argmax(self.standardized(colours) - self.offsets, axis=-1)

    def standardized(self, colours: np.ndarray) -> np.ndarray:
        return (self.scores(colours) - self.center) / self.spread


def smooth_images(rng: np.random.Generator, n: int, img: int, channels: int = 3) -> np.ndarray:
    axis = (np.arange(img) + 0.5) / img
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    out = np.empty((n, img, img, channels))
    for i in range(n):
        freqs = rng.uniform(0.5, MAX_FREQ, size=(channels, N_WAVES, 2))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(channels, N_WAVES))
        arg = 2.0 * np.pi * (freqs[..., 0, None, None] * xx + freqs[..., 1, None, None] * yy) + phases[..., None, None]
        out[i] = (0.5 + 0.5 * np.sin(arg).mean(axis=1)).transpose(1, 2, 0)
    return out


def cell_colours(images: np.ndarray, cell: int) -> np.ndarray:
    """Mean colour per cell, flattened row-major: ``[n, (img/cell)^2, 3]``."""
    n, h, w, c = images.shape
    if h % cell or w % cell:
        raise ValueError(f"image {h}x{w} is not divisible by cell {cell}")
    means = images.reshape(n, h // cell, cell, w // cell, cell, c).mean(axis=(2, 4))
    return means.reshape(n, -1, c)


def make_rule(seed: int, num_classes: int, rule: Rule, img: int, cell: int) -> LabelRule:
    rng = np.random.default_rng([seed, 0x5EED])
    directions = rng.normal(size=(3, num_classes))
    phase_directions = rng.normal(size=(3, num_classes))
    calibration = cell_colours(smooth_images(rng, N_CALIBRATION, img), cell).reshape(-1, 3)
    zero = np.zeros(num_classes)
    draft = LabelRule(directions, phase_directions, rule == "sine", zero, np.ones(num_classes), zero)
    raw = draft.scores(calibration)
    scaled = LabelRule(directions, phase_directions, draft.nonlinear, raw.mean(axis=0), raw.std(axis=0) + 1e-12, zero)
    z = scaled.standardized(calibration)
    offsets = np.zeros(num_classes)
    for _ in range(BALANCE_ROUNDS):
        share = np.bincount(np.argmax(z - offsets, axis=-1), minlength=num_classes) / len(z)
        offsets += BALANCE_STEP * (share - 1.0 / num_classes)
    return LabelRule(directions, phase_directions, draft.nonlinear, scaled.center, scaled.spread, offsets)


def gen_synthetic(seed: int, n: int, img: int, num_classes: int, *, cell: int = 4,
                  rule: Rule = "sine") -> SyntheticDataset:
    """Deterministic images and per-cell labels for ``seed``."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if num_classes < 2:
        raise ValueError(f"need at least two classes, got {num_classes}")
    if rule not in ("sine", "linear"):
        raise ValueError(f"unknown label rule {rule!r}")
    rng = np.random.default_rng(seed)
    images = smooth_images(rng, n, img)
    labeller = make_rule(seed, num_classes, rule, img, cell)
    labels = labeller(cell_colours(images, cell)).reshape(n, img // cell, img // cell)
    data = SyntheticDataset(images, labels.astype(np.int64), seed, rule, num_classes, cell)
    log.debug("synthetic data seed=%d n=%d classes=%s", seed, n, np.round(data.class_histogram(), 3))
    return data
