"""Analytic vs central-difference gradients, per parameter group."""

from __future__ import annotations

import logging

import numpy as np
from pydantic import BaseModel, Field, computed_field

from highway_lab.config import BackboneConfig, HeadConfig, MethodConfig
from highway_lab.data import gen_synthetic
from highway_lab.model import Model, build_model
from highway_lab.registry import PHI_A, PHI_O
from highway_lab.tape import backward, finite_diff_grad

log = logging.getLogger(__name__)

TOLERANCE = 1e-4
# Denominator floor for relative error; keeps near-zero gradients from dominating.
REL_FLOOR = 1e-6
JITTER_STD = 0.02


class GroupCheck(BaseModel):
    group: str
    n_params: int
    n_coords: int
    max_rel_err: float
    worst: str = ""


class GradcheckReport(BaseModel):
    method: str
    backbone: str
    eps: float
    groups: list[GroupCheck] = Field(default_factory=list)
    by_tag: dict[str, float] = Field(default_factory=dict)

    @computed_field
    @property
    def max_rel_err(self) -> float:
        return max((g.max_rel_err for g in self.groups), default=0.0)

    @computed_field
    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / denom


def jitter_zero_params(model: Model, rng: np.random.Generator) -> list[str]:
    """Give all-zero trainable tensors small random values so every path carries gradient."""
    touched = []
    for entry in model.registry:
        if entry.trainable and entry.size > 1 and not np.any(entry.tensor.data):
            entry.tensor.data[...] = rng.normal(0.0, JITTER_STD, size=entry.tensor.shape)
            touched.append(entry.name)
    return touched


def sample_coords(model: Model, group: str, max_coords: int, rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Up to ``max_coords`` flat indices spread uniformly over a group's tensors."""
    entries = [e for e in model.registry if e.trainable and e.group == group]
    total = sum(e.size for e in entries)
    if total == 0:
        return {}
    picks = np.arange(total) if total <= max_coords else np.sort(rng.choice(total, max_coords, replace=False))
    coords, offset = {}, 0
    for e in entries:
        mine = picks[(picks >= offset) & (picks < offset + e.size)] - offset
        if mine.size:
            coords[e.tensor.id] = mine
        offset += e.size
    return coords


def gradcheck(cfg: BackboneConfig, method: MethodConfig, *, seed: int = 0, eps: float = 1e-4,
              max_coords: int = 500, batch: int = 2, head: HeadConfig | None = None,
              jitter: bool = True) -> GradcheckReport:
    """Compare tape gradients with central differences on sampled coordinates of φ_A and φ_O."""
    if cfg.precision != 64:
        raise ValueError("gradcheck needs precision 64")
    head = head or HeadConfig()
    model = build_model(cfg, method, head, seed)
    rng = np.random.default_rng([seed, 1])
    if jitter:
        touched = jitter_zero_params(model, rng)
        if touched:
            log.debug("jittered %d zero-initialised tensors", len(touched))
    data = gen_synthetic(seed, batch, cfg.img, head.num_classes, cell=cfg.patch)

    tape, loss, _ = model.forward_loss(data.images, data.labels)
    analytic = backward(tape, loss)

    def loss_fn() -> float:
        return model.loss_value(data.images, data.labels)

    report = GradcheckReport(method=method.label, backbone=cfg.name, eps=eps)
    for group in (PHI_A, PHI_O):
        coords = sample_coords(model, group, max_coords, rng)
        if not coords:
            continue
        params = [model.registry.by_id(pid).tensor for pid in coords]
        numeric = finite_diff_grad(loss_fn, params, eps, coords=coords)
        worst, worst_name, n = 0.0, "", 0
        for p in params:
            idx = coords[p.id]
            a = analytic.get(p.id, np.zeros(p.shape)).reshape(-1)[idx]
            err = relative_error(a, numeric[p.id].reshape(-1)[idx])
            n += idx.size
            tag = model.registry.by_id(p.id).owner
            report.by_tag[tag] = max(report.by_tag.get(tag, 0.0), float(err.max()))
            if err.max() > worst:
                worst, worst_name = float(err.max()), p.name or str(p.id)
        n_params = sum(e.size for e in model.registry if e.trainable and e.group == group)
        report.groups.append(GroupCheck(group=group, n_params=n_params, n_coords=n, max_rel_err=worst, worst=worst_name))
        log.info("gradcheck %s %s: %d coords, max rel err %.2e (%s)", method.label, group, n, worst, worst_name)
    return report
