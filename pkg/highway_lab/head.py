"""Light FPN-style dense head: per-stage laterals, nearest upsampling, 1x1 classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from highway_lab import ops
from highway_lab.backbone import Linear, Norm
from highway_lab.config import BackboneConfig, HeadConfig
from highway_lab.errors import ShapeError
from highway_lab.initializers import fan_in_uniform
from highway_lab.registry import ROLE_BIAS, ROLE_FPN_BIAS, ROLE_FPN_WEIGHT, ROLE_WEIGHT, ParamRegistry
from highway_lab.tape import Tensor, active_tape


@dataclass
class HeadParams:
    laterals: list[Linear]
    classifier: Linear
    grids: list[int]


def build_fpn_norms(cfg: BackboneConfig, reg: ParamRegistry) -> list[Norm]:
    return [
        Norm(reg.add(f"fpn_norms.{s}.weight", np.ones(cfg.dim(s)), owner="neck", role=ROLE_FPN_WEIGHT),
             reg.add(f"fpn_norms.{s}.bias", np.zeros(cfg.dim(s)), owner="neck", role=ROLE_FPN_BIAS))
        for s in range(cfg.n_stages)
    ]


def build_head(cfg: BackboneConfig, head: HeadConfig, reg: ParamRegistry, rng) -> HeadParams:
    laterals = []
    for s in range(cfg.n_stages):
        d = cfg.dim(s)
        laterals.append(Linear(
            reg.add(f"neck.lateral.{s}.weight", fan_in_uniform(rng, (d, head.width), d), owner="neck", role=ROLE_WEIGHT),
            reg.add(f"neck.lateral.{s}.bias", fan_in_uniform(rng, (head.width,), d), owner="neck", role=ROLE_BIAS),
        ))
    classifier = Linear(
        reg.add("head.classifier.weight", fan_in_uniform(rng, (head.width, head.num_classes), head.width),
                owner="head", role=ROLE_WEIGHT),
        reg.add("head.classifier.bias", np.zeros(head.num_classes), owner="head", role=ROLE_BIAS),
    )
    return HeadParams(laterals, classifier, [cfg.grid(s) for s in range(cfg.n_stages)])


def upsample_nearest(x: Tensor, grid: int, factor: int) -> Tensor:
    """``[B, g^2, C] -> [B, (g f)^2, C]`` by repeating each token ``f x f`` times."""
    if factor == 1:
        return x
    b, _, c = x.shape
    y = ops.reshape(x, (b, grid, grid, c))
    y = ops.repeat(ops.repeat(y, factor, axis=1), factor, axis=2)
    return ops.reshape(y, (b, grid * factor * grid * factor, c))


def head_forward(features: list[Tensor], p: HeadParams) -> Tensor:
    """Per-stage fused features to stage-1 resolution logits ``[B, N_1, classes]``."""
    if len(features) != len(p.laterals):
        raise ShapeError(f"head expects {len(p.laterals)} stage features, got {len(features)}")
    tape = active_tape()
    with tape.scope("neck"):
        top = p.grids[0]
        merged = None
        for f, lateral, grid in zip(features, p.laterals, p.grids):
            up = upsample_nearest(lateral(f), grid, top // grid)
            merged = up if merged is None else ops.add(merged, up)
    with tape.scope("head"):
        return p.classifier(merged)
