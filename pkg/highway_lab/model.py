"""Assemble backbone, method structures, FPN norms and head into one model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from highway_lab import ops
from highway_lab.backbone import Backbone, BackboneOutput, Hook, Norm, backbone_forward, build_backbone
from highway_lab.config import BackboneConfig, HeadConfig, MethodConfig
from highway_lab.errors import ConfigError
from highway_lab.head import HeadParams, build_fpn_norms, build_head, head_forward
from highway_lab.methods import (
    Highway,
    HighwayState,
    build_adapter_hook,
    build_adaptformer_hook,
    build_highway,
    build_lora_hook,
    highway_forward,
    stage_fuse,
)
from highway_lab.registry import ParamRegistry, apply_tuning_policy
from highway_lab.tape import Tape, Tensor, active_tape, constant

log = logging.getLogger(__name__)

_HOOK_BUILDERS = {
    "adapter": build_adapter_hook,
    "lora": build_lora_hook,
    "adaptformer": build_adaptformer_hook,
}


@dataclass
class ModelOutput:
    logits: Tensor
    backbone: BackboneOutput
    fused: list[Tensor]
    highway: list[HighwayState] = field(default_factory=list)


@dataclass
class Model:
    cfg: BackboneConfig
    method: MethodConfig
    head_cfg: HeadConfig
    registry: ParamRegistry
    backbone: Backbone
    fpn_norms: list[Norm]
    head: HeadParams
    highway: Highway | None = None
    hooks: list[Hook] = field(default_factory=list)

    def forward(self, images: np.ndarray, extra_hooks: Sequence[Hook] = ()) -> ModelOutput:
        """Forward on the active tape."""
        images = constant(images, dtype=self.cfg.dtype)
        bb = backbone_forward(images, self.backbone, self.method.name, [*self.hooks, *extra_hooks])
        e_stages: list[Tensor | None] = [None] * self.cfg.n_stages
        trace: list[HighwayState] = []
        if self.highway is not None:
            e_stages, trace = highway_forward(self.highway, self.cfg, bb.states)
        fusion = self.highway.fusion if self.highway is not None else "additive"
        with active_tape().scope("neck"):
            fused = [stage_fuse(l, e, norm, fusion) for l, e, norm in zip(bb.features, e_stages, self.fpn_norms)]
        return ModelOutput(head_forward(fused, self.head), bb, fused, trace)

    def forward_loss(self, images: np.ndarray, labels: np.ndarray) -> tuple[Tape, Tensor, ModelOutput]:
        """Record a fresh tape for one batch and return it with the loss."""
        tape = Tape()
        with tape:
            out = self.forward(images)
            with tape.scope("head"):
                loss = ops.cross_entropy(out.logits, np.asarray(labels).reshape(len(labels), -1))
        return tape, loss, out

    def predict(self, images: np.ndarray) -> np.ndarray:
        with Tape():
            return self.forward(images).logits.data

    def loss_value(self, images: np.ndarray, labels: np.ndarray) -> float:
        return float(self.forward_loss(images, labels)[1].data)


def build_model(cfg: BackboneConfig, method: MethodConfig, head: HeadConfig | None = None,
                seed: int = 0) -> Model:
    """Allocate every parameter from one seeded generator and apply the method's policy."""
    if not cfg.materializable:
        raise ConfigError(f"{cfg.name} is a counting-only preset; use the accountant instead")
    method.check_against(cfg)
    head = head or HeadConfig()
    rng = np.random.default_rng(seed)
    reg = ParamRegistry(cfg.dtype)
    backbone = build_backbone(cfg, reg, rng)
    fpn_norms = build_fpn_norms(cfg, reg)
    head_params = build_head(cfg, head, reg, rng)
    highway = None
    hooks: list[Hook] = []
    if method.name == "e3va":
        highway = build_highway(cfg, method, backbone, reg, rng)
    elif method.name in _HOOK_BUILDERS:
        hooks.append(_HOOK_BUILDERS[method.name](cfg, method, reg, rng))
    apply_tuning_policy(reg, method, cfg.depths)
    log.info("built %s/%s: %d tensors, %d trainable", cfg.name, method.label, len(reg),
             sum(t.size for t in reg.trainable()))
    return Model(cfg, method, head, reg, backbone, fpn_norms, head_params, highway, hooks)
