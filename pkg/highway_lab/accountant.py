"""Closed-form parameter accounting, valid at any backbone size.

Counts come from shape arithmetic, never from allocation, so the published
Swin-B/L configurations can be counted on a laptop. The same policy function
that sets trainable flags on a built model decides trainability here, which
lets :func:`verify_against_built` cross-check shapes and policy together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator

from highway_lab.config import BackboneConfig, HeadConfig, MethodConfig
from highway_lab.methods import dual_lowrank_count
from highway_lab.registry import (
    FPN_ROLES,
    GROUPS,
    PHI_A,
    PHI_F,
    PHI_O,
    ROLE_BIAS,
    ROLE_FACTOR,
    ROLE_FPN_BIAS,
    ROLE_FPN_WEIGHT,
    ROLE_NORM_BIAS,
    ROLE_NORM_WEIGHT,
    ROLE_REL_POS,
    ROLE_SCALE,
    ROLE_WEIGHT,
    trainable_under,
)
from highway_lab.tape import OWNER_TAGS

log = logging.getLogger(__name__)

SCOPES = ("backbone", "all")


@dataclass(frozen=True)
class ParamSpec:
    """A run of parameters sharing owner, role and block."""

    owner: str
    role: str
    size: int
    block: tuple[int, int] | None = None

    @property
    def is_fpn_norm(self) -> bool:
        return self.role in FPN_ROLES

    def in_scope(self, scope: str) -> bool:
        return scope == "all" or self.owner in ("backbone", "adapter") or self.is_fpn_norm


@dataclass(frozen=True)
class ParamCount:
    method: str
    backbone: str
    scope: str
    trainable: int
    total: int
    by_group: dict[str, int] = field(default_factory=dict)
    by_tag: dict[str, int] = field(default_factory=dict)

    @property
    def frozen(self) -> int:
        return self.total - self.trainable

    def delta_pct(self, reference: "ParamCount") -> float:
        return 100.0 * (self.trainable - reference.trainable) / reference.trainable


@dataclass
class VerifyReport:
    ok: bool
    mismatches: list[str]
    symbolic: dict[str, ParamCount]
    materialized: dict[str, ParamCount]


def backbone_specs(cfg: BackboneConfig) -> Iterator[ParamSpec]:
    e = cfg.embed_dim
    yield ParamSpec("backbone", ROLE_WEIGHT, cfg.patch * cfg.patch * cfg.in_chans * e)
    yield ParamSpec("backbone", ROLE_BIAS, e)
    yield ParamSpec("backbone", ROLE_NORM_WEIGHT, e)
    yield ParamSpec("backbone", ROLE_NORM_BIAS, e)
    for s, b in cfg.blocks():
        m = cfg.dim(s)
        hidden = cfg.mlp_ratio * m
        w = cfg.window_for(s)
        key = (s, b)
        yield ParamSpec("backbone", ROLE_WEIGHT, 3 * m * m + m * m + 2 * m * hidden, key)
        yield ParamSpec("backbone", ROLE_BIAS, 3 * m + m + hidden + m, key)
        yield ParamSpec("backbone", ROLE_NORM_WEIGHT, 2 * m, key)
        yield ParamSpec("backbone", ROLE_NORM_BIAS, 2 * m, key)
        yield ParamSpec("backbone", ROLE_REL_POS, (2 * w - 1) ** 2 * cfg.heads[s], key)
    for s in range(cfg.n_stages - 1):
        m = cfg.dim(s)
        yield ParamSpec("backbone", ROLE_NORM_WEIGHT, 4 * m)
        yield ParamSpec("backbone", ROLE_NORM_BIAS, 4 * m)
        yield ParamSpec("backbone", ROLE_WEIGHT, 8 * m * m)


def neck_head_specs(cfg: BackboneConfig, head: HeadConfig) -> Iterator[ParamSpec]:
    for s in range(cfg.n_stages):
        d = cfg.dim(s)
        yield ParamSpec("neck", ROLE_FPN_WEIGHT, d)
        yield ParamSpec("neck", ROLE_FPN_BIAS, d)
        yield ParamSpec("neck", ROLE_WEIGHT, d * head.width)
        yield ParamSpec("neck", ROLE_BIAS, head.width)
    yield ParamSpec("head", ROLE_WEIGHT, head.width * head.num_classes)
    yield ParamSpec("head", ROLE_BIAS, head.num_classes)


def method_specs(cfg: BackboneConfig, method: MethodConfig) -> Iterator[ParamSpec]:
    d = method.middle_dim(cfg)
    for s, b in cfg.blocks():
        m = cfg.dim(s)
        key = (s, b)
        if method.name == "e3va":
            per_adapter = dual_lowrank_count(m, m // 2, method.alpha) + dual_lowrank_count(m // 2, m, method.alpha)
            yield ParamSpec("adapter", ROLE_FACTOR, 2 * per_adapter, key)
        elif method.name == "adapter":
            yield ParamSpec("adapter", ROLE_WEIGHT, 2 * (2 * m * d), key)
            yield ParamSpec("adapter", ROLE_BIAS, 2 * (d + m), key)
        elif method.name == "adaptformer":
            yield ParamSpec("adapter", ROLE_WEIGHT, 2 * (2 * m * d), key)
            yield ParamSpec("adapter", ROLE_BIAS, 2 * (d + m), key)
            yield ParamSpec("adapter", ROLE_SCALE, 2, key)
        elif method.name == "lora":
            yield ParamSpec("adapter", ROLE_FACTOR, 2 * (2 * m * d), key)
    if method.name == "e3va" and method.trainable_reduction:
        for s in range(cfg.n_stages - 1):
            m = cfg.dim(s)
            yield ParamSpec("adapter", ROLE_NORM_WEIGHT, 4 * m)
            yield ParamSpec("adapter", ROLE_NORM_BIAS, 4 * m)
            yield ParamSpec("adapter", ROLE_WEIGHT, 8 * m * m)


def count_params(cfg: BackboneConfig, method: MethodConfig, head: HeadConfig | None = None,
                 scope: str = "backbone") -> ParamCount:
    """Trainable/total counts for ``method`` on ``cfg``.

    ``scope="backbone"`` covers backbone, adapters and FPN norms (the scope
    of published trainable-parameter tables); ``"all"`` adds laterals and
    the classifier. ``by_tag`` always spans the whole model.
    """
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    method.check_against(cfg)
    head = head or HeadConfig()
    groups = dict.fromkeys(GROUPS, 0)
    tags = dict.fromkeys(OWNER_TAGS, 0)
    for spec in (*backbone_specs(cfg), *neck_head_specs(cfg, head), *method_specs(cfg, method)):
        tags[spec.owner] += spec.size
        if not spec.in_scope(scope):
            continue
        if not trainable_under(spec, method, cfg.depths):
            groups[PHI_F] += spec.size
        else:
            groups[PHI_A if spec.owner == "adapter" else PHI_O] += spec.size
    trainable = groups[PHI_A] + groups[PHI_O]
    return ParamCount(method.label, cfg.name, scope, trainable, trainable + groups[PHI_F], groups, tags)


def materialized_count(model, scope: str = "backbone") -> ParamCount:
    """Counts read off a built model's registry."""
    reg = model.registry
    groups = reg.group_sizes(scope)
    trainable = groups[PHI_A] + groups[PHI_O]
    return ParamCount(model.method.label, model.cfg.name, scope, trainable,
                      trainable + groups[PHI_F], groups, reg.tag_sizes())


def verify_against_built(cfg: BackboneConfig, method: MethodConfig, head: HeadConfig | None = None,
                         seed: int = 0) -> VerifyReport:
    """Build the model and compare every group and tag with the closed form."""
    from highway_lab.model import build_model

    model = build_model(cfg, method, head, seed)
    symbolic, built, mismatches = {}, {}, []
    for scope in SCOPES:
        sym = count_params(cfg, method, head, scope)
        mat = materialized_count(model, scope)
        symbolic[scope], built[scope] = sym, mat
        for group in GROUPS:
            if sym.by_group[group] != mat.by_group[group]:
                mismatches.append(f"{scope}/{group}: symbolic {sym.by_group[group]:,} != built {mat.by_group[group]:,}")
    for tag in OWNER_TAGS:
        s, b = symbolic["all"].by_tag[tag], built["all"].by_tag[tag]
        if s != b:
            mismatches.append(f"tag {tag}: symbolic {s:,} != built {b:,}")
    for line in mismatches:
        log.warning("count mismatch for %s: %s", method.label, line)
    return VerifyReport(not mismatches, mismatches, symbolic, built)


def count_row(cfg: BackboneConfig, method: MethodConfig, head: HeadConfig | None = None) -> dict:
    """One ``count-params`` CSV row."""
    full = count_params(cfg, MethodConfig(name="full"), head)
    c = count_params(cfg, method, head)
    return {
        "method": method.label,
        "backbone": cfg.name,
        "alpha": method.alpha if method.name == "e3va" else "",
        "trainable": c.trainable,
        "total": c.total,
        "delta_vs_full_pct": round(c.delta_pct(full), 2),
    }
