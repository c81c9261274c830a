"""Tuning-method structures: the gradient highway and the PETL baselines.

The highway never touches the backbone's stream. It reads the two taps of
every block and accumulates adapter outputs into a parallel stream ``e``::

    e_0 = 0
    e  <- e + A1(tap1) + A2(tap2)      (per block)
    e  <- merge(e)                     (between stages)
    F_S = FpnNorm(l_S + e_S)

Adapter, LoRA and AdaptFormer are expressed as tap hooks, so they do sit in
the backbone's residual stream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from highway_lab import ops
from highway_lab.backbone import Backbone, Linear, MergeParams, Norm, TapEvent, patch_merge
from highway_lab.config import BackboneConfig, MethodConfig
from highway_lab.errors import ConfigError, ShapeError
from highway_lab.initializers import kaiming_normal, kaiming_uniform, trunc_normal
from highway_lab.registry import (
    ROLE_BIAS,
    ROLE_FACTOR,
    ROLE_NORM_BIAS,
    ROLE_NORM_WEIGHT,
    ROLE_SCALE,
    ROLE_WEIGHT,
    ParamRegistry,
)
from highway_lab.tape import Tensor, active_tape, constant

log = logging.getLogger(__name__)

Fusion = Literal["additive", "highway_only"]


# -- dual low-rank linear --


@dataclass
class DualLowRank:
    """``y = x s1 t1 + x s2 t2 + bias`` with ``s: [m, a]`` and ``t: [a, n]``."""

    s1: Tensor
    t1: Tensor
    s2: Tensor
    t2: Tensor
    bias: Tensor

    @property
    def in_dim(self) -> int:
        return self.s1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.t1.shape[1]

    @property
    def rank(self) -> int:
        return self.s1.shape[1]

    def materialize(self) -> np.ndarray:
        """The dense ``[m, n]`` matrix the factors represent."""
        return self.s1.data @ self.t1.data + self.s2.data @ self.t2.data


def dual_lowrank_count(m: int, n: int, alpha: int) -> int:
    return 2 * alpha * (m + n) + n


def dual_lowrank_apply(p: DualLowRank, x: Tensor) -> Tensor:
    if x.shape[-1] != p.in_dim:
        raise ShapeError(f"dual_lowrank: input width {x.shape[-1]} != {p.in_dim}")
    y1 = ops.matmul(ops.matmul(x, p.s1), p.t1)
    y2 = ops.matmul(ops.matmul(x, p.s2), p.t2)
    return ops.add(ops.add(y1, y2), p.bias)


def build_dual_lowrank(reg: ParamRegistry, rng, name: str, m: int, n: int, alpha: int, *,
                       block=None) -> DualLowRank:
    def factor(suffix, shape):
        return reg.add(f"{name}.{suffix}", kaiming_normal(rng, shape), owner="adapter",
                       role=ROLE_FACTOR, block=block)

    return DualLowRank(
        s1=factor("s1", (m, alpha)), t1=factor("t1", (alpha, n)),
        s2=factor("s2", (m, alpha)), t2=factor("t2", (alpha, n)),
        bias=reg.add(f"{name}.bias", np.zeros(n), owner="adapter", role=ROLE_BIAS, block=block),
    )


# -- highway adapter --


@dataclass
class E3vaAdapter:
    down: DualLowRank  # m -> m/2
    up: DualLowRank  # m/2 -> m


def e3va_adapter_forward(x: Tensor, a: E3vaAdapter) -> Tensor:
    """No residual: the output is added to the highway, not to ``x``."""
    return dual_lowrank_apply(a.up, ops.gelu(dual_lowrank_apply(a.down, x)))


def build_e3va_adapter(reg: ParamRegistry, rng, name: str, m: int, alpha: int, *, block=None) -> E3vaAdapter:
    if m % 2:
        raise ShapeError(f"e3va adapter needs an even width, got {m}")
    return E3vaAdapter(
        down=build_dual_lowrank(reg, rng, f"{name}.down", m, m // 2, alpha, block=block),
        up=build_dual_lowrank(reg, rng, f"{name}.up", m // 2, m, alpha, block=block),
    )


@dataclass
class HighwayBlock:
    attn: E3vaAdapter
    mlp: E3vaAdapter


@dataclass
class HighwayMerge:
    mode: Literal["inherited", "trainable"]
    inherited: MergeParams  # the backbone stage's own merge, frozen
    copy: MergeParams | None = None  # trainable mode only


@dataclass
class Highway:
    blocks: dict[tuple[int, int], HighwayBlock]
    merges: list[HighwayMerge]
    fusion: Fusion = "additive"


@dataclass
class HighwayState:
    stage: int
    block: int
    e: Tensor


def e3va_highway_step(e: Tensor, tap1: Tensor, tap2: Tensor, a1: E3vaAdapter, a2: E3vaAdapter) -> Tensor:
    if not (e.shape == tap1.shape == tap2.shape):
        raise ShapeError(
            f"highway step: e {list(e.shape)}, tap1 {list(tap1.shape)}, tap2 {list(tap2.shape)} differ"
        )
    return ops.add(ops.add(e, e3va_adapter_forward(tap1, a1)), e3va_adapter_forward(tap2, a2))


def highway_merge(e: Tensor, merge: HighwayMerge, grid: int) -> Tensor:
    """Downsample the highway with the backbone's merge tensors or a trainable copy of them."""
    if merge.mode == "inherited":
        return patch_merge(e, merge.inherited, grid)
    if merge.copy is None:
        raise ConfigError("trainable highway merge was built without its own parameters")
    return patch_merge(e, merge.copy, grid)


def stage_fuse(l_stage: Tensor, e_stage: Tensor | None, norm: Norm, fusion: Fusion = "additive") -> Tensor:
    if e_stage is None:
        return norm(l_stage)
    if e_stage.shape != l_stage.shape:
        raise ShapeError(f"stage_fuse: l {list(l_stage.shape)} and e {list(e_stage.shape)} differ")
    if fusion == "highway_only":
        return norm(e_stage)
    return norm(ops.add(l_stage, e_stage))


def _trainable_merge(reg: ParamRegistry, rng, s: int, m: int) -> MergeParams:
    name = f"highway.merges.{s}"
    return MergeParams(
        norm=Norm(reg.add(f"{name}.norm.weight", np.ones(4 * m), owner="adapter", role=ROLE_NORM_WEIGHT),
                  reg.add(f"{name}.norm.bias", np.zeros(4 * m), owner="adapter", role=ROLE_NORM_BIAS)),
        reduction=reg.add(f"{name}.reduction.weight", trunc_normal(rng, (4 * m, 2 * m)),
                          owner="adapter", role=ROLE_WEIGHT),
    )


def build_highway(cfg: BackboneConfig, method: MethodConfig, backbone: Backbone,
                  reg: ParamRegistry, rng) -> Highway:
    blocks = {}
    for s, b in cfg.blocks():
        m = cfg.dim(s)
        name = f"adapters.{s}.{b}"
        blocks[(s, b)] = HighwayBlock(
            attn=build_e3va_adapter(reg, rng, f"{name}.attn", m, method.alpha, block=(s, b)),
            mlp=build_e3va_adapter(reg, rng, f"{name}.mlp", m, method.alpha, block=(s, b)),
        )
    merges = []
    for s, stage in enumerate(backbone.stages[:-1]):
        if method.trainable_reduction:
            merges.append(HighwayMerge("trainable", stage.downsample, _trainable_merge(reg, rng, s, cfg.dim(s))))
        else:
            merges.append(HighwayMerge("inherited", stage.downsample))
    return Highway(blocks, merges, method.fusion)


def highway_forward(highway: Highway, cfg: BackboneConfig, states) -> tuple[list[Tensor], list[HighwayState]]:
    """Accumulate the highway over recorded block states. Returns per-stage e_S."""
    tape = active_tape()
    trace: list[HighwayState] = []
    stages: list[Tensor] = []
    with tape.scope("adapter"):
        e = constant(np.zeros(states[0][0].l.shape, dtype=cfg.dtype), owner="adapter")
        for s, stage_states in enumerate(states):
            for b, st in enumerate(stage_states):
                hb = highway.blocks[(s, b)]
                e = e3va_highway_step(e, st.tap1, st.tap2, hb.attn, hb.mlp)
                trace.append(HighwayState(s, b, e))
            stages.append(e)
            if s < len(states) - 1:
                e = highway_merge(e, highway.merges[s], cfg.grid(s))
    return stages, trace


# -- in-stream baselines --


@dataclass
class StandardAdapter:
    down: Linear
    up: Linear


def standard_adapter_forward(x: Tensor, p: StandardAdapter) -> Tensor:
    """Bottleneck with a residual: ``x + U(GeLU(D(x)))``."""
    return ops.add(p.up(ops.gelu(p.down(x))), x)


@dataclass
class AdaptFormerBranch:
    down: Linear
    up: Linear
    scale: Tensor  # [1]


def adaptformer_forward(x: Tensor, sublayer_out: Tensor, p: AdaptFormerBranch) -> Tensor:
    """Parallel branch ``s * U(GeLU(D(x)))`` added to the sublayer output."""
    return ops.add(sublayer_out, ops.scale(p.up(ops.gelu(p.down(x))), p.scale))


@dataclass
class LoraPair:
    a: Tensor  # [m, r]
    b: Tensor  # [r, m]


def lora_delta(x: Tensor, p: LoraPair) -> Tensor:
    return ops.matmul(ops.matmul(x, p.a), p.b)


def lora_linear_forward(x: Tensor, weight: Tensor, p: LoraPair, bias: Tensor | None = None) -> Tensor:
    """``x W + x A B (+ bias)`` with ``W`` frozen. The low-rank branch is adapter-owned."""
    frozen = ops.matmul(x, weight)
    with active_tape().scope("adapter"):
        y = ops.add(frozen, lora_delta(x, p))
    return ops.add(y, bias) if bias is not None else y


def _adapter_linear(reg, rng, name, d_in, d_out, *, zero: bool, block) -> Linear:
    w = np.zeros((d_in, d_out)) if zero else kaiming_uniform(rng, (d_in, d_out))
    return Linear(
        reg.add(f"{name}.weight", w, owner="adapter", role=ROLE_WEIGHT, block=block),
        reg.add(f"{name}.bias", np.zeros(d_out), owner="adapter", role=ROLE_BIAS, block=block),
    )


class AdapterHook:
    """Sequential bottleneck adapters after the attention and MLP branches."""

    def __init__(self, adapters: dict[tuple[int, int, str], StandardAdapter]):
        self.adapters = adapters

    def __call__(self, event: TapEvent) -> Tensor | None:
        p = self.adapters.get((event.stage, event.block, event.site))
        if p is None:
            return None
        with active_tape().scope("adapter"):
            return standard_adapter_forward(event.output, p)


class AdaptFormerHook:
    """Scaled parallel branches reading each sublayer's input."""

    def __init__(self, branches: dict[tuple[int, int, str], AdaptFormerBranch]):
        self.branches = branches

    def __call__(self, event: TapEvent) -> Tensor | None:
        p = self.branches.get((event.stage, event.block, event.site))
        if p is None:
            return None
        with active_tape().scope("adapter"):
            return adaptformer_forward(event.input, event.output, p)


class LoraHook:
    """Rebuilds the fused qkv projection as ``[lora(q), k, lora(v)]`` from its weight thirds.

    The backbone's own fused output is left unused, so it stays out of the
    gradient closure.
    """

    def __init__(self, pairs: dict[tuple[int, int], tuple[LoraPair, LoraPair]]):
        self.pairs = pairs

    def __call__(self, event: TapEvent) -> Tensor | None:
        if event.site != "qkv" or (event.stage, event.block) not in self.pairs:
            return None
        if event.layer is None:
            raise ShapeError(f"qkv tap of stage {event.stage} block {event.block} carries no projection")
        q, v = self.pairs[(event.stage, event.block)]
        x, layer = event.input, event.layer
        m = layer.weight.shape[1] // 3

        def third(i: int) -> tuple[Tensor, Tensor | None]:
            cols = slice(i * m, (i + 1) * m)
            w = ops.slice_(layer.weight, (slice(None), cols))
            return w, None if layer.bias is None else ops.slice_(layer.bias, (cols,))

        (wq, bq), (wk, bk), (wv, bv) = third(0), third(1), third(2)
        k = ops.matmul(x, wk)
        if bk is not None:
            k = ops.add(k, bk)
        return ops.concat([lora_linear_forward(x, wq, q, bq), k, lora_linear_forward(x, wv, v, bv)], axis=-1)


def build_adapter_hook(cfg: BackboneConfig, method: MethodConfig, reg: ParamRegistry, rng) -> AdapterHook:
    d = method.middle_dim(cfg)
    adapters = {}
    for s, b in cfg.blocks():
        m = cfg.dim(s)
        for site in ("attn", "mlp"):
            name = f"adapters.{s}.{b}.{site}"
            adapters[(s, b, site)] = StandardAdapter(
                down=_adapter_linear(reg, rng, f"{name}.down", m, d, zero=False, block=(s, b)),
                up=_adapter_linear(reg, rng, f"{name}.up", d, m, zero=True, block=(s, b)),
            )
    return AdapterHook(adapters)


def build_adaptformer_hook(cfg: BackboneConfig, method: MethodConfig, reg: ParamRegistry, rng) -> AdaptFormerHook:
    d = method.middle_dim(cfg)
    branches = {}
    for s, b in cfg.blocks():
        m = cfg.dim(s)
        for site in ("attn", "mlp"):
            name = f"adaptformer.{s}.{b}.{site}"
            branches[(s, b, site)] = AdaptFormerBranch(
                down=_adapter_linear(reg, rng, f"{name}.down", m, d, zero=False, block=(s, b)),
                up=_adapter_linear(reg, rng, f"{name}.up", d, m, zero=True, block=(s, b)),
                scale=reg.add(f"{name}.scale", np.full(1, method.adaptformer_scale), owner="adapter",
                              role=ROLE_SCALE, block=(s, b)),
            )
    return AdaptFormerHook(branches)


def build_lora_hook(cfg: BackboneConfig, method: MethodConfig, reg: ParamRegistry, rng) -> LoraHook:
    r = method.middle_dim(cfg)
    pairs = {}
    for s, b in cfg.blocks():
        m = cfg.dim(s)
        name = f"lora.{s}.{b}"

        def pair(which: str) -> LoraPair:
            return LoraPair(
                a=reg.add(f"{name}.{which}.A", kaiming_uniform(rng, (m, r)), owner="adapter",
                          role=ROLE_FACTOR, block=(s, b)),
                b=reg.add(f"{name}.{which}.B", np.zeros((r, m)), owner="adapter",
                          role=ROLE_FACTOR, block=(s, b)),
            )

        pairs[(s, b)] = (pair("q"), pair("v"))
    return LoraHook(pairs)
