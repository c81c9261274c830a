"""Toy hierarchical windowed-attention backbone.

Tokens are ``[B, N, C]`` over a square ``g x g`` patch grid. Each block is
two residual sub-blocks whose branch outputs (the taps) are exposed to hooks
through :class:`TapEvent`::

    h      = l + tap1,   tap1 = W-MSA(norm1(l))
    l_next = h + tap2,   tap2 = MLP(norm2(h))

Windows never shift. A stage whose grid is smaller than the configured
window attends over the whole grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from highway_lab import ops
from highway_lab.config import INSERTING_METHODS, BackboneConfig
from highway_lab.errors import HookError, ShapeError
from highway_lab.initializers import trunc_normal
from highway_lab.registry import (
    ROLE_BIAS,
    ROLE_NORM_BIAS,
    ROLE_NORM_WEIGHT,
    ROLE_REL_POS,
    ROLE_WEIGHT,
    ParamRegistry,
)
from highway_lab.tape import Tensor, active_tape, constant

log = logging.getLogger(__name__)

TapSite = Literal["qkv", "attn", "mlp"]


@dataclass(frozen=True)
class TapEvent:
    """What a hook sees. ``output`` is the value the hook may replace."""

    stage: int
    block: int
    site: TapSite
    input: Tensor
    output: Tensor
    layer: Linear | None = None  # the frozen projection behind a qkv tap


Hook = Callable[[TapEvent], "Tensor | None"]


@dataclass
class Linear:
    weight: Tensor  # [in, out]
    bias: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y


@dataclass
class Norm:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.weight, self.bias)


@dataclass
class AttnParams:
    qkv: Linear
    proj: Linear
    rel_table: Tensor  # [(2w-1)^2, heads]
    heads: int
    window: int


@dataclass
class BlockParams:
    norm1: Norm
    attn: AttnParams
    norm2: Norm
    fc1: Linear
    fc2: Linear


@dataclass
class MergeParams:
    norm: Norm
    reduction: Tensor  # [4m, 2m], no bias


@dataclass
class PatchEmbedParams:
    proj: Linear
    norm: Norm


@dataclass
class Stage:
    blocks: list[BlockParams]
    downsample: MergeParams | None


@dataclass
class Backbone:
    cfg: BackboneConfig
    patch_embed: PatchEmbedParams
    stages: list[Stage]


@dataclass
class BlockState:
    """Stream value entering a block, its two taps and the value leaving it."""

    l: Tensor
    tap1: Tensor
    tap2: Tensor
    out: Tensor


@dataclass
class BackboneOutput:
    features: list[Tensor]  # per-stage l_S before downsampling
    states: list[list[BlockState]] = field(default_factory=list)


# -- construction --


def _linear(reg: ParamRegistry, rng, name: str, d_in: int, d_out: int, *, bias: bool = True,
            block=None) -> Linear:
    w = reg.add(f"{name}.weight", trunc_normal(rng, (d_in, d_out)), owner="backbone",
                role=ROLE_WEIGHT, block=block)
    b = None
    if bias:
        b = reg.add(f"{name}.bias", np.zeros(d_out), owner="backbone", role=ROLE_BIAS, block=block)
    return Linear(w, b)


def _norm(reg: ParamRegistry, name: str, dim: int, *, owner: str = "backbone",
          roles=(ROLE_NORM_WEIGHT, ROLE_NORM_BIAS), block=None) -> Norm:
    w = reg.add(f"{name}.weight", np.ones(dim), owner=owner, role=roles[0], block=block)
    b = reg.add(f"{name}.bias", np.zeros(dim), owner=owner, role=roles[1], block=block)
    return Norm(w, b)


def build_backbone(cfg: BackboneConfig, reg: ParamRegistry, rng: np.random.Generator) -> Backbone:
    """Allocate and register every backbone parameter."""
    e = cfg.embed_dim
    patch_in = cfg.patch * cfg.patch * cfg.in_chans
    embed = PatchEmbedParams(_linear(reg, rng, "patch_embed.proj", patch_in, e),
                             _norm(reg, "patch_embed.norm", e))
    stages = []
    for s, depth in enumerate(cfg.depths):
        m = cfg.dim(s)
        w = cfg.window_for(s)
        hidden = cfg.mlp_ratio * m
        blocks = []
        for b in range(depth):
            name = f"stages.{s}.blocks.{b}"
            key = (s, b)
            table = reg.add(f"{name}.attn.relative_position_bias_table",
                            trunc_normal(rng, ((2 * w - 1) ** 2, cfg.heads[s])),
                            owner="backbone", role=ROLE_REL_POS, block=key)
            blocks.append(BlockParams(
                norm1=_norm(reg, f"{name}.norm1", m, block=key),
                attn=AttnParams(
                    qkv=_linear(reg, rng, f"{name}.attn.qkv", m, 3 * m, block=key),
                    proj=_linear(reg, rng, f"{name}.attn.proj", m, m, block=key),
                    rel_table=table,
                    heads=cfg.heads[s],
                    window=w,
                ),
                norm2=_norm(reg, f"{name}.norm2", m, block=key),
                fc1=_linear(reg, rng, f"{name}.mlp.fc1", m, hidden, block=key),
                fc2=_linear(reg, rng, f"{name}.mlp.fc2", hidden, m, block=key),
            ))
        downsample = None
        if s < cfg.n_stages - 1:
            downsample = MergeParams(
                _norm(reg, f"stages.{s}.downsample.norm", 4 * m),
                reg.add(f"stages.{s}.downsample.reduction.weight", trunc_normal(rng, (4 * m, 2 * m)),
                        owner="backbone", role=ROLE_WEIGHT),
            )
        stages.append(Stage(blocks, downsample))
    log.debug("built backbone %s: %d blocks", cfg.name, sum(cfg.depths))
    return Backbone(cfg, embed, stages)


# -- forward --


def relative_position_index(window: int) -> np.ndarray:
    """``[w^2, w^2]`` indices into the ``(2w-1)^2`` bias table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


def _fire(hooks: Sequence[Hook], event: TapEvent, inserting: bool) -> Tensor:
    out = event.output
    for hook in hooks:
        replaced = hook(TapEvent(event.stage, event.block, event.site, event.input, out, event.layer))
        if replaced is None:
            continue
        if not inserting:
            raise HookError(
                f"hook altered the {event.site} output of stage {event.stage} block {event.block} "
                "in a non-inserting mode"
            )
        if replaced.shape != out.shape:
            raise ShapeError(f"hook returned {list(replaced.shape)} for a {list(out.shape)} tap")
        out = replaced
    return out


def window_attention(x: Tensor, p: AttnParams, grid: int, fire: Callable[..., Tensor]) -> Tensor:
    """W-MSA over non-overlapping windows with a relative-position bias."""
    _, _, c = x.shape
    w, heads = p.window, p.heads
    n = w * w
    d = c // heads
    xw = ops.window_partition(x, w, (grid, grid))
    qkv = fire("qkv", xw, p.qkv(xw), p.qkv)
    qkv = ops.transpose(ops.reshape(qkv, (-1, n, 3, heads, d)), (2, 0, 3, 1, 4))
    q = ops.scale(ops.slice_(qkv, (0,)), d ** -0.5)
    k = ops.slice_(qkv, (1,))
    v = ops.slice_(qkv, (2,))
    scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))
    bias = ops.transpose(ops.gather(p.rel_table, relative_position_index(w)), (2, 0, 1))
    attn = ops.softmax(ops.add(scores, bias), axis=-1)
    out = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (-1, n, c))
    return ops.window_merge(p.proj(out), w, (grid, grid))


def block_forward(l: Tensor, p: BlockParams, grid: int, *, stage: int = 0, block: int = 0,
                  hooks: Sequence[Hook] = (), inserting: bool = False) -> BlockState:
    """One block. Hooks see the qkv projection and both taps."""
    def fire(site: TapSite, inp: Tensor, out: Tensor, layer: Linear | None = None) -> Tensor:
        return _fire(hooks, TapEvent(stage, block, site, inp, out, layer), inserting)

    tap1 = window_attention(p.norm1(l), p.attn, grid, fire)
    h = ops.add(l, fire("attn", l, tap1))
    tap2 = p.fc2(ops.gelu(p.fc1(p.norm2(h))))
    out = ops.add(h, fire("mlp", h, tap2))
    return BlockState(l=l, tap1=tap1, tap2=tap2, out=out)


def patch_embed(images: Tensor, p: PatchEmbedParams, patch: int) -> Tensor:
    """``[B, H, W, C]`` images to normalized ``[B, N, E]`` patch tokens."""
    b, hgt, wid, c = images.shape
    if hgt % patch or wid % patch:
        raise ShapeError(f"patch_embed: image {hgt}x{wid} is not divisible by patch {patch}")
    gh, gw = hgt // patch, wid // patch
    x = ops.reshape(images, (b, gh, patch, gw, patch, c))
    x = ops.reshape(ops.transpose(x, (0, 1, 3, 2, 4, 5)), (b, gh * gw, patch * patch * c))
    return p.norm(p.proj(x))


def patch_merge(tokens: Tensor, p: MergeParams, grid: int) -> Tensor:
    """2x2 neighbourhood concat, norm, bias-free linear: ``[B, g^2, m] -> [B, g^2/4, 2m]``."""
    b, n, c = tokens.shape
    if n != grid * grid or grid % 2:
        raise ShapeError(f"patch_merge: {n} tokens do not form an even {grid}x{grid} grid")
    x = ops.reshape(tokens, (b, grid, grid, c))
    parts = [
        ops.slice_(x, (slice(None), slice(0, None, 2), slice(0, None, 2))),
        ops.slice_(x, (slice(None), slice(1, None, 2), slice(0, None, 2))),
        ops.slice_(x, (slice(None), slice(0, None, 2), slice(1, None, 2))),
        ops.slice_(x, (slice(None), slice(1, None, 2), slice(1, None, 2))),
    ]
    x = ops.reshape(ops.concat(parts, axis=-1), (b, n // 4, 4 * c))
    return ops.matmul(p.norm(x), p.reduction)


def backbone_forward(images: np.ndarray | Tensor, backbone: Backbone, mode: str = "fixed",
                     hooks: Sequence[Hook] = ()) -> BackboneOutput:
    """Run the backbone on the active tape, recording per-stage features and block states.

    Only the inserting modes may let hooks replace tap values.
    """
    tape = active_tape()
    cfg = backbone.cfg
    inserting = mode in INSERTING_METHODS
    if not isinstance(images, Tensor):
        images = constant(images, dtype=cfg.dtype)
    out = BackboneOutput(features=[])
    with tape.scope("backbone"):
        l = patch_embed(images, backbone.patch_embed, cfg.patch)
        for s, stage in enumerate(backbone.stages):
            grid = cfg.grid(s)
            states = []
            for b, blk in enumerate(stage.blocks):
                state = block_forward(l, blk, grid, stage=s, block=b, hooks=hooks, inserting=inserting)
                states.append(state)
                l = state.out
            out.features.append(l)
            out.states.append(states)
            if stage.downsample is not None:
                l = patch_merge(l, stage.downsample, grid)
    return out
