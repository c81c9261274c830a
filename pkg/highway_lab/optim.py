"""AdamW with decoupled weight decay, state kept only for trainable parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from highway_lab.config import DEFAULT_LR, DEFAULT_WEIGHT_DECAY
from highway_lab.tape import GradMap, Tensor


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = DEFAULT_WEIGHT_DECAY


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[int, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[int, np.ndarray] = field(default_factory=dict)


def init_state(params: Sequence[Tensor]) -> AdamWState:
    state = AdamWState()
    for p in params:
        if p.trainable:
            state.exp_avg[p.id] = np.zeros_like(p.data)
            state.exp_avg_sq[p.id] = np.zeros_like(p.data)
    return state


def adamw_step(params: Sequence[Tensor], grads: GradMap, state: AdamWState, hp: AdamWHyper) -> AdamWState:
    """Update trainable params in place. Params without a gradient this step are left alone."""
    unknown = set(grads) - set(state.exp_avg)
    if unknown:
        raise ValueError(f"gradients for {len(unknown)} parameters without optimizer state")
    state.step += 1
    t = state.step
    bias1 = 1.0 - hp.beta1 ** t
    bias2 = 1.0 - hp.beta2 ** t
    for p in params:
        g = grads.get(p.id)
        if g is None or not p.trainable:
            continue
        m, v = state.exp_avg[p.id], state.exp_avg_sq[p.id]
        p.data *= 1.0 - hp.lr * hp.weight_decay
        m *= hp.beta1
        m += (1.0 - hp.beta1) * g
        v *= hp.beta2
        v += (1.0 - hp.beta2) * g * g
        p.data -= hp.lr * (m / bias1) / (np.sqrt(v / bias2) + hp.eps)
    return state


class AdamW:
    def __init__(self, params: Sequence[Tensor], hp: AdamWHyper | None = None):
        self.params = [p for p in params if p.trainable]
        self.hp = hp or AdamWHyper()
        self.state = init_state(self.params)

    def step(self, grads: GradMap) -> None:
        adamw_step(self.params, grads, self.state, self.hp)
