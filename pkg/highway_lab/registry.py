"""Named parameter registry, φ-group partitioning and tuning policies.

Every parameter of a built model is registered under a dotted name with an
owner tag and a role. The policy for a method decides which entries are
trainable; the groups are derived from that:

* φ_A: trainable, adapter-owned
* φ_O: trainable, any other owner
* φ_F: frozen
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from highway_lab.config import METHODS, INSERTING_METHODS, MethodConfig
from highway_lab.errors import ConfigError
from highway_lab.tape import OWNER_TAGS, Tensor, parameter

log = logging.getLogger(__name__)

ROLE_WEIGHT = "weight"
ROLE_BIAS = "bias"
ROLE_NORM_WEIGHT = "norm_weight"
ROLE_NORM_BIAS = "norm_bias"
ROLE_REL_POS = "rel_pos_bias"
ROLE_FPN_WEIGHT = "fpn_norm_weight"
ROLE_FPN_BIAS = "fpn_norm_bias"
ROLE_FACTOR = "factor"
ROLE_SCALE = "scale"

BIAS_ROLES = frozenset({ROLE_BIAS, ROLE_NORM_BIAS, ROLE_REL_POS, ROLE_FPN_BIAS})
NORM_ROLES = frozenset({ROLE_NORM_WEIGHT, ROLE_NORM_BIAS, ROLE_FPN_WEIGHT, ROLE_FPN_BIAS})
FPN_ROLES = frozenset({ROLE_FPN_WEIGHT, ROLE_FPN_BIAS})

PHI_A, PHI_O, PHI_F = "phi_A", "phi_O", "phi_F"
GROUPS = (PHI_A, PHI_O, PHI_F)


@dataclass
class ParamEntry:
    name: str
    tensor: Tensor
    owner: str
    role: str
    block: tuple[int, int] | None = None

    @property
    def size(self) -> int:
        return self.tensor.size

    @property
    def trainable(self) -> bool:
        return self.tensor.trainable

    @property
    def is_fpn_norm(self) -> bool:
        return self.role in FPN_ROLES

    @property
    def group(self) -> str:
        if not self.trainable:
            return PHI_F
        return PHI_A if self.owner == "adapter" else PHI_O

    def in_scope(self, scope: str) -> bool:
        """``backbone`` scope covers backbone, adapters and FPN norms."""
        if scope == "all":
            return True
        return self.owner in ("backbone", "adapter") or self.is_fpn_norm


class ParamRegistry:
    """Ordered name → entry mapping. Tensors are created here."""

    def __init__(self, dtype: np.dtype = np.dtype(np.float64)):
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, ParamEntry] = {}
        self._by_id: dict[int, ParamEntry] = {}

    def add(self, name: str, data: np.ndarray, *, owner: str, role: str,
            block: tuple[int, int] | None = None) -> Tensor:
        if name in self._entries:
            raise ConfigError(f"parameter {name!r} registered twice")
        if owner not in OWNER_TAGS:
            raise ConfigError(f"unknown owner tag {owner!r} for {name}")
        tensor = parameter(np.asarray(data, dtype=self.dtype), owner=owner, name=name)
        entry = ParamEntry(name, tensor, owner, role, block)
        self._entries[name] = entry
        self._by_id[tensor.id] = entry
        return tensor

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, name: str) -> ParamEntry:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def by_id(self, tensor_id: int) -> ParamEntry:
        return self._by_id[tensor_id]

    def trainable(self) -> list[Tensor]:
        return [e.tensor for e in self if e.trainable]

    def frozen(self) -> list[Tensor]:
        return [e.tensor for e in self if not e.trainable]

    def group_names(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {g: [] for g in GROUPS}
        for e in self:
            out[e.group].append(e.name)
        return out

    def group_sizes(self, scope: str = "all") -> dict[str, int]:
        out = dict.fromkeys(GROUPS, 0)
        for e in self:
            if e.in_scope(scope):
                out[e.group] += e.size
        return out

    def tag_sizes(self) -> dict[str, int]:
        out = dict.fromkeys(OWNER_TAGS, 0)
        for e in self:
            out[e.owner] += e.size
        return out


def last_block(depths) -> tuple[int, int]:
    stage = len(depths) - 1
    return stage, depths[stage] - 1


def trainable_under(entry: ParamEntry, method: MethodConfig, depths) -> bool:
    """Policy decision for one entry."""
    if method.name == "full":
        return True
    if entry.owner == "adapter":
        return True
    if entry.is_fpn_norm:
        if method.name == "bitfit":
            return entry.role == ROLE_FPN_BIAS or method.fpn_norm_trainable
        if method.name == "norm":
            return True
        return method.fpn_norm_trainable
    if entry.owner in ("neck", "head"):
        return True
    # backbone from here on
    if method.name == "bitfit":
        return entry.role in BIAS_ROLES
    if method.name == "norm":
        return entry.role in NORM_ROLES
    if method.name == "partial1":
        return entry.block == last_block(depths)
    return False


def apply_tuning_policy(registry: ParamRegistry, method: MethodConfig, depths) -> ParamRegistry:
    """Set every entry's trainable flag for ``method``. Returns the registry."""
    if method.name not in METHODS:
        raise ConfigError(f"unknown method {method.name!r}")
    if method.name not in INSERTING_METHODS | {"e3va"}:
        stray = [e.name for e in registry if e.owner == "adapter"]
        if stray:
            raise ConfigError(f"{method.name} builds no adapters but found {stray[:3]}")
    for e in registry:
        e.tensor.trainable = trainable_under(e, method, depths)
    sizes = registry.group_sizes()
    log.info("policy %s: %s", method.label, ", ".join(f"{g}={n:,}" for g, n in sizes.items()))
    return registry
