"""Reverse-mode autodiff tape with trainable-closure pruning.

Every primitive application appends a node to the active tape. Before the
reverse sweep the tape marks its closure: a node needs a gradient only if
it is forward-reachable from a trainable parameter and backward-reachable
from the loss. The sweep skips every other node, and a primitive's backward
is asked only for the inputs that need it. Each node records the bytes it
held for backward (its output gradient plus saved values), which is the
gradient-memory measurement the profiler reports.

Usage::

    with Tape() as tape:
        loss = ops.cross_entropy(model(x), labels)
    grads = backward(tape, loss)
"""

from __future__ import annotations

import itertools
import logging
import math
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from highway_lab.errors import (
    NonDeterministicError,
    NonFiniteError,
    ShapeError,
    TapeError,
    TensorError,
)
from highway_lab.primitives import RULES

log = logging.getLogger(__name__)

OWNER_TAGS = ("backbone", "adapter", "neck", "head")
DEFAULT_DTYPE = np.float64

GradMap = dict[int, np.ndarray]

_ids = itertools.count(1)
_active: ContextVar["Tape | None"] = ContextVar("highway_lab_active_tape", default=None)


class TensorKind(str, Enum):
    PARAMETER = "parameter"
    CONSTANT = "constant"
    INTERMEDIATE = "intermediate"


@dataclass(eq=False)
class Tensor:
    """An array with identity, a kind, an owner tag and a trainable flag.

    Only parameters can be trainable. An intermediate carries ``flows_grad``
    when some input of the primitive that produced it was trainable-reachable.
    """

    data: np.ndarray
    kind: TensorKind = TensorKind.CONSTANT
    trainable: bool = False
    owner: str = "backbone"
    name: str | None = None
    flows_grad: bool = field(default=False, repr=False)
    id: int = field(default_factory=lambda: next(_ids))

    def __post_init__(self):
        if self.trainable and self.kind is not TensorKind.PARAMETER:
            raise TensorError(f"only parameters can be trainable, got a {self.kind.value}")
        if self.owner not in OWNER_TAGS:
            raise TensorError(f"unknown owner tag {self.owner!r}")

    @property
    def requires_grad(self) -> bool:
        if self.kind is TensorKind.PARAMETER:
            return self.trainable
        return self.flows_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])


def tensor_new(shape: Sequence[int], data: Any, kind: str | TensorKind = TensorKind.PARAMETER,
               trainable: bool = False, *, owner: str = "backbone", name: str | None = None,
               dtype: Any = None) -> Tensor:
    """Create a leaf tensor. Intermediates only come out of primitives."""
    kind = TensorKind(kind)
    if kind is TensorKind.INTERMEDIATE:
        raise TensorError("intermediates are produced by primitives, not tensor_new")
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"tensor_new: extents must be positive, got {list(shape)}")
    arr = np.array(data, dtype=DEFAULT_DTYPE if dtype is None else dtype)
    if arr.size != math.prod(shape):
        raise ShapeError(
            f"tensor_new: data has {arr.size} elements, shape {list(shape)} needs {math.prod(shape)}"
        )
    return Tensor(np.ascontiguousarray(arr.reshape(shape)), kind, trainable, owner, name)


def parameter(data: np.ndarray, *, trainable: bool = False, owner: str = "backbone",
              name: str | None = None) -> Tensor:
    return tensor_new(np.shape(data), data, TensorKind.PARAMETER, trainable, owner=owner,
                      name=name, dtype=np.asarray(data).dtype)


def constant(data: Any, *, owner: str = "backbone", dtype: Any = None) -> Tensor:
    arr = np.asarray(data, dtype=DEFAULT_DTYPE if dtype is None else dtype)
    return Tensor(np.ascontiguousarray(arr), TensorKind.CONSTANT, False, owner)


@dataclass
class TapeNode:
    """One recorded primitive application (or a leaf registration)."""

    op_kind: str
    inputs: list[int]
    output: int
    owner: str
    kind: TensorKind = TensorKind.INTERMEDIATE
    attrs: dict[str, Any] = field(default_factory=dict)
    saved: dict[str, Any] = field(default_factory=dict, repr=False)
    needs_grad: bool = False
    grad_bytes: int = 0
    saved_bytes: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.op_kind == "leaf"

    def saved_arrays(self) -> list[np.ndarray]:
        return [v for v in self.saved.values() if isinstance(v, np.ndarray)]


@dataclass(frozen=True)
class TapeStats:
    n_nodes: int
    n_grad_nodes: int
    grad_bytes_total: int
    activation_bytes_total: int
    n_backbone_grad_nodes: int


class Tape:
    """Wengert list of the current forward pass.

    Entering the tape makes it the target of :func:`apply_primitive`; owner
    tags for new nodes come from the innermost :meth:`scope`.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.tensors: dict[int, Tensor] = {}
        self._node_of: dict[int, TapeNode] = {}
        self._owners: list[str] = []
        self._token = None
        self.closure_loss: int | None = None
        self.backward_done = False

    def __enter__(self) -> "Tape":
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    @contextmanager
    def scope(self, owner: str) -> Iterator[None]:
        if owner not in OWNER_TAGS:
            raise TensorError(f"unknown owner tag {owner!r}")
        self._owners.append(owner)
        try:
            yield
        finally:
            self._owners.pop()

    @property
    def owner(self) -> str:
        return self._owners[-1] if self._owners else "backbone"

    def node(self, ref: Tensor | int) -> TapeNode:
        key = ref.id if isinstance(ref, Tensor) else ref
        try:
            return self._node_of[key]
        except KeyError:
            raise TapeError(f"tensor {key} is not on this tape") from None

    def tensor(self, tensor_id: int) -> Tensor:
        return self.tensors[tensor_id]

    def contains(self, ref: Tensor | int) -> bool:
        return (ref.id if isinstance(ref, Tensor) else ref) in self._node_of

    def _append(self, node: TapeNode, tensor: Tensor) -> None:
        self.nodes.append(node)
        self._node_of[node.output] = node
        self.tensors[tensor.id] = tensor

    def _register_leaf(self, t: Tensor) -> None:
        if t.id in self._node_of:
            return
        if t.kind is TensorKind.INTERMEDIATE:
            raise TapeError(f"intermediate tensor {t.id} belongs to another tape")
        self._append(TapeNode("leaf", [], t.id, t.owner, kind=t.kind), t)

    def record(self, kind: str, inputs: Sequence[Tensor], attrs: Mapping[str, Any]) -> Tensor:
        rule = RULES.get(kind)
        if rule is None:
            raise ValueError(f"unknown primitive {kind!r}")
        if rule.arity is not None and len(inputs) != rule.arity:
            raise ShapeError(f"{kind}: expected {rule.arity} inputs, got {len(inputs)}")
        for t in inputs:
            self._register_leaf(t)
        needs = tuple(t.requires_grad for t in inputs)
        out, saved = rule.forward([t.data for t in inputs], needs, **attrs)
        owner = self.owner
        result = Tensor(np.asarray(out), TensorKind.INTERMEDIATE, owner=owner,
                        flows_grad=any(needs))
        self._append(
            TapeNode(kind, [t.id for t in inputs], result.id, owner, attrs=dict(attrs),
                     saved=saved if any(needs) else {}),
            result,
        )
        return result


def active_tape() -> Tape:
    tape = _active.get()
    if tape is None:
        raise TapeError("no active tape; run the forward pass inside `with Tape():`")
    return tape


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: Mapping[str, Any] | None = None) -> Tensor:
    """Compute a primitive and append its node to the active tape."""
    return active_tape().record(kind, inputs, attrs or {})


def mark_closure(tape: Tape, loss: Tensor) -> dict[int, bool]:
    """Flag nodes that are trainable-reachable and loss-reachable.

    Returns ``{output tensor id: needs_grad}`` for every node on the tape.
    """
    if not tape.contains(loss):
        raise TapeError("loss is not on this tape; run the forward pass before backward")
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {list(loss.shape)}")

    forward: dict[int, bool] = {}
    for node in tape.nodes:
        if node.is_leaf:
            forward[node.output] = tape.tensors[node.output].requires_grad
        else:
            forward[node.output] = any(forward[i] for i in node.inputs)

    reach = {loss.id}
    for node in reversed(tape.nodes):
        if node.output in reach:
            reach.update(node.inputs)

    flags = {}
    for node in tape.nodes:
        node.needs_grad = forward[node.output] and node.output in reach
        node.grad_bytes = node.saved_bytes = 0
        flags[node.output] = node.needs_grad
    tape.closure_loss = loss.id
    return flags


def backward(tape: Tape, loss: Tensor) -> GradMap:
    """Reverse sweep over the closure. Returns gradients for trainable parameters."""
    if tape.backward_done:
        raise TapeError("backward already ran on this tape")
    if tape.closure_loss != loss.id:
        mark_closure(tape, loss)

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    param_grads: GradMap = {}
    held: set[int] = set()  # saved buffers already charged to an earlier node

    for node in reversed(tape.nodes):
        if not node.needs_grad:
            continue
        g = grads.pop(node.output, None)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(
                f"non-finite gradient at node {node.output} ({node.op_kind})",
                node_id=node.output, op_kind=node.op_kind,
            )
        if node.is_leaf:
            node.grad_bytes = g.nbytes
            param_grads[node.output] = g
            continue

        saved_bytes = 0
        for arr in node.saved_arrays():
            if id(arr) not in held:
                held.add(id(arr))
                saved_bytes += arr.nbytes
        node.saved_bytes = saved_bytes
        node.grad_bytes = g.nbytes + saved_bytes

        needs = tuple(tape.node(i).needs_grad for i in node.inputs)
        in_grads = RULES[node.op_kind].backward(g, node.saved, needs, **node.attrs)
        for inp, need, ig in zip(node.inputs, needs, in_grads):
            if not need:
                continue
            grads[inp] = grads[inp] + ig if inp in grads else ig

    tape.backward_done = True
    log.debug("backward: %d/%d nodes in closure", sum(n.needs_grad for n in tape.nodes), len(tape))
    return param_grads


def tape_stats(tape: Tape) -> TapeStats:
    """Aggregate counts and bytes. Byte totals are zero until backward has run."""
    grad_nodes = [n for n in tape.nodes if n.needs_grad]
    return TapeStats(
        n_nodes=len(tape.nodes),
        n_grad_nodes=len(grad_nodes),
        grad_bytes_total=sum(n.grad_bytes for n in tape.nodes),
        activation_bytes_total=sum(n.saved_bytes for n in tape.nodes),
        n_backbone_grad_nodes=sum(1 for n in grad_nodes if n.owner == "backbone"),
    )


def finite_diff_grad(model_fn: Callable[[], float], params: Sequence[Tensor], eps: float = 1e-4,
                     *, coords: Mapping[int, Sequence[int]] | None = None) -> GradMap:
    """Central differences of ``model_fn`` with respect to each parameter.

    ``coords`` optionally restricts each parameter to a list of flat indices;
    unsampled entries come back as NaN. Parameters are restored exactly.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    first, second = float(model_fn()), float(model_fn())
    if first != second:
        raise NonDeterministicError(f"model_fn returned {first!r} then {second!r}")

    out: GradMap = {}
    for p in params:
        flat = p.data.reshape(-1)
        if coords is None:
            idx: Sequence[int] = range(flat.size)
            est = np.zeros(flat.size)
        else:
            idx = coords.get(p.id, ())
            est = np.full(flat.size, np.nan)
        for i in idx:
            orig = p.data.flat[i]
            p.data.flat[i] = orig + eps
            f_plus = float(model_fn())
            p.data.flat[i] = orig - eps
            f_minus = float(model_fn())
            p.data.flat[i] = orig
            est[i] = (f_plus - f_minus) / (2.0 * eps)
        out[p.id] = est.reshape(p.shape)
    return out
