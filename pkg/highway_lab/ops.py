"""Thin named wrappers over :func:`apply_primitive` for model code."""

from __future__ import annotations

from typing import Any, Sequence

import numpy as np

from highway_lab.tape import Tensor, apply_primitive


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def scale(x: Tensor, factor: float | Tensor) -> Tensor:
    if isinstance(factor, Tensor):
        return apply_primitive("scale", [x, factor])
    return apply_primitive("scale", [x], {"factor": float(factor)})


def gelu(x: Tensor) -> Tensor:
    return apply_primitive("gelu", [x])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", [x], {"axis": axis})


def layernorm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return apply_primitive("layernorm", [x, weight, bias], {"axis": -1, "eps": eps})


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", [x], {"shape": tuple(shape)})


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return apply_primitive("transpose", [x], {"axes": tuple(axes)})


def window_partition(x: Tensor, window: int, grid: tuple[int, int]) -> Tensor:
    return apply_primitive("window_partition", [x], {"window": window, "grid": tuple(grid)})


def window_merge(x: Tensor, window: int, grid: tuple[int, int]) -> Tensor:
    return apply_primitive("window_merge", [x], {"window": window, "grid": tuple(grid)})


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    return apply_primitive("concat", list(xs), {"axis": axis})


def slice_(x: Tensor, index: Any) -> Tensor:
    return apply_primitive("slice", [x], {"index": index})


def gather(table: Tensor, index: np.ndarray) -> Tensor:
    return apply_primitive("gather", [table], {"index": index})


def repeat(x: Tensor, repeats: int, axis: int) -> Tensor:
    return apply_primitive("repeat", [x], {"repeats": repeats, "axis": axis})


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", [x], {"axis": axis, "keepdims": keepdims})


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("sum", [x], {"axis": axis, "keepdims": keepdims})


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    return apply_primitive("cross_entropy", [logits], {"labels": np.asarray(labels)})
