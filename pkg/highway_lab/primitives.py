"""Forward/backward rules for every tape primitive.

A rule's forward takes the input arrays plus a per-input ``needs`` mask and
returns ``(output, saved)``. ``saved`` holds only what the backward of the
needed inputs reads, so frozen inputs cost no retained activations. The
backward takes the output gradient and returns one gradient per input, with
``None`` where the mask is False.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import erf

from highway_lab.errors import ShapeError

Arrays = Sequence[np.ndarray]
Needs = tuple[bool, ...]
Grads = list[np.ndarray | None]

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class Rule:
    forward: Callable[..., tuple[np.ndarray, dict[str, Any]]]
    backward: Callable[..., Grads]
    arity: int | None = None  # None means variadic


def _fail(kind: str, xs: Arrays, detail: str) -> ShapeError:
    shapes = ", ".join(str(list(x.shape)) for x in xs)
    return ShapeError(f"{kind}: {detail} (input shapes {shapes})")


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


# -- linear algebra --


def _matmul_fwd(xs: Arrays, needs: Needs):
    a, b = xs
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _fail("matmul", xs, "inner dimensions do not agree")
    try:
        out = np.matmul(a, b)
    except ValueError as exc:
        raise _fail("matmul", xs, str(exc)) from exc
    saved: dict[str, Any] = {"a_shape": a.shape, "b_shape": b.shape}
    if needs[0]:
        saved["b"] = b
    if needs[1]:
        saved["a"] = a
    return out, saved


def _matmul_bwd(g, saved, needs: Needs):
    ga = gb = None
    if needs[0]:
        ga = unbroadcast(np.matmul(g, np.swapaxes(saved["b"], -1, -2)), saved["a_shape"])
    if needs[1]:
        gb = unbroadcast(np.matmul(np.swapaxes(saved["a"], -1, -2), g), saved["b_shape"])
    return [ga, gb]


def _add_fwd(xs: Arrays, needs: Needs):
    a, b = xs
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise _fail("add", xs, "shapes do not broadcast") from exc
    return a + b, {"a_shape": a.shape, "b_shape": b.shape}


def _add_bwd(g, saved, needs: Needs):
    return [
        unbroadcast(g, saved["a_shape"]) if needs[0] else None,
        unbroadcast(g, saved["b_shape"]) if needs[1] else None,
    ]


def _mul_fwd(xs: Arrays, needs: Needs):
    a, b = xs
    try:
        out = a * b
    except ValueError as exc:
        raise _fail("mul", xs, "shapes do not broadcast") from exc
    saved: dict[str, Any] = {"a_shape": a.shape, "b_shape": b.shape}
    if needs[0]:
        saved["b"] = b
    if needs[1]:
        saved["a"] = a
    return out, saved


def _mul_bwd(g, saved, needs: Needs):
    return [
        unbroadcast(g * saved["b"], saved["a_shape"]) if needs[0] else None,
        unbroadcast(g * saved["a"], saved["b_shape"]) if needs[1] else None,
    ]


def _scale_fwd(xs: Arrays, needs: Needs, factor: float | None = None):
    if len(xs) == 1:
        if factor is None:
            raise _fail("scale", xs, "needs a factor attribute or a scalar input")
        return xs[0] * factor, {"factor": float(factor)}
    x, s = xs
    if s.size != 1:
        raise _fail("scale", xs, "scale input must hold exactly one element")
    saved: dict[str, Any] = {"s_shape": s.shape}
    if needs[0]:
        saved["s"] = s
    if needs[1]:
        saved["x"] = x
    return x * s.reshape(()), saved


def _scale_bwd(g, saved, needs: Needs, factor: float | None = None):
    if "s_shape" not in saved:
        return [g * saved["factor"] if needs[0] else None]
    gx = g * saved["s"].reshape(()) if needs[0] else None
    gs = np.sum(g * saved["x"]).reshape(saved["s_shape"]) if needs[1] else None
    return [gx, gs]


# -- nonlinearities and normalization --


def _gelu_fwd(xs: Arrays, needs: Needs):
    (x,) = xs
    out = 0.5 * x * (1.0 + erf(x / _SQRT_2))
    return out, ({"x": x} if needs[0] else {})


def _gelu_bwd(g, saved, needs: Needs):
    x = saved["x"]
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return [g * (cdf + x * pdf)]


def _softmax_fwd(xs: Arrays, needs: Needs, axis: int = -1):
    (x,) = xs
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return s, ({"s": s} if needs[0] else {})


def _softmax_bwd(g, saved, needs: Needs, axis: int = -1):
    s = saved["s"]
    return [s * (g - np.sum(g * s, axis=axis, keepdims=True))]


def _layernorm_fwd(xs: Arrays, needs: Needs, axis: int = -1, eps: float = 1e-5):
    x, w, b = xs
    if axis not in (-1, x.ndim - 1):
        raise _fail("layernorm", xs, "only the last axis is supported")
    c = x.shape[-1]
    if w.shape != (c,) or b.shape != (c,):
        raise _fail("layernorm", xs, f"weight and bias must have shape [{c}]")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    rstd = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    saved: dict[str, Any] = {}
    if needs[0]:
        saved.update(xhat=xhat, rstd=rstd, w=w)
    elif needs[1]:
        saved["xhat"] = xhat
    return xhat * w + b, saved


def _layernorm_bwd(g, saved, needs: Needs, axis: int = -1, eps: float = 1e-5):
    lead = tuple(range(g.ndim - 1))
    gx = gw = gb = None
    if needs[0]:
        xhat, rstd = saved["xhat"], saved["rstd"]
        gxhat = g * saved["w"]
        gx = rstd * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True)
        )
    if needs[1]:
        gw = np.sum(g * saved["xhat"], axis=lead)
    if needs[2]:
        gb = np.sum(g, axis=lead)
    return [gx, gw, gb]


# -- layout --


def _reshape_fwd(xs: Arrays, needs: Needs, shape: Sequence[int] = ()):
    (x,) = xs
    try:
        out = x.reshape(tuple(shape))
    except ValueError as exc:
        raise _fail("reshape", xs, f"cannot reshape to {list(shape)}") from exc
    return out, {"in_shape": x.shape}


def _reshape_bwd(g, saved, needs: Needs, shape: Sequence[int] = ()):
    return [g.reshape(saved["in_shape"])]


def _transpose_fwd(xs: Arrays, needs: Needs, axes: Sequence[int] = ()):
    (x,) = xs
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise _fail("transpose", xs, f"axes {list(axes)} are not a permutation")
    return np.transpose(x, axes), {}


def _transpose_bwd(g, saved, needs: Needs, axes: Sequence[int] = ()):
    return [np.transpose(g, np.argsort([a % g.ndim for a in axes]))]


def _check_windows(kind: str, xs: Arrays, window: int, grid: tuple[int, int]) -> None:
    gh, gw = grid
    if window <= 0 or gh % window or gw % window:
        raise _fail(kind, xs, f"grid {gh}x{gw} is not divisible by window {window}")


def _partition(x: np.ndarray, window: int, grid: tuple[int, int]) -> np.ndarray:
    b, _, c = x.shape
    gh, gw = grid
    x = x.reshape(b, gh // window, window, gw // window, window, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def _merge(x: np.ndarray, window: int, grid: tuple[int, int]) -> np.ndarray:
    gh, gw = grid
    per_image = (gh // window) * (gw // window)
    b = x.shape[0] // per_image
    c = x.shape[-1]
    x = x.reshape(b, gh // window, gw // window, window, window, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, c)


def _window_partition_fwd(xs: Arrays, needs: Needs, window: int = 1, grid=(1, 1)):
    (x,) = xs
    _check_windows("window_partition", xs, window, grid)
    if x.ndim != 3 or x.shape[1] != grid[0] * grid[1]:
        raise _fail("window_partition", xs, f"expected [B, {grid[0] * grid[1]}, C] tokens")
    return _partition(x, window, tuple(grid)), {}


def _window_partition_bwd(g, saved, needs: Needs, window: int = 1, grid=(1, 1)):
    return [_merge(g, window, tuple(grid))]


def _window_merge_fwd(xs: Arrays, needs: Needs, window: int = 1, grid=(1, 1)):
    (x,) = xs
    _check_windows("window_merge", xs, window, grid)
    per_image = (grid[0] // window) * (grid[1] // window)
    if x.ndim != 3 or x.shape[1] != window * window or x.shape[0] % per_image:
        raise _fail("window_merge", xs, f"expected [B*{per_image}, {window * window}, C] windows")
    return _merge(x, window, tuple(grid)), {}


def _window_merge_bwd(g, saved, needs: Needs, window: int = 1, grid=(1, 1)):
    return [_partition(g, window, tuple(grid))]


def _concat_fwd(xs: Arrays, needs: Needs, axis: int = -1):
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError as exc:
        raise _fail("concat", xs, f"cannot concatenate along axis {axis}") from exc
    return out, {"sizes": [x.shape[axis] for x in xs]}


def _concat_bwd(g, saved, needs: Needs, axis: int = -1):
    cuts = np.cumsum(saved["sizes"])[:-1]
    parts = np.split(g, cuts, axis=axis)
    return [p if need else None for p, need in zip(parts, needs)]


def _slice_fwd(xs: Arrays, needs: Needs, index: Any = ()):
    (x,) = xs
    try:
        out = np.array(x[index])
    except IndexError as exc:
        raise _fail("slice", xs, f"index {index!r} out of range") from exc
    return out, {"in_shape": x.shape}


def _slice_bwd(g, saved, needs: Needs, index: Any = ()):
    full = np.zeros(saved["in_shape"], dtype=g.dtype)
    full[index] = g
    return [full]


def _gather_fwd(xs: Arrays, needs: Needs, index: Any = None):
    (table,) = xs
    idx = np.asarray(index)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise _fail("gather", xs, f"index outside table of {table.shape[0]} rows")
    return table[idx], {"in_shape": table.shape, "index": idx}


def _gather_bwd(g, saved, needs: Needs, index: Any = None):
    full = np.zeros(saved["in_shape"], dtype=g.dtype)
    np.add.at(full, saved["index"], g)
    return [full]


def _repeat_fwd(xs: Arrays, needs: Needs, repeats: int = 1, axis: int = 0):
    (x,) = xs
    return np.repeat(x, repeats, axis=axis), {"in_shape": x.shape}


def _repeat_bwd(g, saved, needs: Needs, repeats: int = 1, axis: int = 0):
    shape = saved["in_shape"]
    ax = axis % len(shape)
    split = shape[:ax] + (shape[ax], repeats) + shape[ax + 1:]
    return [g.reshape(split).sum(axis=ax + 1)]


# -- reductions and loss --


def _expand(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.array(np.broadcast_to(g, shape))


def _count(shape: tuple[int, ...], axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([shape[a] for a in axes]))


def _sum_fwd(xs: Arrays, needs: Needs, axis=None, keepdims: bool = False):
    (x,) = xs
    return np.sum(x, axis=axis, keepdims=keepdims), {"in_shape": x.shape}


def _sum_bwd(g, saved, needs: Needs, axis=None, keepdims: bool = False):
    return [_expand(g, saved["in_shape"], axis, keepdims)]


def _mean_fwd(xs: Arrays, needs: Needs, axis=None, keepdims: bool = False):
    (x,) = xs
    return np.mean(x, axis=axis, keepdims=keepdims), {"in_shape": x.shape}


def _mean_bwd(g, saved, needs: Needs, axis=None, keepdims: bool = False):
    shape = saved["in_shape"]
    return [_expand(g, shape, axis, keepdims) / _count(shape, axis)]


def _cross_entropy_fwd(xs: Arrays, needs: Needs, labels: Any = None):
    (logits,) = xs
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise _fail("cross_entropy", xs, f"labels of shape {list(labels.shape)} do not match")
    n_classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise _fail("cross_entropy", xs, f"labels outside [0, {n_classes})")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - log_z
    picked = np.take_along_axis(log_p, labels[..., None], axis=-1)
    loss = np.array(-picked.mean())
    return loss, ({"probs": np.exp(log_p)} if needs[0] else {})


def _cross_entropy_bwd(g, saved, needs: Needs, labels: Any = None):
    probs = saved["probs"]
    grad = probs.copy()
    idx = np.asarray(labels)[..., None]
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=-1) - 1.0, axis=-1)
    return [grad * (g / idx.size)]


RULES: dict[str, Rule] = {
    "matmul": Rule(_matmul_fwd, _matmul_bwd, 2),
    "add": Rule(_add_fwd, _add_bwd, 2),
    "mul": Rule(_mul_fwd, _mul_bwd, 2),
    "scale": Rule(_scale_fwd, _scale_bwd),
    "gelu": Rule(_gelu_fwd, _gelu_bwd, 1),
    "softmax": Rule(_softmax_fwd, _softmax_bwd, 1),
    "layernorm": Rule(_layernorm_fwd, _layernorm_bwd, 3),
    "reshape": Rule(_reshape_fwd, _reshape_bwd, 1),
    "transpose": Rule(_transpose_fwd, _transpose_bwd, 1),
    "window_partition": Rule(_window_partition_fwd, _window_partition_bwd, 1),
    "window_merge": Rule(_window_merge_fwd, _window_merge_bwd, 1),
    "concat": Rule(_concat_fwd, _concat_bwd),
    "slice": Rule(_slice_fwd, _slice_bwd, 1),
    "gather": Rule(_gather_fwd, _gather_bwd, 1),
    "repeat": Rule(_repeat_fwd, _repeat_bwd, 1),
    "sum": Rule(_sum_fwd, _sum_bwd, 1),
    "mean": Rule(_mean_fwd, _mean_bwd, 1),
    "cross_entropy": Rule(_cross_entropy_fwd, _cross_entropy_bwd, 1),
}
