"""Tests for the autodiff tape: leaves, primitives, closure pruning and byte accounting."""

from __future__ import annotations

import numpy as np
import pytest

from highway_lab import ops
from highway_lab.errors import NonDeterministicError, NonFiniteError, ShapeError, TapeError, TensorError
from highway_lab.tape import (
    Tape,
    TensorKind,
    apply_primitive,
    backward,
    constant,
    finite_diff_grad,
    mark_closure,
    parameter,
    tape_stats,
    tensor_new,
)


# -- Helpers --


def _param(rng, *shape):
    return parameter(rng.normal(size=shape), trainable=True)


def _scalarize(out, weights):
    """Weighted sum so every output element contributes a distinct gradient."""
    return ops.sum_(ops.mul(out, constant(weights)))


def _check_against_fd(build, params, eps=1e-5, atol=1e-7, rtol=1e-6):
    with Tape() as tape:
        loss = build()
    analytic = backward(tape, loss)

    def model_fn():
        with Tape():
            return float(build().data)

    numeric = finite_diff_grad(model_fn, params, eps)
    for p in params:
        np.testing.assert_allclose(analytic[p.id], numeric[p.id], atol=atol, rtol=rtol)


# -- tensor_new --


class TestTensorNew:
    def test_shape_and_kind(self):
        t = tensor_new([2, 3], range(6))
        assert t.shape == (2, 3)
        assert t.kind is TensorKind.PARAMETER
        assert not t.trainable

    def test_data_length_mismatch(self):
        with pytest.raises(ShapeError, match="needs 6"):
            tensor_new([2, 3], [1.0, 2.0])

    def test_non_positive_extent(self):
        with pytest.raises(ShapeError):
            tensor_new([0, 3], [])

    def test_trainable_constant_rejected(self):
        with pytest.raises(TensorError):
            tensor_new([1], [1.0], "constant", True)

    def test_intermediate_rejected(self):
        with pytest.raises(TensorError):
            tensor_new([1], [1.0], "intermediate")

    def test_ids_are_unique(self):
        a, b = tensor_new([1], [0.0]), tensor_new([1], [0.0])
        assert a.id != b.id


# -- primitive gradients vs central differences --


def _case_matmul(rng):
    a, b = _param(rng, 2, 3, 4), _param(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    return [a, b], lambda: _scalarize(ops.matmul(a, b), w)


def _case_add_broadcast(rng):
    a, b = _param(rng, 2, 3), _param(rng, 3)
    w = rng.normal(size=(2, 3))
    return [a, b], lambda: _scalarize(ops.add(a, b), w)


def _case_mul(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 3)
    return [a, b], lambda: ops.sum_(ops.mul(a, b))


def _case_scale_factor(rng):
    x = _param(rng, 3)
    w = rng.normal(size=3)
    return [x], lambda: _scalarize(ops.scale(x, 2.5), w)


def _case_scale_tensor(rng):
    x, s = _param(rng, 2, 3), _param(rng, 1)
    w = rng.normal(size=(2, 3))
    return [x, s], lambda: _scalarize(ops.scale(x, s), w)


def _case_gelu(rng):
    x = _param(rng, 5)
    w = rng.normal(size=5)
    return [x], lambda: _scalarize(ops.gelu(x), w)


def _case_softmax(rng):
    x = _param(rng, 2, 4)
    w = rng.normal(size=(2, 4))
    return [x], lambda: _scalarize(ops.softmax(x, axis=-1), w)


def _case_layernorm(rng):
    x, g, b = _param(rng, 2, 3, 4), _param(rng, 4), _param(rng, 4)
    w = rng.normal(size=(2, 3, 4))
    return [x, g, b], lambda: _scalarize(ops.layernorm(x, g, b), w)


def _case_reshape_transpose(rng):
    x = _param(rng, 2, 3, 4)
    w = rng.normal(size=(3, 4, 2))
    return [x], lambda: _scalarize(ops.reshape(ops.transpose(ops.reshape(x, (6, 4)), (1, 0)), (3, 4, 2)), w)


def _case_windows(rng):
    x = _param(rng, 1, 16, 2)
    w = rng.normal(size=(4, 4, 2))
    w2 = rng.normal(size=(1, 16, 2))

    def build():
        parts = ops.window_partition(x, 2, (4, 4))
        merged = ops.window_merge(ops.mul(parts, constant(w)), 2, (4, 4))
        return _scalarize(merged, w2)

    return [x], build


def _case_concat_slice(rng):
    a, b = _param(rng, 4, 3), _param(rng, 4, 2)
    w = rng.normal(size=(2, 3))

    def build():
        joined = ops.concat([a, b], axis=-1)
        return _scalarize(ops.slice_(joined, (slice(1, None, 2), slice(0, None, 2))), w)

    return [a, b], build


def _case_gather(rng):
    table = _param(rng, 5, 2)
    index = np.array([[0, 1], [4, 1]])
    w = rng.normal(size=(2, 2, 2))
    return [table], lambda: _scalarize(ops.gather(table, index), w)


def _case_repeat(rng):
    x = _param(rng, 2, 3)
    w = rng.normal(size=(2, 6))
    return [x], lambda: _scalarize(ops.repeat(x, 2, axis=1), w)


def _case_mean(rng):
    x = _param(rng, 3, 4)
    w = rng.normal(size=4)
    return [x], lambda: _scalarize(ops.mean(x, axis=0), w)


def _case_cross_entropy(rng):
    logits = _param(rng, 2, 3, 4)
    labels = np.array([[0, 1, 3], [2, 2, 1]])
    return [logits], lambda: ops.cross_entropy(logits, labels)


CASES = {
    "matmul": _case_matmul,
    "add_broadcast": _case_add_broadcast,
    "mul": _case_mul,
    "scale_factor": _case_scale_factor,
    "scale_tensor": _case_scale_tensor,
    "gelu": _case_gelu,
    "softmax": _case_softmax,
    "layernorm": _case_layernorm,
    "reshape_transpose": _case_reshape_transpose,
    "windows": _case_windows,
    "concat_slice": _case_concat_slice,
    "gather": _case_gather,
    "repeat": _case_repeat,
    "mean": _case_mean,
    "cross_entropy": _case_cross_entropy,
}


@pytest.mark.parametrize("case", sorted(CASES))
def test_primitive_gradient_matches_central_difference(case, rng):
    params, build = CASES[case](rng)
    _check_against_fd(build, params)


class TestPrimitiveShapes:
    def test_matmul_mismatch_names_primitive(self):
        with Tape():
            a, b = constant(np.ones((2, 3))), constant(np.ones((4, 5)))
            with pytest.raises(ShapeError, match=r"matmul.*\[2, 3\].*\[4, 5\]"):
                ops.matmul(a, b)

    def test_layernorm_only_last_axis(self):
        with Tape():
            x, w, b = constant(np.ones((2, 3))), constant(np.ones(3)), constant(np.zeros(3))
            with pytest.raises(ShapeError, match="last axis"):
                apply_primitive("layernorm", [x, w, b], {"axis": 0})

    def test_window_partition_requires_divisible_grid(self):
        with Tape():
            with pytest.raises(ShapeError, match="window_partition"):
                ops.window_partition(constant(np.ones((1, 9, 2))), 2, (3, 3))

    def test_window_round_trip_is_identity(self, rng):
        x = rng.normal(size=(2, 16, 3))
        with Tape():
            back = ops.window_merge(ops.window_partition(constant(x), 2, (4, 4)), 2, (4, 4))
        np.testing.assert_array_equal(back.data, x)

    def test_gelu_at_zero(self):
        x = parameter(np.zeros(1), trainable=True)

        def model_fn():
            with Tape():
                return float(ops.sum_(ops.gelu(x)).data)

        assert model_fn() == 0.0
        assert finite_diff_grad(model_fn, [x])[x.id][0] == pytest.approx(0.5, abs=1e-6)
        with Tape() as tape:
            loss = ops.sum_(ops.gelu(x))
        assert backward(tape, loss)[x.id][0] == pytest.approx(0.5, abs=1e-12)

    def test_cross_entropy_is_scalar(self):
        with Tape():
            loss = ops.cross_entropy(constant(np.zeros((2, 4))), np.array([0, 3]))
        assert loss.shape == ()
        assert loss.item() == pytest.approx(np.log(4))

    def test_unknown_primitive(self):
        with Tape():
            with pytest.raises(ValueError, match="unknown primitive"):
                apply_primitive("conv", [constant(np.ones(1))])


# -- closure and pruning --


class TestClosure:
    def test_frozen_branch_gets_no_gradient(self, rng):
        w = _param(rng, 3, 2)
        frozen = parameter(rng.normal(size=(2,)), trainable=False)
        x = constant(rng.normal(size=(4, 3)))
        with Tape() as tape:
            loss = ops.sum_(ops.add(ops.matmul(x, w), frozen))
        grads = backward(tape, loss)
        assert set(grads) == {w.id}
        assert not tape.node(frozen).needs_grad
        assert not tape.node(x).needs_grad
        assert tape.node(w).needs_grad

    def test_mixed_edge_saves_only_what_backward_reads(self, rng):
        w = _param(rng, 3, 2)
        x = constant(rng.normal(size=(4, 3)))
        with Tape() as tape:
            y = ops.matmul(x, w)
            loss = ops.sum_(y)
        node = tape.node(y)
        assert "a" in node.saved  # x, for dW
        assert "b" not in node.saved  # dx is never needed
        backward(tape, loss)

    def test_closure_excludes_nodes_not_reaching_loss(self, rng):
        w = _param(rng, 3)
        with Tape() as tape:
            side = ops.gelu(w)
            loss = ops.sum_(ops.scale(w, 2.0))
        flags = mark_closure(tape, loss)
        assert flags[w.id]
        assert not flags[side.id]

    def test_no_trainable_parameters_means_empty_closure(self, rng):
        p = parameter(rng.normal(size=(3,)))
        with Tape() as tape:
            loss = ops.sum_(ops.gelu(p))
        assert backward(tape, loss) == {}
        assert tape_stats(tape).n_grad_nodes == 0

    def test_shared_input_accumulates(self):
        x = parameter(np.array([3.0]), trainable=True)
        with Tape() as tape:
            loss = ops.sum_(ops.mul(x, x))
        np.testing.assert_allclose(backward(tape, loss)[x.id], [6.0])


# -- error paths --


class TestTapeErrors:
    def test_no_active_tape(self):
        with pytest.raises(TapeError, match="no active tape"):
            ops.gelu(constant(np.ones(2)))

    def test_backward_before_forward(self):
        tape = Tape()
        with pytest.raises(TapeError):
            backward(tape, constant(np.array(1.0)))

    def test_double_backward(self, rng):
        w = _param(rng, 2)
        with Tape() as tape:
            loss = ops.sum_(w)
        backward(tape, loss)
        with pytest.raises(TapeError, match="already"):
            backward(tape, loss)

    def test_non_scalar_loss(self, rng):
        w = _param(rng, 2)
        with Tape() as tape:
            out = ops.gelu(w)
        with pytest.raises(TapeError, match="scalar"):
            backward(tape, out)

    def test_non_finite_gradient_names_node(self):
        w = parameter(np.array([1.0]), trainable=True)
        with Tape() as tape:
            loss = ops.sum_(ops.mul(w, constant(np.array([np.inf]))))
        with pytest.raises(NonFiniteError) as info:
            backward(tape, loss)
        assert info.value.node_id == w.id


# -- finite differences --


class TestFiniteDiff:
    def test_square(self):
        theta = parameter(np.array([3.0]), trainable=True)
        grads = finite_diff_grad(lambda: float(theta.data[0] ** 2), [theta])
        assert grads[theta.id][0] == pytest.approx(6.0, abs=1e-6)

    def test_restores_parameters_exactly(self, rng):
        p = _param(rng, 2, 2)
        before = p.data.copy()
        finite_diff_grad(lambda: float(np.sum(np.sin(p.data))), [p])
        np.testing.assert_array_equal(p.data, before)

    def test_non_deterministic_model(self):
        p = parameter(np.array([1.0]), trainable=True)
        calls = iter(range(100))
        with pytest.raises(NonDeterministicError):
            finite_diff_grad(lambda: float(next(calls)), [p])

    def test_non_positive_eps(self):
        p = parameter(np.array([1.0]), trainable=True)
        with pytest.raises(ValueError):
            finite_diff_grad(lambda: 0.0, [p], eps=0.0)

    def test_sampled_coordinates(self):
        p = parameter(np.array([1.0, 2.0, 3.0]), trainable=True)
        grads = finite_diff_grad(lambda: float(np.sum(p.data ** 2)), [p], coords={p.id: [1]})
        assert np.isnan(grads[p.id][0]) and np.isnan(grads[p.id][2])
        assert grads[p.id][1] == pytest.approx(4.0, abs=1e-6)


# -- byte accounting --


class TestStats:
    def test_grad_bytes_are_additive(self, rng):
        w = _param(rng, 3, 2)
        x = constant(rng.normal(size=(4, 3)))
        with Tape() as tape:
            loss = ops.sum_(ops.gelu(ops.matmul(x, w)))
        backward(tape, loss)
        stats = tape_stats(tape)
        assert stats.grad_bytes_total == sum(n.grad_bytes for n in tape.nodes)
        assert tape.node(w).grad_bytes == w.nbytes
        assert stats.n_backbone_grad_nodes == 4  # w, matmul, gelu, sum

    def test_shared_saved_buffer_counted_once(self, rng):
        x = constant(rng.normal(size=(4, 3)))
        s1, s2 = _param(rng, 3, 2), _param(rng, 3, 2)
        with Tape() as tape:
            loss = ops.sum_(ops.add(ops.matmul(x, s1), ops.matmul(x, s2)))
        backward(tape, loss)
        assert tape_stats(tape).activation_bytes_total == x.nbytes

    def test_owner_scope_tags_nodes(self, rng):
        w = _param(rng, 2)
        with Tape() as tape:
            with tape.scope("adapter"):
                y = ops.gelu(w)
            z = ops.sum_(y)
        assert tape.node(y).owner == "adapter"
        assert tape.node(z).owner == "backbone"
