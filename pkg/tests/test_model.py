"""Tests for model assembly, tuning policies and gradient isolation."""

from __future__ import annotations

import numpy as np
import pytest

from highway_lab.config import METHODS, PRESETS, MethodConfig
from highway_lab.errors import ConfigError, HookError
from highway_lab.model import build_model
from highway_lab.registry import (
    BIAS_ROLES,
    NORM_ROLES,
    PHI_A,
    PHI_F,
    PHI_O,
    ParamRegistry,
    apply_tuning_policy,
    last_block,
)
from highway_lab.tape import Tape, TensorKind, backward, tape_stats


def _stats(cfg, method, data, batch=2, seed=0):
    model = build_model(cfg, method, seed=seed)
    tape, loss, _ = model.forward_loss(*data.batch(np.arange(batch)))
    backward(tape, loss)
    return tape, loss, tape_stats(tape)


def _loss_ancestors(tape, loss) -> set[int]:
    seen, stack = set(), [loss.id]
    while stack:
        tid = stack.pop()
        if tid in seen:
            continue
        seen.add(tid)
        stack.extend(tape.node(tid).inputs)
    return seen


def _descends_from(tape, is_source) -> dict[int, bool]:
    depends = {}
    for node in tape.nodes:
        if node.is_leaf:
            depends[node.output] = is_source(tape.tensor(node.output))
        else:
            depends[node.output] = any(depends[i] for i in node.inputs)
    return depends


def _loss_reachable_non_constant(tape, loss) -> int:
    """Count nodes that depend on some parameter and feed the loss, by graph search."""
    depends = _descends_from(tape, lambda t: t.kind is TensorKind.PARAMETER)
    return sum(1 for tid in _loss_ancestors(tape, loss) if depends[tid])


def _closure_by_search(tape, loss) -> dict[int, bool]:
    """needs_grad per node: downstream of a trainable parameter and upstream of the loss."""
    trainable = _descends_from(tape, lambda t: t.kind is TensorKind.PARAMETER and t.trainable)
    ancestors = _loss_ancestors(tape, loss)
    return {n.output: trainable[n.output] and n.output in ancestors for n in tape.nodes}


# -- build --


class TestBuildModel:
    def test_counting_only_preset_refused(self):
        with pytest.raises(ConfigError, match="counting-only"):
            build_model(PRESETS["swin-b"], MethodConfig(name="e3va"))

    def test_same_seed_same_loss(self, micro, micro_data):
        images, labels = micro_data.batch(np.arange(2))
        a = build_model(micro, MethodConfig(name="e3va"), seed=5).loss_value(images, labels)
        b = build_model(micro, MethodConfig(name="e3va"), seed=5).loss_value(images, labels)
        assert a == b

    def test_logit_shape(self, micro, micro_data):
        model = build_model(micro, MethodConfig(name="fixed"))
        logits = model.predict(micro_data.images[:3])
        assert logits.shape[0] == 3
        assert logits.shape[-1] == model.head_cfg.num_classes
        assert np.isfinite(logits).all()

    def test_extra_hook_refused_under_highway(self, micro, micro_data):
        model = build_model(micro, MethodConfig(name="e3va"))
        with Tape():
            with pytest.raises(HookError, match="non-inserting"):
                model.forward(micro_data.images[:1], extra_hooks=[lambda event: event.output])

    def test_highway_trace_covers_every_block(self, micro, micro_data):
        model = build_model(micro, MethodConfig(name="e3va"))
        with Tape():
            out = model.forward(micro_data.images[:1])
        assert [(h.stage, h.block) for h in out.highway] == micro.blocks()
        assert len(out.fused) == micro.n_stages


# -- policies --


class TestPolicy:
    @pytest.mark.parametrize("name", METHODS)
    def test_groups_partition_registry(self, micro, name):
        reg = build_model(micro, MethodConfig(name=name)).registry
        groups = reg.group_names()
        names = [n for g in groups.values() for n in g]
        assert sorted(names) == sorted(reg.names())
        assert sum(reg.group_sizes().values()) == sum(e.size for e in reg)

    def test_fixed_trains_neck_and_head_only(self, micro):
        reg = build_model(micro, MethodConfig(name="fixed")).registry
        for e in reg:
            assert e.trainable == (e.owner in ("neck", "head") and not e.is_fpn_norm), e.name

    def test_full_trains_everything(self, micro):
        reg = build_model(micro, MethodConfig(name="full")).registry
        assert reg.group_sizes()[PHI_F] == 0

    def test_highway_freezes_backbone(self, micro):
        reg = build_model(micro, MethodConfig(name="e3va")).registry
        assert all(not e.trainable for e in reg if e.owner == "backbone")
        assert all(e.trainable for e in reg if e.owner == "adapter" or e.is_fpn_norm)
        assert reg.group_sizes()[PHI_A] > 0

    def test_highway_fpn_norm_can_be_frozen(self, micro):
        reg = build_model(micro, MethodConfig(name="e3va", train_fpn_norm=False)).registry
        assert all(not e.trainable for e in reg if e.is_fpn_norm)

    def test_bitfit_trains_biases_only(self, micro):
        reg = build_model(micro, MethodConfig(name="bitfit")).registry
        trained = [e for e in reg if e.trainable and e.owner == "backbone"]
        assert trained and all(e.role in BIAS_ROLES for e in trained)

    def test_norm_trains_norms_only(self, micro):
        reg = build_model(micro, MethodConfig(name="norm")).registry
        trained = [e for e in reg if e.trainable and e.owner == "backbone"]
        assert trained and all(e.role in NORM_ROLES for e in trained)
        assert all(e.trainable for e in reg if e.is_fpn_norm)

    def test_partial_trains_last_block(self, micro):
        reg = build_model(micro, MethodConfig(name="partial1")).registry
        trained = {e.block for e in reg if e.trainable and e.owner == "backbone"}
        assert trained == {last_block(micro.depths)}

    def test_in_stream_methods_put_adapters_in_phi_a(self, micro):
        for name in ("adapter", "lora", "adaptformer"):
            reg = build_model(micro, MethodConfig(name=name)).registry
            assert reg.group_sizes()[PHI_A] > 0
            assert all(e.group == PHI_A for e in reg if e.owner == "adapter")
            assert all(e.group in (PHI_O, PHI_F) for e in reg if e.owner != "adapter")

    def test_stray_adapters_rejected(self):
        reg = ParamRegistry()
        reg.add("adapters.0.0.attn.down.s1", np.zeros((2, 2)), owner="adapter", role="factor")
        with pytest.raises(ConfigError, match="builds no adapters"):
            apply_tuning_policy(reg, MethodConfig(name="bitfit"), (1, 1, 1, 1))

    def test_duplicate_name_rejected(self):
        reg = ParamRegistry()
        reg.add("a", np.zeros(2), owner="head", role="bias")
        with pytest.raises(ConfigError, match="twice"):
            reg.add("a", np.zeros(2), owner="head", role="bias")


# -- gradient isolation --


class TestGradientIsolation:
    @pytest.mark.parametrize("name", ["e3va", "fixed"])
    def test_no_backbone_node_in_closure(self, toy, toy_data, name):
        _, _, stats = _stats(toy, MethodConfig(name=name), toy_data)
        assert stats.n_backbone_grad_nodes == 0

    @pytest.mark.parametrize("name", ["full", "adapter", "lora", "adaptformer", "bitfit", "norm", "partial1"])
    def test_backbone_nodes_in_closure(self, toy, toy_data, name):
        _, _, stats = _stats(toy, MethodConfig(name=name), toy_data)
        assert stats.n_backbone_grad_nodes > 0

    def test_grad_bytes_ordering(self, toy, toy_data):
        highway = _stats(toy, MethodConfig(name="e3va", alpha=2), toy_data)[2]
        adapter = _stats(toy, MethodConfig(name="adapter"), toy_data)[2]
        full = _stats(toy, MethodConfig(name="full"), toy_data)[2]
        assert highway.grad_bytes_total < adapter.grad_bytes_total < full.grad_bytes_total

    def test_full_closure_matches_graph_search(self, micro, micro_data):
        tape, loss, stats = _stats(micro, MethodConfig(name="full"), micro_data)
        assert stats.n_grad_nodes == _loss_reachable_non_constant(tape, loss)

    @pytest.mark.parametrize("name", ["e3va", "adapter", "lora", "bitfit"])
    def test_closure_matches_graph_search_per_node(self, micro, micro_data, name):
        tape, loss, _ = _stats(micro, MethodConfig(name=name), micro_data)
        assert {n.output: n.needs_grad for n in tape.nodes} == _closure_by_search(tape, loss)

    @pytest.mark.parametrize("name", ["e3va", "adapter", "lora", "bitfit"])
    def test_constants_hold_no_gradient_bytes(self, micro, micro_data, name):
        tape, _, _ = _stats(micro, MethodConfig(name=name), micro_data)
        constants = [n for n in tape.nodes if n.kind is TensorKind.CONSTANT]
        assert constants
        assert all(not n.needs_grad and n.grad_bytes == 0 and n.saved_bytes == 0 for n in constants)

    def test_backbone_leaves_counted_when_trainable(self, micro, micro_data):
        tape, _, stats = _stats(micro, MethodConfig(name="bitfit"), micro_data)
        leaves = [n for n in tape.nodes if n.is_leaf and n.needs_grad and n.owner == "backbone"]
        inner = [n for n in tape.nodes if not n.is_leaf and n.needs_grad and n.owner == "backbone"]
        assert leaves and stats.n_backbone_grad_nodes == len(leaves) + len(inner)

    def test_highway_backbone_params_get_no_grad(self, micro, micro_data):
        model = build_model(micro, MethodConfig(name="e3va"))
        tape, loss, _ = model.forward_loss(*micro_data.batch(np.arange(2)))
        grads = backward(tape, loss)
        frozen = {e.tensor.id for e in model.registry if not e.trainable}
        assert not frozen & set(grads)
        assert {t.id for t in model.registry.trainable()} >= set(grads)


# -- forward equivalences --


class TestForwardEquivalence:
    def _forward(self, cfg, name, images, zero_adapters=False, randomize=None):
        model = build_model(cfg, MethodConfig(name=name), seed=3)
        for e in model.registry:
            if e.owner != "adapter":
                continue
            if zero_adapters:
                e.tensor.data[...] = 0.0
            elif randomize is not None:
                e.tensor.data[...] = randomize.normal(scale=0.1, size=e.tensor.shape)
        with Tape():
            return model.forward(images)

    def test_highway_leaves_stream_untouched(self, toy, toy_data):
        images = toy_data.images[:2]
        highway = self._forward(toy, "e3va", images)
        fixed = self._forward(toy, "fixed", images)
        for hs, fs in zip(highway.backbone.states, fixed.backbone.states):
            for h, f in zip(hs, fs):
                np.testing.assert_array_equal(h.out.data, f.out.data)

    def test_zero_highway_reduces_to_fixed(self, toy, toy_data):
        images = toy_data.images[:2]
        highway = self._forward(toy, "e3va", images, zero_adapters=True)
        fixed = self._forward(toy, "fixed", images)
        for h, f in zip(highway.fused, fixed.fused):
            np.testing.assert_array_equal(h.data, f.data)
        np.testing.assert_array_equal(highway.logits.data, fixed.logits.data)

    def test_zero_up_adapter_reduces_to_fixed(self, toy, toy_data):
        images = toy_data.images[:2]
        adapter = self._forward(toy, "adapter", images)
        fixed = self._forward(toy, "fixed", images)
        np.testing.assert_array_equal(adapter.logits.data, fixed.logits.data)

    def test_zero_b_lora_matches_fixed(self, toy, toy_data):
        images = toy_data.images[:2]
        lora = self._forward(toy, "lora", images)
        fixed = self._forward(toy, "fixed", images)
        np.testing.assert_allclose(lora.logits.data, fixed.logits.data, atol=1e-10)

    @pytest.mark.parametrize("name", ["adapter", "lora"])
    def test_live_insertions_change_output(self, toy, toy_data, rng, name):
        images = toy_data.images[:2]
        tuned = self._forward(toy, name, images, randomize=rng)
        fixed = self._forward(toy, "fixed", images)
        assert np.abs(tuned.logits.data - fixed.logits.data).max() > 1e-6
        changed = [not np.allclose(t.out.data, f.out.data)
                   for ts, fs in zip(tuned.backbone.states, fixed.backbone.states) for t, f in zip(ts, fs)]
        assert all(changed)
