"""Tests for AdamW."""

from __future__ import annotations

import numpy as np
import pytest

from highway_lab.optim import AdamW, AdamWHyper, adamw_step, init_state
from highway_lab.tape import parameter


def _params(rng):
    return parameter(rng.normal(size=(3, 2)), trainable=True), parameter(rng.normal(size=4))


class TestAdamW:
    def test_first_step_moves_by_lr_times_sign(self, rng):
        p, _ = _params(rng)
        before = p.data.copy()
        g = rng.normal(size=p.shape)
        opt = AdamW([p], AdamWHyper(lr=1e-3, weight_decay=0.0))
        opt.step({p.id: g})
        np.testing.assert_allclose(p.data - before, -1e-3 * np.sign(g), rtol=1e-5)

    def test_zero_gradient_applies_decay_only(self, rng):
        p, _ = _params(rng)
        before = p.data.copy()
        AdamW([p], AdamWHyper(lr=0.1, weight_decay=0.5)).step({p.id: np.zeros(p.shape)})
        np.testing.assert_array_equal(p.data, before * (1.0 - 0.1 * 0.5))

    def test_frozen_params_untouched(self, rng):
        p, frozen = _params(rng)
        before = frozen.data.copy()
        opt = AdamW([p, frozen])
        opt.step({p.id: np.ones(p.shape)})
        np.testing.assert_array_equal(frozen.data, before)
        assert opt.params == [p]

    def test_state_only_for_trainable(self, rng):
        p, frozen = _params(rng)
        state = init_state([p, frozen])
        assert set(state.exp_avg) == set(state.exp_avg_sq) == {p.id}

    def test_gradient_without_state_raises(self, rng):
        p, frozen = _params(rng)
        state = init_state([p])
        with pytest.raises(ValueError, match="without optimizer state"):
            adamw_step([p, frozen], {frozen.id: np.ones(frozen.shape)}, state, AdamWHyper())

    def test_missing_gradient_skips_param(self, rng):
        p = parameter(rng.normal(size=3), trainable=True)
        q = parameter(rng.normal(size=3), trainable=True)
        before = q.data.copy()
        opt = AdamW([p, q])
        opt.step({p.id: np.ones(3)})
        np.testing.assert_array_equal(q.data, before)
        assert opt.state.step == 1
