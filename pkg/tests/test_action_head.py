"""Action normalization, condition token assembly, and both heads."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from helpers import fd_check

from mola.action_head import (
    AR_RANGE,
    ActionStats,
    AutoregressiveHead,
    ConditionBuilder,
    ConditionInputs,
    FlowMatchHead,
    bin_to_value,
    fm_sample,
    fm_training_loss,
    value_to_bin,
)
from mola.config import IdmConfig, PolicyConfig
from mola.errors import ConfigError
from mola.nnblocks import init_parameters
from mola.synthworld import WorldConfig

WORLD = WorldConfig(resolution=16)
N_TASKS = WORLD.n_objects * WORLD.n_goals
HORIZON = 4
IDM = IdmConfig(dim=16, encoder_depth=1, transition_depth=1, decoder_depth=1, feature_depth=1, heads=2, patch=8, queries=2, codes=8, code_dim=4)


def policy_cfg(**kw) -> PolicyConfig:
    base = dict(
        dim=32,
        heads=2,
        encoder_depth=1,
        decoder_depth=1,
        chunk=4,
        sample_steps=5,
        ar_bins=16,
        pooled_dim=8,
        baseline_depth=1,
    )
    base.update(kw)
    return PolicyConfig(**base)


def make_builder(design="moidm", parts=("semantic", "depth", "flow"), **kw) -> ConditionBuilder:
    cfg = policy_cfg(design=design, **kw)
    b = ConditionBuilder(cfg, IDM, WORLD, parts, N_TASKS, HORIZON)
    return init_parameters(b, torch.Generator().manual_seed(0))


def make_inputs(parts=("semantic", "depth", "flow"), batch=2, seed=0, rasters=False) -> ConditionInputs:
    g = torch.Generator().manual_seed(seed)
    ste = {m: torch.randn(batch, IDM.queries, IDM.code_dim, generator=g) for m in parts}
    pooled = torch.randn(batch, HORIZON, 8, generator=g)
    task = torch.zeros(batch, N_TASKS)
    task[:, 1] = 1
    rast = None
    if rasters:
        r = WORLD.resolution
        rast = {
            "semantic": torch.rand(batch, WORLD.n_objects + 2, r, r, generator=g),
            "depth": torch.rand(batch, 1, r, r, generator=g),
            "flow": torch.zeros(batch, 2, r, r),
        }
    return ConditionInputs(pooled=pooled, task_onehot=task, ste=ste, rasters=rast)


class TestActionStats:
    def test_round_trip_one_ulp(self):
        rng = np.random.default_rng(0)
        actions = np.zeros((500, 3), dtype=np.float32)
        actions[:, :2] = rng.uniform(-0.05, 0.05, (500, 2)).astype(np.float32)
        actions[:, 2] = rng.integers(0, 2, 500)
        stats = ActionStats.from_actions(actions)
        a = torch.from_numpy(actions)
        back = stats.denormalize(stats.normalize(a))
        assert torch.allclose(back, a, atol=1e-7, rtol=1e-6)

    def test_grip_dimension_untouched(self):
        actions = np.array([[0.01, -0.02, 1.0], [0.03, 0.0, 0.0]], dtype=np.float32)
        stats = ActionStats.from_actions(actions)
        assert stats.mean[2] == 0.0 and stats.std[2] == 1.0
        normed = stats.normalize(torch.from_numpy(actions))
        assert torch.equal(normed[:, 2], torch.tensor([1.0, 0.0]))

    def test_translation_standardized(self):
        rng = np.random.default_rng(1)
        actions = np.zeros((2000, 3), dtype=np.float32)
        actions[:, :2] = rng.normal(0.01, 0.02, (2000, 2))
        stats = ActionStats.from_actions(actions)
        normed = stats.normalize(torch.from_numpy(actions)).numpy()
        assert abs(normed[:, 0].mean()) < 1e-5
        assert abs(normed[:, 0].std() - 1) < 1e-4

    def test_degenerate_std_floored(self):
        actions = np.zeros((10, 3), dtype=np.float32)
        stats = ActionStats.from_actions(actions)
        assert stats.std[:2].min() >= 1e-6

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            ActionStats.from_actions(np.zeros((10, 4), dtype=np.float32))


class TestConditionBuilder:
    def test_moidm_token_count(self):
        b = make_builder()
        out = b(make_inputs())
        want = 3 * IDM.queries + HORIZON + 1
        assert out.shape == (2, want, 32)
        assert b.n_tokens(HORIZON) == want

    def test_full_scale_token_count_is_33(self):
        # default-scale config: 3 modalities x 8 queries + 8 frames + task
        idm = IdmConfig()
        cfg = PolicyConfig()
        world = WorldConfig()
        b = ConditionBuilder(cfg, idm, world, ("semantic", "depth", "flow"), 6, 8)
        assert b.n_tokens(8) == 33

    def test_drop_task_token(self):
        b = make_builder(drop_task_token=True)
        out = b(make_inputs())
        assert out.shape[1] == 3 * IDM.queries + HORIZON

    def test_single_part(self):
        b = make_builder(parts=("rgb",), design="single_rgb")
        inputs = make_inputs(parts=("rgb",))
        assert b(inputs).shape[1] == IDM.queries + HORIZON + 1

    def test_baseline_has_no_code_tokens(self):
        b = make_builder(design="baseline")
        inputs = make_inputs()
        inputs.ste = None  # baseline must not need codes
        out = b(inputs)
        assert out.shape[1] == HORIZON + 1

    def test_direct_uses_rasters(self):
        b = make_builder(design="direct")
        inputs = make_inputs(rasters=True)
        inputs.ste = None
        out = b(inputs)
        assert out.shape[1] == 3 + HORIZON + 1
        inputs.rasters = None
        with pytest.raises(ValueError):
            b(inputs)

    def test_missing_codes_rejected(self):
        b = make_builder()
        inputs = make_inputs()
        inputs.ste = None
        with pytest.raises(ValueError):
            b(inputs)

    def test_unknown_design_rejected(self):
        with pytest.raises(ConfigError):
            ConditionBuilder(policy_cfg(design="mlp"), IDM, WORLD, ("semantic",), N_TASKS, HORIZON)

    def test_codes_change_condition(self):
        b = make_builder()
        a = make_inputs(seed=0)
        out_a = b(a)
        b_in = make_inputs(seed=0)
        b_in.ste = {m: v + 1.0 for m, v in b_in.ste.items()}
        assert not torch.allclose(out_a, b(b_in))


def make_head(**kw) -> FlowMatchHead:
    return init_parameters(FlowMatchHead(policy_cfg(**kw)), torch.Generator().manual_seed(1))


class TestFlowMatching:
    def test_forward_shape(self):
        head = make_head()
        cond = torch.randn(2, 7, 32, generator=torch.Generator().manual_seed(0))
        x = torch.randn(2, 4, 3, generator=torch.Generator().manual_seed(1))
        v = head(x, torch.tensor([0.3, 0.9]), cond)
        assert v.shape == (2, 4, 3)
        assert not torch.allclose(v, head(x, torch.tensor([0.6, 0.1]), cond))

    def test_interpolation_endpoints_exact(self):
        head = make_head()
        cond = torch.randn(2, 5, 32, generator=torch.Generator().manual_seed(2))
        x1 = torch.randn(2, 4, 3, generator=torch.Generator().manual_seed(3))
        x0 = torch.randn(2, 4, 3, generator=torch.Generator().manual_seed(4))
        seen = []
        head.register_forward_pre_hook(lambda mod, args: seen.append(args[0].clone()))
        gen = torch.Generator().manual_seed(0)
        fm_training_loss(head, x1, cond, gen, t=torch.zeros(2), x0=x0)
        assert torch.equal(seen[0], x0)
        fm_training_loss(head, x1, cond, gen, t=torch.ones(2), x0=x0)
        assert torch.equal(seen[1], x1)

    def test_zero_network_loss_is_x1_norm_plus_dims(self):
        head = make_head()
        head.forward = lambda x_t, t, cond: torch.zeros_like(x_t)
        x1 = torch.randn(8, 4, 3, generator=torch.Generator().manual_seed(5))
        cond = torch.randn(8, 5, 32, generator=torch.Generator().manual_seed(6))
        gen = torch.Generator().manual_seed(7)
        losses = [float(fm_training_loss(head, x1, cond, gen)) for _ in range(2000)]
        want = float((x1**2).sum(dim=(1, 2)).mean()) + 4 * 3
        got = float(np.mean(losses))
        assert abs(got - want) / want < 0.02

    def test_loss_deterministic_given_generator(self):
        head = make_head()
        x1 = torch.randn(4, 4, 3, generator=torch.Generator().manual_seed(8))
        cond = torch.randn(4, 5, 32, generator=torch.Generator().manual_seed(9))
        a = fm_training_loss(head, x1, cond, torch.Generator().manual_seed(3))
        b = fm_training_loss(head, x1, cond, torch.Generator().manual_seed(3))
        c = fm_training_loss(head, x1, cond, torch.Generator().manual_seed(4))
        assert torch.equal(a, b) and not torch.equal(a, c)

    def test_gradients_match_finite_differences(self):
        head = init_parameters(FlowMatchHead(policy_cfg()), torch.Generator().manual_seed(2)).double()
        x1 = torch.randn(2, 4, 3, generator=torch.Generator().manual_seed(10), dtype=torch.float64)
        cond = torch.randn(2, 5, 32, generator=torch.Generator().manual_seed(11), dtype=torch.float64)
        t = torch.tensor([0.31, 0.77], dtype=torch.float64)
        x0 = torch.randn(2, 4, 3, generator=torch.Generator().manual_seed(12), dtype=torch.float64)
        gen = torch.Generator().manual_seed(0)

        def loss_fn():
            return fm_training_loss(head, x1, cond, gen, t=t, x0=x0)

        worst = fd_check(loss_fn, list(head.parameters()), n_samples=60)
        assert worst < 1e-4, f"worst relative gradient error {worst:.2e}"

    def test_sample_deterministic_and_shaped(self):
        head = make_head()
        cond = torch.randn(3, 5, 32, generator=torch.Generator().manual_seed(13))
        a = fm_sample(head, cond, torch.Generator().manual_seed(1))
        b = fm_sample(head, cond, torch.Generator().manual_seed(1))
        c = fm_sample(head, cond, torch.Generator().manual_seed(2))
        assert a.shape == (3, 4, 3)
        assert torch.equal(a, b) and not torch.equal(a, c)
        with pytest.raises(ValueError):
            fm_sample(head, cond, torch.Generator().manual_seed(1), n_steps=0)

    def test_euler_walk_integrates_constant_field(self):
        head = make_head()
        const = torch.tensor([0.5, -1.0, 2.0])
        head.forward = lambda x_t, t, cond: const.expand(x_t.shape[0], 4, 3).clone()
        cond = torch.randn(1, 5, 32, generator=torch.Generator().manual_seed(14))
        gen = torch.Generator().manual_seed(3)
        x0 = torch.randn(1, 4, 3, generator=torch.Generator().manual_seed(3))
        out = fm_sample(head, cond, gen, n_steps=10)
        assert torch.allclose(out - x0, const.expand(1, 4, 3), atol=1e-6)

    def test_condition_changes_sample(self):
        head = make_head()
        cond_a = torch.randn(1, 5, 32, generator=torch.Generator().manual_seed(15))
        cond_b = torch.randn(1, 5, 32, generator=torch.Generator().manual_seed(16))
        a = fm_sample(head, cond_a, torch.Generator().manual_seed(4))
        b = fm_sample(head, cond_b, torch.Generator().manual_seed(4))
        assert not torch.allclose(a, b)


class TestAutoregressive:
    def test_bin_round_trip_identity(self):
        for bins in (16, 64):
            ids = torch.arange(bins)
            assert torch.equal(value_to_bin(bin_to_value(ids, bins), bins), ids)

    def test_values_clamp_to_range(self):
        assert value_to_bin(torch.tensor([-100.0]), 64).item() == 0
        assert value_to_bin(torch.tensor([100.0]), 64).item() == 63
        assert value_to_bin(torch.tensor([-AR_RANGE]), 64).item() == 0

    def test_quantization_error_bounded(self):
        x = torch.linspace(-AR_RANGE + 1e-4, AR_RANGE - 1e-4, 1000)
        back = bin_to_value(value_to_bin(x, 64), 64)
        assert (back - x).abs().max() <= AR_RANGE / 64 + 1e-6

    def _head(self) -> AutoregressiveHead:
        return init_parameters(AutoregressiveHead(policy_cfg()), torch.Generator().manual_seed(5))

    def test_loss_and_sample_shapes(self):
        head = self._head()
        cond = torch.randn(2, 5, 32, generator=torch.Generator().manual_seed(17))
        x1 = torch.randn(2, 4, 3, generator=torch.Generator().manual_seed(18))
        loss = head.forward_loss(x1, cond)
        assert loss.ndim == 0 and torch.isfinite(loss)
        out = head.greedy_sample(cond)
        assert out.shape == (2, 4, 3)
        assert torch.equal(out, head.greedy_sample(cond))

    def test_causal_mask(self):
        head = self._head()
        cond = torch.randn(1, 5, 32, generator=torch.Generator().manual_seed(19))
        ctx = head.encoder(cond)
        ids = torch.tensor([[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]])
        base = head._decode(ids, ctx)
        changed = ids.clone()
        changed[0, 6] = 0
        after = head._decode(changed, ctx)
        assert torch.allclose(base[:, :7], after[:, :7], atol=1e-6)
        assert not torch.allclose(base[:, 7:], after[:, 7:])

    def test_sample_tracks_condition(self):
        head = self._head()
        a = head.greedy_sample(torch.randn(1, 5, 32, generator=torch.Generator().manual_seed(20)))
        b = head.greedy_sample(torch.randn(1, 5, 32, generator=torch.Generator().manual_seed(21)))
        assert not torch.equal(a, b)
