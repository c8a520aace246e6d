from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from mola.errors import ConfigError, PlacementError
from mola.synthworld import (
    AGENT_ID,
    BACKGROUND_ID,
    FIRST_OBJECT_ID,
    Action,
    DiscObject,
    WorldConfig,
    WorldState,
    _disc_coverage,
    init_world,
    oracle_inverse_action,
    render,
    render_flow,
    replay_states,
    run_expert_episode,
    scripted_expert,
    states_equal,
    step,
    task_success,
    task_table,
)


def _small_cfg(**kw) -> WorldConfig:
    return dataclasses.replace(WorldConfig(), episode_len=kw.pop("episode_len", 24), **kw)


# ---------------------------------------------------------------------------
# construction


def test_init_world_deterministic():
    cfg = WorldConfig()
    a = init_world(7, cfg)
    b = init_world(7, cfg)
    assert states_equal(a, b)
    c = init_world(8, cfg)
    assert not states_equal(a, c)


def test_init_world_layout_constraints():
    cfg = WorldConfig()
    for seed in range(25):
        s = init_world(seed, cfg)
        assert len(s.objects) == cfg.n_objects
        assert s.goals.shape == (cfg.n_goals, 2)
        assert s.attached_object is None and not s.agent_grip
        lo, hi = cfg.spawn_margin, 1 - cfg.spawn_margin
        assert np.all(s.agent_pos >= lo) and np.all(s.agent_pos <= hi)
        for i, o in enumerate(s.objects):
            assert o.id == FIRST_OBJECT_ID + i
            assert cfg.object_radius_min <= o.radius <= cfg.object_radius_max
            assert cfg.object_height_min <= o.height <= cfg.object_height_max
            for other in s.objects:
                if other.id != o.id:
                    d = np.linalg.norm(o.pos - other.pos)
                    assert d >= o.radius + other.radius + cfg.min_separation - 1e-12
            for g in s.goals:
                assert np.linalg.norm(o.pos - g) >= cfg.goal_radius + o.radius + 0.02 - 1e-12


def test_config_validation_rejects_bad_values():
    with pytest.raises(ConfigError):
        WorldConfig(resolution=4).validate()
    with pytest.raises(ConfigError):
        WorldConfig(n_objects=0).validate()
    with pytest.raises(ConfigError):
        WorldConfig(n_objects=99).validate()
    with pytest.raises(ConfigError):
        WorldConfig(max_delta=0.0).validate()
    with pytest.raises(ConfigError):
        WorldConfig(episode_len=8).validate()
    with pytest.raises(ConfigError):
        WorldConfig(object_height_min=0.0).validate()
    with pytest.raises(ConfigError):
        WorldConfig(n_objects=6, object_radius_max=0.2, min_separation=0.3).validate()


def test_infeasible_placement_raises():
    cfg = WorldConfig(
        n_objects=1,
        n_goals=1,
        spawn_margin=0.45,
        goal_radius=0.15,
        min_separation=0.0,
        object_radius_min=0.04,
        object_radius_max=0.04,
        placement_retries=60,
    )
    with pytest.raises(PlacementError):
        init_world(0, cfg)


def test_task_table_enumerates_object_goal_pairs():
    cfg = WorldConfig(n_objects=3, n_goals=2)
    tasks = task_table(cfg)
    assert len(tasks) == 6
    assert [t.task_id for t in tasks] == list(range(6))
    assert tasks[0].object_id == FIRST_OBJECT_ID and tasks[0].goal_index == 0
    assert tasks[5].object_id == FIRST_OBJECT_ID + 2 and tasks[5].goal_index == 1
    one_hot = tasks[3].instruction_embedding()
    assert one_hot.shape == (6,) and one_hot[3] == 1.0 and one_hot.sum() == 1.0


# ---------------------------------------------------------------------------
# dynamics


def test_step_translates_and_clamps():
    cfg = WorldConfig()
    s = init_world(3, cfg)
    s.agent_pos = np.array([0.5, 0.5])
    s1 = step(s, Action(np.array([0.03, -0.02]), False))
    assert np.array_equal(s1.agent_pos, np.array([0.53, 0.48]))
    # drive into the wall: position clamps to the unit square
    s.agent_pos = np.array([0.99, 0.01])
    s2 = step(s, Action(np.array([0.05, -0.05]), False))
    assert np.array_equal(s2.agent_pos, np.array([1.0, 0.0]))


def test_step_rejects_oversized_delta():
    s = init_world(0, WorldConfig())
    with pytest.raises(ValueError):
        step(s, Action(np.array([0.06, 0.0]), False))


def test_grip_attaches_nearest_object_in_range():
    cfg = WorldConfig()
    s = init_world(1, cfg)
    target = s.objects[1]
    s.agent_pos = target.pos + np.array([0.5 * target.radius, 0.0])
    s1 = step(s, Action(np.zeros(2), True))
    assert s1.attached_object == target.id
    assert s1.agent_grip
    # out of range: no attachment
    s.agent_pos = target.pos + np.array([5 * target.radius, 0.0])
    far = min(np.linalg.norm(s.agent_pos - o.pos) / o.radius for o in s.objects)
    assert far > cfg.grasp_factor
    s2 = step(s, Action(np.zeros(2), True))
    assert s2.attached_object is None and s2.agent_grip


def test_attached_object_moves_rigidly_with_agent():
    cfg = WorldConfig()
    s = init_world(2, cfg)
    obj = s.objects[0]
    s.agent_pos = obj.pos.copy()
    s = step(s, Action(np.zeros(2), True))
    assert s.attached_object == obj.id
    d = np.array([0.031, -0.017])
    s1 = step(s, Action(d, True))
    moved = s1.object_by_id(obj.id)
    assert np.array_equal(moved.pos - s.object_by_id(obj.id).pos, s1.agent_pos - s.agent_pos)
    assert np.allclose(moved.pos - s.object_by_id(obj.id).pos, d)
    # other objects stay put, bitwise
    for o in s.objects:
        if o.id != obj.id:
            assert np.array_equal(o.pos, s1.object_by_id(o.id).pos)


def test_release_drops_object_and_marks_success():
    cfg = WorldConfig()
    s = init_world(4, cfg)
    tasks = task_table(cfg)
    task = tasks[0]
    obj = s.object_by_id(task.object_id)
    goal = s.goals[task.goal_index]
    s.agent_pos = obj.pos.copy()
    s = step(s, Action(np.zeros(2), True))
    obj_pos = s.object_by_id(task.object_id).pos.copy()
    s.agent_pos = np.asarray(goal) - (obj_pos - s.agent_pos)  # teleport for the test
    for o in s.objects:
        if o.id == task.object_id:
            o.pos = np.asarray(goal).copy()
    assert not task_success(s, task)  # still attached
    s1 = step(s, Action(np.zeros(2), False))
    assert s1.attached_object is None
    assert task_success(s1, task)


# ---------------------------------------------------------------------------
# rasterization


def test_disc_coverage_matches_area_within_2pct(rng):
    for _ in range(200):
        r = float(rng.uniform(0.03, 0.12))
        c = rng.uniform(0.2, 0.8, size=2)
        cov = _disc_coverage(c, r, 32)
        area_px = math.pi * r * r * 32 * 32
        assert abs(cov.sum() - area_px) / area_px < 0.02


def test_render_shapes_dtypes_ranges():
    s = init_world(5, WorldConfig())
    obs = render(s)
    assert obs.rgb.shape == (32, 32, 3) and obs.rgb.dtype == np.float32
    assert obs.depth.shape == (32, 32) and obs.depth.dtype == np.float32
    assert obs.semantic.shape == (32, 32) and obs.semantic.dtype == np.uint8
    assert obs.rgb.min() >= 0.0 and obs.rgb.max() <= 1.0
    ids = set(np.unique(obs.semantic).tolist())
    allowed = {BACKGROUND_ID, AGENT_ID} | {o.id for o in s.objects}
    assert ids <= allowed


def test_render_deterministic():
    s = init_world(6, WorldConfig())
    a, b = render(s), render(s)
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.semantic, b.semantic)


def test_depth_nonzero_exactly_where_semantic():
    for seed in range(10):
        obs = render(init_world(seed, WorldConfig()))
        assert np.array_equal(obs.depth > 0, obs.semantic > 0)


def test_agent_renders_above_objects():
    cfg = WorldConfig()
    s = init_world(9, cfg)
    obj = s.objects[0]
    s.agent_pos = obj.pos.copy()  # fully overlap the object
    obs = render(s)
    overlap = (np.linalg.norm(
        np.stack(np.meshgrid((np.arange(32) + 0.5) / 32, (np.arange(32) + 0.5) / 32), -1)
        - np.array([obj.pos[0], obj.pos[1]]),
        axis=-1,
    ) <= min(cfg.agent_radius, obj.radius) * 0.8)
    assert overlap.any()
    assert np.all(obs.semantic[overlap] == AGENT_ID)
    assert np.all(obs.depth[overlap] == np.float32(cfg.agent_height))


def test_empty_world_renders_background_only():
    cfg = WorldConfig()
    s = WorldState(np.array([2.0, 2.0]), False, [], None, np.zeros((0, 2)), cfg)
    obs = render(s)
    assert np.all(obs.semantic == BACKGROUND_ID)
    assert np.all(obs.depth == 0)


# ---------------------------------------------------------------------------
# flow


def test_flow_zero_for_identical_states():
    s = init_world(11, WorldConfig())
    f = render_flow(s, s)
    assert f.flow.shape == (32, 32, 2) and f.flow.dtype == np.float32
    assert np.all(f.flow == 0)


def test_flow_carries_entity_displacement_in_pixels():
    cfg = WorldConfig()
    s0 = init_world(12, cfg)
    d = np.array([0.04, -0.03])
    s1 = step(s0, Action(d, False))
    f = render_flow(s0, s1).flow
    obs0 = render(s0)
    agent_px = obs0.semantic == AGENT_ID
    assert agent_px.any()
    expected = (s1.agent_pos - s0.agent_pos) * cfg.resolution
    assert np.allclose(f[agent_px], expected.astype(np.float32))
    assert np.all(f[obs0.semantic == BACKGROUND_ID] == 0)


def test_flow_mismatched_entities_raises():
    cfg = WorldConfig()
    s0 = init_world(13, cfg)
    s1 = s0.copy()
    s1.objects = s1.objects[:-1]
    with pytest.raises(ValueError):
        render_flow(s0, s1)


def _forward_warp(sem_t: np.ndarray, depth_t: np.ndarray, flow: np.ndarray):
    """Independent splat-based warp used as the flow oracle."""
    n = sem_t.shape[0]
    out = np.zeros_like(sem_t)
    z = np.full((n, n), -1.0)
    hit = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            dx, dy = flow[i, j]
            col = int(np.rint(j + dx))
            row = int(np.rint(i + dy))
            if 0 <= col < n and 0 <= row < n:
                hit[row, col] = True
                if depth_t[i, j] > z[row, col]:
                    z[row, col] = depth_t[i, j]
                    out[row, col] = sem_t[i, j]
    return out, hit


@pytest.mark.parametrize("gap", [1, 4])
def test_flow_warp_agrees_with_future_semantics(gap):
    cfg = WorldConfig()
    tasks = task_table(cfg)
    total_ok = total_px = 0
    for seed in range(6):
        _, states = run_expert_episode(_small_cfg(), seed, tasks[seed % len(tasks)])
        for t in range(0, len(states) - gap, 5):
            s0, s1 = states[t], states[t + gap]
            o0, o1 = render(s0), render(s1)
            flow = render_flow(s0, s1).flow
            warped, hit = _forward_warp(o0.semantic, o0.depth, flow)
            total_ok += int((warped[hit] == o1.semantic[hit]).sum())
            total_px += int(hit.sum())
    assert total_px > 0
    assert total_ok / total_px >= 0.98


# ---------------------------------------------------------------------------
# inverse-action oracle


def test_oracle_recovers_random_actions_1k():
    cfg = WorldConfig()
    rng = np.random.default_rng(99)
    checked = interior = 0
    for w in range(25):
        s = init_world(1000 + w, cfg)
        for _ in range(40):
            delta = rng.uniform(-cfg.max_delta, cfg.max_delta, size=2)
            a = Action(delta, bool(rng.random() < 0.5))
            s1 = step(s, a)
            rec = oracle_inverse_action(s, s1)  # must never raise on real pairs
            assert rec.grip_cmd == a.grip_cmd
            unclamped = np.array_equal(s1.agent_pos, s.agent_pos + delta)
            if unclamped:
                interior += 1
                assert np.allclose(rec.delta, a.delta, atol=1e-12)
            checked += 1
            s = s1
    assert checked == 1000
    assert interior > 600  # most transitions stay off the walls


def test_oracle_rejects_states_more_than_one_step_apart():
    cfg = WorldConfig()
    s0 = init_world(50, cfg)
    s1 = step(s0, Action(np.array([0.05, 0.0]), False))
    s2 = step(s1, Action(np.array([0.05, 0.0]), False))
    with pytest.raises(ValueError):
        oracle_inverse_action(s0, s2)
    other = init_world(51, cfg)
    with pytest.raises(ValueError):
        oracle_inverse_action(s0, other)


def test_oracle_handles_clamped_transitions():
    cfg = WorldConfig()
    s = init_world(52, cfg)
    s.agent_pos = np.array([0.99, 0.5])
    s1 = step(s, Action(np.array([0.05, 0.0]), False))
    assert s1.agent_pos[0] == 1.0
    rec = oracle_inverse_action(s, s1)
    assert states_equal(step(s, rec), s1)


# ---------------------------------------------------------------------------
# scripted expert


def test_expert_completes_every_task_within_budget():
    cfg = WorldConfig()
    tasks = task_table(cfg)
    for seed in range(4):
        for task in tasks:
            s = init_world(seed, cfg)
            done_at = None
            for t in range(cfg.episode_len):
                a = scripted_expert(s, task)
                assert np.all(np.abs(a.delta) <= cfg.max_delta + 1e-12)
                s = step(s, a)
                if task_success(s, task):
                    done_at = t
                    break
            assert done_at is not None, f"expert failed task {task.task_id} seed {seed}"


def test_expert_idles_after_success():
    cfg = WorldConfig()
    task = task_table(cfg)[0]
    s = init_world(17, cfg)
    for _ in range(cfg.episode_len):
        s = step(s, scripted_expert(s, task))
        if task_success(s, task):
            break
    assert task_success(s, task)
    a = scripted_expert(s, task)
    assert np.all(a.delta == 0) and not a.grip_cmd
    s2 = step(s, a)
    assert states_equal(s2, step(s2, scripted_expert(s2, task)))


def test_episodes_end_shortly_after_success():
    cfg = WorldConfig()
    task = task_table(cfg)[0]
    ep, states = run_expert_episode(cfg, seed=17, task=task)
    first = next(t for t, s in enumerate(states) if task_success(s, task))
    assert ep.length == min(cfg.episode_len, first + cfg.post_success_frames + 1)
    assert ep.actions.shape == (ep.length - 1, 3)
    # the recorded tail after success is the idle phase, nothing longer
    tail = ep.actions[first:]
    assert np.all(tail == 0.0)
    # truncated episodes still replay bit-exactly from their actions
    replayed = replay_states(cfg, 17, ep.actions)
    assert len(replayed) == ep.length
    assert states_equal(replayed[-1], states[-1])


def test_unsolved_tasks_keep_full_length():
    cfg = WorldConfig(episode_len=16)
    task = task_table(cfg)[0]
    # a 16-step budget is too short for most seeds' pick-and-place
    for seed in range(6):
        ep, states = run_expert_episode(cfg, seed=seed, task=task)
        if not any(task_success(s, task) for s in states):
            assert ep.length == cfg.episode_len
            return
    pytest.skip("every probe seed solved the task inside 16 steps")
