"""Synthetic 2D manipulation world.

A point agent and up to a handful of disc objects live on the unit square.
The agent moves by bounded deltas, can attach the nearest object within its
grasp radius, and drags it kinematically (no collisions, no inertia). Every
state renders to a small RGB / depth / semantic raster triple, and ground
truth rigid flow between any two states of the same world is available
analytically. A scripted proportional controller solves every "move object j
to goal g" task and is the data-generating expert.

Everything here is numpy + float64 state math; rasters are float32/uint8.
Determinism contract: same seed + config => bit-identical episodes.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError, PlacementError

BACKGROUND_ID = 0
AGENT_ID = 1
FIRST_OBJECT_ID = 2

_MAGIC = b"MOLA"
_FORMAT_VERSION = 1

_BG_COLOR = (0.10, 0.10, 0.12)
_AGENT_COLOR = (0.95, 0.20, 0.15)
_OBJECT_COLORS = (
    (0.20, 0.85, 0.25),
    (0.25, 0.45, 0.95),
    (0.95, 0.80, 0.15),
    (0.10, 0.85, 0.80),
    (0.90, 0.35, 0.85),
    (0.95, 0.55, 0.10),
)
# Goal regions are painted dimly underneath everything; they exist only in RGB.
_GOAL_COLORS = (
    (0.18, 0.26, 0.18),
    (0.27, 0.18, 0.27),
    (0.18, 0.20, 0.30),
    (0.30, 0.24, 0.14),
)


@dataclass(frozen=True)
class WorldConfig:
    resolution: int = 32
    n_objects: int = 3
    n_goals: int = 2
    max_delta: float = 0.05
    agent_radius: float = 0.05
    agent_height: float = 1.0
    object_radius_min: float = 0.04
    object_radius_max: float = 0.06
    object_height_min: float = 0.30
    object_height_max: float = 0.90
    goal_radius: float = 0.12
    grasp_factor: float = 1.5
    episode_len: int = 40
    post_success_frames: int = 8
    spawn_margin: float = 0.12
    min_separation: float = 0.10
    placement_retries: int = 400

    def validate(self) -> None:
        c = self
        if c.resolution < 8:
            raise ConfigError(f"resolution must be >= 8, got {c.resolution}")
        if not (1 <= c.n_objects <= len(_OBJECT_COLORS)):
            raise ConfigError(f"n_objects must be in [1, {len(_OBJECT_COLORS)}], got {c.n_objects}")
        if not (1 <= c.n_goals <= len(_GOAL_COLORS)):
            raise ConfigError(f"n_goals must be in [1, {len(_GOAL_COLORS)}], got {c.n_goals}")
        if not (0.0 < c.max_delta <= 0.2):
            raise ConfigError(f"max_delta must be in (0, 0.2], got {c.max_delta}")
        if not (0.0 < c.object_radius_min <= c.object_radius_max <= 0.2):
            raise ConfigError("object radius range must satisfy 0 < min <= max <= 0.2")
        if not (0.0 < c.object_height_min <= c.object_height_max <= 1.0):
            raise ConfigError("object height range must satisfy 0 < min <= max <= 1")
        if not (0.0 < c.agent_height <= 1.0):
            raise ConfigError("agent_height must be in (0, 1]")
        if not (0.0 < c.goal_radius <= 0.3):
            raise ConfigError(f"goal_radius must be in (0, 0.3], got {c.goal_radius}")
        if not (0.0 < c.agent_radius <= 0.2):
            raise ConfigError("agent_radius must be in (0, 0.2]")
        if c.grasp_factor < 1.0:
            raise ConfigError("grasp_factor must be >= 1")
        if c.episode_len < 16:
            raise ConfigError(f"episode_len must be >= 16, got {c.episode_len}")
        if not (1 <= c.post_success_frames <= c.episode_len):
            raise ConfigError(
                f"post_success_frames must be in [1, episode_len], got {c.post_success_frames}"
            )
        if not (0.0 <= c.spawn_margin < 0.5):
            raise ConfigError("spawn_margin must be in [0, 0.5)")
        # Crude feasibility screen; the placer still has bounded retries.
        # (Goal regions may overlap objects spatially, so they don't count.)
        usable = (1.0 - 2.0 * c.spawn_margin) ** 2
        footprint = c.n_objects * math.pi * (c.object_radius_max + c.min_separation) ** 2
        if footprint > 0.9 * max(usable, 1e-9):
            raise ConfigError("world too crowded: objects cannot fit the spawn area")


@dataclass
class DiscObject:
    id: int
    pos: np.ndarray  # (2,) float64, (x, y) in [0, 1]^2
    radius: float
    height: float

    def copy(self) -> "DiscObject":
        return DiscObject(self.id, self.pos.copy(), self.radius, self.height)


@dataclass
class WorldState:
    agent_pos: np.ndarray  # (2,) float64
    agent_grip: bool
    objects: list[DiscObject]
    attached_object: int | None
    goals: np.ndarray  # (G, 2) float64 goal centers
    config: WorldConfig

    def copy(self) -> "WorldState":
        return WorldState(
            self.agent_pos.copy(),
            self.agent_grip,
            [o.copy() for o in self.objects],
            self.attached_object,
            self.goals.copy(),
            self.config,
        )

    def object_by_id(self, object_id: int) -> DiscObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise ValueError(f"no object with id {object_id}")


@dataclass(frozen=True)
class Action:
    delta: np.ndarray  # (2,) float64, each component in [-max_delta, max_delta]
    grip_cmd: bool

    @staticmethod
    def zero() -> "Action":
        return Action(np.zeros(2), False)

    def as_vector(self) -> np.ndarray:
        """(dx, dy, grip) as float32 — the on-disk / model-facing layout."""
        return np.array([self.delta[0], self.delta[1], 1.0 if self.grip_cmd else 0.0], dtype=np.float32)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    object_id: int
    goal_index: int
    n_tasks: int

    def instruction_embedding(self) -> np.ndarray:
        one_hot = np.zeros(self.n_tasks, dtype=np.float32)
        one_hot[self.task_id] = 1.0
        return one_hot


@dataclass
class Observation:
    rgb: np.ndarray  # (R, R, 3) float32 in [0, 1]
    depth: np.ndarray  # (R, R) float32, 0 = background
    semantic: np.ndarray  # (R, R) uint8 entity ids


@dataclass
class FlowField:
    flow: np.ndarray  # (R, R, 2) float32, (dx, dy) in pixels from frame t to t+k


@dataclass
class Episode:
    rgb: np.ndarray  # (T, R, R, 3) float32
    depth: np.ndarray  # (T, R, R) float32
    semantic: np.ndarray  # (T, R, R) uint8
    actions: np.ndarray  # (T-1, 3) float32: dx, dy, grip
    task_id: int
    seed: int
    n_objects: int = 0

    @property
    def length(self) -> int:
        return int(self.rgb.shape[0])

    def observation(self, t: int) -> Observation:
        return Observation(self.rgb[t], self.depth[t], self.semantic[t])


def task_table(config: WorldConfig) -> list[TaskSpec]:
    """All (object, goal) pairs; task ids enumerate them row-major."""
    n = config.n_objects * config.n_goals
    tasks = []
    for i in range(config.n_objects):
        for g in range(config.n_goals):
            tasks.append(TaskSpec(i * config.n_goals + g, FIRST_OBJECT_ID + i, g, n))
    return tasks


def task_success(state: WorldState, task: TaskSpec) -> bool:
    """Target object released with its center inside the goal region."""
    obj = state.object_by_id(task.object_id)
    goal = state.goals[task.goal_index]
    inside = float(np.linalg.norm(obj.pos - goal)) <= state.config.goal_radius
    return inside and state.attached_object != task.object_id


# ---------------------------------------------------------------------------
# world construction and dynamics


def init_world(seed, config: WorldConfig) -> WorldState:
    """Seeded placement: goals, then agent, then objects, all rejection-sampled.

    Raises PlacementError when the retry budget runs out; the budget is per
    entity group so a crowded-but-feasible config still usually succeeds.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    lo = config.spawn_margin
    hi = 1.0 - config.spawn_margin

    def sample_point() -> np.ndarray:
        return rng.uniform(lo, hi, size=2)

    goals = []
    for _ in range(config.placement_retries):
        p = sample_point()
        if all(np.linalg.norm(p - g) >= 2.0 * config.goal_radius for g in goals):
            goals.append(p)
            if len(goals) == config.n_goals:
                break
    if len(goals) < config.n_goals:
        raise PlacementError(f"could not place {config.n_goals} goals after {config.placement_retries} tries")
    goals = np.stack(goals)

    agent = sample_point()

    objects: list[DiscObject] = []
    attempts = 0
    while len(objects) < config.n_objects:
        if attempts >= config.placement_retries:
            raise PlacementError(
                f"could not place object {len(objects) + 1}/{config.n_objects} "
                f"after {config.placement_retries} tries"
            )
        attempts += 1
        radius = rng.uniform(config.object_radius_min, config.object_radius_max)
        height = rng.uniform(config.object_height_min, config.object_height_max)
        pos = sample_point()
        clear_of_objects = all(
            np.linalg.norm(pos - o.pos) >= radius + o.radius + config.min_separation for o in objects
        )
        clear_of_agent = np.linalg.norm(pos - agent) >= radius + config.agent_radius + config.min_separation
        outside_goals = all(
            np.linalg.norm(pos - g) >= config.goal_radius + radius + 0.02 for g in goals
        )
        if clear_of_objects and clear_of_agent and outside_goals:
            objects.append(DiscObject(FIRST_OBJECT_ID + len(objects), pos, radius, height))

    return WorldState(agent, False, objects, None, goals, config)


def step(state: WorldState, action: Action) -> WorldState:
    """One environment step.

    Move the agent by the (bounded) delta, clamp to the unit square, drag the
    attached object by the realized displacement, then resolve the grip
    command: keep / release, or attach the nearest object whose center lies
    within its grasp radius of the new agent position.
    """
    cfg = state.config
    delta = np.asarray(action.delta, dtype=np.float64)
    if delta.shape != (2,):
        raise ValueError(f"action delta must have shape (2,), got {delta.shape}")
    if np.any(np.abs(delta) > cfg.max_delta + 1e-12):
        raise ValueError(f"action delta {delta} exceeds bound {cfg.max_delta}")

    old = state.agent_pos
    new_agent = np.clip(old + delta, 0.0, 1.0)
    realized = new_agent - old
    objects = [o.copy() for o in state.objects]

    attached = state.attached_object
    if attached is not None:
        if action.grip_cmd:
            obj = next(o for o in objects if o.id == attached)
            obj.pos = np.clip(obj.pos + realized, 0.0, 1.0)
        else:
            attached = None
    elif action.grip_cmd:
        best = None
        for o in objects:
            d = float(np.linalg.norm(o.pos - new_agent))
            if d <= cfg.grasp_factor * o.radius and (best is None or d < best[0]):
                best = (d, o.id)
        if best is not None:
            attached = best[1]

    return WorldState(new_agent, bool(action.grip_cmd), objects, attached, state.goals.copy(), cfg)


def states_equal(a: WorldState, b: WorldState) -> bool:
    if a.agent_grip != b.agent_grip or a.attached_object != b.attached_object:
        return False
    if not np.array_equal(a.agent_pos, b.agent_pos) or not np.array_equal(a.goals, b.goals):
        return False
    if [o.id for o in a.objects] != [o.id for o in b.objects]:
        return False
    return all(
        np.array_equal(oa.pos, ob.pos) and oa.radius == ob.radius and oa.height == ob.height
        for oa, ob in zip(a.objects, b.objects)
    )


def oracle_inverse_action(state_t: WorldState, state_t1: WorldState) -> Action:
    """Recover the action that maps state_t to state_t1.

    The translation is the realized agent displacement (when the agent was
    clamped at a wall the displacement is still a valid in-box representative
    of the original command) and the grip command is the gripper state carried
    by state_t1. Because float addition is many-to-one, the nominal
    difference is nudged by ulps per axis until it replays bit-exactly; any
    remaining mismatch means the states are not one environment step apart.
    """
    cfg = state_t.config
    base = np.clip(state_t1.agent_pos - state_t.agent_pos, -cfg.max_delta, cfg.max_delta)
    grip = bool(state_t1.agent_grip)

    def exact_axis(axis: int, d: float) -> float | None:
        target = state_t1.agent_pos[axis]
        origin = state_t.agent_pos[axis]
        cands = [d]
        up = down = d
        for _ in range(4):
            up = math.nextafter(up, math.inf)
            down = math.nextafter(down, -math.inf)
            cands.extend((up, down))
        for cand in cands:
            if abs(cand) <= cfg.max_delta and np.clip(origin + cand, 0.0, 1.0) == target:
                return cand
        return None

    delta = base.copy()
    for axis in range(2):
        found = exact_axis(axis, float(base[axis]))
        if found is None:
            raise ValueError("states are not one environment step apart (no in-box translation)")
        delta[axis] = found
    candidate = Action(delta, grip)
    replayed = step(state_t, candidate)
    if not states_equal(replayed, state_t1):
        raise ValueError("states are not one environment step apart")
    return candidate


def clip_delta_f32(delta: np.ndarray, max_delta: float) -> np.ndarray:
    """Clip a translation to the action box and round to float32, staying
    inside the box: f32 rounding of the bound itself can overshoot by an ulp,
    in which case the value is nudged one f32 step toward zero."""
    d = np.clip(np.asarray(delta, dtype=np.float64), -max_delta, max_delta).astype(np.float32)
    over = np.abs(d.astype(np.float64)) > max_delta
    if over.any():
        d[over] = np.nextafter(d[over], np.float32(0.0))
    return d


def _park_point(state: WorldState, task: TaskSpec) -> np.ndarray:
    """Object-specific drop point inside the goal region.

    Objects parked in the same goal sit on a small ring at distinct angles,
    far enough apart that a later grasp near one cannot attach its neighbour.
    """
    cfg = state.config
    idx = task.object_id - FIRST_OBJECT_ID
    ang = 2.0 * math.pi * idx / max(1, cfg.n_objects)
    ring = 0.45 * cfg.goal_radius
    return state.goals[task.goal_index] + ring * np.array([math.cos(ang), math.sin(ang)])


def scripted_expert(state: WorldState, task: TaskSpec) -> Action:
    """Proportional pick-and-place controller; solves any feasible task.

    Phases: approach the target object, close the gripper inside the grasp
    radius, carry the object to its drop point in the goal, release, then
    idle. Deterministic in the state, so replaying recorded actions
    reproduces the trajectory.
    """
    cfg = state.config
    obj = state.object_by_id(task.object_id)

    def bounded(err: np.ndarray) -> np.ndarray:
        return np.clip(err, -cfg.max_delta, cfg.max_delta)

    if task_success(state, task):
        return Action.zero()
    if state.attached_object == task.object_id:
        err = _park_point(state, task) - obj.pos
        if float(np.linalg.norm(err)) <= 0.02:
            return Action(np.zeros(2), False)  # release at the drop point
        return Action(bounded(err), True)
    if state.attached_object is not None:
        return Action(np.zeros(2), False)  # holding the wrong object: let go
    err = obj.pos - state.agent_pos
    if float(np.linalg.norm(err)) <= 0.6 * cfg.grasp_factor * obj.radius:
        return Action(bounded(err), True)  # close enough: close the gripper
    return Action(bounded(err), False)


# ---------------------------------------------------------------------------
# rasterization

_SUPERSAMPLE = 16


def _disc_coverage(center: np.ndarray, radius: float, resolution: int) -> np.ndarray:
    """Fraction of each pixel covered by the disc, via a 16x16 subpixel grid.

    Exact to well under 1% of the disc area, which is what the pixel-count
    checks rely on. Only the disc's bounding box is evaluated.
    """
    r = resolution
    cx, cy = float(center[0]), float(center[1])
    out = np.zeros((r, r), dtype=np.float64)
    lo_col = max(0, int(math.floor((cx - radius) * r)) - 1)
    hi_col = min(r - 1, int(math.ceil((cx + radius) * r)) + 1)
    lo_row = max(0, int(math.floor((cy - radius) * r)) - 1)
    hi_row = min(r - 1, int(math.ceil((cy + radius) * r)) + 1)
    if lo_col > hi_col or lo_row > hi_row:
        return out
    offs = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE
    cols = np.arange(lo_col, hi_col + 1)
    rows = np.arange(lo_row, hi_row + 1)
    xs = (cols[:, None] + offs[None, :]) / r  # (ncol, S) world x of subsamples
    ys = (rows[:, None] + offs[None, :]) / r
    dx2 = (xs - cx) ** 2
    dy2 = (ys - cy) ** 2
    inside = (dy2[:, None, :, None] + dx2[None, :, None, :]) <= radius * radius
    out[lo_row : hi_row + 1, lo_col : hi_col + 1] = inside.mean(axis=(2, 3))
    return out


def _center_mask(center: np.ndarray, radius: float, resolution: int) -> np.ndarray:
    """Pixels whose center lies inside the disc (used for semantic/depth/flow)."""
    r = resolution
    coords = (np.arange(r) + 0.5) / r
    dx2 = (coords[None, :] - float(center[0])) ** 2
    dy2 = (coords[:, None] - float(center[1])) ** 2
    return (dx2 + dy2) <= radius * radius


def _z_ordered_entities(state: WorldState) -> list[tuple[int, np.ndarray, float, float]]:
    """(id, pos, radius, height) bottom-to-top: objects by height, agent last."""
    entities = [(o.id, o.pos, o.radius, o.height) for o in sorted(state.objects, key=lambda o: (o.height, o.id))]
    entities.append((AGENT_ID, state.agent_pos, state.config.agent_radius, state.config.agent_height))
    return entities


def _entity_color(entity_id: int) -> tuple[float, float, float]:
    if entity_id == AGENT_ID:
        return _AGENT_COLOR
    return _OBJECT_COLORS[(entity_id - FIRST_OBJECT_ID) % len(_OBJECT_COLORS)]


def render(state: WorldState) -> Observation:
    """Rasterize a state to the RGB / depth / semantic triple.

    RGB composites anti-aliased coverage bottom-to-top (goals dimly at the
    very bottom, then objects by height, agent on top). Depth and semantics
    use the pixel-center-in-disc test with the same z-order, so depth is
    nonzero exactly where the semantic map is.
    """
    r = state.config.resolution
    rgb = np.empty((r, r, 3), dtype=np.float64)
    rgb[:] = _BG_COLOR
    for gi in range(state.goals.shape[0]):
        cov = _disc_coverage(state.goals[gi], state.config.goal_radius, r)[..., None]
        rgb = rgb * (1.0 - cov) + np.asarray(_GOAL_COLORS[gi]) * cov

    depth = np.zeros((r, r), dtype=np.float32)
    semantic = np.zeros((r, r), dtype=np.uint8)
    for entity_id, pos, radius, height in _z_ordered_entities(state):
        cov = _disc_coverage(pos, radius, r)[..., None]
        rgb = rgb * (1.0 - cov) + np.asarray(_entity_color(entity_id)) * cov
        mask = _center_mask(pos, radius, r)
        semantic[mask] = entity_id
        depth[mask] = height

    return Observation(rgb.astype(np.float32), depth, semantic)


def render_flow(state_t: WorldState, state_tk: WorldState) -> FlowField:
    """Rigid flow from state_t to state_tk in pixel units.

    Every pixel owned by an entity in frame t (same center test and z-order as
    the semantic map) gets that entity's center displacement; background is
    zero. Both states must describe the same set of entities.
    """
    ids_t = [o.id for o in state_t.objects]
    ids_tk = [o.id for o in state_tk.objects]
    if ids_t != ids_tk:
        raise ValueError(f"entity id sets differ: {ids_t} vs {ids_tk}")
    r = state_t.config.resolution
    flow = np.zeros((r, r, 2), dtype=np.float32)
    pos_tk = {o.id: o.pos for o in state_tk.objects}
    pos_tk[AGENT_ID] = state_tk.agent_pos
    for entity_id, pos, radius, _ in _z_ordered_entities(state_t):
        mask = _center_mask(pos, radius, r)
        disp = (pos_tk[entity_id] - pos) * r
        flow[mask] = disp.astype(np.float32)
    return FlowField(flow)


# ---------------------------------------------------------------------------
# episode serialization: little-endian, fixed field order, byte-deterministic

def episode_to_bytes(ep: Episode) -> bytes:
    t, r = ep.length, ep.rgb.shape[1]
    header = _MAGIC + struct.pack("<IIII", _FORMAT_VERSION, t, r, ep.n_objects)
    parts = [
        header,
        np.ascontiguousarray(ep.rgb, dtype="<f4").tobytes(),
        np.ascontiguousarray(ep.depth, dtype="<f4").tobytes(),
        np.ascontiguousarray(ep.semantic, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(ep.actions, dtype="<f4").tobytes(),
        struct.pack("<I", ep.task_id),
    ]
    return b"".join(parts)


def episode_from_bytes(buf: bytes, seed: int = -1) -> Episode:
    if len(buf) < 20 or buf[:4] != _MAGIC:
        raise DatasetError("bad episode file: missing magic")
    version, t, r, k = struct.unpack_from("<IIII", buf, 4)
    if version != _FORMAT_VERSION:
        raise DatasetError(f"unsupported episode format version {version}")
    if t < 2 or r < 1:
        raise DatasetError(f"bad episode dimensions T={t} R={r}")
    sizes = [t * r * r * 3 * 4, t * r * r * 4, t * r * r, (t - 1) * 3 * 4, 4]
    if len(buf) != 20 + sum(sizes):
        raise DatasetError(f"episode file length {len(buf)} does not match header")
    off = 20
    rgb = np.frombuffer(buf, "<f4", count=t * r * r * 3, offset=off).reshape(t, r, r, 3).copy()
    off += sizes[0]
    depth = np.frombuffer(buf, "<f4", count=t * r * r, offset=off).reshape(t, r, r).copy()
    off += sizes[1]
    semantic = np.frombuffer(buf, np.uint8, count=t * r * r, offset=off).reshape(t, r, r).copy()
    off += sizes[2]
    actions = np.frombuffer(buf, "<f4", count=(t - 1) * 3, offset=off).reshape(t - 1, 3).copy()
    off += sizes[3]
    (task_id,) = struct.unpack_from("<I", buf, off)
    return Episode(rgb, depth, semantic, actions, int(task_id), seed, n_objects=int(k))


def run_expert_episode(config: WorldConfig, seed: int, task: TaskSpec) -> tuple[Episode, list[WorldState]]:
    """Roll the scripted expert and rasterize every state.

    Episodes end ``post_success_frames`` frames after the task first succeeds
    (capped at ``episode_len``), so recorded transitions stay dominated by
    motion instead of the expert idling on a finished task. Expert deltas are
    rounded through float32 before stepping so the stored f32 actions replay
    to bit-identical states.
    """
    state = init_world(seed, config)
    states = [state]
    obs = [render(state)]
    rows = []
    success_at = 0 if task_success(state, task) else None
    for t in range(config.episode_len - 1):
        if success_at is not None and t - success_at >= config.post_success_frames:
            break
        a = scripted_expert(state, task)
        delta32 = clip_delta_f32(a.delta, config.max_delta)
        rows.append((delta32[0], delta32[1], 1.0 if a.grip_cmd else 0.0))
        state = step(state, Action(delta32.astype(np.float64), a.grip_cmd))
        states.append(state)
        obs.append(render(state))
        if success_at is None and task_success(state, task):
            success_at = t + 1
    ep = Episode(
        rgb=np.stack([o.rgb for o in obs]),
        depth=np.stack([o.depth for o in obs]),
        semantic=np.stack([o.semantic for o in obs]),
        actions=np.asarray(rows, dtype=np.float32).reshape(len(rows), 3),
        task_id=task.task_id,
        seed=seed,
        n_objects=config.n_objects,
    )
    return ep, states


def replay_states(config: WorldConfig, seed: int, actions: np.ndarray) -> list[WorldState]:
    """Reconstruct the state trajectory of a stored episode from its actions."""
    state = init_world(seed, config)
    states = [state]
    for row in np.asarray(actions, dtype=np.float32):
        delta = row[:2].astype(np.float64)
        state = step(state, Action(delta, bool(row[2] > 0.5)))
        states.append(state)
    return states


_FRACTIONS = (0.1, 0.2, 0.5, 1.0)


def generate_dataset(config: WorldConfig, n_episodes: int, out_dir, seed: int = 0) -> dict:
    """Write n_episodes expert episodes plus a manifest; returns the manifest.

    Layout: ep_00000.bin ... plus manifest.json carrying the config, one
    record per episode, a train/val split, and nested train-fraction subsets
    (each smaller fraction is a prefix of a fixed seeded shuffle, so
    10% ⊂ 20% ⊂ 50% ⊂ 100%). Output bytes depend only on (config, n, seed).
    """
    config.validate()
    if n_episodes < 1:
        raise ConfigError(f"n_episodes must be >= 1, got {n_episodes}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory {out}: {e}") from e

    tasks = task_table(config)
    records = []
    for i in range(n_episodes):
        ep_seed = seed + i
        task = tasks[int(np.random.default_rng((seed, 7919, i)).integers(len(tasks)))]
        ep, _ = run_expert_episode(config, ep_seed, task)
        name = f"ep_{i:05d}.bin"
        try:
            (out / name).write_bytes(episode_to_bytes(ep))
        except OSError as e:
            raise DatasetError(f"cannot write {out / name}: {e}") from e
        records.append({"file": name, "seed": ep_seed, "task_id": task.task_id, "length": ep.length})

    val_n = max(1, n_episodes // 10) if n_episodes >= 5 else 0
    train = list(range(n_episodes - val_n))
    val = list(range(n_episodes - val_n, n_episodes))
    perm = np.random.default_rng((seed, 104729)).permutation(len(train))
    fractions = {}
    for f in _FRACTIONS:
        take = max(1, math.ceil(f * len(train))) if train else 0
        fractions[str(f)] = sorted(int(train[j]) for j in perm[:take])

    manifest = {
        "schema_version": 1,
        "world": dataclasses.asdict(config),
        "n_episodes": n_episodes,
        "seed": seed,
        "episodes": records,
        "splits": {"train": train, "val": val, "fractions": fractions},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def load_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no manifest.json in {dataset_dir}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt manifest {path}: {e}") from e
    if manifest.get("schema_version") != 1:
        raise DatasetError(f"unsupported manifest schema {manifest.get('schema_version')!r}")
    for key in ("world", "episodes", "splits"):
        if key not in manifest:
            raise DatasetError(f"manifest missing key {key!r}")
    return manifest


class EpisodeStore:
    """Lazy, cached access to a generated dataset directory."""

    def __init__(self, dataset_dir, cache_size: int = 600):
        self.dir = Path(dataset_dir)
        self.manifest = load_manifest(self.dir)
        self.config = WorldConfig(**self.manifest["world"])
        self._cache: dict[int, Episode] = {}
        self._states: dict[int, list[WorldState]] = {}
        self._cache_size = cache_size

    def __len__(self) -> int:
        return len(self.manifest["episodes"])

    @property
    def splits(self) -> dict:
        return self.manifest["splits"]

    def load(self, index: int) -> Episode:
        if index in self._cache:
            return self._cache[index]
        rec = self.manifest["episodes"][index]
        ep = episode_from_bytes((self.dir / rec["file"]).read_bytes(), seed=rec["seed"])
        if ep.task_id != rec["task_id"] or ep.length != rec["length"]:
            raise DatasetError(f"episode {index} does not match its manifest record")
        if len(self._cache) >= self._cache_size:
            self._cache.pop(next(iter(self._cache)))
        self._cache[index] = ep
        return ep

    def states(self, index: int) -> list[WorldState]:
        """Replayed state trajectory (used for flow targets and oracles)."""
        if index not in self._states:
            ep = self.load(index)
            if len(self._states) >= self._cache_size:
                self._states.pop(next(iter(self._states)))
            self._states[index] = replay_states(self.config, ep.seed, ep.actions)
        return self._states[index]

    def task(self, index: int) -> TaskSpec:
        return task_table(self.config)[self.load(index).task_id]
