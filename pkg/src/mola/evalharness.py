"""Closed-loop evaluation: rollouts, chained tasks, ablation tables, probes.

The central metric mirrors chained multi-task evaluation: each chain draws
five distinct tasks, the world persists across them, and the chain stops at
the first failure. ``avg_len`` is the mean number of consecutive completions;
per-position completion rates are non-increasing by construction and both
facts are asserted on every result.

Ablation runners train (or reuse) the stage-3 variants they compare, always
from the same stage-1/stage-2 parents, then evaluate every variant on the
same world seeds so comparisons are paired. Each table row reports mean and
sample std over >= 3 seeds, and all tables land as CSV with stable headers.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .action_head import GRIP_THRESHOLD, AutoregressiveHead, ConditionInputs, fm_sample
from .checkpointio import file_sha256
from .config import MODALITIES, RunConfig, config_hash
from .errors import AcceptanceError, ConfigError, LineageError
from .imagination import VideoModel
from .moidm import IdmBundle, modality_channels, semantic_to_onehot
from .pipeline import (
    PolicyArtifacts,
    load_policy,
    load_video_model,
    read_manifest,
    seed_for,
    stage3_train_policy,
)
from .synthworld import (
    Action,
    EpisodeStore,
    TaskSpec,
    WorldConfig,
    WorldState,
    clip_delta_f32,
    init_world,
    oracle_inverse_action,
    render,
    scripted_expert,
    step,
    task_success,
    task_table,
)

EVAL_MODES = ("full", "same_frame", "noisy_frame")


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    steps_used: int
    task_id: int
    seed: int

    def __post_init__(self):
        if self.steps_used < 0:
            raise ValueError("steps_used cannot be negative")


@dataclass(frozen=True)
class ChainResult:
    """Per-position completion rates and their mean-length summary."""

    rates: tuple  # completion fraction at positions 1..chain_len
    avg_len: float
    n_chains: int

    def __post_init__(self):
        for a, b in zip(self.rates, self.rates[1:]):
            if b > a + 1e-12:
                raise AcceptanceError(f"chain rates must be non-increasing, got {self.rates}")
        if abs(self.avg_len - sum(self.rates)) > 1e-9:
            raise AcceptanceError(
                f"avg_len ({self.avg_len}) must equal the sum of per-position rates ({sum(self.rates)})"
            )
        if not (0.0 <= self.avg_len <= len(self.rates)):
            raise AcceptanceError(f"avg_len {self.avg_len} outside [0, {len(self.rates)}]")


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


class Policy:
    """A trained stack driven closed-loop: imagine, infer codes, sample actions.

    ``mode`` selects what the conditioning treats as the future:
      * ``full`` — imagined frames from the video model;
      * ``same_frame`` — the current frame repeated (no imagination);
      * ``noisy_frame`` — the current frame plus Gaussian pixel noise.
    The two control modes never touch the denoiser; the call counter on the
    denoiser makes that checkable.
    """

    def __init__(
        self,
        video: VideoModel,
        arts: PolicyArtifacts,
        mode: str = "full",
        noise_sigma: float = 0.1,
        denoise_steps: int | None = None,
    ):
        if mode not in EVAL_MODES:
            raise ConfigError(f"unknown evaluation mode {mode!r}; choose from {EVAL_MODES}")
        self.video = video.eval()
        self.arts = arts
        self.mode = mode
        self.noise_sigma = noise_sigma
        self.denoise_steps = denoise_steps
        self.world = arts.cfg.world
        self.k = arts.cfg.idm.step_gap
        self.horizon = arts.cfg.video.horizon
        self.n_classes = modality_channels("semantic", self.world.n_objects)

    @torch.no_grad()
    def act(self, state: WorldState, task: TaskSpec, gen: torch.Generator) -> np.ndarray:
        obs = render(state)
        rgb_t = torch.from_numpy(obs.rgb).permute(2, 0, 1).unsqueeze(0)
        onehot = torch.from_numpy(task.instruction_embedding()).unsqueeze(0)
        pooled, frame_k = self._future(rgb_t, onehot, gen)
        ste = None
        rasters = None
        if self.arts.bundle is not None:
            ste = self.arts.bundle.mixture_infer(rgb_t, frame_k).ste
        if self.arts.cfg.policy.design == "direct":
            rasters = self._rasters(obs)
        cond = self.arts.condition(ConditionInputs(pooled, onehot, ste=ste, rasters=rasters))
        if isinstance(self.arts.head, AutoregressiveHead):
            chunk = self.arts.head.greedy_sample(cond)
        else:
            chunk = fm_sample(self.arts.head, cond, gen)
        return self.arts.stats.denormalize(chunk)[0].numpy()

    def _future(self, rgb_t: torch.Tensor, onehot: torch.Tensor, gen: torch.Generator):
        if self.mode == "full":
            out = self.video.imagine(rgb_t, onehot, gen, n_steps=self.denoise_steps)
            return self.video.pooled_features(out.latents), out.frames[:, self.k - 1]
        frames = rgb_t.unsqueeze(1).expand(-1, self.horizon, -1, -1, -1)
        if self.mode == "noisy_frame":
            noise = torch.randn(frames.shape, generator=gen)
            frames = (frames + self.noise_sigma * noise).clamp(0.0, 1.0)
        return self.video.pooled_from_frames(frames), frames[:, self.k - 1]

    def _rasters(self, obs) -> dict:
        r = self.world.resolution
        sem = torch.from_numpy(obs.semantic.astype(np.int64)).unsqueeze(0)
        return {
            "semantic": semantic_to_onehot(sem, self.n_classes),
            "depth": torch.from_numpy(obs.depth).reshape(1, 1, r, r),
            "flow": torch.zeros(1, 2, r, r),
        }


class ExpertPolicy:
    """The scripted expert wrapped in the policy protocol (privileged state access)."""

    def act(self, state: WorldState, task: TaskSpec, gen: torch.Generator) -> np.ndarray:
        return scripted_expert(state, task).as_vector()[None].astype(np.float64)


class RandomPolicy:
    """Uniform actions inside the control box; the Monte-Carlo floor."""

    def __init__(self, world: WorldConfig, chunk: int = 8):
        self.max_delta = world.max_delta
        self.chunk = chunk

    def act(self, state: WorldState, task: TaskSpec, gen: torch.Generator) -> np.ndarray:
        delta = (torch.rand(self.chunk, 2, generator=gen) * 2 - 1) * self.max_delta
        grip = (torch.rand(self.chunk, 1, generator=gen) > 0.5).float()
        return torch.cat([delta, grip], dim=1).numpy()


def load_policy_stack(
    policy_ckpt,
    video_ckpt,
    mode: str = "full",
    noise_sigma: float = 0.1,
    denoise_steps: int | None = None,
    allow_lineage_mismatch: bool = False,
) -> Policy:
    arts = load_policy(policy_ckpt)
    video, _, _ = load_video_model(video_ckpt)
    got = file_sha256(video_ckpt)
    if arts.meta.get("video") != got and not allow_lineage_mismatch:
        raise LineageError(
            f"policy was trained against a different video checkpoint "
            f"({str(arts.meta.get('video'))[:12]}… vs {got[:12]}…)"
        )
    return Policy(video, arts, mode=mode, noise_sigma=noise_sigma, denoise_steps=denoise_steps)


# ---------------------------------------------------------------------------
# Rollouts and chains
# ---------------------------------------------------------------------------


def _run_episode(policy, state: WorldState, task: TaskSpec, budget: int, gen: torch.Generator):
    """Execute action chunks until success or budget; returns (success, steps, state)."""
    steps = 0
    success = False
    while steps < budget and not success:
        chunk = np.asarray(policy.act(state, task, gen), dtype=np.float64)
        if chunk.ndim != 2 or chunk.shape[1] != 3 or chunk.shape[0] < 1:
            raise ValueError(f"policy produced an action chunk of shape {chunk.shape}, expected (n, 3)")
        for row in chunk:
            delta = clip_delta_f32(row[:2], state.config.max_delta).astype(np.float64)
            state = step(state, Action(delta, bool(row[2] > GRIP_THRESHOLD)))
            steps += 1
            if task_success(state, task):
                success = True
                break
            if steps >= budget:
                break
    return success, steps, state


def rollout_policy(policy, world_seed: int, task, budget: int, world: WorldConfig) -> EpisodeResult:
    """One episode in a fresh world. ``task`` is a TaskSpec or a task id."""
    if isinstance(task, int):
        task = task_table(world)[task]
    state = init_world(world_seed, world)
    gen = torch.Generator().manual_seed(seed_for(world_seed, f"rollout:{task.task_id}"))
    success, steps, _ = _run_episode(policy, state, task, budget, gen)
    return EpisodeResult(success=success, steps_used=steps, task_id=task.task_id, seed=world_seed)


def chained_eval(
    policy,
    world: WorldConfig,
    n_chains: int = 8,
    chain_len: int = 5,
    budget: int = 60,
    seed: int = 0,
) -> ChainResult:
    """Sequential tasks in one persistent world; a chain stops at its first failure.

    Tasks are drawn without replacement, skipping any task the current state
    already satisfies (completing it would require no behaviour).
    """
    tasks = task_table(world)
    if len(tasks) < chain_len:
        raise ConfigError(f"task table has {len(tasks)} tasks; chains need at least {chain_len}")
    position_hits = np.zeros(chain_len)
    completed = np.zeros(n_chains)
    for c in range(n_chains):
        rng = np.random.default_rng(seed_for(seed, f"chain-tasks:{c}"))
        state = init_world(seed_for(seed, f"chain-world:{c}") % 2**32, world)
        gen = torch.Generator().manual_seed(seed_for(seed, f"chain-act:{c}"))
        remaining = list(range(len(tasks)))
        for pos in range(chain_len):
            open_tasks = [t for t in remaining if not task_success(state, tasks[t])]
            if not open_tasks:
                break
            tid = int(rng.choice(open_tasks))
            remaining.remove(tid)
            success, _, state = _run_episode(policy, state, tasks[tid], budget, gen)
            if not success:
                break
            position_hits[pos] += 1
            completed[c] += 1
    rates = tuple(float(h) / n_chains for h in position_hits)
    return ChainResult(rates=rates, avg_len=float(completed.mean()), n_chains=n_chains)


def eval_policy_once(policy, world: WorldConfig, eval_cfg, seed: int) -> tuple[float, float]:
    """(first-task success rate, avg_len) from one chained evaluation."""
    result = chained_eval(
        policy,
        world,
        n_chains=eval_cfg.chains,
        chain_len=eval_cfg.chain_length,
        budget=eval_cfg.budget,
        seed=seed,
    )
    first = result.rates[0] if result.rates else 0.0
    return float(first), float(result.avg_len)


# ---------------------------------------------------------------------------
# Variant training and table plumbing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageParents:
    """Shared stage-1/stage-2 artifacts every stage-3 variant builds on."""

    dataset_dir: Path
    video_ckpt: Path
    idm_ckpts: dict


def policy_tag(cfg: RunConfig) -> str:
    """Human-readable, collision-free directory name for a policy variant."""
    p = cfg.policy
    mods = "+".join(p.modalities) if p.design == "moidm" else p.design
    bits = [p.design, mods, p.head, f"f{str(float(p.fraction)).replace('.', 'p')}"]
    if p.freeze_moidm:
        bits.append("frozen")
    if p.from_scratch:
        bits.append("scratch")
    if p.drop_task_token:
        bits.append("notask")
    bits.append(f"s{cfg.seed}")
    return "-".join(bits)


def variant_cfg(cfg: RunConfig, seed: int | None = None, **policy_overrides) -> RunConfig:
    pol = dataclasses.replace(cfg.policy, **policy_overrides)
    out = dataclasses.replace(cfg, policy=pol, **({} if seed is None else {"seed": seed}))
    out.validate()
    return out


def ensure_policy(cfg: RunConfig, parents: StageParents, runs_root) -> Path:
    """Train a stage-3 variant, or reuse an existing run with the same config and parents."""
    out = Path(runs_root) / policy_tag(cfg)
    ckpt = out / "policy.ckpt"
    manifest = out / "manifest.json"
    if ckpt.exists() and manifest.exists():
        man = read_manifest(manifest)
        if man.config_hash == config_hash(cfg) and man.outputs["checkpoint"]["sha256"] == file_sha256(ckpt):
            return ckpt
    return stage3_train_policy(cfg, parents.dataset_dir, parents.video_ckpt, parents.idm_ckpts, out)


def _policy_for(cfg: RunConfig, parents: StageParents, runs_root, **kwargs) -> Policy:
    ckpt = ensure_policy(cfg, parents, runs_root)
    return load_policy_stack(ckpt, parents.video_ckpt, **kwargs)


def summarize(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


TABLE_FIELDS = ["variant", "n_seeds", "success_mean", "success_std", "avg_len_mean", "avg_len_std"]


def _row(variant: str, per_seed: list, **extra) -> dict:
    succ, alen = zip(*per_seed)
    s_mean, s_std = summarize(succ)
    a_mean, a_std = summarize(alen)
    return {
        "variant": variant,
        "n_seeds": len(per_seed),
        "success_mean": round(s_mean, 6),
        "success_std": round(s_std, 6),
        "avg_len_mean": round(a_mean, 6),
        "avg_len_std": round(a_std, 6),
        **extra,
    }


def write_table(path, rows: list, fields=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = fields or (list(rows[0].keys()) if rows else TABLE_FIELDS)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return path


def _seed_pairs(cfg: RunConfig, n_seeds: int):
    """(training seed, evaluation seed) per cell; eval seeds are shared across variants."""
    return [(cfg.seed + s, cfg.eval.seed + s) for s in range(n_seeds)]


def _eval_variant(
    cfg: RunConfig, parents: StageParents, runs_root, n_seeds: int, **policy_overrides
) -> list:
    per_seed = []
    for train_seed, eval_seed in _seed_pairs(cfg, n_seeds):
        v = variant_cfg(cfg, seed=train_seed, **policy_overrides)
        policy = _policy_for(v, parents, runs_root)
        per_seed.append(eval_policy_once(policy, cfg.world, cfg.eval, eval_seed))
    return per_seed


# ---------------------------------------------------------------------------
# Ablation runners
# ---------------------------------------------------------------------------

MODALITY_ROWS = (
    ("baseline", {"design": "baseline", "modalities": ()}),
    ("semantic", {"design": "moidm", "modalities": ("semantic",)}),
    ("depth", {"design": "moidm", "modalities": ("depth",)}),
    ("flow", {"design": "moidm", "modalities": ("flow",)}),
    ("flow+depth", {"design": "moidm", "modalities": ("depth", "flow")}),
    ("all", {"design": "moidm", "modalities": MODALITIES}),
)


def ablation_modalities(cfg: RunConfig, parents: StageParents, runs_root, out_csv, n_seeds: int = 3) -> list:
    """Six-row table: progressively richer transition mixtures vs the no-mixture baseline."""
    rows = []
    for name, overrides in MODALITY_ROWS:
        rows.append(_row(name, _eval_variant(cfg, parents, runs_root, n_seeds, **overrides)))
    write_table(out_csv, rows, TABLE_FIELDS)
    by = {r["variant"]: r for r in rows}
    if by["all"]["success_mean"] < by["baseline"]["success_mean"]:
        raise AcceptanceError(
            "modality table ordering violated: full mixture "
            f"({by['all']['success_mean']}) scored below the baseline ({by['baseline']['success_mean']})"
        )
    return rows


DESIGN_ROWS = (
    ("direct", {"design": "direct", "modalities": ()}),
    ("single_rgb", {"design": "single_rgb", "modalities": ()}),
    ("single_multiloss", {"design": "single_multiloss", "modalities": ()}),
    ("moidm", {"design": "moidm", "modalities": MODALITIES}),
)


def ablation_design(cfg: RunConfig, parents: StageParents, runs_root, out_csv, n_seeds: int = 3) -> list:
    """Four-row table: alternative bottleneck designs vs the three-part mixture.

    The mixture row resolves to the same checkpoints as the main result: the
    variant directory is keyed by the resolved config, so no retraining and
    no divergence is possible.
    """
    rows = []
    for name, overrides in DESIGN_ROWS:
        rows.append(_row(name, _eval_variant(cfg, parents, runs_root, n_seeds, **overrides)))
    write_table(out_csv, rows, TABLE_FIELDS)
    return rows


def control_conditions(
    cfg: RunConfig, parents: StageParents, runs_root, out_csv, sigma: float = 0.1, n_seeds: int = 3
) -> list:
    """Full imagination vs same-frame and noisy-frame inference-time controls.

    The control rows evaluate the *same* trained policies with the future
    swapped out, and assert that the denoiser is never invoked there.
    """
    per_mode = {mode: [] for mode in EVAL_MODES}
    for train_seed, eval_seed in _seed_pairs(cfg, n_seeds):
        v = variant_cfg(cfg, seed=train_seed)
        ckpt = ensure_policy(v, parents, runs_root)
        for mode in EVAL_MODES:
            policy = load_policy_stack(ckpt, parents.video_ckpt, mode=mode, noise_sigma=sigma)
            before = policy.video.denoiser.calls
            per_mode[mode].append(eval_policy_once(policy, cfg.world, cfg.eval, eval_seed))
            called = policy.video.denoiser.calls - before
            if mode != "full" and called:
                raise AcceptanceError(f"{mode} evaluation invoked the denoiser {called} times")
            if mode == "full" and not called:
                raise AcceptanceError("full evaluation never invoked the denoiser")
    rows = [_row(mode, per_mode[mode], sigma=(sigma if mode == "noisy_frame" else "")) for mode in EVAL_MODES]
    write_table(out_csv, rows, TABLE_FIELDS + ["sigma"])
    return rows


def data_efficiency(
    cfg: RunConfig,
    parents: StageParents,
    runs_root,
    out_csv,
    fractions=(0.1, 0.2, 0.5, 1.0),
    n_seeds: int = 3,
) -> list:
    """Stage-3 fine-tuning on nested dataset fractions, same parents throughout."""
    rows = []
    for frac in fractions:
        per_seed = _eval_variant(cfg, parents, runs_root, n_seeds, fraction=float(frac))
        rows.append(_row(str(float(frac)), per_seed, fraction=float(frac)))
    write_table(out_csv, rows, TABLE_FIELDS + ["fraction"])
    return rows


def pretrain_and_freeze_ablations(
    cfg: RunConfig, parents: StageParents, runs_root, out_dir, n_seeds: int = 3
) -> tuple:
    """Two tables: pretraining effect (at the scarcest fraction) and fine-tuning effect."""
    out_dir = Path(out_dir)
    pretrain_rows = [
        _row("pretrained", _eval_variant(cfg, parents, runs_root, n_seeds, fraction=0.1)),
        _row("scratch", _eval_variant(cfg, parents, runs_root, n_seeds, fraction=0.1, from_scratch=True)),
    ]
    write_table(out_dir / "pretrain.csv", pretrain_rows, TABLE_FIELDS)
    freeze_rows = [
        _row("joint", _eval_variant(cfg, parents, runs_root, n_seeds)),
        _row("frozen", _eval_variant(cfg, parents, runs_root, n_seeds, freeze_moidm=True)),
    ]
    write_table(out_dir / "freeze.csv", freeze_rows, TABLE_FIELDS)
    return pretrain_rows, freeze_rows


def imagination_wallclock(video: VideoModel, world: WorldConfig, n_steps: int, reps: int = 3, batch: int = 4) -> float:
    """Mean wall-clock seconds of one imagination call at the given step count."""
    gen = torch.Generator().manual_seed(0)
    rgb = torch.rand(batch, 3, world.resolution, world.resolution, generator=gen)
    task = torch.zeros(batch, video.n_tasks)
    task[:, 0] = 1.0
    video.imagine(rgb, task, torch.Generator().manual_seed(1), n_steps=n_steps)  # warm-up
    t0 = time.perf_counter()
    for r in range(reps):
        video.imagine(rgb, task, torch.Generator().manual_seed(2 + r), n_steps=n_steps)
    return (time.perf_counter() - t0) / reps


def denoise_step_sweep(
    cfg: RunConfig,
    parents: StageParents,
    runs_root,
    out_csv,
    steps_list=(1, 2, 10, 20),
    n_seeds: int = 3,
) -> list:
    """Evaluate the trained policy while sweeping test-time denoising steps.

    Wall-clock is measured on the imagination call itself (the component
    being swept), batch and reps fixed, so the timing column is comparable
    across rows.
    """
    per_steps = {n: [] for n in steps_list}
    clocks = {}
    for train_seed, eval_seed in _seed_pairs(cfg, n_seeds):
        v = variant_cfg(cfg, seed=train_seed)
        ckpt = ensure_policy(v, parents, runs_root)
        for n in steps_list:
            policy = load_policy_stack(ckpt, parents.video_ckpt, denoise_steps=int(n))
            if n not in clocks:
                clocks[n] = imagination_wallclock(policy.video, cfg.world, int(n))
            per_steps[n].append(eval_policy_once(policy, cfg.world, cfg.eval, eval_seed))
    rows = [
        _row(str(n), per_steps[n], steps=int(n), wall_clock_s=round(clocks[n], 6)) for n in steps_list
    ]
    write_table(out_csv, rows, TABLE_FIELDS + ["steps", "wall_clock_s"])
    return rows


def head_comparison(cfg: RunConfig, parents: StageParents, runs_root, out_csv, n_seeds: int = 3) -> list:
    """Flow-matching action head vs the autoregressive token head."""
    rows = [
        _row("flow_match", _eval_variant(cfg, parents, runs_root, n_seeds, head="flow_match")),
        _row("autoregressive", _eval_variant(cfg, parents, runs_root, n_seeds, head="autoregressive")),
    ]
    write_table(out_csv, rows, TABLE_FIELDS)
    return rows


# ---------------------------------------------------------------------------
# Latent-action probes
# ---------------------------------------------------------------------------

PROBE_FEATURES = ("mixture", "pixel_diff", "oracle", "constant")


def _probe_transitions(store: EpisodeStore, step_gap: int, n_samples: int, seed: int):
    """Deterministic transition sample, preferring held-out episodes."""
    episodes = store.splits.get("val") or store.splits["train"]
    pairs = []
    for i in episodes:
        for t in range(store.load(i).length - step_gap):
            pairs.append((i, t))
    if not pairs:
        raise ConfigError("no transitions available for probing")
    rng = np.random.default_rng(seed_for(seed, "probe-sample"))
    picks = rng.permutation(len(pairs))[: min(n_samples, len(pairs))]
    return [pairs[p] for p in picks]


def _probe_targets(store: EpisodeStore, chosen, step_gap: int) -> np.ndarray:
    """Mean oracle action over each t -> t+k window: the signal the codes should carry."""
    targets = []
    for i, t in chosen:
        states = store.states(i)
        window = [
            oracle_inverse_action(states[j], states[j + 1]).as_vector() for j in range(t, t + step_gap)
        ]
        targets.append(np.mean(window, axis=0))
    return np.asarray(targets, dtype=np.float64)


def _probe_features(bundle: IdmBundle, store: EpisodeStore, chosen, step_gap: int) -> dict:
    rgb_t = torch.stack([_to_chw(store.load(i).rgb[t]) for i, t in chosen])
    rgb_tk = torch.stack([_to_chw(store.load(i).rgb[t + step_gap]) for i, t in chosen])
    feats = {}
    with torch.no_grad():
        parts = []
        for lo in range(0, len(chosen), 64):
            mix = bundle.mixture_infer(rgb_t[lo : lo + 64], rgb_tk[lo : lo + 64])
            parts.append(torch.cat([mix.embeddings[m].flatten(1) for m in bundle.part_names], dim=1))
        feats["mixture"] = torch.cat(parts).numpy().astype(np.float64)
    feats["pixel_diff"] = (rgb_tk - rgb_t).flatten(1).numpy().astype(np.float64)
    feats["constant"] = np.ones((len(chosen), 1))
    return feats


def _to_chw(frame: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(frame).permute(2, 0, 1)


def probe_latent_actions(
    bundle: IdmBundle,
    store: EpisodeStore,
    step_gap: int,
    out_csv=None,
    n_samples: int = 1500,
    seeds=(0, 1, 2),
    alpha: float = 1e-2,
) -> list:
    """Ridge probes from transition features to oracle actions on held-out splits.

    Rows compare the quantized mixture embeddings against a raw
    pixel-difference baseline, with the oracle target itself as a ceiling and
    a constant feature as the floor. R² is reported per action dimension plus
    the mean over the two translation dimensions.
    """
    from sklearn.linear_model import Ridge
    from sklearn.metrics import r2_score

    chosen = _probe_transitions(store, step_gap, n_samples, seed=0)
    targets = _probe_targets(store, chosen, step_gap)
    feats = _probe_features(bundle, store, chosen, step_gap)
    feats["oracle"] = targets.copy()

    rows = []
    n = len(chosen)
    for seed in seeds:
        rng = np.random.default_rng(seed_for(seed, "probe-split"))
        order = rng.permutation(n)
        cut = max(1, int(0.8 * n))
        train, test = order[:cut], order[cut:]
        if len(test) == 0:
            raise ConfigError("probe sample too small to hold out a test split")
        for name in PROBE_FEATURES:
            x = feats[name]
            # standardize on the train split so alpha means the same thing
            # for every feature set (constant columns floor to zero)
            mu = x[train].mean(axis=0)
            sd = np.maximum(x[train].std(axis=0), 1e-8)
            x = (x - mu) / sd
            model = Ridge(alpha=alpha)
            model.fit(x[train], targets[train])
            r2 = r2_score(targets[test], model.predict(x[test]), multioutput="raw_values")
            rows.append(
                {
                    "feature": name,
                    "seed": seed,
                    "alpha": alpha,
                    "r2_dx": round(float(r2[0]), 6),
                    "r2_dy": round(float(r2[1]), 6),
                    "r2_grip": round(float(r2[2]), 6),
                    "r2_translation": round(float((r2[0] + r2[1]) / 2), 6),
                }
            )
    if out_csv is not None:
        write_table(out_csv, rows, ["feature", "seed", "alpha", "r2_dx", "r2_dy", "r2_grip", "r2_translation"])
    return rows
