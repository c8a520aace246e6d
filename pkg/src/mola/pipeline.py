"""Three-stage training pipeline with lineage tracking and cached imagination.

Stage 1 trains the video model on expert episodes (frame autoencoder first,
then the latent denoiser against the frozen autoencoder). Stage 2 pretrains
one inverse dynamics model per modality, each an independent run against the
same dataset. Stage 3 loads the frozen video model, assembles the pretrained
parts into a bundle, and fine-tunes the bundle jointly with the condition
builder and the action head.

Every run writes a manifest (config hash, parent checkpoint hashes, output
hashes, final metrics) so downstream stages can verify that their inputs came
from the same dataset and the same upstream checkpoints; a mismatch raises
``LineageError`` unless explicitly overridden.

All randomness flows through explicitly seeded ``torch.Generator``s. Component
seeds are derived from the run seed by hashing a string tag, so adding a new
consumer never shifts the streams of existing ones.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .action_head import (
    ActionStats,
    AutoregressiveHead,
    ConditionBuilder,
    ConditionInputs,
    FlowMatchHead,
    fm_training_loss,
)
from .checkpointio import (
    Checkpoint,
    file_sha256,
    load_checkpoint,
    load_module,
    module_tensors,
    save_checkpoint,
)
from .config import MODALITIES, RunConfig, archive_config, config_from_dict, config_hash, resolved_dict
from .errors import CheckpointError, ConfigError, LineageError, TrainingDiverged
from .imagination import VideoModel
from .moidm import IdmBundle, SingleIdm, modality_channels, semantic_to_onehot
from .nnblocks import init_parameters
from .synthworld import EpisodeStore, render_flow, task_table

# Stage-2 variants: training flavour -> (supervised modalities, bundle part key).
IDM_VARIANTS = {
    "semantic": (("semantic",), "semantic"),
    "depth": (("depth",), "depth"),
    "flow": (("flow",), "flow"),
    "rgb_only": ((), "rgb"),
    "multiloss": (MODALITIES, "multi"),
}


def set_determinism(deterministic: bool) -> None:
    """Single-threaded torch when determinism is requested.

    All sampling already goes through explicit generators; the remaining
    platform sensitivity is multi-threaded reduction order, which this pins.
    """
    if deterministic:
        torch.set_num_threads(1)


def seed_for(seed: int, tag: str) -> int:
    """Stable per-component seed derived from the run seed and a string tag."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def _generator(seed: int, tag: str) -> torch.Generator:
    return torch.Generator().manual_seed(seed_for(seed, tag))


def _check_finite(loss: torch.Tensor, where: str, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(where, step, float(loss))


def dataset_fingerprint(dataset_dir) -> str:
    """Identity of a generated dataset: the hash of its manifest."""
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise ConfigError(f"not a dataset directory (no manifest.json): {dataset_dir}")
    return file_sha256(path)


def _check_world(cfg: RunConfig, store: EpisodeStore) -> None:
    if dataclasses.asdict(cfg.world) != dataclasses.asdict(store.config):
        raise ConfigError(
            "run config world section does not match the dataset's world; "
            "regenerate the dataset or fix the config"
        )


# ---------------------------------------------------------------------------
# Run manifests and metrics logs
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    """What a training run consumed and produced, with content hashes."""

    run_id: str
    stage: str
    config_hash: str
    parents: dict
    outputs: dict
    metrics: dict

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n")


def make_run_id(stage: str, cfg_hash: str, parents: dict) -> str:
    parent_part = ",".join(f"{k}={v['sha256']}" for k, v in sorted(parents.items()))
    return hashlib.sha256(f"{stage}|{cfg_hash}|{parent_part}".encode()).hexdigest()[:12]


def read_manifest(path) -> RunManifest:
    raw = json.loads(Path(path).read_text())
    return RunManifest(**raw)


class MetricsWriter:
    """Append-only CSV log of training metrics."""

    def __init__(self, path, fields):
        import csv

        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=list(fields))
        self._writer.writeheader()

    def write(self, **row) -> None:
        self._writer.writerow(row)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def _chw(frame: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(frame).permute(2, 0, 1)


def _pairs(store: EpisodeStore, episodes, reach: int) -> list:
    """All (episode, t) with t + reach < length."""
    out = []
    for i in episodes:
        for t in range(store.load(i).length - reach):
            out.append((i, t))
    if not out:
        raise ConfigError(f"no usable positions: episodes too short for a lookahead of {reach}")
    return out


class VideoBatcher:
    """Frame batches for the autoencoder, transition batches for the denoiser."""

    def __init__(self, store: EpisodeStore, episodes, horizon: int):
        self.store = store
        self.horizon = horizon
        self._frame_pairs = _pairs(store, episodes, 0)
        self._future_pairs = _pairs(store, episodes, horizon)

    def frames(self, batch: int, gen: torch.Generator) -> torch.Tensor:
        picks = torch.randint(len(self._frame_pairs), (batch,), generator=gen).tolist()
        return torch.stack([_chw(self.store.load(i).rgb[t]) for i, t in (self._frame_pairs[p] for p in picks)])

    def transitions(self, batch: int, gen: torch.Generator):
        picks = torch.randint(len(self._future_pairs), (batch,), generator=gen).tolist()
        rgb_t, future, task = [], [], []
        for p in picks:
            i, t = self._future_pairs[p]
            ep = self.store.load(i)
            rgb_t.append(_chw(ep.rgb[t]))
            future.append(torch.from_numpy(ep.rgb[t + 1 : t + 1 + self.horizon]).permute(0, 3, 1, 2))
            task.append(torch.from_numpy(self.store.task(i).instruction_embedding()))
        return torch.stack(rgb_t), torch.stack(future), torch.stack(task)


class IdmBatcher:
    """(o_t, o_{t+k}) pairs with whatever modality rasters the model supervises."""

    def __init__(self, store: EpisodeStore, episodes, step_gap: int, supervised: tuple):
        self.store = store
        self.k = step_gap
        self.supervised = tuple(supervised)
        self.n_classes = modality_channels("semantic", store.config.n_objects)
        self._pairs = _pairs(store, episodes, step_gap)

    def sample(self, batch: int, gen: torch.Generator) -> dict:
        picks = torch.randint(len(self._pairs), (batch,), generator=gen).tolist()
        chosen = [self._pairs[p] for p in picks]
        eps = [self.store.load(i) for i, _ in chosen]
        k = self.k
        out = {
            "rgb_t": torch.stack([_chw(ep.rgb[t]) for ep, (_, t) in zip(eps, chosen)]),
            "rgb_tk": torch.stack([_chw(ep.rgb[t + k]) for ep, (_, t) in zip(eps, chosen)]),
        }
        if "semantic" in self.supervised:
            sem_t = torch.stack([torch.from_numpy(ep.semantic[t].astype(np.int64)) for ep, (_, t) in zip(eps, chosen)])
            out["semantic_in"] = semantic_to_onehot(sem_t, self.n_classes)
            out["semantic_target"] = torch.stack(
                [torch.from_numpy(ep.semantic[t + k].astype(np.int64)) for ep, (_, t) in zip(eps, chosen)]
            )
        if "depth" in self.supervised:
            out["depth_in"] = torch.stack([torch.from_numpy(ep.depth[t][None]) for ep, (_, t) in zip(eps, chosen)])
            out["depth_target"] = torch.stack(
                [torch.from_numpy(ep.depth[t + k][None]) for ep, (_, t) in zip(eps, chosen)]
            )
        if "flow" in self.supervised:
            r = self.store.config.resolution
            out["flow_in"] = torch.zeros(batch, 2, r, r)
            flows = []
            for i, t in chosen:
                states = self.store.states(i)
                flows.append(torch.from_numpy(render_flow(states[t], states[t + k]).flow).permute(2, 0, 1))
            out["flow_target"] = torch.stack(flows)
        return out


# ---------------------------------------------------------------------------
# Imagination cache
# ---------------------------------------------------------------------------


class FutureCache:
    """Imagined futures for every (episode, t) of a dataset, computed once.

    The policy stage freezes the video model, so imagined futures are a pure
    function of (video checkpoint, dataset, noise seed, horizon, denoise
    steps, step gap); they are cached on disk and shared by every policy
    variant trained on top of the same stage-1 checkpoint. Noise is seeded
    per episode and each episode is imagined in one fixed batch over its
    positions, so the cache contents do not depend on build order.

    Rows hold the pooled per-frame features (what the condition builder
    consumes) and the single imagined frame at the transition gap (what the
    bundle pairs with the current frame).
    """

    def __init__(self, starts: np.ndarray, pooled: np.ndarray, frames: np.ndarray, meta: dict):
        self.starts = starts
        self.pooled = pooled
        self.frames = frames
        self.meta = meta

    def row(self, episode: int, t: int) -> tuple[torch.Tensor, torch.Tensor]:
        r = int(self.starts[episode]) + t
        return torch.from_numpy(self.pooled[r]), torch.from_numpy(self.frames[r])

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            path,
            starts=self.starts,
            pooled=self.pooled,
            frames=self.frames,
            meta=np.frombuffer(json.dumps(self.meta, sort_keys=True).encode(), dtype=np.uint8),
        )

    @classmethod
    def load(cls, path) -> "FutureCache":
        with np.load(path) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            return cls(z["starts"], z["pooled"], z["frames"], meta)


def future_cache_path(dataset_dir, video_sha: str, cfg: RunConfig) -> Path:
    name = (
        f"futures-{video_sha[:12]}-s{cfg.noise_seed}"
        f"-h{cfg.video.horizon}-n{cfg.video.sample_steps}-k{cfg.idm.step_gap}.npz"
    )
    return Path(dataset_dir) / "cache" / name


def build_future_cache(video: VideoModel, store: EpisodeStore, cfg: RunConfig, video_sha: str) -> FutureCache:
    horizon = cfg.video.horizon
    k = cfg.idm.step_gap
    n_eps = len(store)
    counts = np.zeros(n_eps, dtype=np.int64)
    pooled_rows, frame_rows = [], []
    video.eval()
    with torch.no_grad():
        for i in range(n_eps):
            ep = store.load(i)
            n_pos = ep.length - 1
            counts[i] = n_pos
            rgb_t = torch.stack([_chw(ep.rgb[t]) for t in range(n_pos)])
            task = torch.from_numpy(store.task(i).instruction_embedding()).expand(n_pos, -1)
            gen = _generator(cfg.noise_seed, f"imagine:{ep.seed}")
            out = video.imagine(rgb_t, task, gen, horizon=horizon)
            pooled_rows.append(video.pooled_features(out.latents).numpy().astype(np.float32))
            frame_rows.append(out.frames[:, k - 1].numpy().astype(np.float32))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    meta = {
        "video": video_sha,
        "dataset": dataset_fingerprint(store.dir),
        "noise_seed": cfg.noise_seed,
        "horizon": horizon,
        "sample_steps": cfg.video.sample_steps,
        "step_gap": k,
    }
    return FutureCache(starts, np.concatenate(pooled_rows), np.concatenate(frame_rows), meta)


def load_or_build_future_cache(
    video: VideoModel, store: EpisodeStore, cfg: RunConfig, video_sha: str
) -> FutureCache:
    path = future_cache_path(store.dir, video_sha, cfg)
    expect = {
        "video": video_sha,
        "dataset": dataset_fingerprint(store.dir),
        "noise_seed": cfg.noise_seed,
        "horizon": cfg.video.horizon,
        "sample_steps": cfg.video.sample_steps,
        "step_gap": cfg.idm.step_gap,
    }
    if path.exists():
        cache = FutureCache.load(path)
        if cache.meta == expect:
            return cache
    cache = build_future_cache(video, store, cfg, video_sha)
    cache.save(path)
    return cache


class PolicyBatcher:
    """Action-chunk batches conditioned on cached imagined futures."""

    def __init__(
        self,
        store: EpisodeStore,
        episodes,
        cache: FutureCache,
        stats: ActionStats,
        chunk: int,
        design: str,
    ):
        self.store = store
        self.cache = cache
        self.stats = stats
        self.chunk = chunk
        self.design = design
        self.n_classes = modality_channels("semantic", store.config.n_objects)
        # actions run 0..T-2, so a chunk starting at t needs t + chunk <= T - 1
        self._pairs = _pairs(store, episodes, chunk)

    def sample(self, batch: int, gen: torch.Generator) -> dict:
        picks = torch.randint(len(self._pairs), (batch,), generator=gen).tolist()
        chosen = [self._pairs[p] for p in picks]
        rgb_t, pooled, frame_k, actions, task = [], [], [], [], []
        for i, t in chosen:
            ep = self.store.load(i)
            rgb_t.append(_chw(ep.rgb[t]))
            p, f = self.cache.row(i, t)
            pooled.append(p)
            frame_k.append(f)
            actions.append(torch.from_numpy(ep.actions[t : t + self.chunk]))
            task.append(torch.from_numpy(self.store.task(i).instruction_embedding()))
        out = {
            "rgb_t": torch.stack(rgb_t),
            "pooled": torch.stack(pooled),
            "frame_k": torch.stack(frame_k),
            "actions": self.stats.normalize(torch.stack(actions)),
            "task": torch.stack(task),
        }
        if self.design == "direct":
            out["rasters"] = self._rasters(chosen)
        return out

    def _rasters(self, chosen) -> dict:
        sem, dep = [], []
        for i, t in chosen:
            ep = self.store.load(i)
            sem.append(torch.from_numpy(ep.semantic[t].astype(np.int64)))
            dep.append(torch.from_numpy(ep.depth[t][None]))
        r = self.store.config.resolution
        return {
            "semantic": semantic_to_onehot(torch.stack(sem), self.n_classes),
            "depth": torch.stack(dep),
            "flow": torch.zeros(len(chosen), 2, r, r),
        }


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


def _adamw(modules, lr: float, weight_decay: float) -> torch.optim.AdamW:
    """AdamW with decay only on weight matrices; codebooks follow their update rule.

    Codebook rows are never weight-decayed (decay drags unused rows toward
    the origin, which corrupts nearest-neighbour assignment), and in EMA mode
    they are left out of the optimizer entirely.
    """
    decay, no_decay = [], []
    for module in modules:
        for name, p in module.named_parameters():
            if not p.requires_grad:
                continue
            if "codebook.codes" in name:
                codebook = module.get_submodule(name.rsplit(".codes", 1)[0])
                if codebook.update == "ema":
                    continue
                no_decay.append(p)
            elif p.ndim < 2:
                no_decay.append(p)
            else:
                decay.append(p)
    groups = [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=lr)


def _warmup_cosine(opt, warmup: int, total: int):
    def factor(step: int) -> float:
        if total <= 0:
            return 1.0
        if warmup > 0 and step < warmup:
            return (step + 1) / warmup
        span = max(1, total - warmup)
        progress = min(1.0, (step - warmup) / span)
        return 0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * progress))

    return torch.optim.lr_scheduler.LambdaLR(opt, factor)


# ---------------------------------------------------------------------------
# Stage 1: video model
# ---------------------------------------------------------------------------


def stage1_train_video(cfg: RunConfig, dataset_dir, out_dir, log_every: int = 50) -> Path:
    """Train the frame autoencoder, then the latent denoiser. Returns the checkpoint path."""
    set_determinism(cfg.deterministic)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = EpisodeStore(dataset_dir)
    _check_world(cfg, store)
    data_sha = dataset_fingerprint(dataset_dir)
    n_tasks = len(task_table(store.config))

    video = VideoModel(cfg.video, store.config, n_tasks)
    init_parameters(video, _generator(cfg.seed, "video-init"))
    batcher = VideoBatcher(store, store.splits["train"], cfg.video.horizon)
    data_gen = _generator(cfg.seed, "video-data")
    noise_gen = _generator(cfg.noise_seed, "video-noise")

    last = {"ae_loss": float("nan"), "denoise_loss": float("nan")}
    with MetricsWriter(out / "metrics.csv", ["phase", "step", "loss", "lr"]) as log:
        opt = _adamw([video.ae], cfg.video.lr, cfg.video.weight_decay)
        for step in range(cfg.video.autoencoder_steps):
            loss = video.autoencoder_loss(batcher.frames(cfg.video.batch, data_gen))
            _check_finite(loss, "video autoencoder", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            last["ae_loss"] = float(loss.detach())
            if step % log_every == 0 or step == cfg.video.autoencoder_steps - 1:
                log.write(phase="autoencoder", step=step, loss=last["ae_loss"], lr=cfg.video.lr)

        video.fit_latent_stats(batcher.frames(min(512, cfg.video.batch * 8), _generator(cfg.seed, "video-stats")))

        opt = _adamw([video.denoiser], cfg.video.lr, cfg.video.weight_decay)
        for step in range(cfg.video.denoiser_steps):
            rgb_t, future, task = batcher.transitions(cfg.video.batch, data_gen)
            loss = video.denoiser_loss(rgb_t, future, task, noise_gen)
            _check_finite(loss, "video denoiser", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            last["denoise_loss"] = float(loss.detach())
            if step % log_every == 0 or step == cfg.video.denoiser_steps - 1:
                log.write(phase="denoiser", step=step, loss=last["denoise_loss"], lr=cfg.video.lr)

    ckpt_path = out / "video.ckpt"
    meta = {"stage": "video", "dataset": data_sha, "n_tasks": n_tasks}
    sha = save_checkpoint(ckpt_path, module_tensors(video, "video."), resolved_dict(cfg), meta)
    archive_config(cfg, out / "config.json")
    parents = {"dataset": {"path": str(dataset_dir), "sha256": data_sha}}
    RunManifest(
        run_id=make_run_id("video", config_hash(cfg), parents),
        stage="video",
        config_hash=config_hash(cfg),
        parents=parents,
        outputs={"checkpoint": {"path": str(ckpt_path), "sha256": sha}},
        metrics=last,
    ).write(out / "manifest.json")
    return ckpt_path


# ---------------------------------------------------------------------------
# Stage 2: inverse dynamics pretraining
# ---------------------------------------------------------------------------


def stage2_pretrain_idm(
    cfg: RunConfig, dataset_dir, video_ckpt, variant: str, out_dir, log_every: int = 50
) -> Path:
    """Pretrain one inverse dynamics model. Returns the checkpoint path.

    ``variant`` is a modality name for the standard runs, or ``rgb_only`` /
    ``multiloss`` for the ablation flavours. The video checkpoint is recorded
    as a parent for lineage only; stage 2 never reads its weights.
    """
    if variant not in IDM_VARIANTS:
        raise ConfigError(f"unknown idm variant {variant!r}; choose from {sorted(IDM_VARIANTS)}")
    supervised, part_key = IDM_VARIANTS[variant]
    set_determinism(cfg.deterministic)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = EpisodeStore(dataset_dir)
    _check_world(cfg, store)
    data_sha = dataset_fingerprint(dataset_dir)
    video_sha = file_sha256(video_ckpt)

    idm = SingleIdm(cfg.idm, store.config, supervised)
    init_parameters(idm, _generator(cfg.seed, f"idm-init:{variant}"))
    batcher = IdmBatcher(store, store.splits["train"], cfg.idm.step_gap, supervised)
    data_gen = _generator(cfg.seed, f"idm-data:{variant}")
    reseed_gen = _generator(cfg.seed, f"idm-reseed:{variant}")

    opt = _adamw([idm], cfg.idm.lr, cfg.idm.weight_decay)
    sched = _warmup_cosine(opt, cfg.idm.warmup, cfg.idm.steps)
    fields = ["step", "total", "rgb", "codebook", "commit", "perplexity", "active", "lr", *supervised]
    last: dict = {}
    with MetricsWriter(out / "metrics.csv", fields) as log:
        for step in range(cfg.idm.steps):
            batch = batcher.sample(cfg.idm.batch, data_gen)
            total, parts, q = idm.forward_loss(batch)
            _check_finite(total, f"idm[{variant}]", step)
            opt.zero_grad()
            total.backward()
            opt.step()
            sched.step()
            idm.part.codebook.track(q.indices, q.pre, generator=reseed_gen)
            if step % log_every == 0 or step == cfg.idm.steps - 1:
                cb = idm.part.codebook.stats()
                last = {
                    "step": step,
                    "total": parts["total"],
                    "rgb": parts["rgb"],
                    "codebook": parts["codebook"],
                    "commit": parts["commit"],
                    "perplexity": cb["perplexity"],
                    "active": cb["active"],
                    "lr": sched.get_last_lr()[0],
                    **{m: parts[m] for m in supervised},
                }
                log.write(**last)

    ckpt_path = out / f"idm-{variant}.ckpt"
    meta = {
        "stage": "idm",
        "variant": variant,
        "part_key": part_key,
        "supervised": list(supervised),
        "dataset": data_sha,
        "video": video_sha,
    }
    sha = save_checkpoint(ckpt_path, module_tensors(idm, "idm."), resolved_dict(cfg), meta)
    archive_config(cfg, out / "config.json")
    parents = {
        "dataset": {"path": str(dataset_dir), "sha256": data_sha},
        "video": {"path": str(video_ckpt), "sha256": video_sha},
    }
    RunManifest(
        run_id=make_run_id(f"idm-{variant}", config_hash(cfg), parents),
        stage="idm",
        config_hash=config_hash(cfg),
        parents=parents,
        outputs={"checkpoint": {"path": str(ckpt_path), "sha256": sha}},
        metrics=last,
    ).write(out / "manifest.json")
    return ckpt_path


def stage2_all(
    cfg: RunConfig,
    dataset_dir,
    video_ckpt,
    out_root,
    variants: tuple = MODALITIES,
    parallel: bool = False,
) -> dict:
    """Run stage-2 pretraining for several variants; serial and parallel agree bit-for-bit.

    Each run owns independent generators derived from (seed, variant), so
    scheduling order cannot leak between them.
    """
    out_root = Path(out_root)
    jobs = {v: out_root / f"idm-{v}" for v in variants}
    if parallel and len(jobs) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=len(jobs)) as pool:
            futures = {
                v: pool.submit(stage2_pretrain_idm, cfg, dataset_dir, video_ckpt, v, d)
                for v, d in jobs.items()
            }
            return {v: f.result() for v, f in futures.items()}
    return {v: stage2_pretrain_idm(cfg, dataset_dir, video_ckpt, v, d) for v, d in jobs.items()}


# ---------------------------------------------------------------------------
# Stage 3: joint policy training
# ---------------------------------------------------------------------------


def load_video_model(path) -> tuple[VideoModel, RunConfig, Checkpoint]:
    ck = load_checkpoint(path)
    if ck.meta.get("stage") != "video":
        raise CheckpointError(f"{path} is not a video checkpoint (stage={ck.meta.get('stage')!r})")
    cfg = config_from_dict(ck.config)
    video = VideoModel(cfg.video, cfg.world, int(ck.meta["n_tasks"]))
    load_module(video, ck, "video.")
    video.eval()
    return video, cfg, ck


def load_idm(path) -> tuple[SingleIdm, RunConfig, Checkpoint]:
    ck = load_checkpoint(path)
    if ck.meta.get("stage") != "idm":
        raise CheckpointError(f"{path} is not an inverse-dynamics checkpoint (stage={ck.meta.get('stage')!r})")
    cfg = config_from_dict(ck.config)
    idm = SingleIdm(cfg.idm, cfg.world, tuple(ck.meta["supervised"]))
    load_module(idm, ck, "idm.")
    return idm, cfg, ck


def bundle_part_names(policy_design: str, modalities: tuple) -> tuple:
    """Transition-part names the condition builder will see, in canonical order."""
    if policy_design == "moidm":
        return tuple(m for m in MODALITIES if m in set(modalities))
    if policy_design == "single_rgb":
        return ("rgb",)
    if policy_design == "single_multiloss":
        return ("multi",)
    return ()


def _variant_for_part(part: str) -> str:
    return {"rgb": "rgb_only", "multi": "multiloss"}.get(part, part)


def _freeze(module: torch.nn.Module) -> None:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


def _assemble_bundle(
    cfg: RunConfig,
    store: EpisodeStore,
    part_names: tuple,
    idm_ckpts: dict | None,
    video_sha: str,
    data_sha: str,
    allow_lineage_mismatch: bool,
) -> tuple[IdmBundle, dict]:
    """Build the transition bundle for stage 3, fresh or from stage-2 checkpoints."""
    if cfg.policy.from_scratch:
        bundle = IdmBundle(cfg.idm, store.config, part_names)
        init_parameters(bundle, _generator(cfg.seed, "bundle-init"))
        return bundle, {}
    if not idm_ckpts:
        raise ConfigError(
            f"design {cfg.policy.design!r} needs pretrained transition checkpoints "
            "(or from_scratch = true)"
        )
    idms: dict = {}
    parents: dict = {}
    for part in part_names:
        variant = _variant_for_part(part)
        path = idm_ckpts.get(part, idm_ckpts.get(variant))
        if path is None:
            raise ConfigError(f"missing transition checkpoint for part {part!r} (variant {variant!r})")
        idm, idm_cfg, ck = load_idm(path)
        if dataclasses.asdict(idm_cfg.idm) != dataclasses.asdict(cfg.idm):
            raise ConfigError(f"checkpoint {path} was trained with a different idm configuration")
        if dataclasses.asdict(idm_cfg.world) != dataclasses.asdict(cfg.world):
            raise ConfigError(f"checkpoint {path} was trained on a different world configuration")
        if ck.meta.get("part_key") != part:
            raise CheckpointError(
                f"checkpoint {path} holds part {ck.meta.get('part_key')!r}, expected {part!r}"
            )
        lineage = {"dataset": (ck.meta.get("dataset"), data_sha), "video": (ck.meta.get("video"), video_sha)}
        for what, (got, want) in lineage.items():
            if got != want and not allow_lineage_mismatch:
                raise LineageError(
                    f"transition checkpoint {path} was pretrained against a different {what} "
                    f"({str(got)[:12]}… vs {str(want)[:12]}…); pass allow_lineage_mismatch to override"
                )
        idms[part] = idm
        parents[f"idm-{part}"] = {"path": str(path), "sha256": file_sha256(path)}
    trunk = cfg.idm.trunk_modality if cfg.idm.trunk_modality in part_names else part_names[0]
    return IdmBundle.from_idms(idms, trunk), parents


@dataclass
class PolicyArtifacts:
    """Everything needed to run a trained policy."""

    condition: ConditionBuilder
    head: torch.nn.Module
    bundle: IdmBundle | None
    stats: ActionStats
    cfg: RunConfig
    meta: dict
    part_names: tuple


def load_policy(path) -> PolicyArtifacts:
    ck = load_checkpoint(path)
    if ck.meta.get("stage") != "policy":
        raise CheckpointError(f"{path} is not a policy checkpoint (stage={ck.meta.get('stage')!r})")
    cfg = config_from_dict(ck.config)
    part_names = tuple(ck.meta["part_names"])
    n_tasks = int(ck.meta["n_tasks"])
    condition = ConditionBuilder(cfg.policy, cfg.idm, cfg.world, part_names, n_tasks, cfg.video.horizon)
    head = FlowMatchHead(cfg.policy) if cfg.policy.head == "flow_match" else AutoregressiveHead(cfg.policy)
    load_module(condition, ck, "condition.")
    load_module(head, ck, "head.")
    bundle = None
    if part_names:
        bundle = IdmBundle(cfg.idm, cfg.world, part_names)
        load_module(bundle, ck, "bundle.")
    stats = ActionStats(ck.tensor("stats.mean"), ck.tensor("stats.std"))
    for mod in (condition, head, bundle):
        if mod is not None:
            _freeze(mod)
    return PolicyArtifacts(condition, head, bundle, stats, cfg, ck.meta, part_names)


def _fraction_episodes(store: EpisodeStore, fraction: float) -> list:
    key = str(float(fraction))
    fractions = store.splits.get("fractions", {})
    if key not in fractions:
        raise ConfigError(f"dataset has no {key} training fraction; available: {sorted(fractions)}")
    return fractions[key]


def stage3_train_policy(
    cfg: RunConfig,
    dataset_dir,
    video_ckpt,
    idm_ckpts: dict | None,
    out_dir,
    allow_lineage_mismatch: bool = False,
    log_every: int = 50,
) -> Path:
    """Joint fine-tune: condition builder + action head, and (unless frozen) the bundle.

    The video model stays frozen throughout — its parameters never enter the
    optimizer, and the checkpoint hash is re-asserted after training.
    """
    set_determinism(cfg.deterministic)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = EpisodeStore(dataset_dir)
    _check_world(cfg, store)
    data_sha = dataset_fingerprint(dataset_dir)

    video, video_cfg, video_ck = load_video_model(video_ckpt)
    video_sha = file_sha256(video_ckpt)
    if dataclasses.asdict(video_cfg.video) != dataclasses.asdict(cfg.video):
        raise ConfigError("run config video section does not match the stage-1 checkpoint")
    if video_ck.meta.get("dataset") != data_sha and not allow_lineage_mismatch:
        raise LineageError(
            "video checkpoint was trained on a different dataset; "
            "pass allow_lineage_mismatch to override"
        )
    _freeze(video)
    n_tasks = int(video_ck.meta["n_tasks"])

    part_names = bundle_part_names(cfg.policy.design, cfg.policy.modalities)
    bundle, idm_parents = (None, {})
    if part_names:
        bundle, idm_parents = _assemble_bundle(
            cfg, store, part_names, idm_ckpts, video_sha, data_sha, allow_lineage_mismatch
        )
        if cfg.policy.freeze_moidm:
            _freeze(bundle)

    condition = ConditionBuilder(cfg.policy, cfg.idm, store.config, part_names, n_tasks, cfg.video.horizon)
    head = FlowMatchHead(cfg.policy) if cfg.policy.head == "flow_match" else AutoregressiveHead(cfg.policy)
    init_parameters(condition, _generator(cfg.seed, "condition-init"))
    init_parameters(head, _generator(cfg.seed, "head-init"))

    episodes = _fraction_episodes(store, cfg.policy.fraction)
    stats = ActionStats.from_actions(np.concatenate([store.load(i).actions for i in episodes]))
    cache = load_or_build_future_cache(video, store, cfg, video_sha)
    batcher = PolicyBatcher(store, episodes, cache, stats, cfg.policy.chunk, cfg.policy.design)

    trainable: list = [condition, head]
    bundle_trainable = bundle is not None and not cfg.policy.freeze_moidm
    if bundle_trainable:
        trainable.append(bundle)
    opt = _adamw(trainable, cfg.policy.lr, cfg.policy.weight_decay)
    sched = _warmup_cosine(opt, min(200, cfg.policy.steps // 10), cfg.policy.steps)
    data_gen = _generator(cfg.seed, "policy-data")
    fm_gen = _generator(cfg.noise_seed, "policy-fm")

    last: dict = {}
    with MetricsWriter(out / "metrics.csv", ["step", "loss", "head", "codebook", "commit", "lr"]) as log:
        for step in range(cfg.policy.steps):
            batch = batcher.sample(cfg.policy.batch, data_gen)
            ste = None
            mix = None
            if bundle is not None:
                if bundle_trainable:
                    mix = bundle.mixture_infer(batch["rgb_t"], batch["frame_k"], codebook_grad=True)
                    ste = mix.ste
                else:
                    with torch.no_grad():
                        mix = bundle.mixture_infer(batch["rgb_t"], batch["frame_k"])
                        ste = {m: v.detach() for m, v in mix.ste.items()}
            cond = condition(
                ConditionInputs(
                    pooled=batch["pooled"],
                    task_onehot=batch["task"],
                    ste=ste,
                    rasters=batch.get("rasters"),
                )
            )
            if cfg.policy.head == "flow_match":
                head_loss = fm_training_loss(head, batch["actions"], cond, fm_gen)
            else:
                head_loss = head.forward_loss(batch["actions"], cond)
            loss = head_loss
            cb_val = commit_val = 0.0
            if bundle_trainable:
                loss = loss + mix.codebook_loss + cfg.idm.beta * mix.commit_loss
                cb_val = float(mix.codebook_loss.detach())
                commit_val = float(mix.commit_loss.detach())
            _check_finite(loss, "policy", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            if step % log_every == 0 or step == cfg.policy.steps - 1:
                last = {
                    "step": step,
                    "loss": float(loss.detach()),
                    "head": float(head_loss.detach()),
                    "codebook": cb_val,
                    "commit": commit_val,
                    "lr": sched.get_last_lr()[0],
                }
                log.write(**last)

    if file_sha256(video_ckpt) != video_sha:
        raise CheckpointError("video checkpoint changed on disk during policy training")
    for p in video.parameters():
        if p.requires_grad:
            raise CheckpointError("video model parameters became trainable during policy training")

    tensors = {}
    tensors.update(module_tensors(condition, "condition."))
    tensors.update(module_tensors(head, "head."))
    if bundle is not None:
        tensors.update(module_tensors(bundle, "bundle."))
    tensors["stats.mean"] = torch.from_numpy(stats.mean)
    tensors["stats.std"] = torch.from_numpy(stats.std)
    meta = {
        "stage": "policy",
        "design": cfg.policy.design,
        "head": cfg.policy.head,
        "part_names": list(part_names),
        "n_tasks": n_tasks,
        "dataset": data_sha,
        "video": video_sha,
        "freeze_moidm": cfg.policy.freeze_moidm,
        "from_scratch": cfg.policy.from_scratch,
        "fraction": cfg.policy.fraction,
    }
    ckpt_path = out / "policy.ckpt"
    sha = save_checkpoint(ckpt_path, tensors, resolved_dict(cfg), meta)
    archive_config(cfg, out / "config.json")
    parents = {
        "dataset": {"path": str(dataset_dir), "sha256": data_sha},
        "video": {"path": str(video_ckpt), "sha256": video_sha},
        **idm_parents,
    }
    RunManifest(
        run_id=make_run_id("policy", config_hash(cfg), parents),
        stage="policy",
        config_hash=config_hash(cfg),
        parents=parents,
        outputs={"checkpoint": {"path": str(ckpt_path), "sha256": sha}},
        metrics=last,
    ).write(out / "manifest.json")
    return ckpt_path
