"""Video imagination: frame autoencoder + latent future denoiser.

The world model factors into (a) a small convolutional autoencoder that maps
RGB frames to a 4x-downsampled latent grid, and (b) a transformer that
predicts the clean latents of the next ``horizon`` frames jointly from a
noised version of them, conditioned on the current frame's latents and a
task embedding. Denoising is x0-prediction under a linear interpolation
noise path: z_noisy = (1 - sigma) * z + sigma * eps with sigma in [0, 1].

Sampling starts from pure noise (sigma = 1) and walks a fixed sigma grid
deterministically — every noise draw comes from an explicit generator, and
the single-step default (n_steps = 1) is just the x0 prediction at sigma 1.
The denoiser counts its forward calls, which lets tests and control
conditions assert exactly how often imagination was consulted.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

import numpy as np

from .config import VideoConfig
from .nnblocks import Transformer, patchify, timestep_embedding, unpatchify
from .synthworld import Action, TaskSpec, WorldConfig, WorldState, clip_delta_f32, render, scripted_expert, step


class FrameAutoencoder(nn.Module):
    """Conv encoder/decoder between RGB frames and a latent grid at R/4."""

    def __init__(self, cfg: VideoConfig):
        super().__init__()
        c = cfg.autoencoder_channels
        self.latent_channels = cfg.latent_channels
        self.enc = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * c, cfg.latent_channels, 1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(cfg.latent_channels, 2 * c, 1),
            nn.SiLU(),
            nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(c, 3, 4, stride=2, padding=1),
        )

    def encode(self, rgb: torch.Tensor) -> torch.Tensor:
        return self.enc(rgb)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.dec(z)


class LatentDenoiser(nn.Module):
    """Joint x0-predictor over the latent tokens of all future frames.

    Token layout: [noisy future tokens (H * n per frame); condition tokens
    from the current frame's latents; one task token]. Each group carries its
    own type embedding; future tokens add a per-frame index embedding, and
    all latent tokens share one spatial position table. The noise level
    enters as a sinusoidal embedding added to every noisy token.
    """

    def __init__(self, cfg: VideoConfig, latent_res: int, n_tasks: int):
        super().__init__()
        self.cfg = cfg
        self.latent_res = latent_res
        self.patch = cfg.latent_patch
        grid = latent_res // cfg.latent_patch
        self.tokens_per_frame = grid * grid
        token_dim = cfg.latent_channels * cfg.latent_patch**2
        self.calls = 0  # forward invocations, for control-condition audits

        self.token_in = nn.Linear(token_dim, cfg.dim)
        self.cond_in = nn.Linear(token_dim, cfg.dim)
        self.task_in = nn.Linear(n_tasks, cfg.dim)
        self.spatial_pos = nn.Parameter(torch.empty(1, self.tokens_per_frame, cfg.dim))
        self.frame_pos = nn.Parameter(torch.empty(cfg.horizon, 1, cfg.dim))
        self.type_noisy = nn.Parameter(torch.empty(1, 1, cfg.dim))
        self.type_cond = nn.Parameter(torch.empty(1, 1, cfg.dim))
        self.type_task = nn.Parameter(torch.empty(1, 1, cfg.dim))
        self.time_mlp = nn.Sequential(nn.Linear(cfg.dim, cfg.dim), nn.SiLU(), nn.Linear(cfg.dim, cfg.dim))
        self.blocks = Transformer(cfg.dim, cfg.depth, cfg.heads)
        self.out = nn.Linear(cfg.dim, token_dim)

    def forward(
        self,
        z_noisy: torch.Tensor,  # (B, H, C, r, r)
        sigma: torch.Tensor,  # (B,)
        z_cond: torch.Tensor,  # (B, C, r, r)
        task_onehot: torch.Tensor,  # (B, n_tasks)
    ) -> torch.Tensor:
        self.calls += 1
        b, h, c, r, _ = z_noisy.shape
        if h > self.frame_pos.shape[0]:
            raise ValueError(f"horizon {h} exceeds the model's maximum {self.frame_pos.shape[0]}")
        frames = []
        for i in range(h):
            tok = self.token_in(patchify(z_noisy[:, i], self.patch))
            frames.append(tok + self.spatial_pos + self.frame_pos[i])
        x = torch.cat(frames, dim=1) + self.type_noisy
        t_emb = self.time_mlp(timestep_embedding(sigma.to(x.dtype), self.cfg.dim)).unsqueeze(1)
        x = x + t_emb
        cond = self.cond_in(patchify(z_cond, self.patch)) + self.spatial_pos + self.type_cond
        task = self.task_in(task_onehot.to(x.dtype)).unsqueeze(1) + self.type_task
        full = torch.cat([x, cond, task], dim=1)
        out = self.out(self.blocks(full)[:, : h * self.tokens_per_frame])
        pred = [
            unpatchify(out[:, i * self.tokens_per_frame : (i + 1) * self.tokens_per_frame], self.patch, c, r, r)
            for i in range(h)
        ]
        return torch.stack(pred, dim=1)


@dataclass
class ImaginedFuture:
    frames: torch.Tensor  # (B, H, 3, R, R), clamped to [0, 1]
    latents: torch.Tensor  # (B, H, C, r, r), normalized latent space


class VideoModel(nn.Module):
    """Autoencoder + denoiser + latent normalization statistics."""

    def __init__(self, cfg: VideoConfig, world: WorldConfig, n_tasks: int):
        super().__init__()
        if world.resolution % 4:
            raise ValueError("frame autoencoder needs resolution divisible by 4")
        self.cfg = cfg
        self.world = world
        self.n_tasks = n_tasks
        self.latent_res = world.resolution // 4
        if self.latent_res % cfg.latent_patch:
            raise ValueError("latent grid not divisible by latent_patch")
        self.ae = FrameAutoencoder(cfg)
        self.denoiser = LatentDenoiser(cfg, self.latent_res, n_tasks)
        self.register_buffer("latent_mean", torch.zeros(cfg.latent_channels))
        self.register_buffer("latent_std", torch.ones(cfg.latent_channels))

    # -- latent space ------------------------------------------------------

    def encode_norm(self, rgb: torch.Tensor) -> torch.Tensor:
        z = self.ae.encode(rgb)
        return (z - self.latent_mean[:, None, None]) / self.latent_std[:, None, None]

    def decode_norm(self, z_norm: torch.Tensor) -> torch.Tensor:
        z = z_norm * self.latent_std[:, None, None] + self.latent_mean[:, None, None]
        return self.ae.decode(z)

    @torch.no_grad()
    def fit_latent_stats(self, frames: torch.Tensor) -> None:
        """Set per-channel mean/std from a sample of frames (std floored)."""
        z = self.ae.encode(frames)
        self.latent_mean.copy_(z.mean(dim=(0, 2, 3)))
        self.latent_std.copy_(z.std(dim=(0, 2, 3)).clamp(min=1e-6))

    # -- training losses ---------------------------------------------------

    def autoencoder_loss(self, frames: torch.Tensor) -> torch.Tensor:
        return F.mse_loss(self.ae.decode(self.ae.encode(frames)), frames)

    def denoiser_loss(
        self,
        rgb_t: torch.Tensor,  # (B, 3, R, R)
        future: torch.Tensor,  # (B, H, 3, R, R)
        task_onehot: torch.Tensor,
        generator: torch.Generator,
        sigma: torch.Tensor | None = None,
        noise: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """x0-prediction loss; sigma/noise injectable for gradient checks."""
        b, h = future.shape[:2]
        with torch.no_grad():
            z_cond = self.encode_norm(rgb_t)
            z_clean = self.encode_norm(future.reshape(b * h, *future.shape[2:]))
            z_clean = z_clean.reshape(b, h, *z_clean.shape[1:])
        if sigma is None:
            sigma = torch.rand(b, generator=generator, dtype=z_clean.dtype)
        if noise is None:
            noise = torch.randn(z_clean.shape, generator=generator, dtype=z_clean.dtype)
        s = sigma.reshape(b, 1, 1, 1, 1)
        z_noisy = (1.0 - s) * z_clean + s * noise
        pred = self.denoiser(z_noisy, sigma, z_cond, task_onehot)
        return F.mse_loss(pred, z_clean)

    # -- sampling ----------------------------------------------------------

    @torch.no_grad()
    def imagine(
        self,
        rgb_t: torch.Tensor,  # (B, 3, R, R)
        task_onehot: torch.Tensor,
        generator: torch.Generator,
        horizon: int | None = None,
        n_steps: int | None = None,
    ) -> ImaginedFuture:
        """Sample future frames from noise along a fixed sigma grid.

        n_steps = 1 collapses to a single x0 prediction at sigma = 1. More
        steps re-noise the running estimate to the next grid sigma using the
        implied noise direction, never drawing fresh noise, so the whole
        trajectory is a deterministic function of the initial draw.
        """
        horizon = self.cfg.horizon if horizon is None else horizon
        n_steps = self.cfg.sample_steps if n_steps is None else n_steps
        if n_steps < 1:
            raise ValueError("need at least one denoising step")
        b = rgb_t.shape[0]
        r = self.latent_res
        z_cond = self.encode_norm(rgb_t)
        x = torch.randn(b, horizon, self.cfg.latent_channels, r, r, generator=generator)
        sigmas = torch.linspace(1.0, 0.0, n_steps + 1)
        for i in range(n_steps):
            s_now = float(sigmas[i])
            s_next = float(sigmas[i + 1])
            x0 = self.denoiser(x, torch.full((b,), s_now), z_cond, task_onehot)
            if s_next > 0.0:
                eps_hat = (x - (1.0 - s_now) * x0) / s_now
                x = (1.0 - s_next) * x0 + s_next * eps_hat
            else:
                x = x0
        frames = self.decode_norm(x.reshape(b * horizon, self.cfg.latent_channels, r, r))
        frames = frames.reshape(b, horizon, 3, *frames.shape[2:]).clamp(0.0, 1.0)
        return ImaginedFuture(frames=frames, latents=x)

    def pooled_features(self, latents: torch.Tensor) -> torch.Tensor:
        """Quadrant-average normalized latents: (B, H, C, r, r) -> (B, H, 4C)."""
        b, h = latents.shape[:2]
        pooled = F.adaptive_avg_pool2d(latents.reshape(b * h, *latents.shape[2:]), 2)
        return pooled.reshape(b, h, -1)

    @torch.no_grad()
    def pooled_from_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """Pooled features for already-rendered frames: (B, H, 3, R, R) -> (B, H, 4C)."""
        b, h = frames.shape[:2]
        z = self.encode_norm(frames.reshape(b * h, *frames.shape[2:]))
        return self.pooled_features(z.reshape(b, h, *z.shape[1:]))


class OracleFutures:
    """Perfect future predictor: rolls the real simulator forward.

    Stands in for learned imagination wherever the caller holds the actual
    world state — upper-bound control rollouts and tests that pin what a
    zero-error predictor implies downstream. Expert deltas go through the
    same float32 rounding as recorded episodes, so frames are bit-exact
    against a replayed trajectory.
    """

    def imagine_from_state(self, state: WorldState, task: TaskSpec, horizon: int) -> torch.Tensor:
        frames = []
        current = state
        for _ in range(horizon):
            a = scripted_expert(current, task)
            delta32 = clip_delta_f32(a.delta, current.config.max_delta)
            current = step(current, Action(delta32.astype(np.float64), a.grip_cmd))
            frames.append(render(current).rgb)
        return torch.from_numpy(np.stack(frames)).permute(0, 3, 1, 2).contiguous()
