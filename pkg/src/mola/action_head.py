"""Action heads: conditional flow matching (default) and autoregressive bins.

The policy predicts a chunk of ``H_a`` future actions, each (dx, dy, grip),
from a set of condition tokens assembled out of three ingredients: quantized
transition codes from the inverse dynamics bundle, pooled features of the
imagined future frames, and the task embedding. The flow-matching head
regresses the straight-path velocity field between a standard normal draw
and the normalized expert chunk and integrates it with a fixed-step Euler
walk at sampling time; the autoregressive head discretizes each action
dimension into uniform bins and decodes them greedily one token at a time.

Both heads operate in normalized action space. Translation dimensions are
standardized against dataset statistics; the grip dimension stays 0/1 and is
thresholded at 0.5 on the way out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import IdmConfig, PolicyConfig
from .errors import ConfigError
from .moidm import ModalityFeatureEncoder, modality_channels
from .nnblocks import Transformer, timestep_embedding
from .synthworld import WorldConfig

GRIP_THRESHOLD = 0.5


@dataclass(frozen=True)
class ActionStats:
    """Per-dimension normalization for (dx, dy, grip) vectors.

    Translations are standardized; the grip dimension is passed through
    untouched so 0/1 labels survive normalization exactly.
    """

    mean: np.ndarray  # (3,) float32
    std: np.ndarray  # (3,) float32

    @staticmethod
    def from_actions(actions: np.ndarray) -> "ActionStats":
        if actions.ndim != 2 or actions.shape[1] != 3:
            raise ValueError(f"expected (N, 3) actions, got {actions.shape}")
        mean = actions.mean(axis=0).astype(np.float32)
        std = np.maximum(actions.std(axis=0), 1e-6).astype(np.float32)
        mean[2], std[2] = 0.0, 1.0
        return ActionStats(mean, std)

    def normalize(self, actions: torch.Tensor) -> torch.Tensor:
        mean = torch.from_numpy(self.mean).to(actions.dtype)
        std = torch.from_numpy(self.std).to(actions.dtype)
        return (actions - mean) / std

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        mean = torch.from_numpy(self.mean).to(x.dtype)
        std = torch.from_numpy(self.std).to(x.dtype)
        return x * std + mean


@dataclass
class ConditionInputs:
    """Everything a condition builder might need; designs pick their subset."""

    pooled: torch.Tensor  # (B, H, pooled_dim) imagined-frame features
    task_onehot: torch.Tensor  # (B, n_tasks)
    ste: dict | None = None  # part name -> (B, Q, code_dim) quantized codes
    rasters: dict | None = None  # modality -> raster of the current frame


class ConditionBuilder(nn.Module):
    """Assemble condition tokens for the action head.

    Designs:
      * ``moidm`` / ``single_rgb`` / ``single_multiloss``: one token per
        quantized query slot per part, plus one per imagined frame, plus a
        task token — 3Q + H + 1 tokens for the full three-modality bundle.
      * ``baseline``: no transition codes; a small temporal transformer runs
        over the imagined-frame tokens and the task token.
      * ``direct``: modality rasters of the current frame are encoded and
        mean-pooled into one token each (no discrete bottleneck), alongside
        frame and task tokens.
    """

    def __init__(
        self,
        cfg: PolicyConfig,
        idm_cfg: IdmConfig,
        world: WorldConfig,
        part_names: tuple[str, ...],
        n_tasks: int,
        horizon: int,
    ):
        super().__init__()
        self.cfg = cfg
        self.design = cfg.design
        self.part_names = tuple(part_names)
        self.drop_task_token = cfg.drop_task_token
        d = cfg.dim
        self.frame_proj = nn.Linear(cfg.pooled_dim, d)
        self.frame_pos = nn.Parameter(torch.empty(horizon, d))
        self.type_frame = nn.Parameter(torch.empty(1, 1, d))
        self.task_proj = nn.Linear(n_tasks, d)
        self.type_task = nn.Parameter(torch.empty(1, 1, d))
        if self.design in ("moidm", "single_rgb", "single_multiloss"):
            if not part_names:
                raise ConfigError(f"design {self.design!r} needs at least one transition part")
            self.code_proj = nn.ModuleDict({m: nn.Linear(idm_cfg.code_dim, d) for m in part_names})
            self.type_part = nn.ParameterDict({m: nn.Parameter(torch.empty(1, 1, d)) for m in part_names})
            self.slot_pos = nn.Parameter(torch.empty(1, idm_cfg.queries, d))
        elif self.design == "direct":
            self.raster_enc = nn.ModuleDict(
                {
                    m: ModalityFeatureEncoder(idm_cfg, world, modality_channels(m, world.n_objects))
                    for m in ("semantic", "depth", "flow")
                }
            )
            self.raster_proj = nn.Linear(idm_cfg.dim, d)
            self.type_raster = nn.ParameterDict(
                {m: nn.Parameter(torch.empty(1, 1, d)) for m in ("semantic", "depth", "flow")}
            )
        elif self.design == "baseline":
            self.temporal = Transformer(d, cfg.baseline_depth, cfg.heads)
        else:
            raise ConfigError(f"unknown condition design {cfg.design!r}")

    def forward(self, inputs: ConditionInputs) -> torch.Tensor:
        frames = self.frame_proj(inputs.pooled)
        h = frames.shape[1]
        if h > self.frame_pos.shape[0]:
            raise ValueError(f"got {h} pooled frames but builder supports {self.frame_pos.shape[0]}")
        frames = frames + self.frame_pos[:h] + self.type_frame
        task = self.task_proj(inputs.task_onehot).unsqueeze(1) + self.type_task

        tokens = []
        if self.design in ("moidm", "single_rgb", "single_multiloss"):
            if inputs.ste is None:
                raise ValueError("this design conditions on transition codes; none were given")
            for m in self.part_names:
                tokens.append(self.code_proj[m](inputs.ste[m]) + self.type_part[m] + self.slot_pos)
        elif self.design == "direct":
            if inputs.rasters is None:
                raise ValueError("direct design conditions on modality rasters; none were given")
            for m in ("semantic", "depth", "flow"):
                feat = self.raster_enc[m](inputs.rasters[m]).mean(dim=1, keepdim=True)
                tokens.append(self.raster_proj(feat) + self.type_raster[m])
        tokens.append(frames)
        if not self.drop_task_token:
            tokens.append(task)
        out = torch.cat(tokens, dim=1)
        if self.design == "baseline":
            out = self.temporal(out)
        return out

    def n_tokens(self, horizon: int) -> int:
        n = horizon + (0 if self.drop_task_token else 1)
        if self.design in ("moidm", "single_rgb", "single_multiloss"):
            n += len(self.part_names) * self.slot_pos.shape[1]
        elif self.design == "direct":
            n += 3
        return n


class FlowMatchHead(nn.Module):
    """Velocity-field regressor over action chunks with cross-attention."""

    def __init__(self, cfg: PolicyConfig, action_dim: int = 3):
        super().__init__()
        self.cfg = cfg
        self.action_dim = action_dim
        d = cfg.dim
        self.encoder = Transformer(d, cfg.encoder_depth, cfg.heads)
        self.in_proj = nn.Linear(action_dim, d)
        self.chunk_pos = nn.Parameter(torch.empty(1, cfg.chunk, d))
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.decoder = Transformer(d, cfg.decoder_depth, cfg.heads, cross=True)
        self.out = nn.Linear(d, action_dim)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond_tokens: torch.Tensor) -> torch.Tensor:
        ctx = self.encoder(cond_tokens)
        tok = self.in_proj(x_t) + self.chunk_pos
        tok = tok + self.time_mlp(timestep_embedding(t.to(tok.dtype), self.cfg.dim)).unsqueeze(1)
        return self.out(self.decoder(tok, ctx=ctx))


def fm_training_loss(
    head: FlowMatchHead,
    x1: torch.Tensor,  # (B, H_a, A) normalized expert chunk
    cond_tokens: torch.Tensor,
    generator: torch.Generator,
    t: torch.Tensor | None = None,
    x0: torch.Tensor | None = None,
) -> torch.Tensor:
    """Straight-path flow matching: regress v = x1 - x0 at x_t.

    The interpolation x_t = (1 - t) x0 + t x1 is endpoint-exact in floating
    point. The loss sums over chunk and action dimensions, then averages over
    the batch, so with the network stubbed to zero its expectation over noise
    is mean ||x1||^2 + H_a * A.
    """
    b = x1.shape[0]
    if t is None:
        t = torch.rand(b, generator=generator, dtype=x1.dtype)
    if x0 is None:
        x0 = torch.randn(x1.shape, generator=generator, dtype=x1.dtype)
    tt = t.reshape(b, 1, 1)
    x_t = (1.0 - tt) * x0 + tt * x1
    v = head(x_t, t, cond_tokens)
    return ((v - (x1 - x0)) ** 2).sum(dim=(1, 2)).mean()


@torch.no_grad()
def fm_sample(
    head: FlowMatchHead,
    cond_tokens: torch.Tensor,
    generator: torch.Generator,
    n_steps: int | None = None,
) -> torch.Tensor:
    """Euler-integrate the learned velocity field from noise to a chunk."""
    n_steps = head.cfg.sample_steps if n_steps is None else n_steps
    if n_steps < 1:
        raise ValueError("need at least one integration step")
    b = cond_tokens.shape[0]
    x = torch.randn(b, head.cfg.chunk, head.action_dim, generator=generator)
    dt = 1.0 / n_steps
    for i in range(n_steps):
        t = torch.full((b,), i * dt)
        x = x + head(x, t, cond_tokens) * dt
    return x


# -- autoregressive comparison head ----------------------------------------

AR_RANGE = 4.0  # bins cover [-AR_RANGE, AR_RANGE] in normalized action units


def value_to_bin(x: torch.Tensor, n_bins: int) -> torch.Tensor:
    width = 2.0 * AR_RANGE / n_bins
    ids = torch.floor((x + AR_RANGE) / width).long()
    return ids.clamp(0, n_bins - 1)


def bin_to_value(ids: torch.Tensor, n_bins: int) -> torch.Tensor:
    width = 2.0 * AR_RANGE / n_bins
    return -AR_RANGE + (ids.to(torch.float32) + 0.5) * width


class AutoregressiveHead(nn.Module):
    """Greedy per-dimension discretized decoder over the flattened chunk.

    The chunk flattens row-major to H_a * A tokens. Decoding is teacher-forced
    during training (causal mask) and greedy argmax at sampling time, so
    sampling is deterministic given the condition.
    """

    def __init__(self, cfg: PolicyConfig, action_dim: int = 3):
        super().__init__()
        self.cfg = cfg
        self.action_dim = action_dim
        self.seq_len = cfg.chunk * action_dim
        d = cfg.dim
        self.encoder = Transformer(d, cfg.encoder_depth, cfg.heads)
        self.token_emb = nn.Embedding(cfg.ar_bins, d)
        self.start = nn.Parameter(torch.empty(1, 1, d))
        self.pos = nn.Parameter(torch.empty(1, self.seq_len, d))
        self.decoder = Transformer(d, cfg.decoder_depth, cfg.heads, cross=True)
        self.logits = nn.Linear(d, cfg.ar_bins)

    def _decode(self, prev_ids: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, n = prev_ids.shape[0], prev_ids.shape[1] + 1
        tok = torch.cat([self.start.expand(b, -1, -1), self.token_emb(prev_ids)], dim=1)
        tok = tok + self.pos[:, :n]
        mask = torch.ones(n, n, dtype=torch.bool).tril()
        return self.logits(self.decoder(tok, ctx=ctx, mask=mask))

    def forward_loss(self, x1: torch.Tensor, cond_tokens: torch.Tensor) -> torch.Tensor:
        ids = value_to_bin(x1.reshape(x1.shape[0], -1), self.cfg.ar_bins)
        ctx = self.encoder(cond_tokens)
        logits = self._decode(ids[:, :-1], ctx)
        return F.cross_entropy(logits.reshape(-1, self.cfg.ar_bins), ids.reshape(-1))

    @torch.no_grad()
    def greedy_sample(self, cond_tokens: torch.Tensor) -> torch.Tensor:
        b = cond_tokens.shape[0]
        ctx = self.encoder(cond_tokens)
        ids = torch.zeros(b, 0, dtype=torch.long)
        for _ in range(self.seq_len):
            logits = self._decode(ids, ctx)
            ids = torch.cat([ids, logits[:, -1].argmax(dim=-1, keepdim=True)], dim=1)
        values = bin_to_value(ids, self.cfg.ar_bins)
        return values.reshape(b, self.cfg.chunk, self.action_dim)
