"""Modality-aware inverse dynamics models with discrete latent actions.

A single inverse dynamics model (``SingleIdm``) looks at an RGB frame pair
(t, t+k), summarizes the transition into a small set of query vectors, and
quantizes those vectors against a codebook. The quantized transition code is
trained to carry enough information to reconstruct the future RGB frame and,
for a supervised modality, a future modality raster (semantic classes, depth,
or optical flow) from the current one. Several such models — one per modality
— are assembled into an ``IdmBundle`` that shares one RGB encoder and exposes
the per-modality codes jointly ("mixture inference") for downstream policy
conditioning.

Numerical contracts worth knowing:

* nearest-code search runs in float64 with ties broken toward the smallest
  index, so assignments are stable across platforms;
* quantization is straight-through: the forward value is *bit-equal* to the
  gathered codebook row, while the backward pass routes gradients to the
  encoder (and optionally the codebook rows during joint fine-tuning);
* ``forward_loss`` accepts a frozen quantization offset so the whole loss can
  be checked against finite differences despite the hard assignment step.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import IdmConfig
from .errors import CheckpointError
from .nnblocks import Transformer, patchify, unpatchify
from .synthworld import WorldConfig

# Raster channel counts per modality. Semantic rasters are one-hot over
# {background, agent, object_1..object_K}; flow rasters hold (dx, dy) in
# pixel units; depth is a single height channel.
_BASE_CHANNELS = {"depth": 1, "flow": 2}


def modality_channels(modality: str, n_objects: int) -> int:
    if modality == "semantic":
        return n_objects + 2
    try:
        return _BASE_CHANNELS[modality]
    except KeyError:
        raise ValueError(f"unknown modality {modality!r}") from None


def flow_scale(cfg: IdmConfig, world: WorldConfig) -> float:
    """Largest plausible per-pixel flow magnitude, used to normalize flow targets."""
    return world.max_delta * cfg.step_gap * world.resolution


def semantic_to_onehot(semantic: torch.Tensor, n_classes: int) -> torch.Tensor:
    """(B, R, R) integer ids -> (B, C, R, R) float32 one-hot."""
    return F.one_hot(semantic.long(), n_classes).permute(0, 3, 1, 2).float()


@dataclass
class QuantizeResult:
    indices: torch.Tensor  # (..., ) long code ids
    embeddings: torch.Tensor  # gathered codebook rows, detached
    ste: torch.Tensor  # straight-through tensor: value == embeddings
    codebook_loss: torch.Tensor
    commit_loss: torch.Tensor
    pre: torch.Tensor  # encoder outputs before quantization, detached


class Codebook(nn.Module):
    """Vector-quantization codebook with straight-through gradients.

    Nearest-neighbour assignment happens in float64 regardless of the input
    dtype, and exact distance ties resolve to the smallest code index. Codes
    are trained either by the codebook loss ("loss" mode) or by exponential
    moving averages of assigned encoder outputs ("ema" mode). Codes that go
    unused for ``dead_steps`` consecutive tracked steps are reseeded from the
    current batch of encoder outputs.

    ``unit_norm=True`` runs the quantizer on the unit sphere: lookups see
    row-normalized codes, so the joint scale of encoder outputs and codes
    cannot shrink toward zero — the collapse mode where commitment wins in a
    few hundred steps, every code ends up inside a tiny ball, and the
    quantizer resolves nothing. Callers are expected to normalize the
    encoder outputs they pass in.
    """

    def __init__(
        self,
        n_codes: int,
        dim: int,
        beta: float = 0.25,
        update: str = "loss",
        ema_decay: float = 0.99,
        dead_steps: int = 1000,
        unit_norm: bool = False,
    ):
        super().__init__()
        if update not in ("loss", "ema"):
            raise ValueError(f"codebook update mode {update!r} is not 'loss' or 'ema'")
        self.n_codes = n_codes
        self.dim = dim
        self.beta = beta
        self.update = update
        self.ema_decay = ema_decay
        self.dead_steps = dead_steps
        self.unit_norm = unit_norm
        self.codes = nn.Parameter(torch.empty(n_codes, dim))
        self.register_buffer("usage", torch.zeros(n_codes, dtype=torch.long))
        self.register_buffer("last_used", torch.zeros(n_codes, dtype=torch.long))
        self.register_buffer("tracked_steps", torch.zeros((), dtype=torch.long))
        self.register_buffer("ema_count", torch.zeros(n_codes))
        self.register_buffer("ema_sum", torch.zeros(n_codes, dim))
        self.register_buffer("ema_primed", torch.zeros((), dtype=torch.uint8))

    def lookup_table(self) -> torch.Tensor:
        """The codes as seen by lookups (row-normalized in unit_norm mode)."""
        if self.unit_norm:
            return F.normalize(self.codes, dim=-1, eps=1e-8)
        return self.codes

    @torch.no_grad()
    def nearest(self, z: torch.Tensor) -> torch.Tensor:
        """Nearest code ids by squared L2, float64, smallest index on ties."""
        flat = z.detach().reshape(-1, self.dim).to(torch.float64)
        codes = self.lookup_table().detach().to(torch.float64)
        ids = torch.empty(flat.shape[0], dtype=torch.long)
        arange = torch.arange(self.n_codes)
        for start in range(0, flat.shape[0], 512):
            chunk = flat[start : start + 512]
            d2 = ((chunk[:, None, :] - codes[None, :, :]) ** 2).sum(-1)
            best = d2.min(dim=1).values
            tied = d2 == best[:, None]
            ids[start : start + 512] = torch.where(tied, arange, self.n_codes).min(dim=1).values
        return ids.reshape(z.shape[:-1])

    def quantize(self, z: torch.Tensor, codebook_grad: bool = False) -> QuantizeResult:
        """Quantize (..., dim) vectors.

        ``codebook_grad=False`` is the pretraining contract: gradients of the
        straight-through output reach only the encoder. ``codebook_grad=True``
        lets downstream losses also pull on the selected codebook rows, which
        is how joint fine-tuning trains the codebook through the policy head.
        """
        idx = self.nearest(z)
        rows = self.lookup_table()[idx]
        if codebook_grad:
            ste = rows + (z - z.detach())
        else:
            ste = rows.detach() + (z - z.detach())
        codebook_loss = F.mse_loss(rows, z.detach())
        if self.update == "ema":
            # EMA mode moves codes outside the loss; keep the value for logs only.
            codebook_loss = codebook_loss.detach()
        commit_loss = F.mse_loss(z, rows.detach())
        return QuantizeResult(idx, rows.detach(), ste, codebook_loss, commit_loss, z.detach())

    @torch.no_grad()
    def track(self, indices: torch.Tensor, z: torch.Tensor, generator: torch.Generator | None = None) -> None:
        """Per-training-step bookkeeping: usage counts, EMA update, dead-code reseed."""
        self.tracked_steps += 1
        flat_idx = indices.reshape(-1)
        flat_z = z.detach().reshape(-1, self.dim)
        counts = torch.bincount(flat_idx, minlength=self.n_codes)
        self.usage += counts
        self.last_used[counts > 0] = self.tracked_steps

        if self.update == "ema":
            if not bool(self.ema_primed):
                self.ema_sum.copy_(self.codes.detach())
                self.ema_count.fill_(1.0)
                self.ema_primed.fill_(1)
            sums = torch.zeros_like(self.ema_sum)
            sums.index_add_(0, flat_idx, flat_z)
            d = self.ema_decay
            self.ema_count.mul_(d).add_(counts.float(), alpha=1.0 - d)
            self.ema_sum.mul_(d).add_(sums, alpha=1.0 - d)
            total = self.ema_count.sum()
            smoothed = (self.ema_count + 1e-5) / (total + self.n_codes * 1e-5) * total
            self.codes.data.copy_(self.ema_sum / smoothed[:, None])

        dead = (self.tracked_steps - self.last_used) >= self.dead_steps
        if bool(dead.any()):
            n_dead = int(dead.sum())
            pick = torch.randint(0, flat_z.shape[0], (n_dead,), generator=generator)
            self.codes.data[dead] = flat_z[pick]
            self.last_used[dead] = self.tracked_steps
            if self.update == "ema":
                self.ema_sum[dead] = flat_z[pick]
                self.ema_count[dead] = 1.0

    def stats(self) -> dict:
        counts = self.usage.cpu().numpy()
        total = int(counts.sum())
        if total > 0:
            p = counts / total
            nz = p[p > 0]
            perplexity = float(np.exp(-(nz * np.log(nz)).sum()))
        else:
            perplexity = 0.0
        return {
            "counts": counts,
            "total": total,
            "active": int((counts > 0).sum()),
            "perplexity": perplexity,
        }


class RgbEncoder(nn.Module):
    """Patch-token transformer over a single RGB frame."""

    def __init__(self, cfg: IdmConfig, world: WorldConfig):
        super().__init__()
        self.patch = cfg.patch
        self.resolution = world.resolution
        grid = world.resolution // cfg.patch
        self.n_tokens = grid * grid
        self.embed = nn.Linear(3 * cfg.patch * cfg.patch, cfg.dim)
        self.pos = nn.Parameter(torch.empty(1, self.n_tokens, cfg.dim))
        self.blocks = Transformer(cfg.dim, cfg.encoder_depth, cfg.heads)

    def forward(self, rgb: torch.Tensor) -> torch.Tensor:
        x = self.embed(patchify(rgb, self.patch)) + self.pos
        return self.blocks(x)


class TransitionPart(nn.Module):
    """Queries + spatiotemporal transformer + codebook for one modality slot.

    The transformer attends over [queries; frame-t tokens; frame-t+k tokens]
    with learned temporal embeddings marking which frame a token came from.
    The query outputs project down to codebook space; with spherical codes
    the projection is L2-normalized so quantization happens on the unit
    sphere (see Codebook.unit_norm).
    """

    def __init__(self, cfg: IdmConfig, update: str | None = None):
        super().__init__()
        self.n_queries = cfg.queries
        self.spherical = cfg.spherical_codes
        self.queries = nn.Parameter(torch.empty(1, cfg.queries, cfg.dim))
        self.temporal = nn.Parameter(torch.empty(2, 1, 1, cfg.dim))
        self.blocks = Transformer(cfg.dim, cfg.transition_depth, cfg.heads)
        self.to_code = nn.Linear(cfg.dim, cfg.code_dim)
        self.codebook = Codebook(
            cfg.codes,
            cfg.code_dim,
            beta=cfg.beta,
            update=update if update is not None else cfg.codebook_update,
            ema_decay=cfg.ema_decay,
            dead_steps=cfg.dead_code_steps,
            unit_norm=cfg.spherical_codes,
        )

    def infer(self, h_t: torch.Tensor, h_tk: torch.Tensor, capture: list | None = None) -> torch.Tensor:
        b = h_t.shape[0]
        x = torch.cat(
            [self.queries.expand(b, -1, -1), h_t + self.temporal[0], h_tk + self.temporal[1]],
            dim=1,
        )
        x = self.blocks(x, capture=capture)
        out = self.to_code(x[:, : self.n_queries])
        if self.spherical:
            out = F.normalize(out, dim=-1, eps=1e-8)
        return out


class _TokenDecoder(nn.Module):
    """Decode a raster from [feature tokens; quantized transition tokens]."""

    def __init__(self, cfg: IdmConfig, world: WorldConfig, out_channels: int):
        super().__init__()
        self.patch = cfg.patch
        self.out_channels = out_channels
        self.resolution = world.resolution
        grid = world.resolution // cfg.patch
        self.n_tokens = grid * grid
        self.z_in = nn.Linear(cfg.code_dim, cfg.dim)
        self.type_feat = nn.Parameter(torch.empty(1, 1, cfg.dim))
        self.type_code = nn.Parameter(torch.empty(1, 1, cfg.dim))
        self.blocks = Transformer(cfg.dim, cfg.decoder_depth, cfg.heads)
        self.out = nn.Linear(cfg.dim, cfg.patch * cfg.patch * out_channels)

    def forward(self, features: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        x = torch.cat([features + self.type_feat, self.z_in(z) + self.type_code], dim=1)
        x = self.blocks(x)
        tokens = self.out(x[:, : self.n_tokens])
        return unpatchify(tokens, self.patch, self.out_channels, self.resolution, self.resolution)


class ModalityFeatureEncoder(nn.Module):
    """Patch-token transformer over one modality raster (the F^m map)."""

    def __init__(self, cfg: IdmConfig, world: WorldConfig, channels: int):
        super().__init__()
        self.patch = cfg.patch
        grid = world.resolution // cfg.patch
        self.embed = nn.Linear(channels * cfg.patch * cfg.patch, cfg.dim)
        self.pos = nn.Parameter(torch.empty(1, grid * grid, cfg.dim))
        self.blocks = Transformer(cfg.dim, cfg.feature_depth, cfg.heads)

    def forward(self, raster: torch.Tensor) -> torch.Tensor:
        x = self.embed(patchify(raster, self.patch)) + self.pos
        return self.blocks(x)


class SingleIdm(nn.Module):
    """One inverse dynamics model: encoder, transition bottleneck, decoders.

    ``supervised`` lists which modality reconstruction losses accompany the
    RGB loss: the standard per-modality pretraining runs use a single entry,
    an empty tuple gives the RGB-only ablation, and all three at once gives
    the shared-codebook multi-loss ablation.
    """

    def __init__(self, cfg: IdmConfig, world: WorldConfig, supervised: tuple[str, ...]):
        super().__init__()
        for m in supervised:
            modality_channels(m, world.n_objects)  # validates the name
        self.cfg = cfg
        self.world = world
        self.supervised = tuple(supervised)
        self.flow_scale = flow_scale(cfg, world)
        self.lambdas = {
            "semantic": cfg.lambda_semantic,
            "depth": cfg.lambda_depth,
            "flow": cfg.lambda_flow,
        }
        self.rgb_encoder = RgbEncoder(cfg, world)
        self.part = TransitionPart(cfg)
        self.rgb_decoder = _TokenDecoder(cfg, world, 3)
        self.feature_encoders = nn.ModuleDict(
            {m: ModalityFeatureEncoder(cfg, world, modality_channels(m, world.n_objects)) for m in supervised}
        )
        self.modality_decoders = nn.ModuleDict(
            {m: _TokenDecoder(cfg, world, modality_channels(m, world.n_objects)) for m in supervised}
        )

    def forward_loss(
        self,
        batch: dict,
        frozen: tuple[torch.Tensor, torch.Tensor, torch.Tensor] | None = None,
        capture: list | None = None,
    ) -> tuple[torch.Tensor, dict, QuantizeResult]:
        """Full training loss for one batch.

        ``frozen=(indices, pre0, rows0)`` — the assignment and the tensor
        values captured at the evaluation point — replaces every
        non-differentiable piece of quantization with a constant: the decoder
        sees ``z_e + (rows0 - pre0)``, the codebook term compares the gathered
        rows against the constant ``pre0``, and the commitment term compares
        ``z_e`` against the constant ``rows0``. At the capture point this
        surrogate has exactly the straight-through gradients of the real
        loss, but unlike the real loss it is differentiable, so finite
        differences of it are meaningful.
        """
        h_t = self.rgb_encoder(batch["rgb_t"])
        h_tk = self.rgb_encoder(batch["rgb_tk"])
        z_e = self.part.infer(h_t, h_tk, capture=capture)
        if frozen is None:
            q = self.part.codebook.quantize(z_e)
        else:
            idx0, pre0, rows0 = frozen
            rows = self.part.codebook.lookup_table()[idx0]
            q = QuantizeResult(
                indices=idx0,
                embeddings=rows.detach(),
                ste=z_e + (rows0 - pre0),
                codebook_loss=F.mse_loss(rows, pre0),
                commit_loss=F.mse_loss(z_e, rows0),
                pre=z_e.detach(),
            )

        rgb_pred = self.rgb_decoder(h_t, q.ste)
        loss_rgb = F.mse_loss(rgb_pred, batch["rgb_tk"])
        parts = {
            "rgb": float(loss_rgb.detach()),
            "codebook": float(q.codebook_loss.detach()),
            "commit": float(q.commit_loss.detach()),
        }
        total = loss_rgb + q.codebook_loss + self.cfg.beta * q.commit_loss
        for m in self.supervised:
            feats = self.feature_encoders[m](batch[f"{m}_in"])
            pred = self.modality_decoders[m](feats, q.ste)
            if m == "semantic":
                loss_m = F.cross_entropy(pred, batch["semantic_target"])
            elif m == "depth":
                loss_m = F.mse_loss(pred, batch["depth_target"])
            else:
                loss_m = F.mse_loss(pred, batch["flow_target"] / self.flow_scale)
            parts[m] = float(loss_m.detach())
            total = total + self.lambdas[m] * loss_m
        parts["total"] = float(total.detach())
        return total, parts, q

    @torch.no_grad()
    def decode_rgb(self, rgb_t: torch.Tensor, ste: torch.Tensor) -> torch.Tensor:
        return self.rgb_decoder(self.rgb_encoder(rgb_t), ste).clamp(0.0, 1.0)

    @torch.no_grad()
    def decode_modality(self, modality: str, raster_t: torch.Tensor, ste: torch.Tensor) -> torch.Tensor:
        """Predict the future raster for a supervised modality.

        Semantic output is the argmax class map; flow is rescaled back to
        pixel units; depth passes through.
        """
        if modality not in self.supervised:
            raise ValueError(f"model has no decoder for modality {modality!r}")
        pred = self.modality_decoders[modality](self.feature_encoders[modality](raster_t), ste)
        if modality == "semantic":
            return pred.argmax(dim=1)
        if modality == "flow":
            return pred * self.flow_scale
        return pred

    def attention_map(self, rgb_t: torch.Tensor, rgb_tk: torch.Tensor, mode: str = "max") -> np.ndarray:
        return _attention_heatmap(self.rgb_encoder, self.part, rgb_t, rgb_tk, self.cfg, self.world, mode)


def _attention_heatmap(
    encoder: RgbEncoder,
    part: TransitionPart,
    rgb_t: torch.Tensor,
    rgb_tk: torch.Tensor,
    cfg: IdmConfig,
    world: WorldConfig,
    mode: str,
) -> np.ndarray:
    """Spatial attention mass from the transition queries onto frame tokens.

    Takes the last transition block's attention, averages heads and queries,
    sums the two frames' token columns, and paints each patch's mass over its
    pixels. ``mode='max'`` scales the peak to 1; ``mode='distribution'``
    normalizes to sum to 1.
    """
    if mode not in ("max", "distribution"):
        raise ValueError(f"heatmap mode {mode!r} is not 'max' or 'distribution'")
    capture: list = []
    with torch.no_grad():
        h_t = encoder(rgb_t)
        h_tk = encoder(rgb_tk)
        part.infer(h_t, h_tk, capture=capture)
    w = capture[-1]  # (B, heads, Q + 2N, Q + 2N)
    n_q = part.n_queries
    n = h_t.shape[1]
    mass = w[0, :, :n_q, n_q:].mean(dim=(0, 1))  # (2N,) head- and query-averaged
    per_token = (mass[:n] + mass[n:]).cpu().numpy()
    grid = world.resolution // cfg.patch
    heat = np.kron(per_token.reshape(grid, grid), np.ones((cfg.patch, cfg.patch)))
    if mode == "max":
        peak = heat.max()
        if peak > 0:
            heat = heat / peak
    else:
        total = heat.sum()
        if total > 0:
            heat = heat / total
    return heat.astype(np.float32)


@dataclass
class Mixture:
    """Joint inference result across the bundle's modality slots."""

    indices: dict  # name -> (B, Q) long
    embeddings: dict  # name -> (B, Q, code_dim) exact codebook rows, detached
    ste: dict  # name -> straight-through tensors (value == embeddings)
    codebook_loss: torch.Tensor
    commit_loss: torch.Tensor


class IdmBundle(nn.Module):
    """Several transition bottlenecks sharing one RGB encoder.

    Assembled from independently pretrained models: the designated trunk
    modality donates the shared RGB encoder (and decoder, when kept), and
    every member contributes its transition transformer and codebook. The
    mismatch between non-trunk transformers and the trunk encoder is repaired
    during joint fine-tuning. Decoders are dropped at integration time unless
    explicitly kept for reconstruction tooling.
    """

    def __init__(self, cfg: IdmConfig, world: WorldConfig, part_names: tuple[str, ...], keep_decoders: bool = False):
        super().__init__()
        if not part_names:
            raise ValueError("bundle needs at least one part")
        self.cfg = cfg
        self.world = world
        self.part_names = tuple(part_names)
        self.rgb_encoder = RgbEncoder(cfg, world)
        self.parts = nn.ModuleDict({m: TransitionPart(cfg) for m in part_names})
        self.rgb_decoder = _TokenDecoder(cfg, world, 3) if keep_decoders else None

    @classmethod
    def from_idms(cls, idms: dict, trunk: str, keep_decoders: bool = False) -> "IdmBundle":
        if trunk not in idms:
            raise CheckpointError(f"trunk modality {trunk!r} not among loaded models {sorted(idms)}")
        names = tuple(idms.keys())
        first: SingleIdm = idms[trunk]
        bundle = cls(first.cfg, first.world, names, keep_decoders=False)
        bundle.rgb_encoder = idms[trunk].rgb_encoder
        bundle.parts = nn.ModuleDict({m: idms[m].part for m in names})
        if keep_decoders:
            bundle.rgb_decoder = idms[trunk].rgb_decoder
        return bundle

    def rgb_decoder_for(self, name: str) -> _TokenDecoder:
        """The shared RGB decoder (one object, whichever part asks)."""
        if self.rgb_decoder is None:
            raise CheckpointError("bundle was assembled without decoders")
        if name not in self.parts:
            raise KeyError(name)
        return self.rgb_decoder

    def mixture_infer(
        self,
        rgb_t: torch.Tensor,
        rgb_tk: torch.Tensor,
        codebook_grad: bool = False,
        capture: dict | None = None,
    ) -> Mixture:
        h_t = self.rgb_encoder(rgb_t)
        h_tk = self.rgb_encoder(rgb_tk)
        indices, embeddings, ste = {}, {}, {}
        cb_loss = torch.zeros((), dtype=rgb_t.dtype)
        commit = torch.zeros((), dtype=rgb_t.dtype)
        for name in self.part_names:
            part: TransitionPart = self.parts[name]
            cap = None
            if capture is not None:
                cap = capture.setdefault(name, [])
            z_e = part.infer(h_t, h_tk, capture=cap)
            q = part.codebook.quantize(z_e, codebook_grad=codebook_grad)
            indices[name] = q.indices
            embeddings[name] = q.embeddings
            ste[name] = q.ste
            cb_loss = cb_loss + q.codebook_loss
            commit = commit + q.commit_loss
        return Mixture(indices, embeddings, ste, cb_loss, commit)

    def attention_map(self, rgb_t: torch.Tensor, rgb_tk: torch.Tensor, name: str, mode: str = "max") -> np.ndarray:
        return _attention_heatmap(self.rgb_encoder, self.parts[name], rgb_t, rgb_tk, self.cfg, self.world, mode)


def codebook_stats(parts: dict | nn.ModuleDict) -> dict:
    """Per-part codebook usage summary, ready for CSV export."""
    out = {}
    for name, part in parts.items():
        out[name] = part.codebook.stats()
    return out
