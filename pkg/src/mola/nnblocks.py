"""Shared transformer building blocks.

All attention is written out by hand (no fused kernels) so attention weights
can be captured for the query-attention heatmaps and so CPU runs are
bit-reproducible. Parameter initialization is driven entirely by an explicit
torch.Generator via init_parameters/deterministic_init — nothing touches the
global RNG, which is what makes concurrently trained models independent of
scheduling.
"""

from __future__ import annotations

import math

import torch
from torch import nn


@torch.no_grad()
def init_parameters(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """Re-draw every parameter from the given generator (ViT-style scheme).

    Linear/conv/embedding weights ~ N(0, 0.02), biases zero, layernorm at
    identity; any free nn.Parameter with >=2 dims (positional embeddings,
    query banks, codebooks) also gets N(0, 0.02), 1-dim ones get zeros.
    Walk order is module registration order, so the draw is deterministic.
    """
    handled: set[int] = set()
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            m.weight.normal_(0.0, 0.02, generator=generator)
            handled.add(id(m.weight))
            if m.bias is not None:
                m.bias.zero_()
                handled.add(id(m.bias))
        elif isinstance(m, nn.LayerNorm):
            if m.elementwise_affine:
                m.weight.fill_(1.0)
                m.bias.zero_()
                handled.update((id(m.weight), id(m.bias)))
        elif isinstance(m, nn.Embedding):
            m.weight.normal_(0.0, 0.02, generator=generator)
            handled.add(id(m.weight))
    for _, p in module.named_parameters():
        if id(p) in handled:
            continue
        if p.ndim >= 2:
            p.normal_(0.0, 0.02, generator=generator)
        else:
            p.zero_()
    return module


def timestep_embedding(t: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    """Sinusoidal embedding of a scalar in [0, 1] per batch element."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t.reshape(-1, 1) * scale * freqs.reshape(1, -1)
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, capture: list | None = None, mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if mask is not None:
            att = att.masked_fill(~mask, float("-inf"))
        w = att.softmax(dim=-1)
        if capture is not None:
            capture.append(w.detach())
        out = (w @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        m = ctx.shape[1]
        q = self.q(x).reshape(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        kv = self.kv(ctx).reshape(b, m, 2, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        out = (att.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-LN transformer block; optional cross-attention to a context."""

    def __init__(self, dim: int, n_heads: int, cross: bool = False, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads)
        self.cross = CrossAttention(dim, n_heads) if cross else None
        self.norm_ctx = nn.LayerNorm(dim) if cross else None
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x, ctx=None, capture=None, mask=None):
        x = x + self.attn(self.norm1(x), capture=capture, mask=mask)
        if self.cross is not None:
            if ctx is None:
                raise ValueError("block built with cross-attention needs a context")
            x = x + self.cross(self.norm_ctx(x), ctx)
        x = x + self.mlp(self.norm2(x))
        return x


class Transformer(nn.Module):
    def __init__(self, dim: int, depth: int, n_heads: int, cross: bool = False):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, n_heads, cross=cross) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, ctx=None, capture=None, mask=None):
        for blk in self.blocks:
            x = blk(x, ctx=ctx, capture=capture, mask=mask)
        return self.norm(x)


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, (H/p)*(W/p), p*p*C), row-major patches."""
    b, c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"spatial dims ({h},{w}) not divisible by patch {p}")
    gh, gw = h // p, w // p
    x = x.reshape(b, c, gh, p, gw, p)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(b, gh * gw, p * p * c)


def unpatchify(tokens: torch.Tensor, p: int, channels: int, height: int, width: int) -> torch.Tensor:
    """Inverse of patchify: (B, N, p*p*C) -> (B, C, H, W)."""
    b, n, _ = tokens.shape
    gh, gw = height // p, width // p
    if n != gh * gw:
        raise ValueError(f"token count {n} does not tile {height}x{width} with patch {p}")
    x = tokens.reshape(b, gh, gw, p, p, channels)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, channels, height, width)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
