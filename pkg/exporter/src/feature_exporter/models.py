"""Toy vision backbones with per-layer attention capture, plus a text encoder.

The models are deliberately small random-weight transformers: the exporter's
contract is about faithful capture and serialization, not pretrained quality.
Weights are deterministic given the seed, so repeated exports are
byte-identical.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class CaptureError(RuntimeError):
    pass


class Attention(nn.Module):
    """Multi-head self-attention that exposes pre-softmax Q/K/V per head."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.captured: tuple[torch.Tensor, torch.Tensor, torch.Tensor] | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, d = x.shape
        qkv = self.qkv(x).reshape(n, 3, self.heads, self.head_dim)
        q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]  # (n, heads, head_dim)
        self.captured = (q.detach(), k.detach(), v.detach())
        attn = torch.einsum("nhd,mhd->hnm", q, k) / math.sqrt(self.head_dim)
        weights = attn.softmax(dim=-1)
        out = torch.einsum("hnm,mhd->nhd", weights, v).reshape(n, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim)
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ToyViT(nn.Module):
    """Tiny ViT with a CLS token and learned positional embeddings.

    Positional embeddings live on the native grid and are bicubically
    interpolated when the input resolution differs.
    """

    def __init__(
        self,
        patch: int = 8,
        dim: int = 32,
        heads: int = 4,
        depth: int = 2,
        native_size: int = 32,
        seed: int = 0,
    ):
        super().__init__()
        torch.manual_seed(seed)
        self.patch = patch
        self.dim = dim
        self.native_grid = native_size // patch
        self.embed = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        self.cls_token = nn.Parameter(torch.randn(1, dim) * 0.02)
        self.pos_embed = nn.Parameter(
            torch.randn(1 + self.native_grid**2, dim) * 0.02
        )
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.eval()

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def heads(self) -> int:
        return self.blocks[0].attn.heads

    def _positional(self, grid: tuple[int, int]) -> torch.Tensor:
        gh, gw = grid
        if (gh, gw) == (self.native_grid, self.native_grid):
            return self.pos_embed
        cls_pos = self.pos_embed[:1]
        spatial = self.pos_embed[1:].reshape(
            1, self.native_grid, self.native_grid, self.dim
        )
        resized = F.interpolate(
            spatial.permute(0, 3, 1, 2),
            size=grid,
            mode="bicubic",
            align_corners=False,
        )
        flat = resized.permute(0, 2, 3, 1).reshape(gh * gw, self.dim)
        return torch.cat([cls_pos, flat], dim=0)

    def tokens(self, image: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
        """(1 + gh*gw, dim) token sequence (CLS first) and the token grid."""
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError(f"expected a (3, H, W) image, got {tuple(image.shape)}")
        feats = self.embed(image.unsqueeze(0))[0]  # (dim, gh, gw)
        gh, gw = feats.shape[1], feats.shape[2]
        seq = feats.permute(1, 2, 0).reshape(gh * gw, self.dim)
        seq = torch.cat([self.cls_token, seq], dim=0)
        return seq + self._positional((gh, gw)), (gh, gw)

    @torch.no_grad()
    def forward(self, image: torch.Tensor):
        """Run all blocks; returns (final tokens sans CLS, grid).

        Per-block Q/K/V stay on each block's attention module in
        ``captured``; callers harvest them after the forward pass.
        """
        x, grid = self.tokens(image)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)[1:], grid


class ToyDiffusion(ToyViT):
    """ToyViT conditioned on a noise timestep, diffusion-style.

    The input is mixed with seeded Gaussian noise at a timestep-dependent
    level, and a sinusoidal timestep embedding is added to every token.
    """

    MAX_T = 1000

    def __init__(self, **kwargs):
        super().__init__(**kwargs)

    def _time_embedding(self, t: int) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half
        )
        angles = t * freqs
        return torch.cat([angles.sin(), angles.cos()])[: self.dim]

    @torch.no_grad()
    def forward(self, image: torch.Tensor, timestep: int = 0, noise_seed: int = 0):
        level = timestep / self.MAX_T
        gen = torch.Generator().manual_seed(noise_seed)
        noise = torch.randn(image.shape, generator=gen)
        noisy = (1.0 - level) * image + level * noise
        x, grid = self.tokens(noisy)
        x = x + self._time_embedding(timestep)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)[1:], grid


def build_model(model_id: str, seed: int = 0) -> ToyViT:
    if model_id == "toy-vit":
        return ToyViT(seed=seed)
    if model_id == "toy-vit-deep":
        return ToyViT(depth=4, seed=seed)
    if model_id == "toy-diffusion":
        return ToyDiffusion(seed=seed)
    raise KeyError(model_id)


# ---------------------------------------------------------------------------
# Text encoder
# ---------------------------------------------------------------------------

_TEXT_DIM = 32
_TEXT_BUCKETS = 256


def _trigram_counts(text: str) -> np.ndarray:
    padded = f"  {text.lower()} "
    counts = np.zeros(_TEXT_BUCKETS)
    for i in range(len(padded) - 2):
        tri = padded[i : i + 3]
        counts[hash_trigram(tri)] += 1.0
    return counts


def hash_trigram(tri: str) -> int:
    # stable across processes (unlike builtin hash with PYTHONHASHSEED)
    acc = 0
    for ch in tri:
        acc = (acc * 131 + ord(ch)) % (2**31)
    return acc % _TEXT_BUCKETS


class ToyTextEncoder:
    """Deterministic trigram-hash text embedding with a fixed projection."""

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((_TEXT_BUCKETS, _TEXT_DIM)) / np.sqrt(
            _TEXT_BUCKETS
        )

    def encode(self, text: str) -> np.ndarray:
        counts = _trigram_counts(text)
        vec = counts @ self.projection
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise ValueError(f"text {text!r} produced a zero embedding")
        return vec / norm
