"""ViT-style feature extractor whose attention and FFN weights accept
per-image low-rank amendments at runtime."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

PATCH_SIZE = 16
PATCH_DIM = PATCH_SIZE * PATCH_SIZE * 3
# grid of the learned positional table; other grids are interpolated
POS_GRID = 14
# CLIP pixel statistics; inputs arrive in [0, 1]
PIXEL_MEAN = (0.4815, 0.4578, 0.4082)
PIXEL_STD = (0.2686, 0.2613, 0.2758)


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 4
    dim: int = 128
    heads: int = 4
    mlp_ratio: float = 4.0
    patch_size: int = PATCH_SIZE

    def __post_init__(self) -> None:
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.patch_size != PATCH_SIZE:
            raise ValueError(f"patch_size is fixed at {PATCH_SIZE}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)


def normalize_pixels(images: torch.Tensor) -> torch.Tensor:
    """Per-channel standardisation of ``[..., 3, H, W]`` images in ``[0, 1]``."""
    mean = images.new_tensor(PIXEL_MEAN)[:, None, None]
    std = images.new_tensor(PIXEL_STD)[:, None, None]
    return (images - mean) / std


def patchify(images: torch.Tensor) -> torch.Tensor:
    """Flatten 16x16 patches in raster order.

    Args:
        images: ``[3, H, W]`` or ``[B, 3, H, W]``.

    Returns:
        ``[h*w, 768]`` (or ``[B, h*w, 768]``); each row is one patch flattened
        channel-major.
    """
    squeeze = images.dim() == 3
    if squeeze:
        images = images.unsqueeze(0)
    b, c, H, W = images.shape
    if H % PATCH_SIZE or W % PATCH_SIZE:
        raise ValueError(f"image size {H}x{W} is not a multiple of {PATCH_SIZE}")
    h, w = H // PATCH_SIZE, W // PATCH_SIZE
    x = images.reshape(b, c, h, PATCH_SIZE, w, PATCH_SIZE)
    x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, h * w, c * PATCH_SIZE * PATCH_SIZE)
    return x[0] if squeeze else x


class AdaptableLinear(nn.Linear):
    """Linear layer with an optional per-sample low-rank side path.

    With ``A: [B, out, r]`` and ``Bm: [B, r, in]`` the output for sample ``b``
    equals ``x @ (W + s * A[b] @ Bm[b]).T + bias``, computed without
    materialising the merged weight.
    """

    def forward(self, x: torch.Tensor, lowrank: tuple[torch.Tensor, torch.Tensor] | None = None, scale: float = 1.0):
        y = F.linear(x, self.weight, self.bias)
        if lowrank is None:
            return y
        A, Bm = lowrank
        if A.dim() == 2:
            A, Bm = A.unsqueeze(0), Bm.unsqueeze(0)
        # x: [B, T, in] -> [B, T, r] -> [B, T, out]
        side = torch.matmul(torch.matmul(x, Bm.transpose(1, 2)), A.transpose(1, 2))
        return y + scale * side


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = AdaptableLinear(dim, dim)
        self.k = AdaptableLinear(dim, dim)
        self.v = AdaptableLinear(dim, dim)
        self.o = AdaptableLinear(dim, dim)

    def forward(self, x, adapters=None, prefix="", scale=1.0):
        get = (lambda n: adapters.get(prefix + n)) if adapters is not None else (lambda n: None)
        b, t, d = x.shape
        q = self.q(x, get("q"), scale).view(b, t, self.heads, -1).transpose(1, 2)
        k = self.k(x, get("k"), scale).view(b, t, self.heads, -1).transpose(1, 2)
        v = self.v(x, get("v"), scale).view(b, t, self.heads, -1).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        out = att.softmax(dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, t, d)
        return self.o(out, get("o"), scale)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = AdaptableLinear(dim, hidden)
        self.fc2 = AdaptableLinear(hidden, dim)

    def forward(self, x, adapters=None, prefix="", scale=1.0):
        get = (lambda n: adapters.get(prefix + n)) if adapters is not None else (lambda n: None)
        x = x + self.attn(self.norm1(x), adapters, prefix + "attn.", scale)
        h = F.gelu(self.fc1(self.norm2(x), get("fc1"), scale))
        return x + self.fc2(h, get("fc2"), scale)


class Backbone(nn.Module):
    """Patch embedding, learned positional table and pre-norm blocks.

    No CLS token: the output is the spatial feature map ``[B, d, h, w]``.
    """

    def __init__(self, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.config = config
        d = config.dim
        self.patch_embed = nn.Linear(PATCH_DIM, d)
        self.pos_embed = nn.Parameter(torch.randn(1, d, POS_GRID, POS_GRID) * 0.02)
        self.blocks = nn.ModuleList(Block(d, config.heads, config.hidden) for _ in range(config.depth))
        self.norm = nn.LayerNorm(d)
        self.apply(_init)

    def target_shapes(self) -> dict[str, tuple[int, int]]:
        """Weight shape ``(out, in)`` of every adapter-targeted layer."""
        return {
            name: tuple(m.weight.shape)
            for name, m in self.named_modules()
            if isinstance(m, AdaptableLinear)
        }

    def _pos(self, h: int, w: int) -> torch.Tensor:
        pos = self.pos_embed
        if (h, w) != (POS_GRID, POS_GRID):
            pos = F.interpolate(pos, size=(h, w), mode="bicubic", align_corners=False)
        return pos.flatten(2).transpose(1, 2)

    def forward(self, images: torch.Tensor, adapters=None) -> torch.Tensor:
        """Return the feature map ``[B, d, h, w]``.

        ``adapters`` is an ``AdapterBundle`` (or ``None`` for the unmodified
        network). Its factors may carry a leading batch dimension matching
        ``images``.
        """
        b, _, H, W = images.shape
        h, w = H // PATCH_SIZE, W // PATCH_SIZE
        x = self.patch_embed(patchify(normalize_pixels(images))) + self._pos(h, w)
        lowrank, scale = None, 1.0
        if adapters is not None:
            adapters.check(self.target_shapes())
            lowrank, scale = adapters.factors, adapters.scale
        for i, blk in enumerate(self.blocks):
            x = blk(x, lowrank, f"blocks.{i}.", scale)
        x = self.norm(x)
        return x.transpose(1, 2).reshape(b, -1, h, w)


def _init(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def pool_global(fmap: torch.Tensor) -> torch.Tensor:
    """Spatial mean of ``[..., d, h, w]`` (not normalised)."""
    return fmap.flatten(-2).mean(-1)


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def embed_scan(slice_features: torch.Tensor) -> torch.Tensor:
    """Unit-norm scan embedding from per-slice pooled features ``[S, d]``."""
    if slice_features.shape[0] == 0:
        raise ValueError("a scan needs at least one slice")
    return l2_normalize(slice_features.mean(0))


def save_checkpoint(path: str | Path, state: Mapping[str, torch.Tensor], config: BackboneConfig, **extra) -> None:
    torch.save({"config": asdict(config), "state": dict(state), **extra}, path)


def load_checkpoint(path: str | Path) -> tuple[dict, BackboneConfig, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    config = BackboneConfig(**blob.pop("config"))
    state = blob.pop("state")
    return state, config, blob
