"""Compact vision transformer exposing every block's [CLS] state.

Pre-norm blocks, a frozen random patch projector, fixed 2-D sine-cosine
positional embeddings, and one shared final normalization layer that is
applied to each block's [CLS] output to form the per-layer features.
"""

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, NumericFailure
from .initialization import init_parameters


@dataclass
class EncoderConfig:
    num_layers: int = 6
    embed_dim: int = 96
    num_heads: int = 3
    patch_size: int = 4
    image_size: int = 32
    mlp_ratio: float = 4.0
    in_channels: int = 3

    def validate(self):
        for name in ("num_layers", "embed_dim", "num_heads", "patch_size", "image_size", "in_channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"encoder.{name} must be a positive integer")
        if self.num_layers < 2:
            raise ConfigurationError(
                f"encoder.num_layers must be >= 2 (self-distillation needs an intermediate layer), "
                f"got {self.num_layers}"
            )
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"encoder.image_size ({self.image_size}) must be divisible by "
                f"encoder.patch_size ({self.patch_size})"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"encoder.embed_dim ({self.embed_dim}) must be divisible by "
                f"encoder.num_heads ({self.num_heads})"
            )
        if self.mlp_ratio <= 0:
            raise ConfigurationError(f"encoder.mlp_ratio must be > 0, got {self.mlp_ratio}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2


def positional_embedding_2d(grid_h: int, grid_w: int, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """Fixed 2-D sine-cosine embedding, one row per grid position (row-major).

    The dim axis is split into four equal bands: sin/cos over the width
    coordinate, then sin/cos over the height coordinate. Position (0, 0)
    therefore has 0 in every sin slot and 1 in every cos slot.
    """
    if dim % 4 != 0:
        raise ConfigurationError(f"positional embedding dim must be divisible by 4, got {dim}")
    ys, xs = torch.meshgrid(
        torch.arange(grid_h, dtype=torch.float64),
        torch.arange(grid_w, dtype=torch.float64),
        indexing="ij",
    )
    pos_dim = dim // 4
    omega = 1.0 / temperature ** (torch.arange(pos_dim, dtype=torch.float64) / pos_dim)
    out_w = xs.flatten()[:, None] * omega[None, :]
    out_h = ys.flatten()[:, None] * omega[None, :]
    emb = torch.cat([out_w.sin(), out_w.cos(), out_h.sin(), out_h.cos()], dim=1)
    return emb.float()


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Standard pre-norm block: attention and MLP residual branches."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class ViTEncoder(nn.Module):
    """Small ViT whose forward returns the [CLS] state of every block.

    The patch projector is randomly initialized once and frozen; positional
    embeddings are fixed sine-cosine with a zero vector for the [CLS] slot;
    the single final LayerNorm is shared by all per-layer taps.
    """

    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        d = config.embed_dim
        self.patch_proj = nn.Conv2d(config.in_channels, d, kernel_size=config.patch_size,
                                    stride=config.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.blocks = nn.ModuleList(
            TransformerBlock(d, config.num_heads, config.mlp_ratio)
            for _ in range(config.num_layers)
        )
        self.norm = nn.LayerNorm(d)

        init_parameters(self, seed)
        grid = config.grid_size
        pos = torch.cat([torch.zeros(1, d), positional_embedding_2d(grid, grid, d)], dim=0)
        self.register_buffer("pos_embed", pos.unsqueeze(0), persistent=False)
        # frozen by construction: never part of any optimizer's trainable set
        self.patch_proj.weight.requires_grad_(False)
        self.patch_proj.bias.requires_grad_(False)

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    def _pixels_of(self, batch):
        return batch.pixels if hasattr(batch, "pixels") else batch

    def patch_embed(self, batch) -> torch.Tensor:
        """Project patches, prepend [CLS], add positional embeddings: (N, 1+T, D)."""
        pixels = self._pixels_of(batch)
        if pixels.ndim != 4:
            raise ConfigurationError(f"expected NCHW pixels, got shape {tuple(pixels.shape)}")
        n, c, h, w = pixels.shape
        if c != self.config.in_channels:
            raise ConfigurationError(
                f"in_channels mismatch: batch has {c}, encoder expects {self.config.in_channels}"
            )
        if h != self.config.image_size or w != self.config.image_size:
            raise ConfigurationError(
                f"image_size mismatch: batch is {h}x{w}, encoder expects "
                f"{self.config.image_size}x{self.config.image_size}"
            )
        tokens = self.patch_proj(pixels).flatten(2).transpose(1, 2)
        cls = self.cls_token.to(tokens.dtype).expand(n, -1, -1)
        tokens = torch.cat([cls, tokens], dim=1)
        return tokens + self.pos_embed.to(tokens.dtype)

    def forward_all_layers(self, batch) -> torch.Tensor:
        """[CLS] output of every block after the shared final norm: (L, N, D)."""
        x = self.patch_embed(batch)
        per_layer = []
        for layer, block in enumerate(self.blocks, start=1):
            x = block(x)
            cls = self.norm(x[:, 0])
            if not torch.isfinite(cls).all():
                raise NumericFailure(f"non-finite activation at layer {layer}", layer=layer)
            per_layer.append(cls)
        return torch.stack(per_layer)

    def forward(self, batch) -> torch.Tensor:
        """Conventional final output: the last layer of the per-layer stack."""
        return self.forward_all_layers(batch)[-1]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]
