"""Noise decoder: maps target embeddings to L-inf bounded adversarial noise.

The budget is enforced structurally: the head emits unbounded values squashed
by tanh into (-1, 1) and multiplied by epsilon as the very last step, so the
bound holds for every weight setting and decode() scales linearly in epsilon.
"""

import math

import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError


class NoiseDecoder(torch.nn.Module):
    """Linear expansion to a coarse grid, two upsampling conv blocks, bounded head.

    Output shape is (n, 3, H, W) with every entry in [-epsilon, epsilon].
    """

    def __init__(self, embed_dim=32, output_shape=(32, 32, 3), epsilon=16 / 255,
                 width=32, seed=0, dtype=torch.float32):
        super().__init__()
        h, w, c = output_shape
        if c != 3:
            raise ConfigError(f"decoder emits 3-channel noise, got {c}")
        if h % 4 != 0 or w % 4 != 0:
            raise ConfigError(f"output sides must be multiples of 4, got {h}x{w}")
        if width % 4 != 0 or width < 4:
            raise ConfigError(f"width must be a positive multiple of 4, got {width}")
        if epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
        self.embed_dim = int(embed_dim)
        self.output_shape = (h, w, 3)
        self.epsilon = float(epsilon)
        self.width = int(width)
        self.seed = int(seed)
        h0, w0 = h // 4, w // 4
        self.h0, self.w0 = h0, w0
        self.lin = torch.nn.Linear(embed_dim, width * h0 * w0).to(dtype)
        self.c1 = torch.nn.Conv2d(width, width // 2, 3, padding=1).to(dtype)
        self.c2 = torch.nn.Conv2d(width // 2, width // 4, 3, padding=1).to(dtype)
        self.head = torch.nn.Conv2d(width // 4, 3, 3, padding=1).to(dtype)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                fan = p[0].numel() if p.dim() > 1 else 1
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(dtype)
                        / math.sqrt(fan))

    def forward(self, z):
        u = torch.tanh(self.lin(z)).view(-1, self.width, self.h0, self.w0)
        u = torch.tanh(self.c1(F.interpolate(u, scale_factor=2, mode="nearest")))
        u = torch.tanh(self.c2(F.interpolate(u, scale_factor=2, mode="nearest")))
        return torch.tanh(self.head(u)) * self.epsilon


def decode(decoder: NoiseDecoder, embeddings: torch.Tensor) -> torch.Tensor:
    """Run the decoder on an (n, d) embedding batch, returning (n, 3, H, W) noise."""
    if embeddings.dim() != 2:
        raise DimensionError(f"expected (n, d) embeddings, got {tuple(embeddings.shape)}")
    if embeddings.shape[1] != decoder.embed_dim:
        raise DimensionError(
            f"decoder expects embed_dim={decoder.embed_dim}, got {embeddings.shape[1]}")
    param = next(decoder.parameters())
    return decoder(embeddings.to(param.dtype))


def compose_adversarial(noise: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    """x' = clamp(clean + noise, 0, 1).

    Gradients pass through unclamped pixels and are zero on clamped ones
    (standard clamp subgradient). Clamping only shrinks the per-pixel
    deviation, so |x' - clean| <= epsilon everywhere.
    """
    if noise.shape != clean.shape:
        raise DimensionError(
            f"noise and clean shapes differ: {tuple(noise.shape)} vs {tuple(clean.shape)}")
    return torch.clamp(clean + noise, 0.0, 1.0)
