"""Frozen image encoders behind a shared embedding contract.

An encoder maps a batch of [0,1] images (n, 3, H, W) to an (n, d) matrix of
unit-norm rows. Weights are frozen at construction; preprocessing is declared
per encoder and applied inside encode() so attack pixels always live in raw
[0,1] space.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
import yaml

from .errors import ConfigError, DimensionError, InvalidInputError, LoadError


class Encoder(torch.nn.Module):
    """Base class carrying the metadata every encoder declares."""

    def __init__(self, name: str, input_shape: Tuple[int, int, int], embed_dim: int, preprocessing: str):
        super().__init__()
        self.name = name
        self.input_shape = tuple(input_shape)  # (H, W, channels)
        self.embed_dim = int(embed_dim)
        self.preprocessing = preprocessing

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


def encode(encoder: Encoder, images: torch.Tensor) -> torch.Tensor:
    """Embed a batch, returning (n, d) rows renormalized to unit length.

    Raises DimensionError on shape mismatch and InvalidInputError on NaN/Inf
    pixels. Gradients flow through the image argument; encoder weights stay
    frozen.
    """
    if images.dim() != 4 or images.shape[1] != 3:
        raise DimensionError(f"expected images of shape (n, 3, H, W), got {tuple(images.shape)}")
    h, w, _ = encoder.input_shape
    if images.shape[2] != h or images.shape[3] != w:
        raise DimensionError(
            f"encoder {encoder.name} expects {h}x{w} input, got {images.shape[2]}x{images.shape[3]}")
    if not torch.isfinite(images).all():
        raise InvalidInputError("images contain NaN or Inf pixels")
    param = next(encoder.parameters())
    out = encoder(images.to(param.dtype))
    # contract: rows unit-norm regardless of what the wrapped model emits
    return out / out.norm(dim=1, keepdim=True)


class ToyEncoder(Encoder):
    """Small fixed-weight encoder: strided conv, tanh, flatten, linear, normalize.

    Input is rescaled from [0,1] to [-1,1] before the convolution. Weights are
    drawn once from a seeded generator (std 1/sqrt(fan_in), small bias) and
    frozen, so outputs are a pure deterministic function of the input.
    """

    def __init__(self, seed: int, input_shape=(32, 32, 3), embed_dim=32, channels=8,
                 dtype=torch.float32):
        h, w, c = input_shape
        if c != 3:
            raise ConfigError(f"toy encoder takes 3-channel input, got {c}")
        if h % 4 != 0 or w % 4 != 0:
            raise ConfigError(f"toy encoder input sides must be multiples of 4, got {h}x{w}")
        if embed_dim < 2:
            raise ConfigError(f"embed_dim must be >= 2, got {embed_dim}")
        super().__init__(f"toy-s{seed}-d{embed_dim}", input_shape, embed_dim,
                         "scale [0,1] to [-1,1]")
        self.seed = seed
        self.conv = torch.nn.Conv2d(3, channels, kernel_size=4, stride=4).to(dtype)
        self.lin = torch.nn.Linear(channels * (h // 4) * (w // 4), embed_dim).to(dtype)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                if p.dim() > 1:
                    p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(dtype)
                            / math.sqrt(p[0].numel()))
                else:
                    p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(dtype) * 0.01)
        self.freeze()

    def forward(self, x):
        u = torch.tanh(self.conv(x * 2.0 - 1.0))  # (n, ch, H/4, W/4)
        v = self.lin(u.flatten(1))
        return v / v.norm(dim=1, keepdim=True)


def make_toy_encoder(seed: int, input_shape=(32, 32, 3), embed_dim=32, channels=8,
                     dtype=torch.float32) -> ToyEncoder:
    return ToyEncoder(seed, input_shape=input_shape, embed_dim=embed_dim, channels=channels,
                      dtype=dtype)


class ExternalEncoder(Encoder):
    """Adapter wrapping TorchScript weights behind the Encoder contract."""

    def __init__(self, name, module, input_shape, embed_dim, resize=None, mean=None, std=None):
        pre = []
        if resize is not None:
            pre.append(f"resize to {resize[0]}x{resize[1]}")
        if mean is not None:
            pre.append("channel mean/std normalization")
        super().__init__(name, input_shape, embed_dim, "; ".join(pre) or "none")
        self.module = module
        self.resize = resize
        self.register_buffer("mean", None if mean is None else torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", None if std is None else torch.tensor(std).view(1, 3, 1, 1))
        self.freeze()

    def forward(self, x):
        if self.resize is not None:
            x = F.interpolate(x, size=tuple(self.resize), mode="bilinear", align_corners=False)
        if self.mean is not None:
            x = (x - self.mean) / self.std
        v = self.module(x)
        return v / v.norm(dim=1, keepdim=True)


def load_external_encoder(config_path) -> ExternalEncoder:
    """Build an encoder from an adapter config file.

    The config declares the weight path (TorchScript), input shape, embed dim,
    and preprocessing recipe. Outputs are re-normalized at the adapter boundary
    whatever the wrapped model does.
    """
    config_path = Path(config_path)
    if not config_path.exists():
        raise LoadError(f"encoder config not found: {config_path}")
    with open(config_path) as f:
        cfg = yaml.safe_load(f)
    if not isinstance(cfg, dict):
        raise ConfigError(f"encoder config {config_path} is not a mapping")
    for key in ("weights", "input_shape", "embed_dim"):
        if key not in cfg:
            raise ConfigError(f"encoder config {config_path} missing required key {key!r}")
    weights = Path(cfg["weights"])
    if not weights.is_absolute():
        weights = config_path.parent / weights
    if not weights.exists():
        raise LoadError(f"encoder weights not found: {weights}")
    try:
        module = torch.jit.load(str(weights), map_location="cpu")
    except Exception as e:
        raise LoadError(f"failed to load encoder weights {weights}: {e}") from None
    for p in module.parameters():
        p.requires_grad_(False)

    shape = tuple(cfg["input_shape"])
    if len(shape) != 3 or shape[2] != 3:
        raise ConfigError(f"input_shape must be (H, W, 3), got {shape}")
    pre = cfg.get("preprocessing") or {}
    enc = ExternalEncoder(cfg.get("name", config_path.stem), module, shape,
                          int(cfg["embed_dim"]), resize=pre.get("resize"),
                          mean=pre.get("mean"), std=pre.get("std"))
    # probe once so a wrong declared dim fails at load, not mid-run
    with torch.no_grad():
        out = enc(torch.zeros(1, 3, shape[0], shape[1]))
    if out.dim() != 2 or out.shape[1] != enc.embed_dim:
        raise ConfigError(
            f"encoder {enc.name} declares embed_dim={enc.embed_dim} but emits {tuple(out.shape)}")
    return enc


@dataclass
class SurrogateEnsemble:
    """Primary encoder plus optional auxiliaries with normalized weights."""

    primary: Encoder
    auxiliaries: Tuple[Encoder, ...] = ()
    weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        self.auxiliaries = tuple(self.auxiliaries)
        m = 1 + len(self.auxiliaries)
        if self.weights is None:
            self.weights = tuple(1.0 / m for _ in range(m))
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != m:
            raise ConfigError(f"ensemble has {m} encoders but {len(self.weights)} weights")
        if any(w < 0 for w in self.weights):
            raise ConfigError(f"ensemble weights must be nonnegative, got {self.weights}")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigError(f"ensemble weights must sum to 1, got sum={sum(self.weights)!r}")

    @property
    def members(self):
        return (self.primary,) + self.auxiliaries
