"""Shared 3D U-Net denoiser used by both diffusion stages.

Residual conv blocks with group normalization, sinusoidal timestep
embeddings injected as per-channel biases, strided-conv downsampling,
trilinear-resample + conv upsampling, and cross-attention guidance blocks
at configurable levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from guidegen import autodiff as ad
from guidegen import layers as nn
from guidegen.conditioning import add_cross_attend, cross_attend

__all__ = ["UNetConfig", "UNet3D", "build_unet", "timestep_embedding"]


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    out_channels: int
    channels: tuple = (32, 64, 128, 256)
    blocks_per_level: int = 2
    attention_levels: tuple = ()  # 1-based level indices, 1 = finest
    context_dim: int = 16
    response_dim: int = 16  # row width of the per-layer responses
    time_dim: int = 32
    norm_groups_cap: int = 8
    attn_residual: bool = True  # False gives the literal post-norm guidance block

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "attention_levels", tuple(int(a) for a in self.attention_levels))
        if not self.channels:
            raise ValueError("need at least one level of channels")
        bad = [a for a in self.attention_levels if not 1 <= a <= self.depth]
        if bad:
            raise ValueError(f"attention levels {bad} outside 1..{self.depth}")

    @property
    def depth(self) -> int:
        return len(self.channels)

    def to_config(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "channels": list(self.channels),
            "blocks_per_level": self.blocks_per_level,
            "attention_levels": list(self.attention_levels),
            "context_dim": self.context_dim,
            "response_dim": self.response_dim,
            "time_dim": self.time_dim,
            "attn_residual": self.attn_residual,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "UNetConfig":
        return cls(
            in_channels=int(cfg["in_channels"]),
            out_channels=int(cfg["out_channels"]),
            channels=tuple(cfg["channels"]),
            blocks_per_level=int(cfg.get("blocks_per_level", 2)),
            attention_levels=tuple(cfg.get("attention_levels", ())),
            context_dim=int(cfg.get("context_dim", 16)),
            response_dim=int(cfg.get("response_dim", 16)),
            time_dim=int(cfg.get("time_dim", 32)),
            attn_residual=bool(cfg.get("attn_residual", True)),
        )


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding: [sin(t*w_i)..., cos(t*w_i)...] with
    w_i = 10000^(-2i/dim) for i in 0..dim/2-1."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    if t < 0:
        raise ValueError("timestep must be non-negative")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * 2.0 * np.arange(half) / dim)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class UNet3D:
    """Fully convolutional denoiser; parameter shapes are independent of
    the input's spatial extent."""

    def __init__(self, config: UNetConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, ad.Parameter] = {}
        rng = np.random.default_rng(seed)
        p, ch = self.params, config.channels
        nn.add_conv(p, "stem", config.in_channels, ch[0], 3, rng)
        nn.add_linear(p, "time.mlp1", config.time_dim, config.time_dim, rng)
        nn.add_linear(p, "time.mlp2", config.time_dim, config.time_dim, rng)
        for i, c in enumerate(ch):
            for b in range(config.blocks_per_level):
                self._add_resblock(rng, f"enc{i}.b{b}", c)
            if (i + 1) in config.attention_levels:
                add_cross_attend(p, f"enc{i}.attn", c, config.response_dim,
                                 config.context_dim, rng)
            if i + 1 < len(ch):
                nn.add_conv(p, f"down{i}", c, ch[i + 1], 3, rng)
        for i in reversed(range(len(ch) - 1)):
            nn.add_conv(p, f"up{i}.proj", ch[i + 1], ch[i], 1, rng)
            nn.add_conv(p, f"up{i}.merge", 2 * ch[i], ch[i], 3, rng)
            for b in range(config.blocks_per_level):
                self._add_resblock(rng, f"dec{i}.b{b}", ch[i])
        nn.add_norm(p, "head.norm", ch[0])
        nn.add_conv(p, "head.out", ch[0], config.out_channels, 3, rng, zero=True)

    def _add_resblock(self, rng, name, c):
        p = self.params
        nn.add_norm(p, f"{name}.norm1", c)
        nn.add_conv(p, f"{name}.conv1", c, c, 3, rng)
        nn.add_linear(p, f"{name}.temb", self.config.time_dim, c, rng)
        nn.add_norm(p, f"{name}.norm2", c)
        nn.add_conv(p, f"{name}.conv2", c, c, 3, rng)

    # --- forward -----------------------------------------------------------

    def _resblock(self, name, x, temb_row):
        p = self.params
        c = x.shape[0]
        groups = nn.group_norm_groups(c, self.config.norm_groups_cap)
        h = ad.group_norm(x, p[f"{name}.norm1.g"].value, p[f"{name}.norm1.b"].value, groups)
        h = nn.conv(p, f"{name}.conv1", ad.silu(h))
        bias = nn.linear(p, f"{name}.temb", temb_row)  # [1, c]
        h = ad.add_bias(h, ad.reshape(bias, (c,)), axis=0)
        h = ad.group_norm(h, p[f"{name}.norm2.g"].value, p[f"{name}.norm2.b"].value, groups)
        h = nn.conv(p, f"{name}.conv2", ad.silu(h))
        return ad.add(x, h)

    def forward(self, x, t: int, r_layers=None, extra_channels=None) -> ad.Tensor:
        """Denoise one volume. x: [C, H, W, D] (Tensor or array); extra
        conditioning channels are concatenated ahead of the stem."""
        cfg = self.config
        x = ad.as_tensor(x)
        if extra_channels is not None:
            x = ad.concat([x, ad.as_tensor(extra_channels)], axis=0)
        if x.shape[0] != cfg.in_channels:
            raise ad.ShapeError(
                f"input has {x.shape[0]} channels, config expects {cfg.in_channels}"
            )
        div = 2 ** (cfg.depth - 1)
        if any(s % div for s in x.shape[1:]):
            raise ad.ShapeError(f"spatial dims {x.shape[1:]} not divisible by {div}")
        if cfg.attention_levels and r_layers is None:
            raise ValueError("attention levels configured but no layer responses given")
        if r_layers is not None and len(r_layers) < cfg.depth:
            raise ValueError(f"need {cfg.depth} layer responses, got {len(r_layers)}")
        p = self.params
        temb = ad.Tensor(timestep_embedding(t, cfg.time_dim).reshape(1, -1))
        temb = nn.linear(p, "time.mlp1", temb)
        temb = nn.linear(p, "time.mlp2", ad.silu(temb))
        h = nn.conv(p, "stem", x)
        skips = []
        for i, c in enumerate(cfg.channels):
            for b in range(cfg.blocks_per_level):
                h = self._resblock(f"enc{i}.b{b}", h, temb)
            if (i + 1) in cfg.attention_levels:
                h = cross_attend(p, f"enc{i}.attn", h, r_layers[i], cfg.context_dim,
                                 residual=cfg.attn_residual)
            if i + 1 < cfg.depth:
                skips.append(h)
                h = nn.conv(p, f"down{i}", h, stride=2)
        for i in reversed(range(cfg.depth - 1)):
            target = skips[i].shape[1:]
            h = ad.resample3d(h, target, mode="trilinear")
            h = nn.conv(p, f"up{i}.proj", h)
            h = nn.conv(p, f"up{i}.merge", ad.concat([h, skips[i]], axis=0))
            for b in range(cfg.blocks_per_level):
                h = self._resblock(f"dec{i}.b{b}", h, temb)
        groups = nn.group_norm_groups(cfg.channels[0], cfg.norm_groups_cap)
        h = ad.group_norm(h, p["head.norm.g"].value, p["head.norm.b"].value, groups)
        return nn.conv(p, "head.out", ad.silu(h))

    # --- reporting -----------------------------------------------------------

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def describe(self) -> str:
        lines = [f"{'parameter':44s} {'shape':20s} {'count':>10s}"]
        for name in sorted(self.params):
            p = self.params[name]
            lines.append(f"{name:44s} {str(p.shape):20s} {p.value.size:>10d}")
        lines.append(f"{'total':44s} {'':20s} {self.param_count():>10d}")
        return "\n".join(lines)


def build_unet(config: UNetConfig, seed: int = 0) -> UNet3D:
    """Deterministic construction: same seed, bit-identical parameters."""
    return UNet3D(config, seed=seed)
