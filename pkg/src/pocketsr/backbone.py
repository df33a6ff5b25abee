"""Configurable SD-style denoising U-Net with depth-labeled stages.

Four resolution depths (I shallow/high-res .. IV deep/low-res, mid block
included in IV). Stage-boundary resampling is done by residual blocks so that
depth-targeted resblock pruning covers the resamplers too. Transformer blocks
(self-attention, cross-attention, feed-forward) sit at depths I-III plus the
mid block, matching SD1.x-style layouts.

Conditioning is a fixed diffusion timestep (sinusoid computed once, constant
across training) plus a single learnable token standing in for text input.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .lite_ed import CrossNormalizedInjection

DEPTHS = ("I", "II", "III", "IV")
MODULE_KINDS = ("resblock", "self_attention", "cross_attention", "ffn")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def group_count(channels: int, preferred: int) -> int:
    """Largest divisor of `channels` not exceeding `preferred`."""
    g = min(preferred, channels)
    while channels % g != 0:
        g -= 1
    return g


def attention_heads(channels: int, head_dim: int) -> int:
    """Largest divisor of `channels` not exceeding channels // head_dim."""
    return group_count(channels, max(1, channels // head_dim))


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 320
    channel_multipliers: tuple = (1, 2, 4, 4)
    blocks_per_depth: int = 2
    attention_head_dim: int = 64
    latent_channels: int = 4
    width_ratio: float = 1.0
    context_dim: int = 768
    norm_groups: int = 32
    injection_channels: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        if len(self.channel_multipliers) != 4:
            raise ValueError(
                f"channel_multipliers must list exactly 4 depths, got "
                f"{len(self.channel_multipliers)}"
            )
        if not 0.0 < self.width_ratio <= 1.0:
            raise ValueError(f"width_ratio must be in (0, 1], got {self.width_ratio}")
        if self.base_channels % 2 != 0:
            raise ValueError("base_channels must be even (timestep sinusoid)")
        if self.blocks_per_depth < 1:
            raise ValueError("blocks_per_depth must be positive")
        for d in range(4):
            if self.width(d) < 8:
                raise ValueError(
                    f"depth {DEPTHS[d]} channel count {self.width(d)} is below the "
                    f"minimum of 8 after width scaling"
                )

    def width(self, depth_index: int) -> int:
        return round_half_up(self.width_ratio * self.base_channels
                             * self.channel_multipliers[depth_index])

    @property
    def widths(self) -> tuple:
        return tuple(self.width(d) for d in range(4))

    @property
    def temb_dim(self) -> int:
        return 4 * self.width(0)

    @property
    def time_sinusoid_dim(self) -> int:
        return self.base_channels


def timestep_sinusoid(t: int, dim: int) -> torch.Tensor:
    """Standard DDPM sinusoidal embedding of a single integer timestep."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = float(t) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)])


class ConditioningState(nn.Module):
    """Fixed-timestep embedding plus a single learnable context token.

    The sinusoid is a buffer derived from the fixed timestep, so it is
    constant across every forward pass and optimizer step. The text token is
    the one trainable piece and is broadcast as a length-1 sequence.
    """

    def __init__(self, context_dim: int, time_dim: int, fixed_timestep: int = 999):
        super().__init__()
        self.fixed_timestep = fixed_timestep
        self.register_buffer("time_base", timestep_sinusoid(fixed_timestep, time_dim))
        self.text_token = nn.Parameter(torch.randn(1, 1, context_dim) * 0.02)

    def tokens(self, batch: int) -> torch.Tensor:
        return self.text_token.expand(batch, -1, -1)


class ResBlock(nn.Module):
    """GroupNorm/SiLU residual block with optional embedded 2x resampling."""

    def __init__(self, in_channels: int, out_channels: int, temb_dim: int,
                 groups: int = 32, resample: str | None = None):
        super().__init__()
        if resample not in (None, "down", "up"):
            raise ValueError(f"unknown resample mode {resample!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.resample = resample
        self.norm1 = nn.GroupNorm(group_count(in_channels, groups), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1,
                               stride=2 if resample == "down" else 1)
        self.temb_proj = nn.Linear(temb_dim, out_channels)
        self.norm2 = nn.GroupNorm(group_count(out_channels, groups), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (nn.Conv2d(in_channels, out_channels, 1)
                     if in_channels != out_channels else None)
        self.act = nn.SiLU()

    def forward(self, x, temb):
        h = self.act(self.norm1(x))
        if self.resample == "up":
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = self.conv1(h)
        if self.resample == "down":
            x = F.avg_pool2d(x, 2)
        h = h + self.temb_proj(self.act(temb))[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class SelfAttention(nn.Module):
    """Multi-head softmax self-attention over token sequences."""

    def __init__(self, dim: int, head_dim: int = 64):
        super().__init__()
        self.dim = dim
        self.heads = attention_heads(dim, head_dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def _split(self, x):
        b, l, _ = x.shape
        return x.view(b, l, self.heads, -1).transpose(1, 2)

    def forward(self, x):
        q, k, v = self._split(self.to_q(x)), self._split(self.to_k(x)), self._split(self.to_v(x))
        scale = q.shape[-1] ** -0.5
        attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(x.shape)
        return self.to_out(out)


class CrossAttention(nn.Module):
    """Multi-head softmax attention of spatial tokens onto a context sequence."""

    def __init__(self, dim: int, context_dim: int, head_dim: int = 64):
        super().__init__()
        self.dim = dim
        self.context_dim = context_dim
        self.heads = attention_heads(dim, head_dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def _split(self, x):
        b, l, _ = x.shape
        return x.view(b, l, self.heads, -1).transpose(1, 2)

    def forward(self, x, context):
        q = self._split(self.to_q(x))
        k = self._split(self.to_k(context))
        v = self._split(self.to_v(context))
        scale = q.shape[-1] ** -0.5
        attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(x.shape)
        return self.to_out(out)


class FeedForward(nn.Module):
    """Two-layer GELU MLP applied per token."""

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        self.dim = dim
        self.hidden = hidden if hidden is not None else 4 * dim
        self.fc1 = nn.Linear(dim, self.hidden)
        self.fc2 = nn.Linear(self.hidden, dim)
        self.act = nn.GELU()

    def forward(self, x, context=None):
        return self.fc2(self.act(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm transformer block on flattened spatial tokens.

    `attn1`, `attn2` and `ff` are the prunable units; they can be swapped for
    lightweight replacements without touching this block's plumbing.
    """

    def __init__(self, dim: int, context_dim: int, head_dim: int = 64, groups: int = 32):
        super().__init__()
        self.dim = dim
        self.norm_in = nn.GroupNorm(group_count(dim, groups), dim)
        self.proj_in = nn.Conv2d(dim, dim, 1)
        self.ln1 = nn.LayerNorm(dim)
        self.attn1 = SelfAttention(dim, head_dim)
        self.ln2 = nn.LayerNorm(dim)
        self.attn2 = CrossAttention(dim, context_dim, head_dim)
        self.ln3 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)
        self.proj_out = nn.Conv2d(dim, dim, 1)

    def forward(self, x, context):
        b, c, h, w = x.shape
        residual = x
        x = self.proj_in(self.norm_in(x))
        tokens = x.flatten(2).transpose(1, 2)
        tokens = self.attn1(self.ln1(tokens)) + tokens
        tokens = self.attn2(self.ln2(tokens), context) + tokens
        tokens = self.ff(self.ln3(tokens)) + tokens
        x = tokens.transpose(1, 2).view(b, c, h, w)
        return self.proj_out(x) + residual


class StageUnit(nn.Module):
    """One resblock plus (at depths I-III) one transformer block."""

    def __init__(self, res: ResBlock, attn: TransformerBlock | None):
        super().__init__()
        self.res = res
        self.attn = attn

    def forward(self, x, temb, context):
        x = self.res(x, temb)
        if self.attn is not None:
            x = self.attn(x, context)
        return x


class DownStage(nn.Module):
    def __init__(self, units, resample: ResBlock | None):
        super().__init__()
        self.units = nn.ModuleList(units)
        self.resample = resample


class MidStage(nn.Module):
    def __init__(self, res1: ResBlock, attn: TransformerBlock, res2: ResBlock):
        super().__init__()
        self.res1 = res1
        self.attn = attn
        self.res2 = res2

    def forward(self, x, temb, context):
        x = self.res1(x, temb)
        x = self.attn(x, context)
        return self.res2(x, temb)


class UpStage(nn.Module):
    def __init__(self, units, resample: ResBlock | None):
        super().__init__()
        self.units = nn.ModuleList(units)
        self.resample = resample


@dataclass(frozen=True)
class DepthEntry:
    kind: str
    depth: str
    position: str


@dataclass
class DepthMap:
    """Maps every prunable submodule path to its (kind, depth, position)."""

    entries: dict = field(default_factory=dict)

    def add(self, name: str, kind: str, depth: str, position: str):
        if name in self.entries:
            raise ValueError(f"submodule {name} registered twice in the depth map")
        self.entries[name] = DepthEntry(kind, depth, position)

    def sites(self, kind: str | None = None, depth: str | None = None) -> list:
        return [
            name for name, e in self.entries.items()
            if (kind is None or e.kind == kind) and (depth is None or e.depth == depth)
        ]

    def counts(self) -> Counter:
        return Counter((e.kind, e.depth) for e in self.entries.values())


class UNetModel(nn.Module):
    """The four-depth denoising U-Net.

    forward(latent, injected=None, cond=None) preserves the latent shape.
    When `injected` is given, it is fused right after the initial convolution
    through a zero-initialized cross-normalization gate, so a freshly built
    model is bitwise indifferent to the injection.
    """

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        c = config.widths
        bpd = config.blocks_per_depth
        groups = config.norm_groups
        head_dim = config.attention_head_dim
        temb_dim = config.temb_dim
        self.depth_map = DepthMap()

        self.cond = ConditioningState(config.context_dim, config.time_sinusoid_dim)
        self.conv_in = nn.Conv2d(config.latent_channels, c[0], 3, padding=1)
        self.injection = (CrossNormalizedInjection(config.injection_channels, c[0])
                          if config.injection_channels else None)
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_sinusoid_dim, temb_dim),
            nn.SiLU(),
            nn.Linear(temb_dim, temb_dim),
        )

        def res(ci, co, resample=None):
            return ResBlock(ci, co, temb_dim, groups=groups, resample=resample)

        def tblock(ci):
            return TransformerBlock(ci, config.context_dim, head_dim, groups=groups)

        def register_transformer(prefix, depth, position):
            self.depth_map.add(f"{prefix}.attn1", "self_attention", depth, position)
            self.depth_map.add(f"{prefix}.attn2", "cross_attention", depth, position)
            self.depth_map.add(f"{prefix}.ff", "ffn", depth, position)

        # down path
        self.down_stages = nn.ModuleList()
        prev = c[0]
        skip_channels = [c[0]]
        for d in range(4):
            units = []
            for j in range(bpd):
                units.append(StageUnit(res(prev, c[d]), tblock(c[d]) if d < 3 else None))
                prev = c[d]
                skip_channels.append(c[d])
                self.depth_map.add(f"down_stages.{d}.units.{j}.res",
                                   "resblock", DEPTHS[d], "down")
                if d < 3:
                    register_transformer(f"down_stages.{d}.units.{j}.attn",
                                         DEPTHS[d], "down")
            resample = res(c[d], c[d], "down") if d < 3 else None
            if resample is not None:
                skip_channels.append(c[d])
                self.depth_map.add(f"down_stages.{d}.resample",
                                   "resblock", DEPTHS[d], "down")
            self.down_stages.append(DownStage(units, resample))

        # mid (depth IV)
        self.mid = MidStage(res(c[3], c[3]), tblock(c[3]), res(c[3], c[3]))
        self.depth_map.add("mid.res1", "resblock", "IV", "mid")
        self.depth_map.add("mid.res2", "resblock", "IV", "mid")
        register_transformer("mid.attn", "IV", "mid")

        # up path, deepest stage first
        self.up_stages = nn.ModuleList()
        h_ch = c[3]
        for k, d in enumerate(reversed(range(4))):
            units = []
            for j in range(bpd + 1):
                s_ch = skip_channels.pop()
                units.append(StageUnit(res(h_ch + s_ch, c[d]),
                                       tblock(c[d]) if d < 3 else None))
                h_ch = c[d]
                self.depth_map.add(f"up_stages.{k}.units.{j}.res",
                                   "resblock", DEPTHS[d], "up")
                if d < 3:
                    register_transformer(f"up_stages.{k}.units.{j}.attn",
                                         DEPTHS[d], "up")
            resample = res(c[d], c[d], "up") if d > 0 else None
            if resample is not None:
                self.depth_map.add(f"up_stages.{k}.resample",
                                   "resblock", DEPTHS[d], "up")
            self.up_stages.append(UpStage(units, resample))

        self.out_norm = nn.GroupNorm(group_count(c[0], groups), c[0])
        self.conv_out = nn.Conv2d(c[0], config.latent_channels, 3, padding=1)
        self.act = nn.SiLU()

    TAP_NAMES = ("down.I", "down.II", "down.III", "down.IV", "mid",
                 "up.IV", "up.III", "up.II", "up.I")

    def forward_with_taps(self, latent, injected=None, cond=None, taps=None):
        """Run the network, optionally recording stage-output features.

        Returns (output, {tap_name: feature}) where features are collected at
        the requested subset of TAP_NAMES.
        """
        cond = cond if cond is not None else self.cond
        wanted = set(taps) if taps is not None else set()
        unknown = wanted.difference(self.TAP_NAMES)
        if unknown:
            raise ValueError(f"unknown tap names: {sorted(unknown)}")
        feats = {}

        if latent.shape[1] != self.config.latent_channels:
            raise ValueError(
                f"latent has {latent.shape[1]} channels, expected "
                f"{self.config.latent_channels}"
            )
        if latent.shape[-2] % 8 != 0 or latent.shape[-1] % 8 != 0:
            raise ValueError(
                f"latent spatial size {tuple(latent.shape[-2:])} must be divisible "
                f"by 8 for the four-depth U-Net"
            )

        temb = self.time_mlp(cond.time_base.unsqueeze(0))
        context = cond.tokens(latent.shape[0])

        h = self.conv_in(latent)
        if injected is not None:
            if self.injection is None:
                raise ValueError("model was built without an injection path "
                                 "(injection_channels is unset)")
            h = self.injection(h, injected)

        skips = [h]
        for d, stage in enumerate(self.down_stages):
            for unit in stage.units:
                h = unit(h, temb, context)
                skips.append(h)
            if stage.resample is not None:
                h = stage.resample(h, temb)
                skips.append(h)
            name = f"down.{DEPTHS[d]}"
            if name in wanted:
                feats[name] = h

        h = self.mid(h, temb, context)
        if "mid" in wanted:
            feats["mid"] = h

        for k, stage in enumerate(self.up_stages):
            for unit in stage.units:
                h = unit(torch.cat([h, skips.pop()], dim=1), temb, context)
            if stage.resample is not None:
                h = stage.resample(h, temb)
            name = f"up.{DEPTHS[3 - k]}"
            if name in wanted:
                feats[name] = h

        out = self.conv_out(self.act(self.out_norm(h)))
        return out, feats

    def forward(self, latent, injected=None, cond=None):
        return self.forward_with_taps(latent, injected=injected, cond=cond)[0]


def build_unet(config: UNetConfig) -> UNetModel:
    """Construct a fresh U-Net; raises on invalid configurations."""
    return UNetModel(config)


def label_depths(model: UNetModel) -> DepthMap:
    """Return the model's depth map after validating its invariants."""
    dm = model.depth_map
    counts = dm.counts()
    for kind in MODULE_KINDS:
        present = {d for (k, d) in counts if k == kind}
        if kind == "resblock" and present != set(DEPTHS):
            raise AssertionError(f"resblocks missing at depths {set(DEPTHS) - present}")
        if not present:
            raise AssertionError(f"no {kind} sites registered")
    for name, entry in dm.entries.items():
        if name.startswith("mid.") and entry.depth != "IV":
            raise AssertionError("mid-block submodules must be labeled depth IV")
        model.get_submodule(name)  # every entry must resolve
    return dm
