"""Online annealing pruning.

Each targeted submodule is paired with a lightweight replacement and both run
in parallel; the output is the convex blend

    y = sigma * original(x) + (1 - sigma) * replacement(x)

with sigma = max(0, (T - t) / T) decaying from 1 to 0 over T steps. Original
modules stay frozen throughout and are dropped entirely at finalization.

Replacement catalog: depthwise-separable convolutions for residual blocks,
single-head linear attention for self-attention, a context-free pointwise FFN
for cross-attention, and a 4x-narrower hidden layer for feed-forward blocks.
"""
from __future__ import annotations

from dataclasses import dataclass, replace as dataclass_replace

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import (
    DEPTHS,
    CrossAttention,
    DepthMap,
    FeedForward,
    ResBlock,
    SelfAttention,
    UNetConfig,
    UNetModel,
    build_unet,
)


def sigma(t: int, total_steps: int) -> float:
    """Annealing coefficient: 1 at t=0, linear decay, clamped to 0 for t >= T."""
    if total_steps < 1:
        raise ValueError(f"total annealing steps must be >= 1, got {total_steps}")
    if t < 0:
        raise ValueError(f"step must be non-negative, got {t}")
    return max(0.0, (total_steps - t) / total_steps)


class AnnealingSchedule:
    """Shared (T, t) state; stepped once per optimizer step."""

    def __init__(self, total_steps: int, step: int = 0):
        if total_steps < 1:
            raise ValueError(f"total annealing steps must be >= 1, got {total_steps}")
        self.total_steps = total_steps
        self.step = step

    def sigma(self) -> float:
        return sigma(self.step, self.total_steps)

    def advance(self, n: int = 1):
        self.step += n

    @property
    def complete(self) -> bool:
        return self.step >= self.total_steps


class AnnealedPair(nn.Module):
    """Frozen original + trainable replacement sharing an annealing schedule.

    At the endpoints the blend short-circuits, so sigma=1 reproduces the
    original bitwise and sigma=0 reproduces the replacement bitwise.
    """

    def __init__(self, original: nn.Module, replacement: nn.Module,
                 schedule: AnnealingSchedule, kind: str):
        super().__init__()
        original.requires_grad_(False)
        self.original = original
        self.replacement = replacement
        self.schedule = schedule
        self.kind = kind

    def forward(self, *args, **kwargs):
        s = self.schedule.sigma()
        if s >= 1.0:
            return self.original(*args, **kwargs)
        if s <= 0.0:
            return self.replacement(*args, **kwargs)
        a = self.original(*args, **kwargs)
        b = self.replacement(*args, **kwargs)
        if a.shape != b.shape:
            raise ValueError(
                f"original and replacement disagree on output shape: "
                f"{tuple(a.shape)} vs {tuple(b.shape)}"
            )
        return s * a + (1.0 - s) * b


def annealed_forward(pair: AnnealedPair, *args, **kwargs):
    return pair(*args, **kwargs)


def positive_feature_map(u: torch.Tensor) -> torch.Tensor:
    """psi(u) = exp(u) for u <= 0, u + 1 for u > 0; strictly positive, C1."""
    return torch.where(u > 0, u + 1.0, torch.exp(u.clamp(max=0.0)))


def linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Kernelized attention: out_i = sum_j psi(q_i).psi(k_j) v_j / sum_k psi(q_i).psi(k_k).

    Weights are nonnegative and sum to one per query, so each output row is a
    convex combination of value rows, at cost linear in sequence length.
    """
    if k.shape[-2] == 0:
        raise ValueError("zero-length key sequence")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("query and key feature dimensions differ")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("key and value sequence lengths differ")
    fq = positive_feature_map(q)
    fk = positive_feature_map(k)
    kv = fk.transpose(-2, -1) @ v
    denom = fq @ fk.sum(dim=-2, keepdim=True).transpose(-2, -1)
    return (fq @ kv) / denom


class DepthwiseSeparableConv2d(nn.Module):
    """3x3 depthwise convolution followed by a 1x1 pointwise convolution."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.depthwise = nn.Conv2d(in_channels, in_channels, 3, padding=1,
                                   stride=stride, groups=in_channels)
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))

    def init_from_dense(self, conv: nn.Conv2d):
        """Delta depthwise kernel + the dense kernel's center tap as pointwise."""
        with torch.no_grad():
            self.depthwise.weight.zero_()
            self.depthwise.weight[:, 0, 1, 1] = 1.0
            self.depthwise.bias.zero_()
            self.pointwise.weight.copy_(conv.weight[:, :, 1:2, 1:2])
            if conv.bias is not None:
                self.pointwise.bias.copy_(conv.bias)


class DepthwiseSeparableResBlock(nn.Module):
    """ResBlock with both 3x3 convolutions made depthwise-separable.

    Normalization layers, activation, timestep projection and the 1x1 shortcut
    are carried over from the dense block unchanged.
    """

    def __init__(self, in_channels: int, out_channels: int, temb_dim: int,
                 groups: int, resample: str | None = None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.resample = resample
        from .backbone import group_count
        self.norm1 = nn.GroupNorm(group_count(in_channels, groups), in_channels)
        self.conv1 = DepthwiseSeparableConv2d(in_channels, out_channels,
                                              stride=2 if resample == "down" else 1)
        self.temb_proj = nn.Linear(temb_dim, out_channels)
        self.norm2 = nn.GroupNorm(group_count(out_channels, groups), out_channels)
        self.conv2 = DepthwiseSeparableConv2d(out_channels, out_channels)
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

    @classmethod
    def from_original(cls, block: ResBlock) -> "DepthwiseSeparableResBlock":
        temb_dim = block.temb_proj.in_features
        groups = block.norm1.num_groups
        repl = cls(block.in_channels, block.out_channels, temb_dim,
                   groups=max(groups, block.norm2.num_groups), resample=block.resample)
        with torch.no_grad():
            repl.norm1.load_state_dict(block.norm1.state_dict())
            repl.norm2.load_state_dict(block.norm2.state_dict())
            repl.temb_proj.load_state_dict(block.temb_proj.state_dict())
            if block.skip is not None:
                repl.skip.load_state_dict(block.skip.state_dict())
        repl.conv1.init_from_dense(block.conv1)
        repl.conv2.init_from_dense(block.conv2)
        return repl


class LinearSelfAttention(nn.Module):
    """Single-head linear attention at half the inner width."""

    def __init__(self, dim: int, inner: int | None = None):
        super().__init__()
        self.dim = dim
        self.inner = inner if inner is not None else max(1, dim // 2)
        self.to_q = nn.Linear(dim, self.inner, bias=False)
        self.to_k = nn.Linear(dim, self.inner, bias=False)
        self.to_v = nn.Linear(dim, self.inner, bias=False)
        self.to_out = nn.Linear(self.inner, dim)

    def forward(self, x):
        out = linear_attention(self.to_q(x), self.to_k(x), self.to_v(x))
        return self.to_out(out)


class QueryOnlyFFN(nn.Module):
    """Cross-attention stand-in: a pointwise FFN that ignores the context."""

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        self.dim = dim
        self.hidden = hidden if hidden is not None else max(1, dim // 4)
        self.fc1 = nn.Linear(dim, self.hidden)
        self.fc2 = nn.Linear(self.hidden, dim)
        self.act = nn.GELU()

    def forward(self, x, context=None):
        return self.fc2(self.act(self.fc1(x)))


def make_replacement(kind: str, original: nn.Module) -> nn.Module:
    """Build the lightweight counterpart for one prunable module."""
    if kind == "resblock":
        if not isinstance(original, ResBlock):
            raise ValueError(f"expected a ResBlock, got {type(original).__name__}")
        return DepthwiseSeparableResBlock.from_original(original)
    if kind == "self_attention":
        if not isinstance(original, SelfAttention):
            raise ValueError(f"expected SelfAttention, got {type(original).__name__}")
        return LinearSelfAttention(original.dim)
    if kind == "cross_attention":
        if not isinstance(original, CrossAttention):
            raise ValueError(f"expected CrossAttention, got {type(original).__name__}")
        return QueryOnlyFFN(original.dim)
    if kind == "ffn":
        if not isinstance(original, FeedForward):
            raise ValueError(f"expected FeedForward, got {type(original).__name__}")
        if original.hidden % 4 != 0:
            raise ValueError(f"FFN hidden dim {original.hidden} is not divisible by 4")
        return FeedForward(original.dim, hidden=original.hidden // 4)
    raise ValueError(f"unknown module kind {kind!r}")


_ALL_DEPTHS = frozenset(DEPTHS)


@dataclass(frozen=True)
class PruningPlan:
    """Which (kind, depth) sites to replace, plus the channel-width ratio."""

    resblock_depths: frozenset = frozenset({"III", "IV"})
    ffn_depths: frozenset = frozenset({"III", "IV"})
    self_attention_depths: frozenset = frozenset({"IV"})
    cross_attention_depths: frozenset = frozenset({"I", "II", "III", "IV"})
    channel_ratio: float = 0.7

    def __post_init__(self):
        for field_name in ("resblock_depths", "ffn_depths",
                           "self_attention_depths", "cross_attention_depths"):
            depths = frozenset(getattr(self, field_name))
            object.__setattr__(self, field_name, depths)
            bad = depths - _ALL_DEPTHS
            if bad:
                raise ValueError(f"{field_name} contains unknown depths {sorted(bad)}")
        if not 0.0 < self.channel_ratio <= 1.0:
            raise ValueError(f"channel_ratio must be in (0, 1], got {self.channel_ratio}")

    @classmethod
    def empty(cls) -> "PruningPlan":
        return cls(frozenset(), frozenset(), frozenset(), frozenset(), 1.0)

    def kind_depths(self) -> dict:
        return {
            "resblock": self.resblock_depths,
            "ffn": self.ffn_depths,
            "self_attention": self.self_attention_depths,
            "cross_attention": self.cross_attention_depths,
        }

    def module_count(self) -> int:
        return sum(len(v) for v in self.kind_depths().values())


def channel_prune(config: UNetConfig, ratio: float):
    """Narrow every width by `ratio`; returns (config, teacher-slice initializer)."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"channel ratio must be in (0, 1], got {ratio}")
    try:
        narrowed = dataclass_replace(config, width_ratio=config.width_ratio * ratio)
    except ValueError as exc:
        raise ValueError(f"channel pruning to ratio {ratio} rejected: {exc}") from exc
    return narrowed, ChannelSliceInit(ratio)


class ChannelSliceInit:
    """Initializes a narrowed model from a wider teacher by leading-index slices.

    Every teacher tensor is cropped to the student tensor's shape along each
    mismatched axis (axes only ever shrink). `apply` returns the per-tensor
    mapping that was used.
    """

    def __init__(self, ratio: float):
        self.ratio = ratio

    def apply(self, teacher_state: dict, student: nn.Module) -> list:
        mapping = []
        sliced = {}
        for key, target in student.state_dict().items():
            if key not in teacher_state:
                raise KeyError(f"teacher state has no tensor named {key}")
            src = teacher_state[key]
            if src.dim() != target.dim() or any(
                    s < t for s, t in zip(src.shape, target.shape)):
                raise ValueError(
                    f"cannot slice teacher tensor {key} {tuple(src.shape)} down to "
                    f"{tuple(target.shape)}"
                )
            view = src[tuple(slice(0, t) for t in target.shape)]
            sliced[key] = view.clone()
            mapping.append((key, tuple(src.shape), tuple(target.shape)))
        student.load_state_dict(sliced)
        return mapping


class WrappedModel:
    """A U-Net whose planned sites have been swapped for AnnealedPairs."""

    def __init__(self, model: UNetModel, pairs: list, schedule: AnnealingSchedule):
        self.model = model
        self.pairs = pairs
        self.schedule = schedule

    def __call__(self, *args, **kwargs):
        return self.model(*args, **kwargs)

    def pair_count(self) -> int:
        return len(self.pairs)

    def original_parameter_count(self) -> int:
        return sum(p.numel() for _, pair in self.pairs
                   for p in pair.original.parameters())


def _set_submodule(model: nn.Module, name: str, module: nn.Module):
    parent_name, _, attr = name.rpartition(".")
    parent = model.get_submodule(parent_name) if parent_name else model
    setattr(parent, attr, module)


def apply_plan(model: UNetModel, plan: PruningPlan, depth_map: DepthMap,
               total_steps: int) -> WrappedModel:
    """Wrap every (kind, depth) the plan selects; a no-op forward at t=0."""
    schedule = AnnealingSchedule(total_steps)
    selected = []
    for kind, depths in plan.kind_depths().items():
        for depth in sorted(depths, key=DEPTHS.index):
            sites = depth_map.sites(kind, depth)
            if not sites:
                raise ValueError(
                    f"plan selects ({kind}, depth {depth}) but the model has no "
                    f"such module"
                )
            selected.extend((name, kind) for name in sites)
    pairs = []
    for name, kind in sorted(selected):
        original = model.get_submodule(name)
        pair = AnnealedPair(original, make_replacement(kind, original), schedule, kind)
        _set_submodule(model, name, pair)
        pairs.append((name, pair))
    return WrappedModel(model, pairs, schedule)


def finalize(wrapped: WrappedModel) -> UNetModel:
    """Collapse every pair to its replacement once annealing has completed."""
    incomplete = [name for name, pair in wrapped.pairs
                  if pair.schedule.step < pair.schedule.total_steps]
    if incomplete:
        raise ValueError(
            "annealing incomplete (t < T) for: " + ", ".join(sorted(incomplete))
        )
    for name, pair in wrapped.pairs:
        _set_submodule(wrapped.model, name, pair.replacement)
    return wrapped.model


def materialize_plan(config: UNetConfig, plan: PruningPlan) -> UNetModel:
    """Build a model with the plan's replacements already in place.

    Matches the architecture `finalize` produces, so finalized checkpoints can
    be reloaded without reconstructing the annealing state. The channel ratio
    is not applied here; `config` must already carry the final width.
    """
    from .backbone import label_depths

    model = build_unet(config)
    depth_map = label_depths(model)
    for kind, depths in plan.kind_depths().items():
        for depth in sorted(depths, key=DEPTHS.index):
            for name in sorted(depth_map.sites(kind, depth)):
                original = model.get_submodule(name)
                _set_submodule(model, name, make_replacement(kind, original))
    return model
