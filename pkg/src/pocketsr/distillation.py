"""Multi-layer feature distillation between a frozen teacher and a student.

Features are tapped at aligned stage outputs (each down stage, the mid block,
each up stage — nine taps on a four-depth net), mapped through per-tap 1x1
projections from student width to teacher width, and penalized with a squared
error. Reduction policy, fixed: mean over elements per tap, sum over taps,
mean over batch.
"""
from __future__ import annotations

import torch
from torch import nn

from .backbone import DEPTHS, UNetModel

REDUCTION_POLICY = "per-tap mean over elements, sum over taps, mean over batch"


def _tap_width(config, tap: str) -> int:
    if tap == "mid":
        return config.width(3)
    prefix, _, depth = tap.partition(".")
    if prefix not in ("down", "up") or depth not in DEPTHS:
        raise ValueError(f"unknown tap name {tap!r}")
    return config.width(DEPTHS.index(depth))


class DistillConfig(nn.Module):
    """Ordered tap list plus one trainable 1x1 projection per tap."""

    def __init__(self, taps: list, projections: nn.ModuleList):
        super().__init__()
        if len(taps) != len(projections):
            raise ValueError("tap list and projection list lengths differ")
        self.taps = list(taps)
        self.projections = projections
        self.reduction = REDUCTION_POLICY


def register_taps(teacher: UNetModel, student: UNetModel,
                  positions: list | None = None) -> DistillConfig:
    """Pair up stage outputs of two nets that share the four-depth structure.

    Projections map student width to teacher width and are identity-initialized
    when the widths already match.
    """
    if len(teacher.down_stages) != len(student.down_stages) or \
            len(teacher.up_stages) != len(student.up_stages):
        raise ValueError(
            "teacher and student stage structures are misaligned: "
            f"{len(teacher.down_stages)}/{len(teacher.up_stages)} vs "
            f"{len(student.down_stages)}/{len(student.up_stages)} stages"
        )
    taps = list(positions) if positions is not None else list(UNetModel.TAP_NAMES)
    unknown = set(taps) - set(UNetModel.TAP_NAMES)
    if unknown:
        raise ValueError(f"unknown tap positions: {sorted(unknown)}")
    projections = nn.ModuleList()
    for tap in taps:
        s_ch = _tap_width(student.config, tap)
        t_ch = _tap_width(teacher.config, tap)
        proj = nn.Conv2d(s_ch, t_ch, 1)
        if s_ch == t_ch:
            with torch.no_grad():
                proj.weight.zero_()
                proj.weight[:, :, 0, 0] = torch.eye(s_ch)
                proj.bias.zero_()
        projections.append(proj)
    return DistillConfig(taps, projections)


def distill_loss(teacher_feats: list, student_feats: list,
                 config: DistillConfig) -> torch.Tensor:
    """Sum over taps of the mean squared feature mismatch after projection."""
    if len(teacher_feats) != len(config.taps) or len(student_feats) != len(config.taps):
        raise ValueError(
            f"feature lists must align with the {len(config.taps)} configured taps"
        )
    total = None
    for t_feat, s_feat, proj in zip(teacher_feats, student_feats, config.projections):
        projected = proj(s_feat)
        if projected.shape != t_feat.shape:
            raise ValueError(
                f"projected student feature {tuple(projected.shape)} does not match "
                f"teacher feature {tuple(t_feat.shape)}"
            )
        term = (t_feat - projected).pow(2).mean()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def collect_tap_features(model: UNetModel, latent, injected, cond,
                         config: DistillConfig):
    """Run the net once, returning (output, features in tap order)."""
    out, feats = model.forward_with_taps(latent, injected=injected, cond=cond,
                                         taps=config.taps)
    return out, [feats[name] for name in config.taps]
