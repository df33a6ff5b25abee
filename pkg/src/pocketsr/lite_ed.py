"""LiteED: ultra-light convolutional encoder/decoder pair for latent-space SR.

The encoder compresses an RGB image by 8x into a 4-channel latent and also
exposes a high-dimensional feature tap (dual-path feature injection) plus the
pooled vector that drives the adaptive skip connections. The decoder is a
TAESD-style stack of 64-channel residual blocks with per-stage, zero-convolution
gated skips modulated by four learned coefficients.

Images use the [-1, 1] value range internally; `to_model_range` /
`from_model_range` convert from/to [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


def to_model_range(x: torch.Tensor) -> torch.Tensor:
    """[0, 1] image -> [-1, 1]."""
    return x * 2.0 - 1.0


def from_model_range(x: torch.Tensor) -> torch.Tensor:
    """[-1, 1] image -> [0, 1], clamped."""
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def zero_conv(in_ch: int, out_ch: int, kernel_size: int = 3) -> nn.Conv2d:
    """Convolution with weights and bias initialized to zero (inert at start)."""
    conv = nn.Conv2d(in_ch, out_ch, kernel_size, padding=kernel_size // 2)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class CrossNormalizedInjection(nn.Module):
    """Additive feature injection through cross normalization.

    The injected feature is first mapped to the receiving width by a
    zero-initialized 1x1 projection, then re-normalized with the receiving
    branch's per-sample, per-channel spatial statistics:

        out = h + alpha * ((c - mu_c) / (sigma_c + eps) * sigma_h + mu_h)

    `alpha` starts at zero, so the host branch is untouched at initialization.
    """

    eps = 1e-5

    def __init__(self, injected_channels: int, host_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(injected_channels, host_channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        self.alpha = nn.Parameter(torch.zeros(()))

    def forward(self, host: torch.Tensor, injected: torch.Tensor) -> torch.Tensor:
        if injected.shape[0] != host.shape[0] or injected.shape[-2:] != host.shape[-2:]:
            raise ValueError(
                f"injected feature {tuple(injected.shape)} does not spatially match "
                f"the receiving feature {tuple(host.shape)}"
            )
        c = self.proj(injected)
        return cross_normalize(host, c, self.alpha, eps=self.eps)


def cross_normalize(host: torch.Tensor, injected: torch.Tensor, alpha, eps: float = 1e-5) -> torch.Tensor:
    """out = host + alpha * renorm(injected), statistics over spatial positions.

    The tiny floor inside the square roots keeps the backward pass finite for
    zero-variance features (the zero-initialized projection hits that exactly).
    """
    if injected.shape[-2:] != host.shape[-2:]:
        raise ValueError("spatial mismatch in cross normalization")
    mu_c = injected.mean(dim=(-2, -1), keepdim=True)
    sigma_c = (injected.var(dim=(-2, -1), keepdim=True, unbiased=False) + 1e-12).sqrt()
    mu_h = host.mean(dim=(-2, -1), keepdim=True)
    sigma_h = (host.var(dim=(-2, -1), keepdim=True, unbiased=False) + 1e-12).sqrt()
    renormed = (injected - mu_c) / (sigma_c + eps) * sigma_h + mu_h
    return host + alpha * renormed


@dataclass
class EncoderOutput:
    """Everything the encoder hands to the rest of the pipeline."""

    latent: torch.Tensor          # [N, 4, H/8, W/8]
    dfi_feature: torch.Tensor     # [N, feature_channels, H/8, W/8]
    skip_sources: list            # 4 tensors at the decoder stage resolutions
    asc_input: torch.Tensor       # [N, feature_channels] pooled feature


@dataclass(frozen=True)
class LiteEncoderConfig:
    feature_channels: int = 320
    latent_channels: int = 4
    in_channels: int = 3
    asc_hidden: int = 64


class LiteEncoder(nn.Module):
    """Four strided/plain convolutions: 8x spatial reduction into the latent.

    The feature tap sits after the second convolution's activation, at 1/8
    resolution, and carries `feature_channels` channels (the width of the
    consumer network's first stage). Skip sources for the decoder are the
    input image resampled to each decoder stage resolution.
    """

    def __init__(self, config: LiteEncoderConfig | None = None):
        super().__init__()
        self.config = config or LiteEncoderConfig()
        feature_channels = self.config.feature_channels
        self.feature_channels = feature_channels
        self.latent_channels = self.config.latent_channels
        self.conv1 = nn.Conv2d(self.config.in_channels, 64, 5, stride=4, padding=2)
        self.conv2 = nn.Conv2d(64, feature_channels, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(feature_channels, 128, 3, padding=1)
        self.conv4 = nn.Conv2d(128, self.config.latent_channels, 3, padding=1)
        self.act = nn.SiLU()
        self.asc_head = AscHead(feature_channels, hidden=self.config.asc_hidden)

    def encode(self, image: torch.Tensor) -> EncoderOutput:
        if image.dim() != 4:
            raise ValueError(f"expected [N, C, H, W] input, got {tuple(image.shape)}")
        n, _, h, w = image.shape
        if h % 8 != 0 or w % 8 != 0:
            raise ValueError(f"input size {h}x{w} is not divisible by 8")
        x = self.act(self.conv1(image))
        feat = self.act(self.conv2(x))
        x = self.act(self.conv3(feat))
        latent = self.conv4(x)
        skips = [
            F.interpolate(image, size=(h // 8 * 2 ** i, w // 8 * 2 ** i),
                          mode="bicubic", align_corners=False)
            for i in range(4)
        ]
        return EncoderOutput(
            latent=latent,
            dfi_feature=feat,
            skip_sources=skips,
            asc_input=feat.mean(dim=(-2, -1)),
        )

    forward = encode


class AscHead(nn.Module):
    """Two-layer MLP producing the four skip-modulation coefficients.

    The final layer is zero-initialized with bias 1, so every skip starts
    fully open and the zero-convolutions alone gate the contribution.
    """

    def __init__(self, in_dim: int, hidden: int = 64, n_stages: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, n_stages)
        nn.init.zeros_(self.fc2.weight)
        nn.init.ones_(self.fc2.bias)
        self.act = nn.SiLU()

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(pooled)))


@dataclass(frozen=True)
class LiteDecoderConfig:
    channel_cap: int = 64
    upsample_stages: int = 3
    head_resblocks: int = 1
    output_channels: int = 3
    blocks_per_stage: int = 3
    latent_channels: int = 4

    def __post_init__(self):
        if 2 ** self.upsample_stages != 8:
            raise ValueError("cumulative upsampling factor must be exactly 8")
        if self.channel_cap < 1 or self.blocks_per_stage < 1 or self.head_resblocks < 1:
            raise ValueError("decoder sizes must be positive")


class DecoderBlock(nn.Module):
    """Residual block of three 3x3 convolutions with ReLU (TAESD layout)."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv3 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.ReLU()

    def forward(self, x):
        h = self.conv3(self.act(self.conv2(self.act(self.conv1(x)))))
        return self.act(h + x)


class LiteDecoder(nn.Module):
    """8x upsampling decoder, every layer capped at `channel_cap` channels.

    Four resolution stages; each stage starts by adding its gated skip
    (`kappa[i] * zero_conv_i(skip_sources[i])`) before running its blocks and
    upsample. Stage 3 is the single-block output head.
    """

    def __init__(self, config: LiteDecoderConfig | None = None, skip_channels: int = 3):
        super().__init__()
        self.config = config or LiteDecoderConfig()
        c = self.config.channel_cap
        self.conv_in = nn.Conv2d(self.config.latent_channels, c, 3, padding=1)
        self.stages = nn.ModuleList()
        for _ in range(self.config.upsample_stages):
            self.stages.append(nn.ModuleList(
                [DecoderBlock(c) for _ in range(self.config.blocks_per_stage)]
            ))
        self.up_convs = nn.ModuleList([
            nn.Conv2d(c, c, 3, padding=1, bias=False)
            for _ in range(self.config.upsample_stages)
        ])
        self.head = nn.ModuleList([DecoderBlock(c) for _ in range(self.config.head_resblocks)])
        self.conv_out = nn.Conv2d(c, self.config.output_channels, 3, padding=1)
        self.skip_convs = nn.ModuleList([zero_conv(skip_channels, c) for _ in range(4)])
        self.act = nn.ReLU()

    def stage_sizes(self, latent_hw) -> list:
        h, w = latent_hw
        return [(h * 2 ** i, w * 2 ** i) for i in range(4)]

    def _add_skip(self, h, skip_sources, kappa, index):
        if skip_sources is None:
            return h
        skip = skip_sources[index]
        if skip.shape[-2:] != h.shape[-2:]:
            raise ValueError(
                f"skip source {index} is {tuple(skip.shape[-2:])}, "
                f"decoder stage runs at {tuple(h.shape[-2:])}"
            )
        gate = kappa[:, index].view(-1, 1, 1, 1)
        return h + gate * self.skip_convs[index](skip)

    def decode(self, latent: torch.Tensor, skip_sources=None, kappa=None) -> torch.Tensor:
        if latent.shape[1] != self.config.latent_channels:
            raise ValueError(
                f"latent has {latent.shape[1]} channels, decoder expects "
                f"{self.config.latent_channels}"
            )
        if skip_sources is not None and len(skip_sources) != 4:
            raise ValueError("decoder expects exactly 4 skip sources")
        if skip_sources is not None and kappa is None:
            raise ValueError("skip sources supplied without kappa coefficients")
        h = self.act(self.conv_in(latent))
        for i, (blocks, up) in enumerate(zip(self.stages, self.up_convs)):
            h = self._add_skip(h, skip_sources, kappa, i)
            for block in blocks:
                h = block(h)
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self._add_skip(h, skip_sources, kappa, 3)
        for block in self.head:
            h = block(h)
        return self.conv_out(h)

    forward = decode
