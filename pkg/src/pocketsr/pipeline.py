"""Full super-resolution pipeline: lite encoder -> U-Net -> lite decoder.

The network maps an already-upscaled degraded image to its restored version
at the same size (the 4x scale step is bicubic pre-upsampling). Inputs use the
[-1, 1] range; `enhance` wraps padding, range conversion and optional tiling
for arbitrary image sizes.
"""
from __future__ import annotations

from dataclasses import replace as dataclass_replace

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import UNetConfig, UNetModel, build_unet
from .lite_ed import (
    LiteDecoder,
    LiteDecoderConfig,
    LiteEncoder,
    LiteEncoderConfig,
    from_model_range,
    to_model_range,
)

# latent is /8 and the U-Net adds three more halvings
PIPELINE_MULTIPLE = 64


class PocketSRModel(nn.Module):
    """One-step restoration model; the U-Net output is the decoded latent."""

    def __init__(self, unet: UNetModel, encoder: LiteEncoder | None = None,
                 decoder: LiteDecoder | None = None,
                 use_asc: bool = True, use_dfi: bool = True):
        super().__init__()
        feature_channels = unet.config.injection_channels or unet.config.width(0)
        self.encoder = encoder if encoder is not None else LiteEncoder(
            LiteEncoderConfig(feature_channels=feature_channels,
                              latent_channels=unet.config.latent_channels))
        self.unet = unet
        self.decoder = decoder if decoder is not None else LiteDecoder(
            LiteDecoderConfig(latent_channels=unet.config.latent_channels))
        self.use_asc = use_asc
        self.use_dfi = use_dfi

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        enc = self.encoder.encode(image)
        injected = enc.dfi_feature if self.use_dfi else None
        latent = self.unet(enc.latent, injected=injected)
        if self.use_asc:
            kappa = self.encoder.asc_head(enc.asc_input)
            return self.decoder.decode(latent, enc.skip_sources, kappa)
        return self.decoder.decode(latent)

    # ------------------------------------------------------------------
    # real-image entry points

    @torch.no_grad()
    def enhance(self, image01: torch.Tensor, scale: int = 4,
                tile: int | None = None, tile_overlap: int = 32) -> torch.Tensor:
        """Upscale a [0, 1] image tensor by `scale` (bicubic pre-upsample).

        Sizes that are not a multiple of 64 after upsampling are reflect-padded
        and cropped back. Large inputs can be processed in overlapping tiles
        with linear blending.
        """
        if image01.dim() == 3:
            image01 = image01.unsqueeze(0)
        up = F.interpolate(image01, scale_factor=scale, mode="bicubic",
                           align_corners=False).clamp(0.0, 1.0)
        x = to_model_range(up)
        if tile is not None:
            out = self._tiled(x, tile, tile_overlap)
        else:
            out = self._padded(x)
        return from_model_range(out)

    def _padded(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        ph = (-h) % PIPELINE_MULTIPLE
        pw = (-w) % PIPELINE_MULTIPLE
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        out = self.forward(x)
        return out[..., :h, :w]

    def _tiled(self, x: torch.Tensor, tile: int, overlap: int) -> torch.Tensor:
        h, w = x.shape[-2:]
        if tile % PIPELINE_MULTIPLE != 0:
            raise ValueError(f"tile size must be a multiple of {PIPELINE_MULTIPLE}")
        if h <= tile and w <= tile:
            return self._padded(x)
        stride = tile - overlap
        out = torch.zeros_like(x[:, :3])
        weight = torch.zeros(1, 1, h, w, dtype=x.dtype)
        ys = list(range(0, max(h - tile, 0) + 1, stride)) or [0]
        xs = list(range(0, max(w - tile, 0) + 1, stride)) or [0]
        if ys[-1] + tile < h:
            ys.append(h - tile)
        if xs[-1] + tile < w:
            xs.append(w - tile)
        ramp = torch.ones(tile)
        if overlap > 0:
            edge = torch.linspace(0.0, 1.0, overlap + 2)[1:-1]
            ramp[:overlap] = edge
            ramp[-overlap:] = edge.flip(0)
        window = ramp[:, None] * ramp[None, :]
        for y0 in ys:
            for x0 in xs:
                y1, x1 = min(y0 + tile, h), min(x0 + tile, w)
                patch = self._padded(x[..., y0:y1, x0:x1])
                win = window[: y1 - y0, : x1 - x0]
                out[..., y0:y1, x0:x1] += patch * win
                weight[..., y0:y1, x0:x1] += win
        return out / weight.clamp_min(1e-8)


def build_pipeline(unet_config: UNetConfig,
                   decoder_config: LiteDecoderConfig | None = None,
                   use_asc: bool = True, use_dfi: bool = True) -> PocketSRModel:
    """Build the full model; the encoder feature width follows the U-Net."""
    if use_dfi and not unet_config.injection_channels:
        unet_config = dataclass_replace(unet_config,
                                        injection_channels=unet_config.width(0))
    unet = build_unet(unet_config)
    decoder = LiteDecoder(decoder_config) if decoder_config is not None else None
    return PocketSRModel(unet, decoder=decoder, use_asc=use_asc, use_dfi=use_dfi)
