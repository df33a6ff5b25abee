"""Run configuration: defaults, config-file values and flag overrides merged
into one flat dotted-key tree (precedence: flags > file > defaults).

Config files are plain text, one `key = value` per line, `#` comments. The
POCKETSR_SEED environment variable overrides train.seed.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

from .backbone import DEPTHS, UNetConfig
from .lite_ed import LiteDecoderConfig, LiteEncoderConfig
from .pruning import PruningPlan
from .training import DegradationConfig, LossWeights

DEFAULT_TAPS = ("down.I", "down.II", "down.III", "down.IV", "mid",
                "up.IV", "up.III", "up.II", "up.I")

# key -> (type tag, default)
SCHEMA = {
    "model.base_channels": ("int", 320),
    "model.channel_multipliers": ("int_list", (1, 2, 4, 4)),
    "model.blocks_per_depth": ("int", 2),
    "model.attention_head_dim": ("int", 64),
    "model.latent_channels": ("int", 4),
    "model.width_ratio": ("float", 1.0),
    "model.context_dim": ("int", 768),
    "model.norm_groups": ("int", 32),
    "model.decoder_channel_cap": ("int", 64),
    "model.decoder_upsample_stages": ("int", 3),
    "model.decoder_head_resblocks": ("int", 1),
    "model.decoder_output_channels": ("int", 3),
    "model.decoder_blocks_per_stage": ("int", 3),
    "prune.resblock_depths": ("depth_set", ("III", "IV")),
    "prune.ffn_depths": ("depth_set", ("III", "IV")),
    "prune.self_attention_depths": ("depth_set", ("IV",)),
    "prune.cross_attention_depths": ("depth_set", ("I", "II", "III", "IV")),
    "prune.channel_ratio": ("float", 0.7),
    "distill.taps": ("str_list", DEFAULT_TAPS),
    "train.stage": ("int", 1),
    "train.steps_stage1": ("int", 80000),
    "train.steps_channel": ("int", 80000),
    "train.steps_anneal": ("int", 8000),
    "train.batch_size": ("int", 64),
    "train.learning_rate": ("float", 1e-4),
    "train.weight_decay": ("float", 0.01),
    "train.grad_clip": ("float", 1.0),
    "train.crop_size": ("int", 512),
    "train.seed": ("int", 0),
    "loss.lambda_mse": ("float", 2.0),
    "loss.lambda_lpips": ("float", 2.0),
    "loss.lambda_gan": ("float", 0.25),
    "loss.lambda_distill": ("float", 0.001),
    "degrade.scale": ("int", 4),
    "degrade.blur_sigma_min": ("float", 0.2),
    "degrade.blur_sigma_max": ("float", 3.0),
    "degrade.noise_sigma_min": ("float", 0.0),
    "degrade.noise_sigma_max": ("float", 0.1),
    "degrade.jpeg_enabled": ("bool", True),
    "degrade.jpeg_quality_min": ("int", 40),
    "degrade.jpeg_quality_max": ("int", 95),
    "degrade.seed": ("int", 0),
    "paths.data_dir": ("str", ""),
    "paths.out_dir": ("str", "runs"),
    "paths.teacher": ("str", ""),
}

PRESETS = {
    "full_scale": {},
    "toy": {
        "model.base_channels": 16,
        "model.blocks_per_depth": 1,
        "model.attention_head_dim": 8,
        "model.context_dim": 32,
        "model.norm_groups": 8,
        "model.decoder_blocks_per_stage": 1,
        "train.steps_stage1": 200,
        "train.steps_channel": 200,
        "train.steps_anneal": 100,
        "train.batch_size": 4,
        "train.learning_rate": 1e-3,
        "train.crop_size": 64,
        "degrade.blur_sigma_min": 0.0,
        "degrade.blur_sigma_max": 1.5,
        "degrade.noise_sigma_max": 0.05,
    },
}

_DEPTH_ORDER = {d: i for i, d in enumerate(DEPTHS)}


def _encode(tag: str, value) -> str:
    if tag == "bool":
        return "true" if value else "false"
    if tag == "int_list":
        return ",".join(str(v) for v in value)
    if tag == "str_list":
        return ",".join(value) if value else "none"
    if tag == "depth_set":
        ordered = sorted(value, key=_DEPTH_ORDER.get)
        return ",".join(ordered) if ordered else "none"
    return str(value)


def _decode(tag: str, text: str, key: str):
    text = text.strip()
    try:
        if tag == "int":
            return int(text)
        if tag == "float":
            return float(text)
        if tag == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if tag == "str":
            return text
        if tag == "int_list":
            return tuple(int(v) for v in text.split(",") if v.strip())
        if tag == "str_list":
            if text.lower() in ("", "none"):
                return ()
            return tuple(v.strip() for v in text.split(","))
        if tag == "depth_set":
            if text.lower() in ("", "none"):
                return ()
            depths = tuple(v.strip() for v in text.split(","))
            bad = [d for d in depths if d not in DEPTHS]
            if bad:
                raise ValueError(f"unknown depths {bad}")
            return tuple(sorted(set(depths), key=_DEPTH_ORDER.get))
    except ValueError as exc:
        raise ValueError(f"invalid value for config key {key}: {text!r} ({exc})")
    raise ValueError(f"unhandled config type {tag}")


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines; unknown keys are rejected by name."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ValueError(f"unknown config key: {key}")
        tag, _ = SCHEMA[key]
        values[key] = _decode(tag, val, key)
    return values


@dataclass
class RunConfig:
    """Fully resolved flat configuration."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.values) - set(SCHEMA)
        if unknown:
            raise ValueError(f"unknown config key: {sorted(unknown)[0]}")
        merged = {key: default for key, (_, default) in SCHEMA.items()}
        merged.update(self.values)
        self.values = merged

    @classmethod
    def load(cls, path=None, overrides=None, preset=None, env=None) -> "RunConfig":
        env = os.environ if env is None else env
        values = {}
        if preset is not None:
            if preset not in PRESETS:
                raise ValueError(f"unknown preset {preset!r}; "
                                 f"choose from {sorted(PRESETS)}")
            values.update(PRESETS[preset])
        if path is not None:
            with open(path) as fh:
                values.update(parse_config_text(fh.read()))
        for item in overrides or []:
            if "=" not in item:
                raise ValueError(f"override must look like key=value, got {item!r}")
            key, _, val = item.partition("=")
            key = key.strip()
            if key not in SCHEMA:
                raise ValueError(f"unknown config key: {key}")
            values[key] = _decode(SCHEMA[key][0], val, key)
        cfg = cls(values)
        if "POCKETSR_SEED" in env:
            cfg.values["train.seed"] = int(env["POCKETSR_SEED"])
        return cfg

    def get(self, key: str):
        if key not in SCHEMA:
            raise ValueError(f"unknown config key: {key}")
        value = self.values[key]
        return list(value) if SCHEMA[key][0] == "str_list" else value

    def with_overrides(self, **dotted) -> "RunConfig":
        values = dict(self.values)
        for key, value in dotted.items():
            if key not in SCHEMA:
                raise ValueError(f"unknown config key: {key}")
            values[key] = value
        return RunConfig(values)

    def serialize(self) -> str:
        lines = [f"{key} = {_encode(SCHEMA[key][0], self.values[key])}"
                 for key in sorted(SCHEMA)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls(parse_config_text(text))

    # ------------------------------------------------------------------
    # domain objects

    def unet_config(self, width_ratio=None, injection_channels=None) -> UNetConfig:
        return UNetConfig(
            base_channels=self.get("model.base_channels"),
            channel_multipliers=self.get("model.channel_multipliers"),
            blocks_per_depth=self.get("model.blocks_per_depth"),
            attention_head_dim=self.get("model.attention_head_dim"),
            latent_channels=self.get("model.latent_channels"),
            width_ratio=width_ratio if width_ratio is not None
            else self.get("model.width_ratio"),
            context_dim=self.get("model.context_dim"),
            norm_groups=self.get("model.norm_groups"),
            injection_channels=injection_channels,
        )

    def pruning_plan(self) -> PruningPlan:
        return PruningPlan(
            resblock_depths=frozenset(self.get("prune.resblock_depths")),
            ffn_depths=frozenset(self.get("prune.ffn_depths")),
            self_attention_depths=frozenset(self.get("prune.self_attention_depths")),
            cross_attention_depths=frozenset(self.get("prune.cross_attention_depths")),
            channel_ratio=self.get("prune.channel_ratio"),
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_mse=self.get("loss.lambda_mse"),
            lambda_lpips=self.get("loss.lambda_lpips"),
            lambda_gan=self.get("loss.lambda_gan"),
            lambda_distill=self.get("loss.lambda_distill"),
        )

    def degradation_config(self) -> DegradationConfig:
        jpeg = ((self.get("degrade.jpeg_quality_min"),
                 self.get("degrade.jpeg_quality_max"))
                if self.get("degrade.jpeg_enabled") else None)
        return DegradationConfig(
            scale=self.get("degrade.scale"),
            blur_sigma_range=(self.get("degrade.blur_sigma_min"),
                              self.get("degrade.blur_sigma_max")),
            noise_sigma_range=(self.get("degrade.noise_sigma_min"),
                               self.get("degrade.noise_sigma_max")),
            jpeg_quality_range=jpeg,
            seed=self.get("degrade.seed"),
        )

    def decoder_config(self) -> LiteDecoderConfig:
        return LiteDecoderConfig(
            channel_cap=self.get("model.decoder_channel_cap"),
            upsample_stages=self.get("model.decoder_upsample_stages"),
            head_resblocks=self.get("model.decoder_head_resblocks"),
            output_channels=self.get("model.decoder_output_channels"),
            blocks_per_stage=self.get("model.decoder_blocks_per_stage"),
            latent_channels=self.get("model.latent_channels"),
        )

    def encoder_config(self, feature_channels=None) -> LiteEncoderConfig:
        return LiteEncoderConfig(
            feature_channels=feature_channels if feature_channels is not None
            else self.unet_config().width(0),
            latent_channels=self.get("model.latent_channels"),
        )
