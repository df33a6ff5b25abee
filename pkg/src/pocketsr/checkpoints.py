"""Checkpoint persistence: a weights container plus a structured text manifest.

Manifest keys: `model.config.*` (the exact U-Net configuration used),
`model.arch_hash`, `training.step`, `training.stage`, `training.seed`,
`pruning.state`, and the full resolved run configuration echoed under `run.*`.

pruning.state values: `none`, `annealed:t=<t>,T=<T>` (annealing wrapper state
retained for export), `finalized` (replacements only, used by export bundles).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import torch

from .backbone import UNetConfig, build_unet, label_depths
from .config import RunConfig

MANIFEST_VERSION = 1

_UNET_FIELDS = (
    ("base_channels", int),
    ("channel_multipliers", "int_tuple"),
    ("blocks_per_depth", int),
    ("attention_head_dim", int),
    ("latent_channels", int),
    ("width_ratio", float),
    ("context_dim", int),
    ("norm_groups", int),
    ("injection_channels", "opt_int"),
)


def arch_hash(config: UNetConfig) -> str:
    blob = ";".join(f"{name}={getattr(config, name)}" for name, _ in _UNET_FIELDS)
    return hashlib.sha1(blob.encode()).hexdigest()[:16]


def build_manifest(run_cfg: RunConfig, unet_config: UNetConfig, step: int,
                   stage: int, pruning_state: str) -> str:
    lines = [f"manifest.version = {MANIFEST_VERSION}",
             f"model.arch_hash = {arch_hash(unet_config)}"]
    for name, _ in _UNET_FIELDS:
        value = getattr(unet_config, name)
        if name == "channel_multipliers":
            value = ",".join(str(v) for v in value)
        lines.append(f"model.config.{name} = {value}")
    from .distillation import REDUCTION_POLICY

    lines += [
        f"training.step = {step}",
        f"training.stage = {stage}",
        f"training.seed = {run_cfg.get('train.seed')}",
        f"pruning.state = {pruning_state}",
        f"distill.reduction = {REDUCTION_POLICY}",
    ]
    lines += [f"run.{line}" for line in run_cfg.serialize().strip().splitlines()]
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> dict:
    entries = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        entries[key.strip()] = val.strip()
    return entries


def manifest_unet_config(entries: dict) -> UNetConfig:
    kwargs = {}
    for name, kind in _UNET_FIELDS:
        raw = entries[f"model.config.{name}"]
        if kind == "int_tuple":
            kwargs[name] = tuple(int(v) for v in raw.split(","))
        elif kind == "opt_int":
            kwargs[name] = None if raw == "None" else int(raw)
        elif kind is float:
            kwargs[name] = float(raw)
        else:
            kwargs[name] = int(raw)
    return UNetConfig(**kwargs)


def manifest_run_config(entries: dict) -> RunConfig:
    text = "\n".join(f"{k[len('run.'):]} = {v}" for k, v in entries.items()
                     if k.startswith("run."))
    return RunConfig.from_text(text)


@dataclass
class CheckpointBundle:
    manifest: dict
    weights: dict
    run_config: RunConfig
    unet_config: UNetConfig

    @property
    def pruning_state(self) -> str:
        return self.manifest["pruning.state"]


def save_checkpoint(path, run_cfg: RunConfig, *, step: int, stage: int,
                    pruning_state: str, unet_config: UNetConfig, weights: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(run_cfg, unet_config, step, stage, pruning_state)
    torch.save({"manifest": manifest, "weights": weights}, path)


def read_checkpoint(path) -> CheckpointBundle:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    entries = parse_manifest(payload["manifest"])
    return CheckpointBundle(
        manifest=entries,
        weights=payload["weights"],
        run_config=manifest_run_config(entries),
        unet_config=manifest_unet_config(entries),
    )


def _build_unet_for_state(bundle: CheckpointBundle):
    """Reconstruct the U-Net in whatever pruning state the checkpoint carries.

    Returns (unet, wrapped_or_none).
    """
    from .pruning import apply_plan, materialize_plan

    state = bundle.pruning_state
    plan = bundle.run_config.pruning_plan()
    if state == "finalized":
        return materialize_plan(bundle.unet_config, plan), None
    if state.startswith("annealed:"):
        fields = dict(part.split("=") for part in state.split(":", 1)[1].split(","))
        t, total = int(fields["t"]), int(fields["T"])
        unet = build_unet(bundle.unet_config)
        wrapped = apply_plan(unet, plan, label_depths(unet), total_steps=total)
        wrapped.schedule.step = t
        return unet, wrapped
    return build_unet(bundle.unet_config), None


def load_checkpoint(path, finalize_annealed: bool = True):
    """Rebuild the pipeline from a checkpoint; returns (model, bundle).

    Annealed checkpoints are collapsed to their replacements after loading
    (exact once t >= T) unless `finalize_annealed` is False.
    """
    from .pipeline import PocketSRModel
    from .pruning import finalize

    bundle = read_checkpoint(path)
    unet, wrapped = _build_unet_for_state(bundle)
    model = PocketSRModel(unet, decoder=_decoder_from_run(bundle.run_config))
    model.load_state_dict(bundle.weights["pipeline"])
    if wrapped is not None and finalize_annealed:
        finalize(wrapped)
    return model, bundle


def _decoder_from_run(run_cfg: RunConfig):
    from .lite_ed import LiteDecoder

    return LiteDecoder(run_cfg.decoder_config())


def export_bundle(checkpoint_path, output_path, allow_unpruned: bool = False) -> Path:
    """Write an inference bundle containing only the surviving weights.

    Annealed checkpoints are collapsed: original modules are dropped, only
    replacements (and the untouched remainder) ship. Un-pruned checkpoints are
    refused unless `allow_unpruned` is set.
    """
    from .pipeline import PocketSRModel
    from .pruning import finalize

    bundle = read_checkpoint(checkpoint_path)
    state = bundle.pruning_state
    if state.startswith("annealed:"):
        fields = dict(part.split("=") for part in state.split(":", 1)[1].split(","))
        if int(fields["t"]) < int(fields["T"]):
            raise ValueError(
                f"checkpoint annealing is incomplete (t={fields['t']} < "
                f"T={fields['T']}); finish stage 2 before exporting"
            )
        unet, wrapped = _build_unet_for_state(bundle)
        model = PocketSRModel(unet, decoder=_decoder_from_run(bundle.run_config))
        model.load_state_dict(bundle.weights["pipeline"])
        finalize(wrapped)
        new_state = "finalized"
    elif state == "finalized":
        unet, _ = _build_unet_for_state(bundle)
        model = PocketSRModel(unet, decoder=_decoder_from_run(bundle.run_config))
        model.load_state_dict(bundle.weights["pipeline"])
        new_state = "finalized"
    else:
        if not allow_unpruned:
            raise ValueError(
                "checkpoint holds an un-pruned model; pass --allow-unpruned to "
                "export it anyway"
            )
        unet, _ = _build_unet_for_state(bundle)
        model = PocketSRModel(unet, decoder=_decoder_from_run(bundle.run_config))
        model.load_state_dict(bundle.weights["pipeline"])
        new_state = state

    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(
        bundle.run_config, model.unet.config,
        step=int(bundle.manifest["training.step"]),
        stage=int(bundle.manifest["training.stage"]),
        pruning_state=new_state)
    torch.save({"manifest": manifest, "weights": {"pipeline": model.state_dict()}},
               output_path)
    return output_path
