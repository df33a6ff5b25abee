"""Command-line surface: train-stage1, train-stage2, infer, profile, sweep,
export. Every run writes its fully resolved configuration next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import torch

from . import accounting
from .backbone import DEPTHS, build_unet, label_depths
from .config import RunConfig
from .checkpoints import export_bundle, load_checkpoint
from .pruning import PruningPlan, apply_plan, channel_prune, finalize
from .training import (
    DegradationConfig,
    PerceptualProxy,
    degrade,
    seed_all,
    train_stage1,
    train_stage2,
)

DEPTH_LADDER = [frozenset(), frozenset({"IV"}), frozenset({"III", "IV"}),
                frozenset({"II", "III", "IV"}), frozenset({"I", "II", "III", "IV"})]
CHANNEL_ARMS = [0, 10, 20, 30, 40, 50]  # percent of width pruned away


def _depth_label(depths) -> str:
    if not depths:
        return "None"
    return "+".join(sorted(depths, key=DEPTHS.index))


@dataclass
class SweepSpec:
    """One ablation axis: a module kind over depth sets, or the channel ratio."""

    module_kind: str
    arms: list
    budget: int = 20

    def __post_init__(self):
        valid = ("resblock", "self_attention", "cross_attention", "ffn",
                 "channel_ratio")
        if self.module_kind not in valid:
            raise ValueError(f"unknown sweep kind {self.module_kind!r}")
        if len(set(map(str, self.arms))) != len(self.arms):
            raise ValueError("sweep arms must be distinct")
        if self.module_kind == "channel_ratio":
            if 0 not in self.arms:
                raise ValueError("channel sweep must include the 0% baseline arm")
        else:
            if frozenset() not in self.arms:
                raise ValueError("sweep must include the baseline ('None') arm")
        if self.budget < 1:
            raise ValueError("sweep budget must be positive")


def _synthetic_batch(batch, size, gen):
    """Smooth random images in [0, 1] for the sweep harness."""
    low = torch.rand(batch, 3, size // 4, size // 4, generator=gen)
    return torch.nn.functional.interpolate(
        low, size=(size, size), mode="bicubic", align_corners=False).clamp(0, 1)


def _sweep_pipeline_totals(unet_cfg, plan, base_cfg):
    latent = base_cfg.get("train.crop_size") // 8
    image = base_cfg.get("train.crop_size")
    enc = base_cfg.encoder_config(feature_channels=unet_cfg.injection_channels
                                  or unet_cfg.width(0))
    params = (accounting.count_params(enc).total_params
              + accounting.count_params(unet_cfg, plan=plan).total_params
              + accounting.count_params(base_cfg.decoder_config()).total_params)
    macs = (accounting.count_macs(enc, image).total_macs
            + accounting.count_macs(unet_cfg, image, plan=plan).total_macs
            + accounting.count_macs(base_cfg.decoder_config(), image).total_macs)
    return params, macs


def _sweep_train_and_eval(model, base_cfg, budget, seed, wrapped=None):
    """Short reconstruction-only training run, then a fixed-batch evaluation."""
    import torch.nn.functional as F

    from .lite_ed import to_model_range

    crop = base_cfg.get("train.crop_size")
    scale = base_cfg.get("degrade.scale")
    batch = base_cfg.get("train.batch_size")
    dcfg = base_cfg.degradation_config()
    perceptual = PerceptualProxy()
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=base_cfg.get("train.learning_rate"))

    def make_pair(step_seed):
        gen = torch.Generator().manual_seed(step_seed)
        hr01 = _synthetic_batch(batch, crop, gen)
        lr01 = degrade(hr01, DegradationConfig(
            scale=scale, blur_sigma_range=dcfg.blur_sigma_range,
            noise_sigma_range=dcfg.noise_sigma_range,
            jpeg_quality_range=dcfg.jpeg_quality_range, seed=step_seed))
        lr_up = F.interpolate(lr01, size=hr01.shape[-2:], mode="bicubic",
                              align_corners=False).clamp(0, 1)
        return to_model_range(hr01), to_model_range(lr_up)

    for step in range(budget):
        hr, x = make_pair(seed * 7919 + step)
        sr = model(x)
        loss = F.mse_loss(sr, hr) + perceptual(sr, hr)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if wrapped is not None:
            wrapped.schedule.advance()
    if wrapped is not None:
        wrapped.schedule.step = max(wrapped.schedule.step,
                                    wrapped.schedule.total_steps)
        finalize(wrapped)
    with torch.no_grad():
        hr, x = make_pair(seed * 7919 + 10_007)
        sr = model(x)
        return float(F.mse_loss(sr, hr)), float(perceptual(sr, hr))


def sweep(spec: SweepSpec, base_cfg: RunConfig, out_dir=None) -> list:
    """Run every arm at toy budget; params/MACs columns come from accounting."""
    from .distillation import distill_loss, register_taps
    from .pipeline import build_pipeline

    seed = base_cfg.get("train.seed")
    rows = []
    if spec.module_kind == "channel_ratio":
        for pruned_pct in spec.arms:
            ratio = 1.0 - pruned_pct / 100.0
            for with_distill in (True, False):
                rows.append(_channel_arm(base_cfg, ratio, pruned_pct, with_distill,
                                         spec.budget, seed, register_taps,
                                         distill_loss))
    else:
        for depths in spec.arms:
            seed_all(seed)
            model = build_pipeline(base_cfg.unet_config(), base_cfg.decoder_config())
            plan_kwargs = {k: frozenset() for k in
                           ("resblock_depths", "ffn_depths",
                            "self_attention_depths", "cross_attention_depths")}
            plan_kwargs[f"{spec.module_kind}_depths"] = frozenset(depths)
            plan = PruningPlan(channel_ratio=1.0, **plan_kwargs)
            wrapped = None
            if depths:
                wrapped = apply_plan(model.unet, plan, label_depths(model.unet),
                                     total_steps=spec.budget)
            mse, proxy = _sweep_train_and_eval(model, base_cfg, spec.budget, seed,
                                               wrapped=wrapped)
            params, macs = _sweep_pipeline_totals(model.unet.config, plan, base_cfg)
            rows.append({"arm": _depth_label(depths), "kind": spec.module_kind,
                         "params": params, "macs": macs,
                         "mse": mse, "perceptual": proxy})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / "sweep.jsonl").open("w") as fh:
            fh.write(json.dumps({"resolved_config": base_cfg.serialize(),
                                 "seed": seed}) + "\n")
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    return rows


def _channel_arm(base_cfg, ratio, pruned_pct, with_distill, budget, seed,
                 register_taps, distill_loss_fn):
    import torch.nn.functional as F

    from .backbone import build_unet as _build
    from .pipeline import PocketSRModel, build_pipeline
    from .lite_ed import to_model_range

    seed_all(seed)
    teacher = build_pipeline(base_cfg.unet_config(), base_cfg.decoder_config())
    teacher.requires_grad_(False)
    student_cfg, slicer = channel_prune(teacher.unet.config, ratio)
    student_unet = _build(student_cfg)
    slicer.apply(teacher.unet.state_dict(), student_unet)
    student = PocketSRModel(student_unet, encoder=teacher.encoder,
                            decoder=teacher.decoder)
    taps = register_taps(teacher.unet, student_unet) if with_distill else None

    crop = base_cfg.get("train.crop_size")
    batch = base_cfg.get("train.batch_size")
    dcfg = base_cfg.degradation_config()
    perceptual = PerceptualProxy()
    params = [p for p in student_unet.parameters() if p.requires_grad]
    if taps is not None:
        params += list(taps.parameters())
    opt = torch.optim.AdamW(params, lr=base_cfg.get("train.learning_rate"))

    lam = base_cfg.get("loss.lambda_distill")
    for step in range(budget):
        gen = torch.Generator().manual_seed(seed * 7919 + step)
        hr01 = _synthetic_batch(batch, crop, gen)
        lr01 = degrade(hr01, DegradationConfig(scale=dcfg.scale, seed=step))
        x = to_model_range(F.interpolate(lr01, size=hr01.shape[-2:], mode="bicubic",
                                         align_corners=False).clamp(0, 1))
        hr = to_model_range(hr01)
        enc = student.encoder.encode(x)
        if taps is not None:
            with torch.no_grad():
                _, t_feats = teacher.unet.forward_with_taps(
                    enc.latent, injected=enc.dfi_feature, taps=taps.taps)
            s_out, s_feats = student_unet.forward_with_taps(
                enc.latent, injected=enc.dfi_feature, taps=taps.taps)
            dl = distill_loss_fn([t_feats[t] for t in taps.taps],
                                 [s_feats[t] for t in taps.taps], taps)
        else:
            s_out = student_unet(enc.latent, injected=enc.dfi_feature)
            dl = None
        kappa = student.encoder.asc_head(enc.asc_input)
        sr = student.decoder.decode(s_out, enc.skip_sources, kappa)
        loss = F.mse_loss(sr, hr) + perceptual(sr, hr)
        if dl is not None:
            loss = loss + lam * dl
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    with torch.no_grad():
        gen = torch.Generator().manual_seed(seed * 7919 + 10_007)
        hr01 = _synthetic_batch(batch, crop, gen)
        lr01 = degrade(hr01, DegradationConfig(scale=dcfg.scale, seed=10_007))
        x = to_model_range(F.interpolate(lr01, size=hr01.shape[-2:], mode="bicubic",
                                         align_corners=False).clamp(0, 1))
        sr = student(x)
        mse = float(F.mse_loss(sr, to_model_range(hr01)))
        proxy = float(perceptual(sr, to_model_range(hr01)))

    params_n, macs_n = _sweep_pipeline_totals(student_cfg, PruningPlan.empty(),
                                              base_cfg)
    return {"arm": f"{pruned_pct}%", "kind": "channel_ratio",
            "distill": with_distill, "params": params_n, "macs": macs_n,
            "mse": mse, "perceptual": proxy}


def _sweep_table(rows) -> str:
    cols = ["arm", "distill", "params", "macs", "mse", "perceptual"]
    lines = [" ".join(f"{c:>12}" for c in cols)]
    for row in rows:
        vals = [row.get("arm", ""), str(row.get("distill", "-")),
                f"{row['params']:,}", f"{row['macs']:,}",
                f"{row['mse']:.5f}", f"{row['perceptual']:.5f}"]
        lines.append(" ".join(f"{v:>12}" for v in vals))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pocketsr",
        description="Train, prune, profile and run the PocketSR stack.")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", type=Path, default=None,
                       help="config file of dotted key = value lines")
        p.add_argument("--preset", choices=("toy", "full_scale"), default=None)
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", type=Path, default=None,
                       help="output directory (default: paths.out_dir)")

    p1 = sub.add_parser("train-stage1", help="train the full model end to end")
    common(p1)
    p1.add_argument("--data", type=Path, default=None)

    p2 = sub.add_parser("train-stage2", help="freeze LiteED, prune the U-Net")
    common(p2)
    p2.add_argument("--data", type=Path, default=None)
    p2.add_argument("--teacher", type=Path, default=None,
                    help="stage-1 checkpoint to distill from")

    pi = sub.add_parser("infer", help="super-resolve one image")
    common(pi)
    pi.add_argument("--checkpoint", type=Path, required=True)
    pi.add_argument("--input", type=Path, required=True)
    pi.add_argument("--output", type=Path, required=True)
    pi.add_argument("--tile", type=int, default=None)
    pi.add_argument("--tile-overlap", type=int, default=32)

    pp = sub.add_parser("profile", help="analytic compression report")
    common(pp)
    pp.add_argument("--input-size", type=int, default=512)
    pp.add_argument("--latency", action="store_true",
                    help="also measure wall-clock (builds the models)")
    pp.add_argument("--csv", type=Path, default=None)
    pp.add_argument("--records", type=Path, default=None)

    ps = sub.add_parser("sweep", help="ablation sweep over pruning choices")
    common(ps)
    ps.add_argument("--kind", required=True,
                    choices=("resblock", "self_attention", "cross_attention",
                             "ffn", "channel_ratio"))
    ps.add_argument("--budget", type=int, default=20)

    pe = sub.add_parser("export", help="strip a checkpoint to an inference bundle")
    common(pe)
    pe.add_argument("--checkpoint", type=Path, required=True)
    pe.add_argument("--output", type=Path, required=True)
    pe.add_argument("--allow-unpruned", action="store_true")
    return parser


def _resolve_config(args) -> RunConfig:
    return RunConfig.load(path=args.config, overrides=args.overrides,
                          preset=args.preset)


def _write_resolved(cfg: RunConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved.cfg").write_text(cfg.serialize())


def _load_image01(path: Path) -> torch.Tensor:
    import numpy as np
    from PIL import Image

    img = Image.open(path).convert("RGB")
    return torch.from_numpy(np.array(img)).permute(2, 0, 1).float().unsqueeze(0) / 255.0


def _save_image01(tensor: torch.Tensor, path: Path):
    import numpy as np
    from PIL import Image

    arr = (tensor.squeeze(0).clamp(0, 1) * 255.0).round().byte()
    Image.fromarray(arr.permute(1, 2, 0).numpy()).save(path)


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        return _dispatch(args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(args.out) if args.out is not None else Path(cfg.get("paths.out_dir"))

    if args.command == "train-stage1":
        _write_resolved(cfg, out_dir)
        ckpt = train_stage1(cfg, data_dir=args.data, out_dir=out_dir)
        print(f"stage-1 checkpoint: {ckpt}")
        return 0

    if args.command == "train-stage2":
        teacher = args.teacher or (cfg.get("paths.teacher") or None)
        _write_resolved(cfg, out_dir)
        ckpt = train_stage2(cfg, teacher, data_dir=args.data, out_dir=out_dir)
        print(f"stage-2 checkpoint: {ckpt}")
        return 0

    if args.command == "infer":
        model, _ = load_checkpoint(args.checkpoint)
        model.eval()
        image = _load_image01(args.input)
        sr = model.enhance(image, scale=cfg.get("degrade.scale"),
                           tile=args.tile, tile_overlap=args.tile_overlap)
        args.output.parent.mkdir(parents=True, exist_ok=True)
        _save_image01(sr, args.output)
        _write_resolved(cfg, args.output.parent)
        print(f"wrote {args.output}")
        return 0

    if args.command == "profile":
        _write_resolved(cfg, out_dir)
        plan = cfg.pruning_plan()
        before = cfg.unet_config(injection_channels=cfg.unet_config().width(0))
        after, _ = channel_prune(before, plan.channel_ratio)
        report = accounting.compression_report(
            before, after, plan, input_size=args.input_size,
            encoder=cfg.encoder_config(feature_channels=before.width(0)),
            decoder=cfg.decoder_config())
        from .checkpoints import arch_hash

        print(f"config: arch={arch_hash(before)} seed={cfg.get('train.seed')} "
              f"(resolved.cfg in {out_dir})")
        print(report.table())
        if args.latency:
            from .pipeline import PocketSRModel, build_pipeline
            from .pruning import materialize_plan

            seed_all(cfg.get("train.seed"))
            base = build_pipeline(before, cfg.decoder_config())
            pruned = PocketSRModel(materialize_plan(after, plan),
                                   decoder=_decoder(cfg))
            shape = (1, 3, args.input_size, args.input_size)
            for label, model in (("baseline", base), ("pruned", pruned)):
                ms = accounting.measure_latency(model, shape, trials=3, warmup=1)
                print(f"latency[{label}]: {ms:.1f} ms (report-only)")
        if args.csv:
            args.csv.write_text(report.after.to_csv())
        if args.records:
            header = json.dumps({"resolved_config": cfg.serialize(),
                                 "seed": cfg.get("train.seed")}) + "\n"
            args.records.write_text(header + report.before.records()
                                    + report.after.records())
        return 0

    if args.command == "sweep":
        _write_resolved(cfg, out_dir)
        if args.kind == "channel_ratio":
            spec = SweepSpec("channel_ratio", CHANNEL_ARMS, budget=args.budget)
        else:
            spec = SweepSpec(args.kind, DEPTH_LADDER, budget=args.budget)
        rows = sweep(spec, cfg, out_dir=out_dir)
        print(_sweep_table(rows))
        return 0

    if args.command == "export":
        out = export_bundle(args.checkpoint, args.output,
                            allow_unpruned=args.allow_unpruned)
        _write_resolved(cfg, out.parent)
        print(f"wrote {out}")
        return 0

    raise ValueError(f"unknown command {args.command!r}")


def _decoder(cfg):
    from .lite_ed import LiteDecoder

    return LiteDecoder(cfg.decoder_config())


def main() -> int:
    return run()


if __name__ == "__main__":
    sys.exit(main())
