"""Analytic parameter and MAC accounting plus a wall-clock latency harness.

Counts are pure functions of configuration (no weights needed) and mirror the
builders layer by layer, so config-derived totals must equal built-model
parameter enumeration exactly.

Conventions, fixed so comparisons stay meaningful:
  conv            k^2 * C_in * C_out * H_out * W_out MACs
  depthwise-sep   k^2 * C_in * H * W  +  C_in * C_out * H * W (output size)
  linear          L * D_in * D_out
  softmax attn    4*L*d^2 projections + 2*L^2*d score/mix
  cross attn      2*L*d^2 + 2*L_ctx*ctx*d projections + 2*L*L_ctx*d score/mix
  linear attn     4*L*d*inner projections + 2*L*inner^2 mixing
  normalization   2 * C * elements MACs, 2 * C params
  biases included in params; activation/pooling/resampling cost excluded.
"""
from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import dataclass, field

import torch
from torch import nn

from .backbone import DEPTHS, UNetConfig
from .lite_ed import LiteDecoderConfig, LiteEncoderConfig
from .pruning import PruningPlan

# ---------------------------------------------------------------------------
# layer descriptors


def desc_params(d: dict) -> int:
    op = d["op"]
    if op == "conv":
        p = d["k"] ** 2 * d["cin"] * d["cout"]
        return p + (d["cout"] if d.get("bias", True) else 0)
    if op == "ds_conv":
        dw = 9 * d["cin"] + d["cin"]
        pw = d["cin"] * d["cout"] + d["cout"]
        return dw + pw
    if op == "linear":
        return d["din"] * d["dout"] + (d["dout"] if d.get("bias", True) else 0)
    if op == "norm":
        return 2 * d["c"]
    if op == "self_attention":
        return 4 * d["dim"] ** 2 + d["dim"]
    if op == "cross_attention":
        return 2 * d["dim"] ** 2 + 2 * d["ctx"] * d["dim"] + d["dim"]
    if op == "linear_attention":
        return 4 * d["dim"] * d["inner"] + d["dim"]
    if op == "params":
        return d["n"]
    raise ValueError(f"unsupported layer kind {op!r} in parameter accounting")


def desc_macs(d: dict) -> int:
    op = d["op"]
    if op == "conv":
        return d["k"] ** 2 * d["cin"] * d["cout"] * d["hout"] * d["wout"]
    if op == "ds_conv":
        hw = d["hout"] * d["wout"]
        return 9 * d["cin"] * hw + d["cin"] * d["cout"] * hw
    if op == "linear":
        return d.get("tokens", 1) * d["din"] * d["dout"]
    if op == "norm":
        return 2 * d["c"] * d["elems"]
    if op == "self_attention":
        return 4 * d["tokens"] * d["dim"] ** 2 + 2 * d["tokens"] ** 2 * d["dim"]
    if op == "cross_attention":
        return (2 * d["tokens"] * d["dim"] ** 2
                + 2 * d["ctx_tokens"] * d["ctx"] * d["dim"]
                + 2 * d["tokens"] * d["ctx_tokens"] * d["dim"])
    if op == "linear_attention":
        return (4 * d["tokens"] * d["dim"] * d["inner"]
                + 2 * d["tokens"] * d["inner"] ** 2)
    if op == "params":
        return 0
    raise ValueError(f"unsupported layer kind {op!r} in MAC accounting")


@dataclass
class ReportRow:
    name: str
    kind: str
    depth: str
    params: int
    macs: int
    latency_ms: float | None = None


@dataclass
class ComputeReport:
    rows: list = field(default_factory=list)
    input_size: tuple = (512, 512)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def component_totals(self) -> dict:
        """Aggregate by the row-name prefix before the first dot."""
        out = {}
        for r in self.rows:
            key = r.name.split(".", 1)[0]
            p, m = out.get(key, (0, 0))
            out[key] = (p + r.params, m + r.macs)
        return out

    def table(self) -> str:
        lines = [f"{'component':<16} {'params (M)':>12} {'MACs (G)':>12}"]
        for key, (p, m) in self.component_totals().items():
            lines.append(f"{key:<16} {p / 1e6:>12.3f} {m / 1e9:>12.3f}")
        lines.append(f"{'total':<16} {self.total_params / 1e6:>12.3f} "
                     f"{self.total_macs / 1e9:>12.3f}")
        return "\n".join(lines)

    def records(self) -> str:
        out = []
        for r in self.rows:
            rec = {"name": r.name, "kind": r.kind, "depth": r.depth,
                   "params": r.params, "macs": r.macs,
                   "input_size": list(self.input_size)}
            if r.latency_ms is not None:
                rec["latency_ms"] = r.latency_ms
            out.append(json.dumps(rec))
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["name", "kind", "depth", "params", "macs", "latency_ms"])
        for r in self.rows:
            writer.writerow([r.name, r.kind, r.depth, r.params, r.macs,
                             "" if r.latency_ms is None else r.latency_ms])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# U-Net inventory (mirrors backbone.UNetModel layer by layer)


def _resblock_descs(ci, co, temb_dim, res_in, res_out, ds=False):
    descs = [{"op": "norm", "c": ci, "elems": res_in[0] * res_in[1]}]
    conv_op = "ds_conv" if ds else "conv"
    descs.append({"op": conv_op, "cin": ci, "cout": co, "k": 3,
                  "hout": res_out[0], "wout": res_out[1]})
    descs.append({"op": "linear", "din": temb_dim, "dout": co, "tokens": 1})
    descs.append({"op": "norm", "c": co, "elems": res_out[0] * res_out[1]})
    descs.append({"op": conv_op, "cin": co, "cout": co, "k": 3,
                  "hout": res_out[0], "wout": res_out[1]})
    if ci != co:
        descs.append({"op": "conv", "cin": ci, "cout": co, "k": 1,
                      "hout": res_out[0], "wout": res_out[1]})
    return descs


def _transformer_descs(c, ctx, res, *, self_kind="softmax", cross_kind="attn",
                       ffn_hidden=None):
    tokens = res[0] * res[1]
    hidden = ffn_hidden if ffn_hidden is not None else 4 * c
    descs = [
        {"op": "norm", "c": c, "elems": tokens},
        {"op": "conv", "cin": c, "cout": c, "k": 1, "hout": res[0], "wout": res[1]},
        {"op": "norm", "c": c, "elems": tokens},
    ]
    if self_kind == "softmax":
        descs.append({"op": "self_attention", "dim": c, "tokens": tokens})
    else:
        descs.append({"op": "linear_attention", "dim": c,
                      "inner": max(1, c // 2), "tokens": tokens})
    descs.append({"op": "norm", "c": c, "elems": tokens})
    if cross_kind == "attn":
        descs.append({"op": "cross_attention", "dim": c, "ctx": ctx,
                      "tokens": tokens, "ctx_tokens": 1})
    else:
        h = max(1, c // 4)
        descs.append({"op": "linear", "din": c, "dout": h, "tokens": tokens})
        descs.append({"op": "linear", "din": h, "dout": c, "tokens": tokens})
    descs.append({"op": "norm", "c": c, "elems": tokens})
    descs.append({"op": "linear", "din": c, "dout": hidden, "tokens": tokens})
    descs.append({"op": "linear", "din": hidden, "dout": c, "tokens": tokens})
    descs.append({"op": "conv", "cin": c, "cout": c, "k": 1,
                  "hout": res[0], "wout": res[1]})
    return descs


def unet_inventory(config: UNetConfig, latent_hw=(64, 64),
                   plan: PruningPlan | None = None) -> list:
    """Per-submodule rows for the U-Net, optionally with the plan applied."""
    plan = plan or PruningPlan.empty()
    kind_depths = plan.kind_depths()
    c = config.widths
    ctx = config.context_dim
    temb = config.temb_dim
    bpd = config.blocks_per_depth
    res = [(latent_hw[0] // 2 ** d, latent_hw[1] // 2 ** d) for d in range(4)]

    rows = []

    def add(name, kind, depth, descs):
        rows.append(ReportRow(name, kind, depth,
                              sum(desc_params(d) for d in descs),
                              sum(desc_macs(d) for d in descs)))

    def res_row(name, depth_i, ci, co, rin, rout, position):
        ds = DEPTHS[depth_i] in kind_depths["resblock"]
        add(f"unet.{name}", "resblock", DEPTHS[depth_i],
            _resblock_descs(ci, co, temb, rin, rout, ds=ds))

    def transformer_rows(name, depth_i, cc, r):
        depth = DEPTHS[depth_i]
        tokens = r[0] * r[1]
        add(f"unet.{name}.plumbing", "plumbing", depth, [
            {"op": "norm", "c": cc, "elems": tokens},
            {"op": "conv", "cin": cc, "cout": cc, "k": 1, "hout": r[0], "wout": r[1]},
            {"op": "norm", "c": cc, "elems": tokens},
            {"op": "norm", "c": cc, "elems": tokens},
            {"op": "norm", "c": cc, "elems": tokens},
            {"op": "conv", "cin": cc, "cout": cc, "k": 1, "hout": r[0], "wout": r[1]},
        ])
        if depth in kind_depths["self_attention"]:
            add(f"unet.{name}.attn1", "self_attention", depth,
                [{"op": "linear_attention", "dim": cc, "inner": max(1, cc // 2),
                  "tokens": tokens}])
        else:
            add(f"unet.{name}.attn1", "self_attention", depth,
                [{"op": "self_attention", "dim": cc, "tokens": tokens}])
        if depth in kind_depths["cross_attention"]:
            h = max(1, cc // 4)
            add(f"unet.{name}.attn2", "cross_attention", depth, [
                {"op": "linear", "din": cc, "dout": h, "tokens": tokens},
                {"op": "linear", "din": h, "dout": cc, "tokens": tokens},
            ])
        else:
            add(f"unet.{name}.attn2", "cross_attention", depth,
                [{"op": "cross_attention", "dim": cc, "ctx": ctx,
                  "tokens": tokens, "ctx_tokens": 1}])
        hidden = cc if depth in kind_depths["ffn"] else 4 * cc
        add(f"unet.{name}.ff", "ffn", depth, [
            {"op": "linear", "din": cc, "dout": hidden, "tokens": tokens},
            {"op": "linear", "din": hidden, "dout": cc, "tokens": tokens},
        ])

    add("unet.cond", "plumbing", "-", [{"op": "params", "n": ctx}])
    add("unet.conv_in", "plumbing", "-",
        [{"op": "conv", "cin": config.latent_channels, "cout": c[0], "k": 3,
          "hout": latent_hw[0], "wout": latent_hw[1]}])
    if config.injection_channels:
        add("unet.injection", "plumbing", "-", [
            {"op": "conv", "cin": config.injection_channels, "cout": c[0], "k": 1,
             "hout": latent_hw[0], "wout": latent_hw[1]},
            {"op": "params", "n": 1},
        ])
    add("unet.time_mlp", "plumbing", "-", [
        {"op": "linear", "din": config.time_sinusoid_dim, "dout": temb, "tokens": 1},
        {"op": "linear", "din": temb, "dout": temb, "tokens": 1},
    ])

    # down path
    prev = c[0]
    skip_channels = [c[0]]
    for d in range(4):
        for j in range(bpd):
            res_row(f"down_stages.{d}.units.{j}.res", d, prev, c[d], res[d], res[d],
                    "down")
            prev = c[d]
            skip_channels.append(c[d])
            if d < 3:
                transformer_rows(f"down_stages.{d}.units.{j}.attn", d, c[d], res[d])
        if d < 3:
            res_row(f"down_stages.{d}.resample", d, c[d], c[d], res[d], res[d + 1],
                    "down")
            skip_channels.append(c[d])

    # mid
    res_row("mid.res1", 3, c[3], c[3], res[3], res[3], "mid")
    transformer_rows("mid.attn", 3, c[3], res[3])
    res_row("mid.res2", 3, c[3], c[3], res[3], res[3], "mid")

    # up path
    h_ch = c[3]
    for k, d in enumerate(reversed(range(4))):
        for j in range(bpd + 1):
            s_ch = skip_channels.pop()
            res_row(f"up_stages.{k}.units.{j}.res", d, h_ch + s_ch, c[d],
                    res[d], res[d], "up")
            h_ch = c[d]
            if d < 3:
                transformer_rows(f"up_stages.{k}.units.{j}.attn", d, c[d], res[d])
        if d > 0:
            res_row(f"up_stages.{k}.resample", d, c[d], c[d], res[d], res[d - 1], "up")

    add("unet.out_head", "plumbing", "-", [
        {"op": "norm", "c": c[0], "elems": latent_hw[0] * latent_hw[1]},
        {"op": "conv", "cin": c[0], "cout": config.latent_channels, "k": 3,
         "hout": latent_hw[0], "wout": latent_hw[1]},
    ])
    return rows


def encoder_inventory(config: LiteEncoderConfig, image_hw=(512, 512)) -> list:
    h, w = image_hw
    f = config.feature_channels
    rows = []
    descs = [
        ("conv1", {"op": "conv", "cin": config.in_channels, "cout": 64, "k": 5,
                   "hout": h // 4, "wout": w // 4}),
        ("conv2", {"op": "conv", "cin": 64, "cout": f, "k": 3,
                   "hout": h // 8, "wout": w // 8}),
        ("conv3", {"op": "conv", "cin": f, "cout": 128, "k": 3,
                   "hout": h // 8, "wout": w // 8}),
        ("conv4", {"op": "conv", "cin": 128, "cout": config.latent_channels, "k": 3,
                   "hout": h // 8, "wout": w // 8}),
        ("asc_head.fc1", {"op": "linear", "din": f, "dout": config.asc_hidden,
                          "tokens": 1}),
        ("asc_head.fc2", {"op": "linear", "din": config.asc_hidden, "dout": 4,
                          "tokens": 1}),
    ]
    for name, d in descs:
        rows.append(ReportRow(f"lite_encoder.{name}", "plumbing", "-",
                              desc_params(d), desc_macs(d)))
    return rows


def decoder_inventory(config: LiteDecoderConfig, latent_hw=(64, 64),
                      skip_channels: int = 3) -> list:
    cap = config.channel_cap
    h, w = latent_hw
    rows = []

    def add(name, descs):
        rows.append(ReportRow(f"lite_decoder.{name}", "plumbing", "-",
                              sum(desc_params(d) for d in descs),
                              sum(desc_macs(d) for d in descs)))

    def block_descs(r):
        return [{"op": "conv", "cin": cap, "cout": cap, "k": 3,
                 "hout": r[0], "wout": r[1]} for _ in range(3)]

    add("conv_in", [{"op": "conv", "cin": config.latent_channels, "cout": cap,
                     "k": 3, "hout": h, "wout": w}])
    for i in range(4):
        r = (h * 2 ** i, w * 2 ** i)
        add(f"skip_convs.{i}", [{"op": "conv", "cin": skip_channels, "cout": cap,
                                 "k": 3, "hout": r[0], "wout": r[1]}])
    for i in range(config.upsample_stages):
        r = (h * 2 ** i, w * 2 ** i)
        r_up = (r[0] * 2, r[1] * 2)
        for b in range(config.blocks_per_stage):
            add(f"stages.{i}.{b}", block_descs(r))
        add(f"up_convs.{i}", [{"op": "conv", "cin": cap, "cout": cap, "k": 3,
                               "bias": False, "hout": r_up[0], "wout": r_up[1]}])
    r8 = (h * 8, w * 8)
    for b in range(config.head_resblocks):
        add(f"head.{b}", block_descs(r8))
    add("conv_out", [{"op": "conv", "cin": cap, "cout": config.output_channels,
                      "k": 3, "hout": r8[0], "wout": r8[1]}])
    return rows


# ---------------------------------------------------------------------------
# public operations


def _as_hw(input_size) -> tuple:
    if isinstance(input_size, int):
        return (input_size, input_size)
    return tuple(input_size)


def count_params(model_or_config, plan: PruningPlan | None = None) -> ComputeReport:
    """Exact parameter counts, from a config (analytic) or a built module."""
    if isinstance(model_or_config, nn.Module):
        rows = [ReportRow(name, "submodule", "-",
                          sum(p.numel() for p in child.parameters()), 0)
                for name, child in model_or_config.named_children()]
        direct = sum(p.numel() for p in model_or_config.parameters(recurse=False))
        if direct:
            rows.append(ReportRow("(direct)", "submodule", "-", direct, 0))
        return ComputeReport(rows=rows, input_size=(0, 0))
    if isinstance(model_or_config, UNetConfig):
        return ComputeReport(rows=unet_inventory(model_or_config, plan=plan))
    if isinstance(model_or_config, LiteEncoderConfig):
        return ComputeReport(rows=encoder_inventory(model_or_config))
    if isinstance(model_or_config, LiteDecoderConfig):
        return ComputeReport(rows=decoder_inventory(model_or_config))
    raise ValueError(f"cannot count parameters of {type(model_or_config).__name__}")


def count_macs(config, input_size=512, plan: PruningPlan | None = None) -> ComputeReport:
    """Analytic multiply-accumulate counts at an image input size (per image)."""
    hw = _as_hw(input_size)
    latent = (hw[0] // 8, hw[1] // 8)
    if isinstance(config, UNetConfig):
        return ComputeReport(rows=unet_inventory(config, latent_hw=latent, plan=plan),
                             input_size=hw)
    if isinstance(config, LiteEncoderConfig):
        return ComputeReport(rows=encoder_inventory(config, image_hw=hw),
                             input_size=hw)
    if isinstance(config, LiteDecoderConfig):
        return ComputeReport(rows=decoder_inventory(config, latent_hw=latent),
                             input_size=hw)
    raise ValueError(f"cannot count MACs of {type(config).__name__}")


def model_param_total(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def measure_latency(model, input_shape, trials: int = 10, warmup: int = 3) -> float:
    """Median forward wall-clock in milliseconds; report-only, never asserted."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    x = torch.randn(*input_shape)
    times = []
    with torch.no_grad():
        for _ in range(warmup):
            model(x)
        for _ in range(trials):
            start = time.perf_counter()
            model(x)
            times.append((time.perf_counter() - start) * 1000.0)
    return statistics.median(times)


@dataclass
class CompressionReport:
    before: ComputeReport
    after: ComputeReport
    input_size: tuple

    def reductions(self) -> dict:
        """Per-component (params %, MACs %) reductions, plus the total."""
        b = self.before.component_totals()
        a = self.after.component_totals()
        out = {}
        for key in b:
            bp, bm = b[key]
            ap, am = a.get(key, (0, 0))
            out[key] = (100.0 * (1 - ap / bp) if bp else 0.0,
                        100.0 * (1 - am / bm) if bm else 0.0)
        bp, bm = self.before.total_params, self.before.total_macs
        ap, am = self.after.total_params, self.after.total_macs
        out["total"] = (100.0 * (1 - ap / bp), 100.0 * (1 - am / bm))
        return out

    def table(self) -> str:
        b = self.before.component_totals()
        a = self.after.component_totals()
        red = self.reductions()
        lines = [f"{'component':<16} {'params (M)':>24} {'MACs (G)':>24}"]
        for key in list(b) + ["total"]:
            if key == "total":
                bp, bm = self.before.total_params, self.before.total_macs
                ap, am = self.after.total_params, self.after.total_macs
            else:
                bp, bm = b[key]
                ap, am = a.get(key, (0, 0))
            rp, rm = red[key]
            lines.append(
                f"{key:<16} {bp / 1e6:>10.3f} -> {ap / 1e6:>8.3f} ({rp:5.1f}%)"
                f" {bm / 1e9:>10.3f} -> {am / 1e9:>8.3f} ({rm:5.1f}%)"
            )
        return "\n".join(lines)


def compression_report(before: UNetConfig, after: UNetConfig, plan: PruningPlan,
                       input_size=512,
                       encoder: LiteEncoderConfig | None = None,
                       decoder: LiteDecoderConfig | None = None) -> CompressionReport:
    """Side-by-side accounting for the full pipeline before/after the plan."""
    hw = _as_hw(input_size)
    encoder = encoder or LiteEncoderConfig(feature_channels=before.width(0))
    decoder = decoder or LiteDecoderConfig()
    latent = (hw[0] // 8, hw[1] // 8)

    def pipeline_rows(cfg, active_plan):
        rows = []
        rows.extend(encoder_inventory(encoder, image_hw=hw))
        rows.extend(unet_inventory(cfg, latent_hw=latent, plan=active_plan))
        rows.extend(decoder_inventory(decoder, latent_hw=latent))
        return rows

    before_report = ComputeReport(rows=pipeline_rows(before, None), input_size=hw)
    after_report = ComputeReport(rows=pipeline_rows(after, plan), input_size=hw)
    return CompressionReport(before=before_report, after=after_report, input_size=hw)
