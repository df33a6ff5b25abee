"""Two-stage training: full model end-to-end, then freeze the autoencoder and
compress the U-Net (channel pruning with feature distillation, followed by
module-wise online annealing).

Also home to the training-time plumbing the stages share: the synthetic
degradation pipeline, the hinge-GAN pair, the frozen perceptual proxy and the
composite loss.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace as dataclass_replace
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .lite_ed import to_model_range


@dataclass(frozen=True)
class LossWeights:
    lambda_mse: float = 2.0
    lambda_lpips: float = 2.0
    lambda_gan: float = 0.25
    lambda_distill: float = 0.001

    def __post_init__(self):
        for name in ("lambda_mse", "lambda_lpips", "lambda_gan", "lambda_distill"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class StagePlan:
    stage: int
    steps_stage1: int = 80000
    steps_channel: int = 80000
    steps_anneal: int = 8000
    batch_size: int = 64
    learning_rate: float = 1e-4

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        for name in ("steps_stage1", "steps_channel", "steps_anneal", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


# ---------------------------------------------------------------------------
# degradation synthesis


@dataclass(frozen=True)
class DegradationConfig:
    scale: int = 4
    blur_sigma_range: tuple = (0.2, 3.0)
    noise_sigma_range: tuple = (0.0, 0.1)
    jpeg_quality_range: tuple | None = (40, 95)
    seed: int = 0

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        for name in ("blur_sigma_range", "noise_sigma_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"invalid {name}: ({lo}, {hi})")


def _uniform(gen, lo, hi):
    if hi <= lo:
        return lo
    return (torch.rand((), generator=gen) * (hi - lo) + lo).item()


def _gaussian_blur(x, sigma):
    radius = max(1, int(math.ceil(3.0 * sigma)))
    coords = torch.arange(-radius, radius + 1, dtype=torch.float32)
    k1 = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    k1 = k1 / k1.sum()
    kernel = (k1[:, None] * k1[None, :]).expand(x.shape[1], 1, -1, -1)
    x = F.pad(x, (radius, radius, radius, radius), mode="reflect")
    return F.conv2d(x, kernel, groups=x.shape[1])


def degrade(hr_image: torch.Tensor, config: DegradationConfig) -> torch.Tensor:
    """Blur -> bicubic downsample -> additive noise -> quantization, per sample.

    Operates on [0, 1] images. Fully deterministic for a given (config, input):
    one generator seeded from config.seed drives every random draw. The
    quantization step is a stand-in for compression artifacts, not a real
    JPEG encoder.
    """
    if hr_image.dim() != 4:
        raise ValueError("degrade expects [N, C, H, W] input")
    n, _, h, w = hr_image.shape
    if h % config.scale != 0 or w % config.scale != 0:
        raise ValueError(f"image size {h}x{w} is not divisible by scale {config.scale}")
    gen = torch.Generator().manual_seed(config.seed)
    out = []
    for i in range(n):
        x = hr_image[i:i + 1]
        blur_sigma = _uniform(gen, *config.blur_sigma_range)
        if blur_sigma > 0:
            x = _gaussian_blur(x, blur_sigma)
        x = F.interpolate(x, size=(h // config.scale, w // config.scale),
                          mode="bicubic", align_corners=False)
        noise_sigma = _uniform(gen, *config.noise_sigma_range)
        if noise_sigma > 0:
            x = x + noise_sigma * torch.randn(x.shape, generator=gen)
        if config.jpeg_quality_range is not None:
            lo, hi = config.jpeg_quality_range
            quality = int(torch.randint(int(lo), int(hi) + 1, (), generator=gen))
            levels = max(2, round(256 * quality / 100))
            x = torch.round(x.clamp(0.0, 1.0) * (levels - 1)) / (levels - 1)
        out.append(x.clamp(0.0, 1.0))
    return torch.cat(out, dim=0)


# ---------------------------------------------------------------------------
# adversarial pair


class PatchDiscriminator(nn.Module):
    """Four strided convolutions scoring local patches."""

    def __init__(self, in_channels: int = 3, base: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base, base * 2, 4, stride=2, padding=1),
            nn.InstanceNorm2d(base * 2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base * 2, base * 4, 4, stride=2, padding=1),
            nn.InstanceNorm2d(base * 4),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base * 4, 1, 4, padding=1),
        )

    def forward(self, x):
        return self.net(x)


def hinge_d_loss(real_scores, fake_scores):
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def hinge_g_loss(fake_scores):
    return -fake_scores.mean()


def adversarial_losses(disc, real, fake):
    """Hinge losses; the discriminator term sees the generator output detached."""
    if real.shape != fake.shape:
        raise ValueError("real and fake batches must share a shape")
    d_loss = hinge_d_loss(disc(real), disc(fake.detach()))
    g_loss = hinge_g_loss(disc(fake))
    return d_loss, g_loss


# ---------------------------------------------------------------------------
# perceptual proxy


class PerceptualProxy(nn.Module):
    """Frozen random-conv feature distance standing in for a learned LPIPS.

    Three strided conv stages with fixed-seed weights; features are channel
    unit-normalized before the squared distance. Any callable (a, b) -> scalar
    can be plugged in instead when pretrained perceptual weights are available.
    """

    def __init__(self, seed: int = 1234, channels=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for cout in channels:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (2.0 / (9 * cin)) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.convs = nn.ModuleList(layers)
        self.requires_grad_(False)

    def _features(self, x):
        feats = []
        h = x
        for conv in self.convs:
            h = F.relu(conv(h))
            norm = (h.pow(2).sum(dim=1, keepdim=True) + 1e-12).sqrt() + 1e-8
            feats.append(h / norm)
        return feats

    def forward(self, a, b):
        total = None
        for fa, fb in zip(self._features(a), self._features(b)):
            term = (fa - fb).pow(2).mean()
            total = term if total is None else total + term
        return total


# ---------------------------------------------------------------------------
# composite loss


def compose_loss(sr, hr, disc_scores, weights: LossWeights, perceptual,
                 stage: int = 1, distill_value=None):
    """Weighted sum of reconstruction, perceptual, adversarial (+ distill) terms."""
    if sr.shape != hr.shape:
        raise ValueError("sr and hr must share a shape")
    if stage == 1 and distill_value is not None:
        raise ValueError("distillation term is only valid in stage 2")
    mse = F.mse_loss(sr, hr)
    lpips = perceptual(sr, hr)
    gan = hinge_g_loss(disc_scores)
    total = (weights.lambda_mse * mse + weights.lambda_lpips * lpips
             + weights.lambda_gan * gan)
    components = {"mse": mse, "lpips": lpips, "gan": gan}
    if distill_value is not None:
        total = total + weights.lambda_distill * distill_value
        components["distill"] = distill_value
    return total, components


# ---------------------------------------------------------------------------
# misc training plumbing


def seed_all(seed: int):
    torch.manual_seed(seed)


def weights_hash(module: nn.Module) -> str:
    """SHA-256 over the sorted state dict; detects any weight mutation."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class ImageFolderDataset:
    """Directory of PNG/JPEG images, loaded as [0, 1] tensors."""

    SUFFIXES = (".png", ".jpg", ".jpeg")

    def __init__(self, root, crop_size: int):
        from PIL import Image
        self._image_cls = Image
        self.root = Path(root)
        self.crop_size = crop_size
        self.files = sorted(p for p in self.root.glob("*")
                            if p.suffix.lower() in self.SUFFIXES)
        if not self.files:
            raise ValueError(f"no images found in {self.root}")

    def __len__(self):
        return len(self.files)

    def load_crop(self, index: int, gen: torch.Generator) -> torch.Tensor:
        import numpy as np
        img = self._image_cls.open(self.files[index]).convert("RGB")
        arr = torch.from_numpy(np.array(img)).permute(2, 0, 1).float() / 255.0
        _, h, w = arr.shape
        c = self.crop_size
        if h < c or w < c:
            raise ValueError(
                f"{self.files[index].name} is {h}x{w}, smaller than the "
                f"{c}x{c} crop size"
            )
        top = int(torch.randint(0, h - c + 1, (), generator=gen))
        left = int(torch.randint(0, w - c + 1, (), generator=gen))
        return arr[:, top:top + c, left:left + c]

    def sample_batch(self, batch_size: int, gen: torch.Generator) -> torch.Tensor:
        idx = torch.randint(0, len(self.files), (batch_size,), generator=gen)
        return torch.stack([self.load_crop(int(i), gen) for i in idx])


class TrainLogger:
    """Line-delimited JSON, one record per optimizer step."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w")

    def log(self, **record):
        clean = {k: (v.item() if torch.is_tensor(v) else v) for k, v in record.items()}
        self._fh.write(json.dumps(clean) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def _grad_clip(params, max_norm: float = 1.0):
    torch.nn.utils.clip_grad_norm_([p for p in params if p.requires_grad], max_norm)


def _batch_pair(dataset, dcfg: DegradationConfig, batch_size: int,
                seed: int, step: int):
    """One (hr, lr_upsampled) training pair in model range, deterministic per step."""
    gen = torch.Generator().manual_seed(seed * 1_000_003 + step)
    hr01 = dataset.sample_batch(batch_size, gen)
    lr01 = degrade(hr01, dataclass_replace(dcfg, seed=dcfg.seed + 15_485_863 * step + 1))
    lr_up01 = F.interpolate(lr01, size=hr01.shape[-2:], mode="bicubic",
                            align_corners=False).clamp(0.0, 1.0)
    return to_model_range(hr01), to_model_range(lr_up01)


# ---------------------------------------------------------------------------
# stage 1


def train_stage1(cfg, data_dir=None, out_dir=None):
    """End-to-end training of the full pipeline; returns the checkpoint path."""
    from .checkpoints import save_checkpoint
    from .pipeline import build_pipeline

    data_dir = Path(data_dir or cfg.get("paths.data_dir"))
    out_dir = Path(out_dir or cfg.get("paths.out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = StagePlan(stage=1,
                     steps_stage1=cfg.get("train.steps_stage1"),
                     steps_channel=cfg.get("train.steps_channel"),
                     steps_anneal=cfg.get("train.steps_anneal"),
                     batch_size=cfg.get("train.batch_size"),
                     learning_rate=cfg.get("train.learning_rate"))
    seed = cfg.get("train.seed")
    crop = cfg.get("train.crop_size")
    dcfg = cfg.degradation_config()
    if crop % dcfg.scale != 0:
        raise ValueError(f"crop size {crop} is not divisible by scale {dcfg.scale}")
    weights = cfg.loss_weights()

    seed_all(seed)
    dataset = ImageFolderDataset(data_dir, crop)
    model = build_pipeline(cfg.unet_config(), cfg.decoder_config())
    disc = PatchDiscriminator()
    perceptual = PerceptualProxy()
    opt_g = torch.optim.AdamW(model.parameters(), lr=plan.learning_rate,
                              weight_decay=cfg.get("train.weight_decay"))
    opt_d = torch.optim.AdamW(disc.parameters(), lr=plan.learning_rate,
                              weight_decay=cfg.get("train.weight_decay"))
    logger = TrainLogger(out_dir / "stage1_log.jsonl")

    for step in range(plan.steps_stage1):
        hr, x = _batch_pair(dataset, dcfg, plan.batch_size, seed, step)
        sr = model(x)

        d_loss = hinge_d_loss(disc(hr), disc(sr.detach()))
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        _grad_clip(disc.parameters(), cfg.get("train.grad_clip"))
        opt_d.step()

        total, comps = compose_loss(sr, hr, disc(sr), weights, perceptual, stage=1)
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        _grad_clip(model.parameters(), cfg.get("train.grad_clip"))
        opt_g.step()

        logger.log(stage=1, step=step, total=total, d_loss=d_loss,
                   lr=plan.learning_rate, **comps)
    logger.close()

    ckpt = out_dir / "stage1.ckpt"
    save_checkpoint(ckpt, cfg, step=plan.steps_stage1, stage=1,
                    pruning_state="none", unet_config=model.unet.config,
                    weights={"pipeline": model.state_dict(),
                             "discriminator": disc.state_dict()})
    return ckpt


# ---------------------------------------------------------------------------
# stage 2


def train_stage2(cfg, teacher_checkpoint, out_dir=None, data_dir=None):
    """Channel pruning with distillation, then annealed module replacement.

    LiteED and the stage-1 teacher stay frozen throughout; their weight hashes
    are verified before the pruned checkpoint is written.
    """
    from .checkpoints import load_checkpoint, save_checkpoint
    from .distillation import collect_tap_features, distill_loss, register_taps
    from .pipeline import PocketSRModel
    from .pruning import apply_plan, channel_prune, finalize
    from .backbone import build_unet, label_depths

    if teacher_checkpoint is None:
        raise ValueError("train-stage2 requires a teacher checkpoint (--teacher)")
    teacher_checkpoint = Path(teacher_checkpoint)
    if not teacher_checkpoint.exists():
        raise ValueError(f"teacher checkpoint not found: {teacher_checkpoint}")

    data_dir = Path(data_dir or cfg.get("paths.data_dir"))
    out_dir = Path(out_dir or cfg.get("paths.out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    plan_cfg = cfg.pruning_plan()
    stage_plan = StagePlan(stage=2,
                           steps_channel=cfg.get("train.steps_channel"),
                           steps_anneal=cfg.get("train.steps_anneal"),
                           batch_size=cfg.get("train.batch_size"),
                           learning_rate=cfg.get("train.learning_rate"))
    seed = cfg.get("train.seed")
    dcfg = cfg.degradation_config()
    weights = cfg.loss_weights()

    seed_all(seed)
    teacher, t_bundle = load_checkpoint(teacher_checkpoint)
    teacher.eval()
    teacher.requires_grad_(False)
    frozen_hashes = {
        "encoder": weights_hash(teacher.encoder),
        "decoder": weights_hash(teacher.decoder),
        "teacher_unet": weights_hash(teacher.unet),
    }

    student_cfg, slicer = channel_prune(teacher.unet.config, plan_cfg.channel_ratio)
    student_unet = build_unet(student_cfg)
    slicer.apply(teacher.unet.state_dict(), student_unet)
    student = PocketSRModel(student_unet, encoder=teacher.encoder,
                            decoder=teacher.decoder)

    disc = PatchDiscriminator()
    disc.load_state_dict(t_bundle.weights["discriminator"])
    perceptual = PerceptualProxy()
    taps = register_taps(teacher.unet, student_unet,
                         positions=cfg.get("distill.taps"))
    dataset = ImageFolderDataset(data_dir, cfg.get("train.crop_size"))
    logger = TrainLogger(out_dir / "stage2_log.jsonl")

    def make_optimizers():
        train_params = [p for p in student_unet.parameters() if p.requires_grad]
        train_params += list(taps.parameters())
        opt_g = torch.optim.AdamW(train_params, lr=stage_plan.learning_rate,
                                  weight_decay=cfg.get("train.weight_decay"))
        opt_d = torch.optim.AdamW(disc.parameters(), lr=stage_plan.learning_rate,
                                  weight_decay=cfg.get("train.weight_decay"))
        return opt_g, opt_d

    def run_steps(phase, n_steps, opt_g, opt_d, schedule=None, step_offset=0):
        for step in range(n_steps):
            hr, x = _batch_pair(dataset, dcfg, stage_plan.batch_size, seed,
                                step_offset + step)
            enc = student.encoder.encode(x)
            with torch.no_grad():
                _, t_feats = collect_tap_features(
                    teacher.unet, enc.latent, enc.dfi_feature, teacher.unet.cond, taps)
            s_out, s_feats = collect_tap_features(
                student_unet, enc.latent, enc.dfi_feature, student_unet.cond, taps)
            kappa = student.encoder.asc_head(enc.asc_input)
            sr = student.decoder.decode(s_out, enc.skip_sources, kappa)

            d_loss = hinge_d_loss(disc(hr), disc(sr.detach()))
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            _grad_clip(disc.parameters(), cfg.get("train.grad_clip"))
            opt_d.step()

            dl = distill_loss(t_feats, s_feats, taps)
            total, comps = compose_loss(sr, hr, disc(sr), weights, perceptual,
                                        stage=2, distill_value=dl)
            opt_g.zero_grad(set_to_none=True)
            total.backward()
            _grad_clip(list(student_unet.parameters()) + list(taps.parameters()),
                       cfg.get("train.grad_clip"))
            opt_g.step()

            record = dict(stage=2, phase=phase, step=step, total=total,
                          d_loss=d_loss, lr=stage_plan.learning_rate, **comps)
            if schedule is not None:
                record["sigma"] = schedule.sigma()
                schedule.advance()
            logger.log(**record)

    # phase A: channel-pruned student against the frozen teacher
    opt_g, opt_d = make_optimizers()
    run_steps("channel", stage_plan.steps_channel, opt_g, opt_d)

    # phase B: module-wise online annealing
    depth_map = label_depths(student_unet)
    wrapped = apply_plan(student_unet, plan_cfg, depth_map,
                         total_steps=stage_plan.steps_anneal)
    opt_g, opt_d = make_optimizers()
    run_steps("anneal", stage_plan.steps_anneal, opt_g, opt_d,
              schedule=wrapped.schedule, step_offset=stage_plan.steps_channel)
    logger.log(stage=2, phase="anneal_complete", step=stage_plan.steps_anneal,
               sigma=wrapped.schedule.sigma())
    logger.close()

    for name, module in (("encoder", teacher.encoder), ("decoder", teacher.decoder),
                         ("teacher_unet", teacher.unet)):
        if weights_hash(module) != frozen_hashes[name]:
            raise RuntimeError(f"frozen {name} weights changed during stage 2")

    ckpt = out_dir / "stage2.ckpt"
    save_checkpoint(
        ckpt, cfg, step=stage_plan.steps_channel + stage_plan.steps_anneal, stage=2,
        pruning_state=f"annealed:t={wrapped.schedule.step},"
                      f"T={wrapped.schedule.total_steps}",
        unet_config=student_unet.config,
        weights={"pipeline": student.state_dict(),
                 "discriminator": disc.state_dict(),
                 "distill_projections": taps.state_dict()})
    finalize(wrapped)
    return ckpt
