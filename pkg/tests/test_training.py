import json

import pytest
import torch
from torch import nn

from pocketsr.config import RunConfig
from pocketsr.training import (
    DegradationConfig,
    ImageFolderDataset,
    LossWeights,
    PatchDiscriminator,
    PerceptualProxy,
    StagePlan,
    adversarial_losses,
    compose_loss,
    degrade,
    train_stage1,
    weights_hash,
)


class MeanScore(nn.Module):
    """Stub discriminator: per-sample mean as the patch score."""

    def forward(self, x):
        return x.mean(dim=(1, 2, 3), keepdim=True)


class ConstPerceptual(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, a, b):
        return torch.tensor(self.value)


class TestDegrade:
    def test_same_seed_bitwise_identical(self):
        hr = torch.rand(2, 3, 64, 64)
        cfg = DegradationConfig(seed=11)
        assert torch.equal(degrade(hr, cfg), degrade(hr, cfg))

    def test_ten_distinct_seeds_differ(self):
        hr = torch.rand(1, 3, 32, 32)
        outs = [degrade(hr, DegradationConfig(seed=s)) for s in range(10)]
        for i in range(10):
            for j in range(i + 1, 10):
                assert not torch.equal(outs[i], outs[j])

    def test_degenerate_config_is_pure_bicubic(self):
        hr = torch.rand(1, 3, 64, 64)
        cfg = DegradationConfig(blur_sigma_range=(0.0, 0.0),
                                noise_sigma_range=(0.0, 0.0),
                                jpeg_quality_range=None)
        expected = torch.nn.functional.interpolate(
            hr, size=(16, 16), mode="bicubic", align_corners=False).clamp(0, 1)
        assert torch.equal(degrade(hr, cfg), expected)

    def test_output_scale(self):
        out = degrade(torch.rand(1, 3, 64, 64), DegradationConfig())
        assert out.shape == (1, 3, 16, 16)

    def test_rejects_indivisible(self):
        with pytest.raises(ValueError, match="not divisible"):
            degrade(torch.rand(1, 3, 65, 65), DegradationConfig())

    def test_output_in_unit_range(self):
        out = degrade(torch.rand(2, 3, 32, 32), DegradationConfig(seed=3))
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestComposeLoss:
    def test_perfect_reconstruction_is_zero(self):
        sr = torch.rand(1, 3, 8, 8)
        total, comps = compose_loss(sr, sr.clone(), torch.zeros(1, 1, 1, 1),
                                    LossWeights(), PerceptualProxy(), stage=1)
        assert total.item() == 0.0
        assert comps["mse"].item() == 0.0

    def test_hand_computed_weighting(self):
        hr = torch.zeros(1, 3, 4, 4)
        sr = torch.ones(1, 3, 4, 4)  # mse exactly 1
        total, _ = compose_loss(sr, hr, torch.zeros(2, 1, 1, 1), LossWeights(),
                                ConstPerceptual(0.5), stage=1)
        assert total.item() == pytest.approx(3.0)

    def test_stage2_distill_term(self):
        hr = torch.zeros(1, 3, 4, 4)
        sr = torch.ones(1, 3, 4, 4)
        total, comps = compose_loss(sr, hr, torch.zeros(2, 1, 1, 1), LossWeights(),
                                    ConstPerceptual(0.5), stage=2,
                                    distill_value=torch.tensor(10.0))
        assert total.item() == pytest.approx(3.01)
        assert comps["distill"].item() == pytest.approx(10.0)

    def test_stage1_rejects_distill(self):
        x = torch.rand(1, 3, 4, 4)
        with pytest.raises(ValueError, match="stage 2"):
            compose_loss(x, x, torch.zeros(1), LossWeights(), ConstPerceptual(0),
                         stage=1, distill_value=torch.tensor(1.0))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            LossWeights(lambda_gan=-0.1)


class TestAdversarial:
    def test_satisfied_margin_zero_d_loss(self):
        real = torch.ones(2, 3, 8, 8)
        fake = -torch.ones(2, 3, 8, 8)
        d_loss, _ = adversarial_losses(MeanScore(), real, fake)
        assert d_loss.item() == 0.0

    def test_zero_scores_give_d_loss_two(self):
        zeros = torch.zeros(2, 3, 8, 8)
        d_loss, g_loss = adversarial_losses(MeanScore(), zeros, zeros.clone())
        assert d_loss.item() == pytest.approx(2.0)
        assert g_loss.item() == 0.0

    def test_discriminator_output_is_patch_grid(self):
        disc = PatchDiscriminator()
        out = disc(torch.randn(2, 3, 64, 64))
        assert out.shape[0] == 2 and out.shape[1] == 1 and out.shape[-1] > 1


class TestPerceptualProxy:
    def test_zero_on_identical(self):
        proxy = PerceptualProxy()
        x = torch.rand(1, 3, 32, 32)
        assert proxy(x, x.clone()).item() == 0.0

    def test_positive_on_perturbed(self):
        proxy = PerceptualProxy()
        x = torch.rand(1, 3, 32, 32)
        assert proxy(x, (x + 0.3).clamp(0, 1)).item() > 0.0

    def test_frozen(self):
        proxy = PerceptualProxy()
        assert all(not p.requires_grad for p in proxy.parameters())


class TestOptimizerPlumbing:
    def test_zero_lr_step_is_identity(self):
        model = nn.Sequential(nn.Linear(4, 4), nn.SiLU(), nn.Linear(4, 1))
        before = weights_hash(model)
        opt = torch.optim.AdamW(model.parameters(), lr=0.0)
        loss = model(torch.randn(8, 4)).pow(2).sum()
        loss.backward()
        opt.step()
        assert weights_hash(model) == before


class TestStagePlan:
    def test_stage2_annealing_steps_define_schedule(self):
        plan = StagePlan(stage=2, steps_anneal=123)
        assert plan.steps_anneal == 123

    def test_rejects_unknown_stage(self):
        with pytest.raises(ValueError, match="stage"):
            StagePlan(stage=3)


class TestDataset:
    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="no images"):
            ImageFolderDataset(tmp_path, crop_size=32)

    def test_crop_shape(self, toy_dataset):
        ds = ImageFolderDataset(toy_dataset, crop_size=64)
        gen = torch.Generator().manual_seed(0)
        batch = ds.sample_batch(3, gen)
        assert batch.shape == (3, 3, 64, 64)
        assert batch.min() >= 0.0 and batch.max() <= 1.0

    def test_undersized_image_rejected(self, toy_dataset):
        ds = ImageFolderDataset(toy_dataset, crop_size=512)
        gen = torch.Generator().manual_seed(0)
        with pytest.raises(ValueError, match="smaller than"):
            ds.load_crop(0, gen)


class TestStage1Short:
    def test_checkpoint_roundtrip_bitwise(self, toy_dataset, tmp_path):
        from pocketsr.checkpoints import load_checkpoint

        cfg = RunConfig.load(preset="toy", overrides=[
            "train.steps_stage1=4",
            f"paths.data_dir={toy_dataset}", f"paths.out_dir={tmp_path}"])
        ckpt = train_stage1(cfg)
        model_a, _ = load_checkpoint(ckpt)
        model_b, _ = load_checkpoint(ckpt)
        x = torch.randn(1, 3, 64, 64)
        model_a.eval(), model_b.eval()
        with torch.no_grad():
            assert torch.equal(model_a(x), model_b(x))

    def test_log_records_have_components(self, toy_dataset, tmp_path):
        cfg = RunConfig.load(preset="toy", overrides=[
            "train.steps_stage1=3",
            f"paths.data_dir={toy_dataset}", f"paths.out_dir={tmp_path}"])
        train_stage1(cfg)
        records = [json.loads(line)
                   for line in (tmp_path / "stage1_log.jsonl").read_text().splitlines()]
        assert len(records) == 3
        for rec in records:
            assert {"step", "total", "mse", "lpips", "gan", "lr"} <= set(rec)
