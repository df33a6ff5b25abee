import pytest
import torch
from torch import nn

from pocketsr.backbone import build_unet
from pocketsr.distillation import (
    DistillConfig,
    collect_tap_features,
    distill_loss,
    register_taps,
)
from pocketsr.pruning import channel_prune

from conftest import toy_unet_config


def identity_projection(channels):
    proj = nn.Conv2d(channels, channels, 1)
    with torch.no_grad():
        proj.weight.zero_()
        proj.weight[:, :, 0, 0] = torch.eye(channels)
        proj.bias.zero_()
    return proj


def manual_config(n_taps, channels=1):
    return DistillConfig([f"tap{i}" for i in range(n_taps)],
                         nn.ModuleList([identity_projection(channels)
                                        for _ in range(n_taps)]))


class TestRegisterTaps:
    def test_default_is_nine_taps(self):
        teacher = build_unet(toy_unet_config())
        cfg = register_taps(teacher, teacher)
        assert len(cfg.taps) == 9
        assert cfg.taps == ["down.I", "down.II", "down.III", "down.IV", "mid",
                            "up.IV", "up.III", "up.II", "up.I"]

    def test_equal_width_projections_identity(self):
        teacher = build_unet(toy_unet_config())
        cfg = register_taps(teacher, teacher)
        x = torch.randn(2, 16, 5, 5)
        assert torch.allclose(cfg.projections[0](x), x, atol=1e-7)

    def test_narrow_student_projections_map_widths(self):
        teacher = build_unet(toy_unet_config(base_channels=32))
        narrowed, _ = channel_prune(teacher.config, 0.75)
        student = build_unet(narrowed)
        cfg = register_taps(teacher, student)
        assert cfg.projections[0].in_channels == narrowed.width(0)
        assert cfg.projections[0].out_channels == teacher.config.width(0)

    def test_single_tap_at_output_stage(self):
        teacher = build_unet(toy_unet_config())
        cfg = register_taps(teacher, teacher, positions=["up.I"])
        assert cfg.taps == ["up.I"]

    def test_unknown_position_rejected(self):
        teacher = build_unet(toy_unet_config())
        with pytest.raises(ValueError, match="unknown tap positions"):
            register_taps(teacher, teacher, positions=["bottom"])


class TestDistillLoss:
    def test_zero_on_identical_features(self):
        cfg = manual_config(3, channels=2)
        feats = [torch.randn(2, 2, 4, 4) for _ in range(3)]
        assert distill_loss(feats, [f.clone() for f in feats], cfg).item() == 0.0

    def test_hand_computed_single_tap(self):
        cfg = manual_config(1)
        teacher = torch.tensor([[[[1.0, 2.0]]]])
        student = torch.tensor([[[[1.0, 0.0]]]])
        assert distill_loss([teacher], [student], cfg).item() == pytest.approx(2.0)

    def test_hand_computed_two_taps_sum(self):
        cfg = manual_config(2)
        t1, s1 = torch.tensor([[[[2.0]]]]), torch.tensor([[[[2.0 + 2.0 ** 0.5]]]])
        t2, s2 = torch.tensor([[[[0.0]]]]), torch.tensor([[[[3.0 ** 0.5]]]])
        loss = distill_loss([t1, t2], [s1, s2], cfg)
        assert loss.item() == pytest.approx(5.0, rel=1e-6)

    def test_tap_order_invariance(self):
        cfg = manual_config(3, channels=2)
        t = [torch.randn(1, 2, 3, 3) for _ in range(3)]
        s = [torch.randn(1, 2, 3, 3) for _ in range(3)]
        forward = distill_loss(t, s, cfg)
        backward = distill_loss(t[::-1], s[::-1], cfg)
        assert torch.allclose(forward, backward, atol=1e-7)

    def test_rejects_misaligned_lists(self):
        cfg = manual_config(2)
        with pytest.raises(ValueError, match="align"):
            distill_loss([torch.randn(1, 1, 2, 2)], [torch.randn(1, 1, 2, 2)], cfg)

    def test_rejects_shape_mismatch_after_projection(self):
        cfg = manual_config(1)
        with pytest.raises(ValueError, match="does not match"):
            distill_loss([torch.randn(1, 1, 4, 4)], [torch.randn(1, 1, 2, 2)], cfg)

    def test_gradient_matches_finite_differences(self):
        proj = identity_projection(4).double()
        with torch.no_grad():
            proj.weight.normal_(0, 0.3)
        cfg = DistillConfig(["t"], nn.ModuleList([proj]))
        teacher = [torch.randn(2, 4, 3, 3, dtype=torch.float64)]
        student = torch.randn(2, 4, 3, 3, dtype=torch.float64, requires_grad=True)
        distill_loss(teacher, [student], cfg).backward()
        analytic = student.grad.clone()
        fd = torch.zeros_like(analytic)
        h = 1e-6
        flat = student.detach().clone().reshape(-1)
        for i in range(flat.numel()):
            for sign, bucket in ((1, 0), (-1, 1)):
                probe = flat.clone()
                probe[i] += sign * h
                val = distill_loss(teacher, [probe.reshape(student.shape)], cfg)
                if bucket == 0:
                    up = val
                else:
                    down = val
            fd.reshape(-1)[i] = (up - down) / (2 * h)
        assert (analytic - fd).norm() / fd.norm() < 1e-4


class TestTeacherIsolation:
    def test_teacher_gradients_absent(self):
        teacher = build_unet(toy_unet_config())
        teacher.requires_grad_(False)
        narrowed, slicer = channel_prune(teacher.config, 0.75)
        student = build_unet(narrowed)
        slicer.apply(teacher.state_dict(), student)
        cfg = register_taps(teacher, student)
        latent = torch.randn(2, 4, 8, 8)
        with torch.no_grad():
            _, t_feats = collect_tap_features(teacher, latent, None, teacher.cond, cfg)
        _, s_feats = collect_tap_features(student, latent, None, student.cond, cfg)
        distill_loss(t_feats, s_feats, cfg).backward()
        assert all(p.grad is None for p in teacher.parameters())
        assert any(p.grad is not None and p.grad.abs().sum() > 0
                   for p in student.parameters())

    def test_misaligned_structures_rejected(self):
        teacher = build_unet(toy_unet_config())
        impostor = nn.Module()
        impostor.down_stages = nn.ModuleList([nn.Identity()])
        impostor.up_stages = nn.ModuleList([nn.Identity()])
        with pytest.raises(ValueError, match="misaligned"):
            register_taps(teacher, impostor)
