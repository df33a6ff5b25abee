import numpy as np
import pytest
import torch
from PIL import Image

from pocketsr.backbone import UNetConfig


def toy_unet_config(**overrides):
    kwargs = dict(base_channels=16, channel_multipliers=(1, 2, 4, 4),
                  blocks_per_depth=1, attention_head_dim=8, latent_channels=4,
                  width_ratio=1.0, context_dim=32, norm_groups=8)
    kwargs.update(overrides)
    return UNetConfig(**kwargs)


def make_smooth_images(root, count=8, size=96, seed=7):
    """Low-frequency color fields: learnable at toy scale."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(count):
        low = rng.uniform(0, 255, (6, 6, 3)).astype(np.uint8)
        img = Image.fromarray(low).resize((size, size), Image.BICUBIC)
        img.save(root / f"img_{i:02d}.png")
    return root


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    return make_smooth_images(tmp_path_factory.mktemp("toyset"))


@pytest.fixture(autouse=True)
def _fixed_seed():
    torch.manual_seed(0)
