import pytest
import torch

from msht.backbone import tiny_backbone_config
from msht.datapipe import AugmentConfig, SynthSpec, synth_generate
from msht.fgd import FgdConfig

torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_backbone_cfg():
    return tiny_backbone_config()


@pytest.fixture(scope="session")
def tiny_fgd_cfg():
    return FgdConfig(token_dim=64, heads=4)


@pytest.fixture(scope="session")
def synth_augment_cfg():
    # 64x64 synthetic images: no-op crop/resize, flips only
    return AugmentConfig(rotation_degrees=0.0, crop_edge=64, flip_prob=0.5,
                         brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0,
                         resize_edge=64)


@pytest.fixture(scope="session")
def small_synth_images():
    # 48 images, enough for a 5-fold plan at desk scale
    return synth_generate(SynthSpec(edge=64, per_class=24), seed=11)
