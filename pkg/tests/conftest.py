import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make `import oracles` work

from avel.avedata import SynthConfig, synth_dataset
from avel.edrnet import EdrConfig

TINY = dict(
    k=3,
    layers=4,
    width=8,
    segments=10,
    classes=5,
    audio_dim=4,
    visual_dim=4,
    spatial_size=4,
    spatial_kernel=3,
)


@pytest.fixture
def tiny_cfg():
    return EdrConfig(**TINY)


@pytest.fixture
def tiny_dataset():
    return synth_dataset(
        SynthConfig(classes=5, videos_per_class=3, d_a=4, d_v=4, spatial_size=4, seed=11)
    )
