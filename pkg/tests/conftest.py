import numpy as np
import pytest

from genvox.model import ModelConfig, canonical_aabb
from genvox.renderer import RenderConfig
from genvox.synthdata import generate_dataset, make_subjects


def tiny_model(skeletons, **kw) -> ModelConfig:
    lo, hi = canonical_aabb(skeletons, 0.15)
    base = dict(aabb_min=lo, aabb_max=hi, voxel_dims=(16, 16, 16), voxel_channels=4, radiance_width=32,
                radiance_depth=2, color_width=16, pose_hidden=(16,), embed_dim=8, weight_expand=16,
                weight_channels=(4,), cull_radius=0.25)
    base.update(kw)
    return ModelConfig(**base)


TINY_RENDER = RenderConfig(n_samples=16, patch_count=2, patch_size=8)


@pytest.fixture(scope="session")
def tiny_data():
    """Two subjects, 3 frames, 2 cameras, 24x24 images, held in memory."""
    return generate_dataset(make_subjects(3, 11), 3, 2, image_size=24)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
