import numpy as np
import pytest

from gan_models import DiscriminatorConfig, GeneratorConfig
from gan_trainer import GanTrainConfig
from patch_pipeline import MALIGNANT, NON_MALIGNANT, GrayscaleImage, LesionMask, Patch

TOY_SIZE = 16


def make_patch(label, seed=0, size=TOY_SIZE, source_id=None, synthetic=False):
    """Noisy mid-grey tissue; malignant patches carry a bright 5x5 lesion."""
    rng = np.random.default_rng(seed)
    pixels = 0.3 + 0.4 * rng.random((size, size))
    mask = np.zeros((size, size), dtype=np.uint8)
    if label == MALIGNANT:
        top, left = (int(v) for v in rng.integers(2, size - 7, size=2))
        mask[top:top + 5, left:left + 5] = 1
        pixels[mask == 1] = np.clip(pixels[mask == 1] + 0.25, 0.0, 1.0)
    return Patch(GrayscaleImage(pixels), LesionMask(mask), label, source_id or f"{label}-{seed:03d}", synthetic)


@pytest.fixture
def toy_gen_config():
    return GeneratorConfig(base_resolution=4, final_resolution=TOY_SIZE, block_kernel_counts=(8, 8, 4))


@pytest.fixture
def toy_disc_config():
    return DiscriminatorConfig(input_resolution=TOY_SIZE, first_kernels=4, n_conv_layers=2)


@pytest.fixture
def toy_train_config():
    return GanTrainConfig(batch_size=2, pretrain_iters=3, joint_iters=4, checkpoint_every=2, seed=0)


@pytest.fixture
def toy_patches():
    malignant = [make_patch(MALIGNANT, seed=i) for i in range(4)]
    benign = [make_patch(NON_MALIGNANT, seed=100 + i) for i in range(4)]
    return malignant + benign
